use super::{Result, Tape, Tensor, TensorError, Var};

/// An op whose evaluation point sits within the finite-difference step of a
/// non-differentiable configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Kink {
    pub node: usize,
    pub op: &'static str,
    pub margin: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over all coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst disagreement
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
    /// Non-empty when the check point is unreliable.
    pub kinks: Vec<Kink>,
}

impl GradCheckReport {
    pub fn is_reliable(&self) -> bool {
        self.kinks.is_empty()
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences with step `step`.
///
/// `build` records the function on a fresh tape given one leaf per input and
/// must return a single-element output. It is re-run twice per coordinate.
pub fn grad_check<F>(build: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(TensorError::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let kinks = tape.kinks(step);

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = values.iter().map(|v| t.constant(v.clone())).collect();
        let o = build(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut perturbed: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut coordinates = 0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[i], input.shape());
        for k in 0..input.len() {
            let x0 = input.data()[k];
            perturbed[i].data_mut()[k] = x0 + step;
            let plus = eval(&perturbed)?;
            perturbed[i].data_mut()[k] = x0 - step;
            let minus = eval(&perturbed)?;
            perturbed[i].data_mut()[k] = x0;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            if rel > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(rel);
                worst = Some((i, k));
            }
            coordinates += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        coordinates,
        kinks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_square() {
        let r = grad_check(|t, v| t.mul(v[0], v[0]), &[Tensor::scalar(3.0)], 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
        assert!(r.is_reliable());
    }

    #[test]
    fn near_tie_min_pool_is_flagged() {
        let map = Tensor::new(vec![1, 2], vec![0.3, 0.3 + 5e-7]).unwrap();
        let r = grad_check(|t, v| t.min_pool(v[0]), &[map], 1e-6).unwrap();
        assert!(!r.is_reliable());
        assert_eq!(r.kinks[0].op, "min_pool");
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[Tensor::scalar(1.0)], 0.0).is_err());
    }
}
