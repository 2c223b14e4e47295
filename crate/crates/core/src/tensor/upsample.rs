use super::{Result, Tensor, TensorError};

/// Corner-aligned bilinear upsampling of an H×W map to `h0×w0`.
///
/// Source coordinates are computed with integer numerators so that output
/// pixels landing on the source grid reproduce source values exactly.
pub fn bilinear_upsample(map: &Tensor, (h0, w0): (usize, usize)) -> Result<Tensor> {
    let s = map.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(TensorError::InvalidShape(format!("bilinear_upsample expects a non-empty H×W map, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if h0 < h || w0 < w {
        return Err(TensorError::InvalidArgument(format!(
            "target {h0}×{w0} is smaller than source {h}×{w}"
        )));
    }
    let src = map.data();
    let ys: Vec<(usize, f64)> = (0..h0).map(|y| axis_coord(y, h, h0)).collect();
    let xs: Vec<(usize, f64)> = (0..w0).map(|x| axis_coord(x, w, w0)).collect();
    let mut out = Vec::with_capacity(h0 * w0);
    for &(y0, fy) in &ys {
        let y1 = (y0 + 1).min(h - 1);
        for &(x0, fx) in &xs {
            let x1 = (x0 + 1).min(w - 1);
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
            let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    Tensor::new(vec![h0, w0], out)
}

fn axis_coord(i: usize, src: usize, dst: usize) -> (usize, f64) {
    if src == 1 || dst == 1 {
        return (0, 0.0);
    }
    let num = i * (src - 1);
    let den = dst - 1;
    (num / den, (num % den) as f64 / den as f64)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else {
        a + (b - a) * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_stays_constant() {
        let m = Tensor::full(&[3, 3], 0.25);
        let up = bilinear_upsample(&m, (10, 7)).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn linear_midpoint() {
        let m = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = bilinear_upsample(&m, (2, 3)).unwrap();
        assert_eq!(up.data(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn smaller_target_is_rejected() {
        let m = Tensor::zeros(&[4, 4]);
        assert!(matches!(bilinear_upsample(&m, (3, 8)), Err(TensorError::InvalidArgument(_))));
    }

    #[test]
    fn grid_points_are_exact() {
        let m = Tensor::from_fn(&[8, 8], |i| ((i * 37) % 11) as f64 / 7.0);
        let up = bilinear_upsample(&m, (64, 64)).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(up.at(&[r * 9, c * 9]), m.at(&[r, c]));
            }
        }
    }
}
