use super::kernels::{self, ConvGeom, COSINE_EPS};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Transpose(Var),
    RowBias {
        input: Var,
        bias: Var,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Stack(Vec<Var>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    CosineDistanceMap {
        latent: Var,
        prototypes: Var,
        window: (usize, usize),
        aa: Vec<f64>,
        bb: Vec<f64>,
        ab: Vec<f64>,
    },
    MinPool {
        input: Var,
        argmin: Vec<usize>,
    },
    MaskedRowMin {
        input: Var,
        argmin: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Relu(_) => "relu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::RowBias { .. } => "row_bias",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::Stack(_) => "stack",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::CosineDistanceMap { .. } => "cosine_distance_map",
            Op::MinPool { .. } => "min_pool",
            Op::MaskedRowMin { .. } => "masked_row_min",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernels, .. } => vec![*input, *kernels],
            Op::ChannelBias { input, bias } | Op::RowBias { input, bias } => vec![*input, *bias],
            Op::Relu(a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Stack(vs) => vs.clone(),
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::CosineDistanceMap { latent, prototypes, .. } => vec![*latent, *prototypes],
            Op::MinPool { input, .. } | Op::MaskedRowMin { input, .. } => vec![*input],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// Distance from the nearest non-differentiable configuration, for ops
    /// that have one (ReLU at 0, min ties, near-zero cosine norms).
    margin: Option<f64>,
}

/// A recorded computation: nodes are appended in evaluation order, which is
/// also a topological order for the backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(TensorError::InvalidShape(msg.into()))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(shape));
    f(slot.data_mut());
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            margin: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Ops whose evaluation point lies within `step` of a kink.
    pub fn kinks(&self, step: f64) -> Vec<super::Kink> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.margin {
                Some(m) if m < step => Some(super::Kink {
                    node: i,
                    op: n.op.name(),
                    margin: m,
                }),
                _ => None,
            })
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor, margin: Option<f64>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            margin,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernels).to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return shape_err(format!("conv2d expects C×H×W input and O×C×k×k kernels, got {xs:?} and {ks:?}"));
        }
        if ks[1] != xs[0] {
            return shape_err(format!("conv2d channel mismatch: input {} vs kernel {}", xs[0], ks[1]));
        }
        let (Some(oh), Some(ow)) = (
            kernels::conv_output_size(xs[1], ks[2], stride, padding),
            kernels::conv_output_size(xs[2], ks[3], stride, padding),
        ) else {
            return shape_err(format!(
                "conv2d kernel {}×{} does not fit input {}×{} with padding {padding} (stride {stride})",
                ks[2], ks[3], xs[1], xs[2]
            ));
        };
        let geom = ConvGeom {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad: padding,
            oh,
            ow,
        };
        let (out, cols) = kernels::conv_forward(self.value(input).data(), self.value(kernels).data(), &geom);
        let value = Tensor::new(vec![geom.cout, oh, ow], out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                geom,
                cols,
            },
            value,
            None,
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `C×…` tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input);
        let bs = self.shape(bias);
        if xs.is_empty() || bs != [xs[0]] {
            return shape_err(format!("channel_bias: input {xs:?}, bias {bs:?}"));
        }
        let c = xs[0];
        let inner = self.value(input).len() / c.max(1);
        let mut out = self.value(input).clone();
        let b = self.value(bias).data().to_vec();
        for (ci, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate().take(c) {
            chunk.iter_mut().for_each(|v| *v += b[ci]);
        }
        Ok(self.push(Op::ChannelBias { input, bias }, out, None))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let margin = src.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v.max(0.0)).collect())
            .expect("same shape");
        self.push(Op::Relu(x), out, Some(margin))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err(format!("{name}: {:?} vs {:?}", ta.shape(), tb.shape()));
        }
        Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out, None))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out, None))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let src = self.value(x);
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v * factor).collect())
            .expect("same shape");
        self.push(Op::Scale(x, factor), out, None)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, x: Var, offset: f64) -> Var {
        let src = self.value(x);
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v + offset).collect())
            .expect("same shape");
        self.push(Op::Shift(x), out, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul: {sa:?} · {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value, None))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return shape_err(format!("transpose expects a matrix, got {s:?}"));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1]];
        for i in 0..s[0] {
            for j in 0..s[1] {
                out[j * s[0] + i] = src[i * s[1] + j];
            }
        }
        let value = Tensor::new(vec![s[1], s[0]], out)?;
        Ok(self.push(Op::Transpose(x), value, None))
    }

    /// Adds `bias` (length n) to every row of an m×n matrix.
    pub fn row_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || self.shape(bias) != [s[1]] {
            return shape_err(format!("row_bias: input {s:?}, bias {:?}", self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(input).clone();
        for row in out.data_mut().chunks_mut(s[1].max(1)) {
            row.iter_mut().zip(&b).for_each(|(v, bi)| *v += bi);
        }
        Ok(self.push(Op::RowBias { input, bias }, out, None))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return shape_err("mean of an empty tensor");
        }
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Op::Mean(x), Tensor::scalar(s), None))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), out, None))
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, vars: &[Var]) -> Result<Var> {
        let Some(first) = vars.first() else {
            return shape_err("stack of zero tensors");
        };
        let inner = self.shape(*first).to_vec();
        let mut data = Vec::with_capacity(vars.len() * self.value(*first).len());
        for v in vars {
            if self.shape(*v) != inner.as_slice() {
                return shape_err(format!("stack: {:?} vs {inner:?}", self.shape(*v)));
            }
            data.extend_from_slice(self.value(*v).data());
        }
        let mut shape = vec![vars.len()];
        shape.extend_from_slice(&inner);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Stack(vars.to_vec()), value, None))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return shape_err(format!("softmax_cross_entropy: logits {s:?} with {} labels", labels.len()));
        }
        let (b, k) = (s[0], s[1]);
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[i]];
        }
        loss /= b as f64;
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
            None,
        ))
    }

    /// Cosine distance between each prototype (`m×D×ph×pw`) and every
    /// `ph×pw` window of a `D×H×W` latent, giving an `m×H'×W'` map.
    pub fn cosine_distance_map(&mut self, latent: Var, prototypes: Var) -> Result<Var> {
        let zs = self.shape(latent).to_vec();
        let ps = self.shape(prototypes).to_vec();
        if zs.len() != 3 || ps.len() != 4 || ps[1] != zs[0] {
            return shape_err(format!("cosine_distance_map: latent {zs:?}, prototypes {ps:?}"));
        }
        let (d, h, w) = (zs[0], zs[1], zs[2]);
        let (m, ph, pw) = (ps[0], ps[2], ps[3]);
        if ph == 0 || pw == 0 || ph > h || pw > w {
            return shape_err(format!("prototype window {ph}×{pw} does not fit latent {h}×{w}"));
        }
        let (oh, ow) = (h - ph + 1, w - pw + 1);
        let locs = oh * ow;
        let plen = d * ph * pw;
        let z = self.value(latent).data();
        let p = self.value(prototypes).data();
        let bb: Vec<f64> = (0..m)
            .map(|j| {
                let pj = &p[j * plen..(j + 1) * plen];
                kernels::dot(pj, pj)
            })
            .collect();
        let mut aa = vec![0.0; locs];
        let mut ab = vec![0.0; m * locs];
        let mut out = vec![0.0; m * locs];
        let mut patch = vec![0.0; plen];
        for r in 0..oh {
            for c in 0..ow {
                let loc = r * ow + c;
                gather_patch(z, (d, h, w), (r, c), (ph, pw), &mut patch);
                let a2 = kernels::dot(&patch, &patch);
                aa[loc] = a2;
                for j in 0..m {
                    let pj = &p[j * plen..(j + 1) * plen];
                    let dot = kernels::dot(&patch, pj);
                    ab[j * locs + loc] = dot;
                    out[j * locs + loc] = kernels::cosine_from_parts(dot, a2, bb[j]);
                }
            }
        }
        let margin = aa
            .iter()
            .chain(&bb)
            .filter(|&&s| s > 0.0)
            .map(|s| s.sqrt())
            .fold(f64::INFINITY, f64::min);
        let value = Tensor::new(vec![m, oh, ow], out)?;
        Ok(self.push(
            Op::CosineDistanceMap {
                latent,
                prototypes,
                window: (ph, pw),
                aa,
                bb,
                ab,
            },
            value,
            Some(margin),
        ))
    }

    /// Minimum over all trailing axes of an `m×…` tensor. The gradient is
    /// routed to the first minimum in row-major order.
    pub fn min_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[0] == 0 || s[1..].iter().product::<usize>() == 0 {
            return shape_err(format!("min_pool needs a non-empty m×… tensor, got {s:?}"));
        }
        let rows = s[0];
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data();
        let mut argmin = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        let mut margin = f64::INFINITY;
        for r in 0..rows {
            let row = &data[r * inner..(r + 1) * inner];
            let (idx, gap) = first_min(row.iter().copied().enumerate());
            argmin.push(idx);
            out.push(row[idx]);
            margin = margin.min(gap);
        }
        let value = Tensor::new(vec![rows], out)?;
        Ok(self.push(Op::MinPool { input: x, argmin }, value, Some(margin)))
    }

    /// Row-wise minimum of a B×m matrix over the columns selected by `mask`.
    pub fn masked_row_min(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || mask.len() != s[0] * s[1] {
            return shape_err(format!("masked_row_min: input {s:?}, mask of {}", mask.len()));
        }
        let (b, m) = (s[0], s[1]);
        let data = self.value(x).data();
        let mut argmin = Vec::with_capacity(b);
        let mut out = Vec::with_capacity(b);
        let mut margin = f64::INFINITY;
        for i in 0..b {
            let row = &data[i * m..(i + 1) * m];
            let sel = &mask[i * m..(i + 1) * m];
            if !sel.iter().any(|&s| s) {
                return Err(TensorError::InvalidArgument(format!("row {i} selects no columns")));
            }
            let (idx, gap) = first_min(row.iter().copied().enumerate().filter(|(j, _)| sel[*j]));
            argmin.push(idx);
            out.push(row[idx]);
            margin = margin.min(gap);
        }
        let value = Tensor::new(vec![b], out)?;
        Ok(self.push(Op::MaskedRowMin { input: x, argmin }, value, Some(margin)))
    }

    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return shape_err(format!(
                "backward needs a single-element output, got {:?}",
                self.shape(output)
            ));
        }
        let seed = Tensor::full(self.shape(output), 1.0);
        self.backward_with(output, seed)
    }

    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return shape_err("backward seed shape differs from output");
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels: k,
                geom,
                cols,
            } => {
                if self.wants(*k) {
                    let dk = kernels::conv_backward_kernels(gd, cols, geom);
                    accumulate(grads, *k, self.shape(*k), |acc| add_into(acc, &dk));
                }
                if self.wants(*input) {
                    let dx = kernels::conv_backward_input(gd, self.value(*k).data(), geom);
                    accumulate(grads, *input, self.shape(*input), |acc| add_into(acc, &dx));
                }
            }
            Op::ChannelBias { input, bias } => {
                if self.wants(*input) {
                    accumulate(grads, *input, self.shape(*input), |acc| add_into(acc, gd));
                }
                if self.wants(*bias) {
                    let c = self.shape(*bias)[0];
                    let inner = gd.len() / c.max(1);
                    accumulate(grads, *bias, &[c], |acc| {
                        for (ci, chunk) in gd.chunks(inner.max(1)).enumerate().take(c) {
                            acc[ci] += chunk.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    accumulate(grads, *x, self.shape(*x), |acc| {
                        for ((a, gi), xi) in acc.iter_mut().zip(gd).zip(xv) {
                            if *xi > 0.0 {
                                *a += gi;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(grads, *v, self.shape(*v), |acc| add_into(acc, gd));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, self.shape(*a), |acc| add_into(acc, gd));
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.shape(*b), |acc| {
                        acc.iter_mut().zip(gd).for_each(|(x, gi)| *x -= gi)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, self.shape(*a), |acc| {
                        for i in 0..acc.len() {
                            acc[i] += gd[i] * bv[i];
                        }
                    });
                }
                if self.wants(*b) {
                    accumulate(grads, *b, self.shape(*b), |acc| {
                        for i in 0..acc.len() {
                            acc[i] += gd[i] * av[i];
                        }
                    });
                }
            }
            Op::Scale(x, f) => {
                if self.wants(*x) {
                    accumulate(grads, *x, self.shape(*x), |acc| {
                        acc.iter_mut().zip(gd).for_each(|(a, gi)| *a += gi * f)
                    });
                }
            }
            Op::Shift(x) | Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, self.shape(*x), |acc| add_into(acc, gd));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    accumulate(grads, *a, sa, |acc| kernels::gemm_nt_acc(gd, bv, acc, m, n, k));
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    accumulate(grads, *b, sb, |acc| kernels::gemm_tn_acc(av, gd, acc, k, m, n));
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let s = self.shape(*x);
                    let (r, c) = (s[0], s[1]);
                    accumulate(grads, *x, s, |acc| {
                        for i in 0..r {
                            for j in 0..c {
                                acc[i * c + j] += gd[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::RowBias { input, bias } => {
                if self.wants(*input) {
                    accumulate(grads, *input, self.shape(*input), |acc| add_into(acc, gd));
                }
                if self.wants(*bias) {
                    let n = self.shape(*bias)[0];
                    accumulate(grads, *bias, &[n], |acc| {
                        for row in gd.chunks(n.max(1)) {
                            add_into(acc, row);
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let g0 = gd[0];
                    accumulate(grads, *x, self.shape(*x), |acc| acc.iter_mut().for_each(|a| *a += g0));
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let n = self.value(*x).len() as f64;
                    let g0 = gd[0] / n;
                    accumulate(grads, *x, self.shape(*x), |acc| acc.iter_mut().for_each(|a| *a += g0));
                }
            }
            Op::Stack(vars) => {
                let inner = gd.len() / vars.len();
                for (i, v) in vars.iter().enumerate() {
                    if self.wants(*v) {
                        let part = &gd[i * inner..(i + 1) * inner];
                        accumulate(grads, *v, self.shape(*v), |acc| add_into(acc, part));
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let s = self.shape(*logits);
                    let (b, k) = (s[0], s[1]);
                    let scale = gd[0] / b as f64;
                    accumulate(grads, *logits, s, |acc| {
                        for i in 0..b {
                            for j in 0..k {
                                let target = if labels[i] == j { 1.0 } else { 0.0 };
                                acc[i * k + j] += scale * (probs[i * k + j] - target);
                            }
                        }
                    });
                }
            }
            Op::CosineDistanceMap {
                latent,
                prototypes,
                window,
                aa,
                bb,
                ab,
            } => self.cosine_backward(*latent, *prototypes, *window, (aa, bb, ab), gd, grads),
            Op::MinPool { input, argmin } | Op::MaskedRowMin { input, argmin } => {
                if self.wants(*input) {
                    let rows = argmin.len();
                    let inner = self.value(*input).len() / rows;
                    accumulate(grads, *input, self.shape(*input), |acc| {
                        for (r, &idx) in argmin.iter().enumerate() {
                            acc[r * inner + idx] += gd[r];
                        }
                    });
                }
            }
        }
    }

    /// Vectors whose norm falls below the cosine epsilon are treated as
    /// locally constant: no gradient flows into or through them.
    fn cosine_backward(
        &self,
        latent: Var,
        prototypes: Var,
        (ph, pw): (usize, usize),
        (aa, bb, ab): (&[f64], &[f64], &[f64]),
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let zs = self.shape(latent).to_vec();
        let ps = self.shape(prototypes).to_vec();
        let (d, h, w) = (zs[0], zs[1], zs[2]);
        let m = ps[0];
        let (oh, ow) = (h - ph + 1, w - pw + 1);
        let locs = oh * ow;
        let plen = d * ph * pw;
        let z = self.value(latent).data();
        let p = self.value(prototypes).data();
        let want_z = self.wants(latent);
        let want_p = self.wants(prototypes);
        let eps2 = COSINE_EPS * COSINE_EPS;

        let mut dz = if want_z { Some(vec![0.0; z.len()]) } else { None };
        let mut dp = if want_p { Some(vec![0.0; p.len()]) } else { None };
        let mut patch = vec![0.0; plen];
        let mut dpatch = vec![0.0; plen];
        for loc in 0..locs {
            let a2 = aa[loc];
            if a2 < eps2 {
                continue;
            }
            let (r, c) = (loc / ow, loc % ow);
            let mut gathered = false;
            let mut touched = false;
            dpatch.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..m {
                let g = gd[j * locs + loc];
                let b2 = bb[j];
                if g == 0.0 || b2 < eps2 {
                    continue;
                }
                let denom = (a2 * b2).sqrt();
                let cos = ab[j * locs + loc] / denom;
                if !(-1.0..=1.0).contains(&cos) {
                    continue;
                }
                if !gathered {
                    gather_patch(z, (d, h, w), (r, c), (ph, pw), &mut patch);
                    gathered = true;
                }
                let pj = &p[j * plen..(j + 1) * plen];
                // d(dist) = -d(cos)
                if want_z {
                    touched = true;
                    for t in 0..plen {
                        dpatch[t] -= g * (pj[t] / denom - cos * patch[t] / a2);
                    }
                }
                if let Some(dp) = dp.as_mut() {
                    let dpj = &mut dp[j * plen..(j + 1) * plen];
                    for t in 0..plen {
                        dpj[t] -= g * (patch[t] / denom - cos * pj[t] / b2);
                    }
                }
            }
            if touched {
                if let Some(dz) = dz.as_mut() {
                    scatter_patch(dz, (d, h, w), (r, c), (ph, pw), &dpatch);
                }
            }
        }
        if let Some(dz) = dz {
            accumulate(grads, latent, &zs, |acc| add_into(acc, &dz));
        }
        if let Some(dp) = dp {
            accumulate(grads, prototypes, &ps, |acc| add_into(acc, &dp));
        }
    }
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    acc.iter_mut().zip(src).for_each(|(a, s)| *a += s);
}

/// First index of the minimum and the gap to the runner-up (infinite when
/// there is only one candidate).
fn first_min(values: impl Iterator<Item = (usize, f64)>) -> (usize, f64) {
    let mut best: Option<(usize, f64)> = None;
    let mut second = f64::INFINITY;
    for (i, v) in values {
        match best {
            None => best = Some((i, v)),
            Some((_, bv)) if v < bv => {
                second = bv;
                best = Some((i, v));
            }
            Some(_) => second = second.min(v),
        }
    }
    let (idx, val) = best.expect("non-empty");
    (idx, second - val)
}

/// Copies a window of a D×H×W latent into `out`, flattened in (d, dy, dx) order.
pub(crate) fn gather_patch(
    z: &[f64],
    (d, h, w): (usize, usize, usize),
    (r, c): (usize, usize),
    (ph, pw): (usize, usize),
    out: &mut [f64],
) {
    let mut t = 0;
    for di in 0..d {
        for dy in 0..ph {
            let base = di * h * w + (r + dy) * w + c;
            out[t..t + pw].copy_from_slice(&z[base..base + pw]);
            t += pw;
        }
    }
}

fn scatter_patch(
    dz: &mut [f64],
    (d, h, w): (usize, usize, usize),
    (r, c): (usize, usize),
    (ph, pw): (usize, usize),
    src: &[f64],
) {
    let mut t = 0;
    for di in 0..d {
        for dy in 0..ph {
            let base = di * h * w + (r + dy) * w + c;
            add_into(&mut dz[base..base + pw], &src[t..t + pw]);
            t += pw;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let y = tape.add(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![-2.0, 3.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        for label in 0..2 {
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::zeros(&[1, 2]));
            let l = tape.softmax_cross_entropy(z, &[label]).unwrap();
            assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn min_pool_tie_break_is_row_major_first() {
        let mut tape = Tape::new();
        let m = tape.param(Tensor::full(&[1, 2, 2], 0.5));
        let g = tape.min_pool(m).unwrap();
        assert_eq!(tape.value(g).data(), &[0.5]);
        let grads = tape.backward(g).unwrap();
        assert_eq!(grads.get(m).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(tape.kinks(1e-6).len(), 1);
    }

    #[test]
    fn min_pool_picks_global_minimum() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(vec![1, 2, 2], vec![0.2, 0.9, 0.7, 0.1]).unwrap());
        let g = tape.min_pool(m).unwrap();
        assert_eq!(tape.value(g).data(), &[0.1]);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::InvalidShape(_))));
        let x = tape.constant(Tensor::zeros(&[1, 2, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.conv2d(x, k, 1, 0).is_err());
        assert!(tape.conv2d(x, k, 1, 1).is_ok());
    }

    #[test]
    fn masked_row_min_requires_a_selection() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(tape.masked_row_min(a, &[false, false]).is_err());
        let r = tape.masked_row_min(a, &[false, true]).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0]);
    }
}
