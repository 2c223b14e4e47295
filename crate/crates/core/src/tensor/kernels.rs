//! Slice-level numeric kernels shared by the tape operations.
//!
//! Convolution is lowered to an im2col matrix followed by a plain
//! row-times-matrix product. All reductions run in a fixed order so results
//! are bit-reproducible.

/// Output length of a strided, zero-padded convolution along one axis, or
/// `None` when the kernel does not fit.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input + 2 * padding {
        return None;
    }
    Some((input + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Dot product with four interleaved accumulators. Identical inputs always
/// reduce in the same order, so `dot(v, v)` is reproducible bit for bit.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c (m×n) += a (m×k) · b (k×n)`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let alpha = a[i * k + p];
            if alpha != 0.0 {
                axpy(crow, alpha, &b[p * n..(p + 1) * n]);
            }
        }
    }
}

/// `c (m×n) += aᵀ · b` where `a` is stored k×m and `b` is k×n.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let alpha = a[p * m + i];
            if alpha != 0.0 {
                axpy(&mut c[i * n..(i + 1) * n], alpha, brow);
            }
        }
    }
}

/// `c (m×n) += a · bᵀ` where `a` is m×k and `b` is stored n×k.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p_len = g.positions();
    let mut cols = vec![0.0; g.patch_len() * p_len];
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p_len..(row + 1) * p_len];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p_len = g.positions();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p_len..(row + 1) * p_len];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output (cout × oh·ow) and the im2col buffer for the backward pass.
pub(crate) fn conv_forward(x: &[f64], kernels: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(x, g);
    let mut out = vec![0.0; g.cout * g.positions()];
    gemm_acc(kernels, &cols, &mut out, g.cout, g.patch_len(), g.positions());
    (out, cols)
}

pub(crate) fn conv_backward_kernels(dout: &[f64], cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dk = vec![0.0; g.cout * g.patch_len()];
    gemm_nt_acc(dout, cols, &mut dk, g.cout, g.positions(), g.patch_len());
    dk
}

pub(crate) fn conv_backward_input(dout: &[f64], kernels: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dcols = vec![0.0; g.patch_len() * g.positions()];
    gemm_tn_acc(kernels, dout, &mut dcols, g.patch_len(), g.cout, g.positions());
    let mut dx = vec![0.0; g.cin * g.h * g.w];
    col2im_add(&dcols, g, &mut dx);
    dx
}

pub(crate) const COSINE_EPS: f64 = 1e-12;

/// Cosine distance from precomputed inner products.
///
/// The denominator is `sqrt(aa·bb)` rather than `‖a‖·‖b‖` so that identical
/// vectors give a distance of exactly zero: `sqrt(s·s) == s` holds in IEEE
/// arithmetic.
#[inline]
pub(crate) fn cosine_from_parts(ab: f64, aa: f64, bb: f64) -> f64 {
    let eps2 = COSINE_EPS * COSINE_EPS;
    if aa < eps2 && bb < eps2 {
        return 1.0;
    }
    let cos = ab / (aa.max(eps2) * bb.max(eps2)).sqrt();
    1.0 - cos.clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_matches_floor_formula() {
        assert_eq!(conv_output_size(64, 3, 2, 1), Some(32));
        assert_eq!(conv_output_size(5, 3, 1, 0), Some(3));
        assert_eq!(conv_output_size(2, 3, 1, 0), None);
        assert_eq!(conv_output_size(2, 3, 1, 1), Some(2));
    }

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_acc(&a, &b, &mut c, m, k, n);

        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c_tn = vec![0.0; m * n];
        gemm_tn_acc(&at, &b, &mut c_tn, m, k, n);
        let mut c_nt = vec![0.0; m * n];
        gemm_nt_acc(&a, &bt, &mut c_nt, m, k, n);
        for i in 0..m * n {
            assert!((c[i] - c_tn[i]).abs() < 1e-12);
            assert!((c[i] - c_nt[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn self_distance_is_exactly_zero() {
        for seed in 0..50u64 {
            let v: Vec<f64> = (0..37).map(|i| ((i as u64 * 7919 + seed * 104729) % 1000) as f64 / 997.0).collect();
            let s = dot(&v, &v);
            assert_eq!(cosine_from_parts(s, s, s), 0.0);
        }
    }
}
