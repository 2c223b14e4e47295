//! Multi-channel normalisation and per-pixel PCA reduction.
//!
//! Pipeline: arcsinh, clip each channel at its train-split 99th percentile,
//! min-max scale to [0,1], project every pixel onto the top principal
//! components of the train pixels, then min-max scale each component using
//! the train projected range (clamping everything else into [0,1]).

use std::fmt::Write as _;

use log::warn;
use thiserror::Error;

use crate::tensor::Tensor;

pub const CLIP_PERCENTILE: f64 = 99.0;
const JACOBI_SWEEPS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

pub fn arcsinh_transform(image: &Tensor) -> Tensor {
    Tensor::new(image.shape().to_vec(), image.data().iter().map(|v| v.asinh()).collect()).expect("same shape")
}

/// Percentile `q ∈ [0,100]` of `values` by linear interpolation between
/// order statistics (rank `q/100·(n−1)`).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&v, q)
}

pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub clip: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.clip.len()
    }
}

/// `channels[c]` holds every train pixel value of channel `c`.
pub fn fit_channel_stats(channels: &[Vec<f64>]) -> Result<ChannelStats> {
    let mut stats = ChannelStats {
        clip: vec![],
        min: vec![],
        max: vec![],
        degenerate: vec![],
    };
    for (c, values) in channels.iter().enumerate() {
        if values.is_empty() {
            return Err(PreprocessError::InvalidInput(format!("channel {c} has no values")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(PreprocessError::Numeric(format!("channel {c} has non-finite values")));
        }
        let clip = percentile(values, CLIP_PERCENTILE);
        let (lo, hi) = values
            .iter()
            .map(|v| v.min(clip))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let degenerate = !(hi > lo);
        if degenerate {
            warn!("channel {c} is constant on the train split; it will map to 0");
        }
        stats.clip.push(clip);
        stats.min.push(lo);
        stats.max.push(hi);
        stats.degenerate.push(degenerate);
    }
    Ok(stats)
}

pub fn normalize_value(x: f64, stats: &ChannelStats, c: usize) -> f64 {
    if stats.degenerate[c] {
        return 0.0;
    }
    let v = x.min(stats.clip[c]);
    ((v - stats.min[c]) / (stats.max[c] - stats.min[c])).clamp(0.0, 1.0)
}

pub fn apply_normalize(image: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    check_channels(image, stats.channels())?;
    let plane = image.len() / stats.channels();
    let mut out = image.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
        chunk.iter_mut().for_each(|v| *v = normalize_value(*v, stats, c));
    }
    Ok(out)
}

fn check_channels(image: &Tensor, c: usize) -> Result<()> {
    if image.rank() != 3 || image.shape()[0] != c {
        return Err(PreprocessError::InvalidInput(format!(
            "expected {c}×H×W image, got {:?}",
            image.shape()
        )));
    }
    Ok(())
}

/// Cyclic Jacobi eigendecomposition of a symmetric `n×n` row-major matrix.
/// Returns eigenvalues and the eigenvector matrix (columns), unsorted.
pub fn jacobi_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != n * n {
        return Err(PreprocessError::InvalidInput(format!("matrix of {} values is not {n}×{n}", a.len())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(PreprocessError::Numeric("matrix is not finite".into()));
    }
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..JACOBI_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok(((0..n).map(|i| m[i * n + i]).collect(), v))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// C×k row-major; column i is component i.
    pub components: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub total_variance: f64,
    pub channels: usize,
    pub k: usize,
}

impl PcaModel {
    pub fn component(&self, i: usize) -> Vec<f64> {
        (0..self.channels).map(|c| self.components[c * self.k + i]).collect()
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .map(|l| if self.total_variance > 0.0 { l / self.total_variance } else { 0.0 })
            .collect()
    }

    pub fn project_pixel(&self, pixel: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.k) {
            *o = (0..self.channels)
                .map(|c| (pixel[c] - self.mean[c]) * self.components[c * self.k + i])
                .sum();
        }
    }
}

/// PCA of `pixels` (N×C row-major) via the sample covariance (divisor N−1).
pub fn pca_fit(pixels: &[f64], n_channels: usize, k: usize) -> Result<PcaModel> {
    let c = n_channels;
    if c == 0 || !pixels.len().is_multiple_of(c) {
        return Err(PreprocessError::InvalidInput(format!("{} values do not form N×{c}", pixels.len())));
    }
    let n = pixels.len() / c;
    if n <= c {
        return Err(PreprocessError::InvalidInput(format!("PCA needs more than {c} pixels, got {n}")));
    }
    if k == 0 || k > c {
        return Err(PreprocessError::InvalidInput(format!("cannot take {k} components of {c} channels")));
    }
    let mut mean = vec![0.0; c];
    for row in pixels.chunks_exact(c) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; c * c];
    let mut centered = vec![0.0; c];
    for row in pixels.chunks_exact(c) {
        for i in 0..c {
            centered[i] = row[i] - mean[i];
        }
        for i in 0..c {
            for j in i..c {
                cov[i * c + j] += centered[i] * centered[j];
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            let v = cov[i * c + j] / (n - 1) as f64;
            cov[i * c + j] = v;
            cov[j * c + i] = v;
        }
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(PreprocessError::Numeric("covariance is not finite".into()));
    }
    let total_variance: f64 = (0..c).map(|i| cov[i * c + i]).sum();
    let (vals, vecs) = jacobi_eigen(&cov, c)?;
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));

    let tol = 1e-12 * total_variance.max(f64::MIN_POSITIVE);
    let positive = vals.iter().filter(|&&l| l > tol).count();
    if positive < k {
        warn!("only {positive} positive eigenvalues for {k} components; padding with an orthonormal completion");
    }
    let mut components = vec![0.0; c * k];
    let mut eigenvalues = Vec::with_capacity(k);
    for (i, &col) in order.iter().take(k).enumerate() {
        let mut v: Vec<f64> = (0..c).map(|r| vecs[r * c + col]).collect();
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (j, x)| if x.abs() > v[best].abs() { j } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for r in 0..c {
            components[r * k + i] = v[r];
        }
        eigenvalues.push(vals[col].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
        total_variance,
        channels: c,
        k,
    })
}

/// Fitted normalisation + PCA pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    pub stats: ChannelStats,
    pub pca: PcaModel,
    pub proj_min: Vec<f64>,
    pub proj_max: Vec<f64>,
}

impl Preprocessor {
    /// Fits every statistic on `train` only.
    pub fn fit(train: &[Tensor], k: usize) -> Result<Preprocessor> {
        let Some(first) = train.first() else {
            return Err(PreprocessError::InvalidInput("empty train split".into()));
        };
        if first.rank() != 3 {
            return Err(PreprocessError::InvalidInput(format!("expected C×H×W images, got {:?}", first.shape())));
        }
        let c = first.shape()[0];
        let transformed: Vec<Tensor> = train
            .iter()
            .map(|img| {
                check_channels(img, c)?;
                Ok(arcsinh_transform(img))
            })
            .collect::<Result<_>>()?;
        let mut channels = vec![Vec::new(); c];
        for img in &transformed {
            let plane = img.len() / c;
            for (ch, chunk) in img.data().chunks(plane.max(1)).enumerate() {
                channels[ch].extend_from_slice(chunk);
            }
        }
        let stats = fit_channel_stats(&channels)?;
        let mut pixels = Vec::new();
        for img in &transformed {
            let norm = apply_normalize(img, &stats)?;
            append_pixels(&norm, &mut pixels);
        }
        let pca = pca_fit(&pixels, c, k)?;
        let mut proj_min = vec![f64::INFINITY; k];
        let mut proj_max = vec![f64::NEG_INFINITY; k];
        let mut out = vec![0.0; k];
        for px in pixels.chunks_exact(c) {
            pca.project_pixel(px, &mut out);
            for i in 0..k {
                proj_min[i] = proj_min[i].min(out[i]);
                proj_max[i] = proj_max[i].max(out[i]);
            }
        }
        Ok(Preprocessor {
            stats,
            pca,
            proj_min,
            proj_max,
        })
    }

    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let norm = apply_normalize(&arcsinh_transform(image), &self.stats)?;
        Ok(self.project_and_rescale(&norm))
    }

    /// PCA projection of an already normalised image followed by the
    /// per-component rescale with clamping.
    pub fn project_and_rescale(&self, norm: &Tensor) -> Tensor {
        let (c, h, w) = (norm.shape()[0], norm.shape()[1], norm.shape()[2]);
        let k = self.pca.k;
        let plane = h * w;
        let mut out = Tensor::zeros(&[k, h, w]);
        let mut px = vec![0.0; c];
        let mut proj = vec![0.0; k];
        for p in 0..plane {
            for (ch, v) in px.iter_mut().enumerate() {
                *v = norm.data()[ch * plane + p];
            }
            self.pca.project_pixel(&px, &mut proj);
            for i in 0..k {
                let span = self.proj_max[i] - self.proj_min[i];
                out.data_mut()[i * plane + p] = if span > 0.0 {
                    ((proj[i] - self.proj_min[i]) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
        out
    }

    /// Tab-separated dump of every fitted statistic.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("kind\tindex\tvalues\n");
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        for c in 0..self.stats.channels() {
            let _ = writeln!(
                s,
                "channel\t{c}\t{:e},{:e},{:e},{}",
                self.stats.clip[c], self.stats.min[c], self.stats.max[c], self.stats.degenerate[c] as u8
            );
        }
        let _ = writeln!(s, "mean\t0\t{}", join(&self.pca.mean));
        for i in 0..self.pca.k {
            let _ = writeln!(
                s,
                "component\t{i}\t{:e},{:e},{:e},{}",
                self.pca.eigenvalues[i],
                self.proj_min[i],
                self.proj_max[i],
                join(&self.pca.component(i))
            );
        }
        s
    }
}

fn append_pixels(image: &Tensor, out: &mut Vec<f64>) {
    let c = image.shape()[0];
    let plane = image.len() / c;
    out.reserve(image.len());
    for p in 0..plane {
        for ch in 0..c {
            out.push(image.data()[ch * plane + p]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arcsinh_basics() {
        let t = Tensor::new(vec![1, 1, 3], vec![0.0, 2f64.sinh(), -1.5]).unwrap();
        let a = arcsinh_transform(&t);
        assert_eq!(a.data()[0], 0.0);
        assert!((a.data()[1] - 2.0).abs() < 1e-15);
        assert!(a.data()[2] < 0.0);
    }

    #[test]
    fn percentile_of_0_to_100() {
        let v: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 99.0), 99.0);
        assert_eq!(percentile(&v, 50.0), 50.0);
        let two: Vec<f64> = (0..200).map(|i| (i % 2) as f64).collect();
        assert_eq!(percentile(&two, 99.0), 1.0);
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let stats = fit_channel_stats(&[vec![3.0; 10], (0..10).map(f64::from).collect()]).unwrap();
        assert_eq!(stats.degenerate, vec![true, false]);
        assert_eq!(normalize_value(3.0, &stats, 0), 0.0);
    }

    #[test]
    fn normalize_endpoints_and_clip() {
        let stats = fit_channel_stats(&[(0..=100).map(f64::from).collect()]).unwrap();
        assert_eq!(normalize_value(0.0, &stats, 0), 0.0);
        assert_eq!(normalize_value(99.0, &stats, 0), 1.0);
        assert_eq!(normalize_value(500.0, &stats, 0), normalize_value(stats.clip[0], &stats, 0));
    }

    #[test]
    fn rank_one_data_gives_axis_component() {
        let pixels: Vec<f64> = (0..50).flat_map(|i| [i as f64 - 7.0, 0.0, 0.0]).collect();
        let pca = pca_fit(&pixels, 3, 3).unwrap();
        assert_eq!(pca.component(0), vec![1.0, 0.0, 0.0]);
        assert!(pca.eigenvalues[1].abs() < 1e-12 && pca.eigenvalues[2].abs() < 1e-12);
    }

    #[test]
    fn mean_pixel_projects_to_zero() {
        let pixels: Vec<f64> = (0..40).flat_map(|i| [(i as f64).sin(), (i as f64 * 0.3).cos(), 0.1 * i as f64]).collect();
        let pca = pca_fit(&pixels, 3, 2).unwrap();
        let mut out = [1.0; 2];
        pca.project_pixel(&pca.mean.clone(), &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn too_few_pixels_is_rejected() {
        assert!(pca_fit(&[1.0, 2.0, 3.0, 4.0], 2, 1).is_err());
    }
}
