//! Brute-force reference implementations, written independently of the
//! production code paths, and a suite that compares the two on random
//! instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::interpret::{self, CellGraph, GraphNode};
use crate::mask::Mask;
use crate::model::{cosine_distance, Model, ModelConfig};
use crate::preprocess::pca_fit;
use crate::rng::{derive_seed, derived_rng, rng_from_seed};
use crate::synthgen::Role;
use crate::tensor::{grad_check, GradCheckReport, Tensor, TensorError};
use crate::train::record_composite_loss;

/// Largest k such that some non-empty node subset has every member with at
/// least k neighbours inside the subset.
pub fn coreness_brute(n: usize, edges: &[(usize, usize)]) -> usize {
    assert!(n <= 20, "brute-force coreness is exponential");
    let mut adj = vec![vec![false; n]; n];
    for &(u, v) in edges {
        adj[u][v] = true;
        adj[v][u] = true;
    }
    let mut best = 0;
    for subset in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|&i| subset >> i & 1 == 1).collect();
        let min_deg = members
            .iter()
            .map(|&u| members.iter().filter(|&&v| adj[u][v]).count())
            .min()
            .unwrap_or(0);
        best = best.max(min_deg);
    }
    best
}

/// Counts over every unordered node pair of the adjacency matrix.
pub fn infiltration_brute(tumor: &[bool], edges: &[(usize, usize)]) -> Option<f64> {
    let n = tumor.len();
    let mut adj = vec![vec![false; n]; n];
    for &(u, v) in edges {
        adj[u][v] = true;
        adj[v][u] = true;
    }
    let (mut mixed, mut tt) = (0u32, 0u32);
    for i in 0..n {
        for j in i + 1..n {
            if adj[i][j] {
                if tumor[i] && tumor[j] {
                    tt += 1;
                } else if tumor[i] != tumor[j] {
                    mixed += 1;
                }
            }
        }
    }
    if tt == 0 {
        None
    } else {
        Some(mixed as f64 / tt as f64)
    }
}

/// Q = (1/2m) Σ_ij [A_ij − k_i k_j / 2m] δ(c_i, c_j)
pub fn modularity_brute(community: &[bool], edges: &[(usize, usize)]) -> Option<f64> {
    let n = community.len();
    let mut a = vec![vec![0.0; n]; n];
    for &(u, v) in edges {
        a[u][v] = 1.0;
        a[v][u] = 1.0;
    }
    let k: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    let two_m: f64 = k.iter().sum();
    if two_m == 0.0 {
        return None;
    }
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if community[i] == community[j] {
                q += a[i][j] - k[i] * k[j] / two_m;
            }
        }
    }
    Some(q / two_m)
}

/// Pixel count over the area spanned by the extreme set rows and columns.
pub fn extent_brute(mask: &Mask) -> Option<f64> {
    let rows: Vec<usize> = (0..mask.height()).filter(|&r| (0..mask.width()).any(|c| mask.get(r, c))).collect();
    let cols: Vec<usize> = (0..mask.width()).filter(|&c| (0..mask.height()).any(|r| mask.get(r, c))).collect();
    let (r0, r1) = (*rows.first()?, *rows.last()?);
    let (c0, c1) = (*cols.first()?, *cols.last()?);
    let mut count = 0usize;
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            count += mask.get(r, c) as usize;
        }
    }
    Some(count as f64 / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64)
}

/// Exact two-sided Mann-Whitney p-value by recursive enumeration of every
/// group assignment, with ranks computed by pairwise comparison counting.
pub fn rank_sum_exact_brute(a: &[f64], b: &[f64]) -> f64 {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let ranks: Vec<f64> = pooled
        .iter()
        .map(|&x| {
            let less = pooled.iter().filter(|&&y| y < x).count() as f64;
            let equal = pooled.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect();
    let na = a.len();
    let center = (na * b.len()) as f64 / 2.0;
    let u_of = |rank_sum: f64| rank_sum - (na * (na + 1)) as f64 / 2.0;
    let obs = (u_of(ranks[..na].iter().sum()) - center).abs();

    fn walk(ranks: &[f64], start: usize, left: usize, acc: f64, out: &mut Vec<f64>) {
        if left == 0 {
            out.push(acc);
            return;
        }
        for i in start..=ranks.len() - left {
            walk(ranks, i + 1, left - 1, acc + ranks[i], out);
        }
    }
    let mut sums = Vec::new();
    walk(&ranks, 0, na, 0.0, &mut sums);
    let hits = sums.iter().filter(|&&s| (u_of(s) - center).abs() >= obs - 1e-9).count();
    debug_assert!(n >= na);
    hits as f64 / sums.len() as f64
}

/// Leading `k` eigenpairs of a symmetric matrix by power iteration with
/// deflation. Eigenvectors are unit-norm with an arbitrary sign.
pub fn power_eigen(a: &[f64], n: usize, k: usize, iterations: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut m = a.to_vec();
    let mut values = Vec::with_capacity(k);
    let mut vectors = Vec::with_capacity(k);
    for i in 0..k {
        let mut v: Vec<f64> = (0..n).map(|j| 1.0 + ((i * 7 + j * 3) % 5) as f64 * 0.1).collect();
        let mut lambda = 0.0;
        for _ in 0..iterations {
            let w: Vec<f64> = (0..n).map(|r| (0..n).map(|c| m[r * n + c] * v[c]).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            lambda = v.iter().zip(&w).map(|(p, q)| p * q).sum();
            v = w.into_iter().map(|x| x / norm).collect();
        }
        for r in 0..n {
            for c in 0..n {
                m[r * n + c] -= lambda * v[r] * v[c];
            }
        }
        values.push(lambda);
        vectors.push(v);
    }
    (values, vectors)
}

/// Exhaustive nearest latent cell for a 1×1 prototype: (distance, sample,
/// row, col), earliest on ties.
pub fn nearest_patch_brute(prototype: &[f64], latents: &[Tensor]) -> Option<(f64, usize, usize, usize)> {
    let mut best: Option<(f64, usize, usize, usize)> = None;
    for (i, z) in latents.iter().enumerate() {
        let (d, h, w) = (z.shape()[0], z.shape()[1], z.shape()[2]);
        for r in 0..h {
            for c in 0..w {
                let cell: Vec<f64> = (0..d).map(|k| z.data()[(k * h + r) * w + c]).collect();
                let dist = cosine_distance(prototype, &cell).ok()?;
                if best.is_none_or(|b| dist < b.0) {
                    best = Some((dist, i, r, c));
                }
            }
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    pub reports: Vec<GradCheckReport>,
    /// Points skipped because an op sat within the step of a kink.
    pub excluded: Vec<GradCheckReport>,
}

impl GradCheckOutcome {
    pub fn max_rel_error(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }
}

/// Small model with every parameter exercised by a 2×2 latent grid.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 12,
        channels: vec![3, 4, 5],
        prototypes_per_class: 2,
        ..ModelConfig::default()
    }
}

/// Full composite loss (encoder, prototype layer, head, cluster and
/// separation terms) against central differences at `points` random
/// points free of kinks.
pub fn composite_gradcheck(seed: u64, points: usize, step: f64) -> Result<GradCheckOutcome, TensorError> {
    let cfg = gradcheck_model_config();
    let mut reports = Vec::new();
    let mut excluded = Vec::new();
    let mut index = 0u64;
    while reports.len() < points {
        if index as usize > 20 * points + 20 {
            return Err(TensorError::InvalidArgument(format!(
                "only {} of {points} kink-free points found",
                reports.len()
            )));
        }
        let point_seed = derive_seed(seed, 0x6c, index);
        index += 1;
        let mut model = Model::new(cfg.clone(), point_seed).map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
        let mut rng = rng_from_seed(point_seed);
        for t in model.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        }
        let xs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(&[3, cfg.image_size, cfg.image_size], |_| rng.gen::<f64>()))
            .collect();
        let labels = [0usize, 1, 0];
        let class_of = model.prototypes.class_of.clone();
        let inputs: Vec<Tensor> = model.params().into_iter().cloned().collect();
        let report = grad_check(
            |tape, vars| {
                let mv = model.bind(vars.to_vec()).map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
                let refs: Vec<&Tensor> = xs.iter().collect();
                let b = model
                    .record_batch(tape, &mv, &refs)
                    .map_err(|e| TensorError::InvalidArgument(e.to_string()))?;
                record_composite_loss(tape, b.logits, b.scores, &labels, &class_of, 0.8, 0.08)
                    .map_err(|e| TensorError::InvalidArgument(e.to_string()))
            },
            &inputs,
            step,
        )?;
        if report.is_reliable() {
            reports.push(report);
        } else {
            excluded.push(report);
        }
    }
    Ok(GradCheckOutcome { reports, excluded })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleResult {
    pub name: &'static str,
    pub instances: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

struct Tally {
    name: &'static str,
    tolerance: f64,
    instances: usize,
    failures: usize,
    max_error: f64,
}

impl Tally {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Tally {
            name,
            tolerance,
            instances: 0,
            failures: 0,
            max_error: 0.0,
        }
    }

    fn check(&mut self, got: Option<f64>, want: Option<f64>) {
        self.instances += 1;
        let err = match (got, want) {
            (Some(g), Some(w)) => (g - w).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        };
        self.max_error = self.max_error.max(err);
        if !(err <= self.tolerance) {
            self.failures += 1;
        }
    }

    fn done(self) -> OracleResult {
        OracleResult {
            name: self.name,
            instances: self.instances,
            failures: self.failures,
            max_error: self.max_error,
            tolerance: self.tolerance,
        }
    }
}

fn random_graph(rng: &mut ChaCha8Rng) -> CellGraph {
    let n = rng.gen_range(0..=8);
    let nodes: Vec<GraphNode> = (0..n)
        .map(|id| GraphNode {
            id,
            row: rng.gen_range(0..12),
            col: rng.gen_range(0..12),
            role: if rng.gen_bool(0.5) { Role::Tumor } else { Role::NonTumor },
        })
        .collect();
    let radius = rng.gen_range(1.0..8.0);
    CellGraph::from_nodes(nodes, radius).expect("positive radius")
}

fn random_mask(rng: &mut ChaCha8Rng) -> Mask {
    let (h, w) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
    let p = rng.gen_range(0.0..0.6);
    Mask::from_fn(h, w, |_, _| rng.gen_bool(p))
}

/// Runs every metric and math oracle on `instances` random cases each.
pub fn oracle_suite(seed: u64, instances: usize) -> Vec<OracleResult> {
    let mut rng = derived_rng(seed, 0x0a, 0);
    let mut core = Tally::new("coreness", 0.0);
    let mut inf = Tally::new("infiltration", 0.0);
    let mut modu = Tally::new("modularity", 1e-12);
    let mut ext = Tally::new("extent", 0.0);
    let mut graph = Tally::new("radius-graph", 0.0);
    for _ in 0..instances {
        let g = random_graph(&mut rng);
        let tumor: Vec<bool> = g.nodes.iter().map(|n| n.role == Role::Tumor).collect();
        core.check(Some(interpret::coreness(&g) as f64), Some(coreness_brute(g.nodes.len(), &g.edges) as f64));
        inf.check(interpret::infiltration(&g), infiltration_brute(&tumor, &g.edges));
        modu.check(interpret::modularity(&g).ok(), modularity_brute(&tumor, &g.edges));
        let mut brute_edges = 0usize;
        for (i, a) in g.nodes.iter().enumerate() {
            for b in &g.nodes[i + 1..] {
                let d = ((a.row as f64 - b.row as f64).powi(2) + (a.col as f64 - b.col as f64).powi(2)).sqrt();
                brute_edges += (d <= g.radius) as usize;
            }
        }
        graph.check(Some(g.edges.len() as f64), Some(brute_edges as f64));
        let m = random_mask(&mut rng);
        ext.check(interpret::extent(&m).ok(), extent_brute(&m));
    }

    let mut exact = Tally::new("rank-sum-exact", 1e-12);
    for _ in 0..instances {
        let na = rng.gen_range(2..=6);
        let nb = rng.gen_range(2..=12 - na);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(0..6) as f64).collect() };
        let (a, b) = (draw(na), draw(nb));
        exact.check(interpret::rank_sum_compare(&a, &b).ok().map(|r| r.p), Some(rank_sum_exact_brute(&a, &b)));
    }

    let mut normal = Tally::new("rank-sum-normal-n8", 0.02);
    for _ in 0..instances.min(40) {
        let a: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
        let shift = rng.gen_range(0.0..0.6);
        let b: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() + shift).collect();
        normal.check(interpret::rank_sum_normal(&a, &b).ok().map(|r| r.p), Some(rank_sum_exact_brute(&a, &b)));
    }

    let mut pca = Tally::new("pca-eigen", 1e-8);
    for _ in 0..instances.min(10) {
        let (n, c) = (200, 5);
        let mix: Vec<f64> = (0..c * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scales: Vec<f64> = (0..c).map(|i| 3.0 / (i + 1) as f64).collect();
        let mut pixels = Vec::with_capacity(n * c);
        for _ in 0..n {
            let latent: Vec<f64> = scales.iter().map(|s| s * rng.gen_range(-1.0..1.0)).collect();
            for r in 0..c {
                pixels.push((0..c).map(|k| mix[r * c + k] * latent[k]).sum::<f64>());
            }
        }
        let Ok(fit) = pca_fit(&pixels, c, c) else {
            pca.check(None, Some(0.0));
            continue;
        };
        let mut mean = vec![0.0; c];
        for p in pixels.chunks(c) {
            mean.iter_mut().zip(p).for_each(|(m, x)| *m += x / n as f64);
        }
        let mut cov = vec![0.0; c * c];
        for p in pixels.chunks(c) {
            for r in 0..c {
                for k in 0..c {
                    cov[r * c + k] += (p[r] - mean[r]) * (p[k] - mean[k]) / (n - 1) as f64;
                }
            }
        }
        let (values, vectors) = power_eigen(&cov, c, 2, 5000);
        for i in 0..2 {
            pca.check(Some(fit.eigenvalues[i] / values[i]), Some(1.0));
            let dot: f64 = fit.component(i).iter().zip(&vectors[i]).map(|(p, q)| p * q).sum();
            pca.check(Some(dot.abs()), Some(1.0));
        }
    }

    let mut push = Tally::new("nearest-patch", 0.0);
    for t in 0..instances.min(10) {
        let model = Model::new(
            ModelConfig {
                image_size: 16,
                ..ModelConfig::default()
            },
            derive_seed(seed, 0x0b, t as u64),
        )
        .expect("valid config");
        let latents: Vec<Tensor> = (0..10)
            .map(|_| {
                let x = Tensor::from_fn(&[3, 16, 16], |_| if rng.gen_bool(0.3) { rng.gen::<f64>() } else { 0.0 });
                model.encode(&x).expect("encodes")
            })
            .collect();
        let mut pushed = model.clone();
        let samples: Vec<crate::synthgen::Sample> = (0..latents.len())
            .map(|id| crate::synthgen::Sample {
                id,
                image: Tensor::zeros(&[3, 16, 16]),
                class_label: 0,
                nodes: vec![],
                gt_mask: Mask::new(16, 16),
            })
            .collect();
        let report = crate::train::push_onto_latents(&mut pushed, &samples, &latents).expect("push");
        for (j, entry) in report.entries.iter().enumerate() {
            let want = nearest_patch_brute(model.prototypes.vector(j), &latents);
            let got = (entry.provenance.distance_before, entry.provenance.sample, entry.provenance.row, entry.provenance.col);
            let same = want.is_some_and(|w| w.0 == got.0 && (w.1, w.2, w.3) == (got.1, got.2, got.3));
            push.check(Some(if same { 0.0 } else { 1.0 }), Some(0.0));
        }
    }

    vec![
        core.done(),
        inf.done(),
        modu.done(),
        ext.done(),
        graph.done(),
        exact.done(),
        normal.done(),
        pca.done(),
        push.done(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in oracle_suite(1, 30) {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn brute_oracles_on_known_cases() {
        let tri = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)];
        assert!((modularity_brute(&[true, true, true, false, false, false], &tri).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(coreness_brute(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]), 3);
        assert!((rank_sum_exact_brute(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0]) - 0.1).abs() < 1e-15);
    }
}
