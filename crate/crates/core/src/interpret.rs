//! Prototype interpretation: top-activated samples, percentile regions,
//! cell graphs and the region metrics compared between prototypes and
//! their reference regions.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::mask::Mask;
use crate::model::{Model, ModelError};
use crate::preprocess::percentile_sorted;
use crate::synthgen::{NodeAnnotation, Role, Sample};
use crate::tensor::Tensor;

/// Above this pooled size the rank-sum test switches to the normal
/// approximation.
pub const EXACT_RANK_SUM_LIMIT: usize = 12;

#[derive(Debug, Error, PartialEq)]
pub enum InterpretError {
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = InterpretError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    pub top_k: usize,
    pub percentile: f64,
    pub graph_radius: f64,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            top_k: 20,
            percentile: 80.0,
            graph_radius: 8.0,
        }
    }
}

impl InterpretConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(InterpretError::InvalidArgument("top_k must be at least 1".into()));
        }
        if !(self.percentile > 0.0 && self.percentile < 100.0) {
            return Err(InterpretError::InvalidArgument(format!("percentile {} is outside (0, 100)", self.percentile)));
        }
        if !(self.graph_radius > 0.0) {
            return Err(InterpretError::InvalidArgument("graph_radius must be positive".into()));
        }
        Ok(())
    }
}

/// Orders `(id, similarity)` pairs by similarity descending, ties by lower
/// id, and keeps the first `count` (all of them, with a warning, when
/// `count` exceeds the set).
pub fn rank_by_similarity(mut scored: Vec<(usize, f64)>, count: usize) -> Vec<(usize, f64)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if count > scored.len() {
        warn!("requested top {count} of only {} samples; using all of them", scored.len());
    }
    scored.truncate(count);
    scored
}

/// Sample ids ranked by prototype similarity s_j = 1 − g_j.
pub fn top_activated_samples(model: &Model, samples: &[Sample], j: usize, count: usize) -> Result<Vec<usize>> {
    if j >= model.n_prototypes() {
        return Err(InterpretError::InvalidArgument(format!("prototype {j} out of range")));
    }
    let scored = samples
        .iter()
        .map(|s| Ok((s.id, 1.0 - model.forward(&s.image)?.scores[j])))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_by_similarity(scored, count).into_iter().map(|(id, _)| id).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recovery {
    pub prototype: usize,
    pub class: usize,
    pub sample: usize,
    pub sample_class: usize,
    /// Row-major-first argmax of the upsampled activation map.
    pub argmax: (usize, usize),
    /// Argmax falls inside the sample's ground-truth mask dilated by
    /// `tolerance` px and the sample belongs to the prototype's class.
    pub recovered: bool,
}

/// Whether prototype `j`'s top-activated sample peaks on its planted motif.
pub fn motif_recovery(model: &Model, samples: &[Sample], j: usize, tolerance: usize) -> Result<Recovery> {
    let top = top_activated_samples(model, samples, j, 1)?;
    let id = *top.first().ok_or_else(|| InterpretError::InvalidArgument("no samples".into()))?;
    let sample = samples.iter().find(|s| s.id == id).expect("ranked id comes from samples");
    let map = model.activation_map(&sample.image, j)?;
    let w = map.shape()[1];
    let best = crate::model::argmax(map.data());
    let argmax = (best / w, best % w);
    let class = model.prototypes.class_of[j];
    let recovered = sample.class_label == class && sample.gt_mask.dilate(tolerance).get(argmax.0, argmax.1);
    Ok(Recovery {
        prototype: j,
        class,
        sample: id,
        sample_class: sample.class_label,
        argmax,
        recovered,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRegion {
    pub sample: usize,
    pub prototype: usize,
    pub mask: Mask,
    pub percentile: f64,
    pub reference: bool,
    pub degenerate: bool,
}

/// Pixels at or above the `percentile`-th percentile of the map's own
/// values. A constant map yields the full mask and `degenerate = true`.
pub fn extract_region(map: &Tensor, percentile: f64) -> Result<(Mask, bool)> {
    if map.rank() != 2 || map.is_empty() {
        return Err(InterpretError::InvalidArgument(format!("expected a non-empty H×W map, got {:?}", map.shape())));
    }
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(InterpretError::InvalidArgument(format!("percentile {percentile} is outside (0, 100)")));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut sorted = map.data().to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    if sorted[0] == sorted[sorted.len() - 1] {
        return Ok((Mask::full(h, w), true));
    }
    let t = percentile_sorted(&sorted, percentile);
    Ok((Mask::from_fn(h, w, |r, c| map.data()[r * w + c] >= t), false))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub id: usize,
    pub row: usize,
    pub col: usize,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellGraph {
    pub nodes: Vec<GraphNode>,
    /// Index pairs into `nodes`, `u < v`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub radius: f64,
}

impl CellGraph {
    /// Radius graph: an edge joins every pair at Euclidean distance ≤ `radius`.
    pub fn from_nodes(nodes: Vec<GraphNode>, radius: f64) -> Result<CellGraph> {
        if !(radius > 0.0) {
            return Err(InterpretError::InvalidArgument(format!("radius must be positive, got {radius}")));
        }
        let r2 = radius * radius;
        let mut edges = Vec::new();
        for u in 0..nodes.len() {
            for v in u + 1..nodes.len() {
                let dr = nodes[u].row as f64 - nodes[v].row as f64;
                let dc = nodes[u].col as f64 - nodes[v].col as f64;
                if dr * dr + dc * dc <= r2 {
                    edges.push((u, v));
                }
            }
        }
        Ok(CellGraph { nodes, edges, radius })
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.nodes.len()];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    pub fn n_tumor(&self) -> usize {
        self.nodes.iter().filter(|n| n.role == Role::Tumor).count()
    }
}

/// Annotated cells inside `mask`, connected by the radius rule.
pub fn build_graph(nodes: &[NodeAnnotation], mask: &Mask, radius: f64) -> Result<CellGraph> {
    let inside = nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.row < mask.height() && n.col < mask.width() && mask.get(n.row, n.col))
        .map(|(id, n)| GraphNode {
            id,
            row: n.row,
            col: n.col,
            role: n.role,
        })
        .collect();
    CellGraph::from_nodes(inside, radius)
}

/// Mask pixel count over the area of its tight bounding box.
pub fn extent(mask: &Mask) -> Result<f64> {
    let (r0, c0, r1, c1) = mask
        .bounding_box()
        .ok_or_else(|| InterpretError::Undefined("extent of an empty mask".into()))?;
    Ok(mask.count() as f64 / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64)
}

/// Largest k whose k-core (iterative removal of nodes with degree < k) is
/// non-empty; 0 for an empty graph.
pub fn coreness(g: &CellGraph) -> usize {
    let n = g.nodes.len();
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in &g.edges {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut deg: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut removed = vec![false; n];
    let mut remaining = n;
    let mut k = 0;
    let mut best = 0;
    while remaining > 0 {
        loop {
            let Some(u) = (0..n).find(|&u| !removed[u] && deg[u] < k) else { break };
            removed[u] = true;
            remaining -= 1;
            for &v in &adj[u] {
                if !removed[v] {
                    deg[v] -= 1;
                }
            }
        }
        if remaining == 0 {
            break;
        }
        best = k;
        k += 1;
    }
    best
}

/// (tumor/non-tumor edges) / (tumor-tumor edges); `None` when there are no
/// tumor-tumor edges.
pub fn infiltration(g: &CellGraph) -> Option<f64> {
    let (mut mixed, mut tt) = (0usize, 0usize);
    for &(u, v) in &g.edges {
        match (g.nodes[u].role, g.nodes[v].role) {
            (Role::Tumor, Role::Tumor) => tt += 1,
            (Role::Tumor, Role::NonTumor) | (Role::NonTumor, Role::Tumor) => mixed += 1,
            _ => {}
        }
    }
    (tt > 0).then(|| mixed as f64 / tt as f64)
}

/// Newman modularity of the tumor / non-tumor partition.
pub fn modularity(g: &CellGraph) -> Result<f64> {
    modularity_of(g, |n| n.role == Role::Tumor)
}

/// Newman modularity for a two-way partition given by `side`.
pub fn modularity_of(g: &CellGraph, side: impl Fn(&GraphNode) -> bool) -> Result<f64> {
    let m = g.edges.len();
    if m == 0 {
        return Err(InterpretError::Undefined("modularity of a graph without edges".into()));
    }
    let deg = g.degrees();
    let mut within = [0usize; 2];
    let mut degsum = [0usize; 2];
    for &(u, v) in &g.edges {
        let (a, b) = (side(&g.nodes[u]), side(&g.nodes[v]));
        if a == b {
            within[a as usize] += 1;
        }
    }
    for (i, n) in g.nodes.iter().enumerate() {
        degsum[side(n) as usize] += deg[i];
    }
    let m = m as f64;
    Ok((0..2)
        .map(|c| within[c] as f64 / m - (degsum[c] as f64 / (2.0 * m)).powi(2))
        .sum())
}

pub fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> Result<f64> {
    let union = a.union(b).count();
    if union == 0 {
        return Err(InterpretError::Undefined("Jaccard index of two empty sets".into()));
    }
    Ok(a.intersection(b).count() as f64 / union as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankSum {
    /// Mann-Whitney U of the first group.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// Midranks (1-based) of `values`.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn check_groups(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(InterpretError::InvalidArgument(format!(
            "rank-sum test needs at least 2 values per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(InterpretError::InvalidArgument("rank-sum values must be finite".into()));
    }
    Ok(())
}

fn u_statistic(ranks_a: impl Iterator<Item = f64>, n_a: usize) -> f64 {
    ranks_a.sum::<f64>() - (n_a * (n_a + 1)) as f64 / 2.0
}

/// Normal approximation with tie correction and continuity correction.
pub fn rank_sum_normal(a: &[f64], b: &[f64]) -> Result<RankSum> {
    check_groups(a, b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let u = u_statistic(ranks[..a.len()].iter().copied(), a.len());
    let mut ties = 0.0;
    let mut sorted = pooled.clone();
    sorted.sort_by(|x, y| x.total_cmp(y));
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        ties += (j * j * j - j) as f64;
        i += j;
    }
    let var = na * nb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(RankSum { u, p: 1.0, exact: false });
    }
    let z = ((u - na * nb / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * (1.0 - normal.cdf(z))).min(1.0);
    Ok(RankSum { u, p, exact: false })
}

/// Exact permutation distribution of U over every split of the pooled
/// midranks.
pub fn rank_sum_exact(a: &[f64], b: &[f64]) -> Result<RankSum> {
    check_groups(a, b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    if n > 24 {
        return Err(InterpretError::InvalidArgument(format!("exact test over {n} values is too large")));
    }
    let ranks = midranks(&pooled);
    let na = a.len();
    let u_obs = u_statistic(ranks[..na].iter().copied(), na);
    let center = (na * b.len()) as f64 / 2.0;
    let obs_dev = (u_obs - center).abs();
    let (mut hits, mut total) = (0u64, 0u64);
    for bits in 0u32..(1u32 << n) {
        if bits.count_ones() as usize != na {
            continue;
        }
        let u = u_statistic((0..n).filter(|i| bits >> i & 1 == 1).map(|i| ranks[i]), na);
        total += 1;
        if (u - center).abs() >= obs_dev - 1e-9 {
            hits += 1;
        }
    }
    Ok(RankSum {
        u: u_obs,
        p: hits as f64 / total as f64,
        exact: true,
    })
}

/// Mann-Whitney U: exact when the pooled size is at most
/// [`EXACT_RANK_SUM_LIMIT`], otherwise the normal approximation. Groups
/// whose values are all identical give p = 1.
pub fn rank_sum_compare(a: &[f64], b: &[f64]) -> Result<RankSum> {
    check_groups(a, b)?;
    if a.len() + b.len() <= EXACT_RANK_SUM_LIMIT {
        rank_sum_exact(a, b)
    } else {
        rank_sum_normal(a, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionKind {
    Prototype,
    Reference,
}

impl RegionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionKind::Prototype => "prototype",
            RegionKind::Reference => "reference",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub prototype: usize,
    pub sample: usize,
    pub kind: RegionKind,
    pub extent: Option<f64>,
    pub coreness: usize,
    pub infiltration: Option<f64>,
    pub modularity: Option<f64>,
    pub n_nodes: usize,
    pub n_edges: usize,
    pub n_tumor: usize,
    pub flags: Vec<&'static str>,
}

impl MetricRecord {
    pub fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Extent => self.extent,
            Metric::Coreness => Some(self.coreness as f64),
            Metric::Infiltration => self.infiltration,
            Metric::Modularity => self.modularity,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Extent,
    Coreness,
    Infiltration,
    Modularity,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Extent, Metric::Coreness, Metric::Infiltration, Metric::Modularity];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Extent => "extent",
            Metric::Coreness => "coreness",
            Metric::Infiltration => "infiltration",
            Metric::Modularity => "modularity",
        }
    }
}

/// Metrics of one region. Undefined values are kept as `None` and flagged.
pub fn region_metrics(
    prototype: usize,
    sample: &Sample,
    mask: &Mask,
    kind: RegionKind,
    radius: f64,
    mut flags: Vec<&'static str>,
) -> Result<MetricRecord> {
    let g = build_graph(&sample.nodes, mask, radius)?;
    let ext = extent(mask).ok();
    if ext.is_none() {
        flags.push("empty_mask");
    }
    if g.nodes.is_empty() {
        flags.push("no_nodes");
    }
    let inf = infiltration(&g);
    if inf.is_none() {
        flags.push("no_tumor_tumor_edges");
    }
    let modu = modularity(&g).ok();
    if modu.is_none() {
        flags.push("no_edges");
    }
    Ok(MetricRecord {
        prototype,
        sample: sample.id,
        kind,
        extent: ext,
        coreness: coreness(&g),
        infiltration: inf,
        modularity: modu,
        n_nodes: g.nodes.len(),
        n_edges: g.edges.len(),
        n_tumor: g.n_tumor(),
        flags,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionView {
    pub prototype: usize,
    pub sample: usize,
    pub map: Tensor,
    pub region: ActivationRegion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub label: String,
    pub metric: Metric,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub test: Option<RankSum>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterpretationReport {
    pub records: Vec<MetricRecord>,
    pub views: Vec<RegionView>,
    /// Ranked (sample, similarity) per prototype.
    pub top: Vec<Vec<(usize, f64)>>,
    pub comparisons: Vec<Comparison>,
    /// (j, k, Jaccard of top-k sample sets)
    pub jaccard: Vec<(usize, usize, f64)>,
}

fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&s, 50.0)
}

fn compare(label: String, metric: Metric, a: Vec<f64>, b: Vec<f64>) -> Comparison {
    let test = rank_sum_compare(&a, &b).ok();
    Comparison { label, metric, a, b, test }
}

/// For each prototype: top-k samples, percentile regions and their
/// complements, all four metrics, and rank-sum comparisons prototype vs
/// reference and prototype vs prototype.
pub fn interpretation_report(model: &Model, samples: &[Sample], cfg: &InterpretConfig) -> Result<InterpretationReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(InterpretError::InvalidArgument("no samples to interpret".into()));
    }
    let forwards = samples.iter().map(|s| model.forward(&s.image)).collect::<Result<Vec<_>, _>>()?;
    let m = model.n_prototypes();
    let mut records = Vec::new();
    let mut views = Vec::new();
    let mut top = Vec::with_capacity(m);
    for j in 0..m {
        let scored: Vec<(usize, f64)> = samples.iter().zip(&forwards).map(|(s, f)| (s.id, 1.0 - f.scores[j])).collect();
        let ranked = rank_by_similarity(scored, cfg.top_k);
        for &(id, _) in &ranked {
            let pos = samples.iter().position(|s| s.id == id).expect("ranked id comes from samples");
            let sample = &samples[pos];
            let map = model.activation_map_from(&forwards[pos], j)?;
            let (mask, degenerate) = extract_region(&map, cfg.percentile)?;
            let flags = if degenerate { vec!["constant_map"] } else { vec![] };
            records.push(region_metrics(j, sample, &mask, RegionKind::Prototype, cfg.graph_radius, flags)?);
            if !degenerate {
                let reference = mask.complement();
                records.push(region_metrics(j, sample, &reference, RegionKind::Reference, cfg.graph_radius, vec![])?);
            }
            views.push(RegionView {
                prototype: j,
                sample: id,
                map,
                region: ActivationRegion {
                    sample: id,
                    prototype: j,
                    mask,
                    percentile: cfg.percentile,
                    reference: false,
                    degenerate,
                },
            });
        }
        top.push(ranked);
    }

    let values = |j: usize, kind: RegionKind, metric: Metric| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.prototype == j && r.kind == kind)
            .filter_map(|r| r.metric(metric))
            .collect()
    };
    let mut comparisons = Vec::new();
    for j in 0..m {
        for metric in Metric::ALL {
            comparisons.push(compare(
                format!("proto{j}_vs_reference"),
                metric,
                values(j, RegionKind::Prototype, metric),
                values(j, RegionKind::Reference, metric),
            ));
        }
    }
    let mut jac = Vec::new();
    for j in 0..m {
        for k in j + 1..m {
            for metric in Metric::ALL {
                comparisons.push(compare(
                    format!("proto{j}_vs_proto{k}"),
                    metric,
                    values(j, RegionKind::Prototype, metric),
                    values(k, RegionKind::Prototype, metric),
                ));
            }
            let a: BTreeSet<usize> = top[j].iter().map(|x| x.0).collect();
            let b: BTreeSet<usize> = top[k].iter().map(|x| x.0).collect();
            jac.push((j, k, jaccard(&a, &b)?));
        }
    }
    Ok(InterpretationReport {
        records,
        views,
        top,
        comparisons,
        jaccard: jac,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.17e}"))
}

impl InterpretationReport {
    pub fn records_tsv(&self) -> String {
        let mut s = String::from(
            "prototype\tsample\tregion_kind\textent\tcoreness\tinfiltration\tmodularity\tn_nodes\tn_edges\tdegenerate_flags\n",
        );
        for r in &self.records {
            let flags = if r.flags.is_empty() { "-".to_string() } else { r.flags.join(",") };
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.prototype,
                r.sample,
                r.kind.as_str(),
                opt(r.extent),
                r.coreness,
                opt(r.infiltration),
                opt(r.modularity),
                r.n_nodes,
                r.n_edges,
                flags
            );
        }
        s
    }

    pub fn summary_tsv(&self) -> String {
        let mut s = String::from("comparison\tmetric\tn_a\tn_b\tmedian_a\tmedian_b\tmean_a\tmean_b\tU\tp\tmethod\n");
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        let num = |x: f64| if x.is_nan() { "NA".to_string() } else { format!("{x:.17e}") };
        for c in &self.comparisons {
            let (u, p, method) = match c.test {
                Some(t) => (num(t.u), num(t.p), if t.exact { "exact" } else { "normal" }),
                None => ("NA".into(), "NA".into(), "insufficient"),
            };
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{u}\t{p}\t{method}",
                c.label,
                c.metric.as_str(),
                c.a.len(),
                c.b.len(),
                num(median(&c.a)),
                num(median(&c.b)),
                num(mean(&c.a)),
                num(mean(&c.b))
            );
        }
        for &(j, k, v) in &self.jaccard {
            let _ = writeln!(s, "proto{j}_vs_proto{k}\tjaccard_topk\tNA\tNA\t{}\tNA\tNA\tNA\tNA\tNA\tdirect", num(v));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(row: usize, col: usize, role: Role) -> GraphNode {
        GraphNode { id: 0, row, col, role }
    }

    fn graph(n: usize, edges: &[(usize, usize)], tumor: &[usize]) -> CellGraph {
        CellGraph {
            nodes: (0..n)
                .map(|i| node(0, i, if tumor.contains(&i) { Role::Tumor } else { Role::NonTumor }))
                .collect(),
            edges: edges.to_vec(),
            radius: 1.0,
        }
    }

    #[test]
    fn coreness_examples() {
        let k4 = graph(4, &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)], &[]);
        assert_eq!(coreness(&k4), 3);
        assert_eq!(coreness(&graph(3, &[(0, 1), (1, 2)], &[])), 1);
        assert_eq!(coreness(&graph(0, &[], &[])), 0);
        assert_eq!(coreness(&graph(2, &[], &[])), 0);
    }

    #[test]
    fn infiltration_examples() {
        assert_eq!(infiltration(&graph(3, &[(0, 1), (1, 2)], &[0, 1, 2])), Some(0.0));
        let star = graph(4, &[(0, 1), (0, 2), (0, 3)], &[0]);
        assert_eq!(infiltration(&star), None);
    }

    #[test]
    fn modularity_examples() {
        let one = graph(3, &[(0, 1), (1, 2)], &[0, 1, 2]);
        assert_eq!(modularity(&one).unwrap(), 0.0);
        let tri = graph(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)], &[0, 1, 2]);
        assert_eq!(modularity(&tri).unwrap(), 0.5);
        assert!(modularity(&graph(2, &[], &[0])).is_err());
    }

    #[test]
    fn radius_rule_is_inclusive() {
        let g = CellGraph::from_nodes(vec![node(0, 0, Role::Tumor), node(3, 4, Role::Tumor)], 5.0).unwrap();
        assert_eq!(g.edges, vec![(0, 1)]);
        let g = CellGraph::from_nodes(vec![node(0, 0, Role::Tumor), node(30, 40, Role::Tumor)], 5.0).unwrap();
        assert!(g.edges.is_empty());
        assert!(CellGraph::from_nodes(vec![], 0.0).is_err());
    }

    #[test]
    fn extent_examples() {
        assert_eq!(extent(&Mask::from_fn(5, 5, |r, c| (1..4).contains(&r) && c < 2)).unwrap(), 1.0);
        let checker = Mask::from_fn(4, 4, |r, c| (r + c) % 2 == 0);
        assert_eq!(extent(&checker).unwrap(), 0.5);
        assert!(extent(&Mask::new(3, 3)).is_err());
    }

    #[test]
    fn jaccard_examples() {
        let a: BTreeSet<usize> = [1, 2].into();
        let b: BTreeSet<usize> = [2, 3].into();
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &b).unwrap(), 1.0 / 3.0);
        assert_eq!(jaccard(&a, &[7].into()).unwrap(), 0.0);
        assert!(jaccard(&BTreeSet::new(), &BTreeSet::new()).is_err());
    }

    #[test]
    fn rank_sum_examples() {
        let r = rank_sum_compare(&[1.0, 2.0, 3.0], &[10.0, 11.0, 12.0]).unwrap();
        assert!(r.exact);
        assert_eq!(r.u, 0.0);
        assert!((r.p - 0.1).abs() < 1e-15);
        assert_eq!(rank_sum_compare(&[4.0, 4.0, 4.0], &[4.0, 4.0]).unwrap().p, 1.0);
        assert_eq!(rank_sum_normal(&[4.0; 8], &[4.0; 8]).unwrap().p, 1.0);
        assert!(rank_sum_compare(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn region_of_100_distinct_values() {
        let map = Tensor::from_fn(&[10, 10], |i| ((i * 37) % 100) as f64);
        let (mask, deg) = extract_region(&map, 80.0).unwrap();
        assert!(!deg);
        assert!((20..=21).contains(&mask.count()), "{}", mask.count());
    }

    #[test]
    fn constant_map_is_degenerate() {
        let (mask, deg) = extract_region(&Tensor::full(&[4, 4], 0.3), 80.0).unwrap();
        assert!(deg);
        assert_eq!(mask.count(), 16);
    }

    #[test]
    fn monotone_rows_select_top_rows() {
        let map = Tensor::from_fn(&[10, 4], |i| (i / 4) as f64);
        let (mask, _) = extract_region(&map, 75.0).unwrap();
        for r in 0..10 {
            for c in 0..4 {
                assert_eq!(mask.get(r, c), r >= 7, "row {r}");
            }
        }
    }

    #[test]
    fn ranking_ties_prefer_lower_id() {
        let r = rank_by_similarity(vec![(5, 0.2), (1, 0.9), (3, 0.2), (0, 0.1)], 10);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 3, 5, 0]);
    }
}
