//! Synthetic planted-motif benchmark.
//!
//! Each image is a 3-channel raster on a black background holding randomly
//! placed three-node motifs. Neutral motifs occur in both classes; every
//! image additionally carries exactly one instance of its class's specific
//! motif, whose dilated footprint is the ground-truth mask.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::mask::Mask;
use crate::rng::{derive_seed, rng_from_seed, STREAM_LIBRARY, STREAM_SAMPLE};
use crate::tensor::{read_ptn_file, write_ptn, PtnError, Tensor};

pub const N_CLASSES: usize = 2;
pub const N_CHANNELS: usize = 3;
const LIBRARY_ATTEMPTS: usize = 10_000;
const MIN_CLASS_COLOR_GAP: f64 = 0.3;
/// Minimum cosine distance between a class-specific node colour and every
/// node colour of every other motif. The encoder is bias-free, so a latent
/// cell only sees the direction of a colour, not its intensity.
const MIN_CLASS_CHROMA_GAP: f64 = 0.08;
const MIN_NODE_PEAK: f64 = 0.5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthgen config: {0}")]
    InvalidConfig(String),
    #[error("could not build {wanted} distinct motifs within {attempts} attempts")]
    Generation { wanted: usize, attempts: usize },
    #[error("{}could not place motif {motif} after {attempts} attempts", sample.map(|s| format!("sample {s}: ")).unwrap_or_default())]
    Placement {
        sample: Option<usize>,
        motif: usize,
        attempts: usize,
    },
    #[error("malformed dataset at {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error(transparent)]
    Ptn(#[from] PtnError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub n_neutral_motifs: usize,
    pub neutral_count_min: usize,
    pub neutral_count_max: usize,
    pub node_radius: usize,
    /// Node centres lie within a `(motif_extent+1)²` box.
    pub motif_extent: usize,
    pub max_attempts: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// The two class motifs share one geometry and differ only in colour.
    pub shared_class_geometry: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 600,
            image_size: 64,
            n_neutral_motifs: 4,
            neutral_count_min: 2,
            neutral_count_max: 5,
            node_radius: 2,
            motif_extent: 8,
            max_attempts: 1000,
            train_fraction: 0.6,
            val_fraction: 0.2,
            test_fraction: 0.2,
            shared_class_geometry: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_samples < 10 {
            return bad(format!("n_samples must be at least 10, got {}", self.n_samples));
        }
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split fractions {fr:?} must be in [0,1] and sum to 1"));
        }
        if self.n_neutral_motifs == 0 {
            return bad("n_neutral_motifs must be at least 1".into());
        }
        if self.neutral_count_min > self.neutral_count_max {
            return bad(format!(
                "neutral_count_min {} exceeds neutral_count_max {}",
                self.neutral_count_min, self.neutral_count_max
            ));
        }
        if self.motif_extent < self.min_node_spacing() {
            return bad(format!(
                "motif_extent {} cannot hold three nodes {} px apart",
                self.motif_extent,
                self.min_node_spacing()
            ));
        }
        if self.image_size < self.motif_extent + 2 * self.node_radius + 1 {
            return bad(format!("image_size {} cannot hold a motif", self.image_size));
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }

    fn min_node_spacing(&self) -> usize {
        2 * self.node_radius + 2
    }

    /// (train, val, test) sizes.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.n_samples as f64;
        let train = (n * self.train_fraction).round() as usize;
        let val = ((n * self.val_fraction).round() as usize).min(self.n_samples - train);
        (train, val, self.n_samples - train - val)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Tumor,
    NonTumor,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Tumor => "tumor",
            Role::NonTumor => "non-tumor",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        match s {
            "tumor" => Some(Role::Tumor),
            "non-tumor" => Some(Role::NonTumor),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Motif {
    /// (row, col) offsets; the minimum row and minimum column are both 0.
    pub node_offsets: [(usize, usize); 3],
    pub node_channels: [[f64; N_CHANNELS]; 3],
    pub edges: Vec<(usize, usize)>,
    pub class_specific: Option<usize>,
}

impl Motif {
    /// Translation-invariant geometry: sorted offsets plus edges relabelled
    /// to the sorted order.
    pub fn canonical_geometry(&self) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by_key(|&i| self.node_offsets[i]);
        let rank = |i: usize| order.iter().position(|&o| o == i).unwrap();
        let offsets = order.iter().map(|&i| self.node_offsets[i]).collect();
        let mut edges: Vec<(usize, usize)> = self
            .edges
            .iter()
            .map(|&(a, b)| {
                let (x, y) = (rank(a), rank(b));
                (x.min(y), x.max(y))
            })
            .collect();
        edges.sort_unstable();
        (offsets, edges)
    }

    fn channels_in_canonical_order(&self) -> Vec<[f64; N_CHANNELS]> {
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by_key(|&i| self.node_offsets[i]);
        order.iter().map(|&i| self.node_channels[i]).collect()
    }

    pub fn same_geometry(&self, other: &Motif) -> bool {
        self.canonical_geometry() == other.canonical_geometry()
    }

    /// Equal geometry and equal colours node-for-node.
    pub fn equivalent(&self, other: &Motif) -> bool {
        self.same_geometry(other) && self.channels_in_canonical_order() == other.channels_in_canonical_order()
    }

    pub fn max_offset(&self) -> (usize, usize) {
        let r = self.node_offsets.iter().map(|o| o.0).max().unwrap();
        let c = self.node_offsets.iter().map(|o| o.1).max().unwrap();
        (r, c)
    }

    fn edge_color(&self, a: usize, b: usize) -> [f64; N_CHANNELS] {
        let mut out = [0.0; N_CHANNELS];
        for (ch, o) in out.iter_mut().enumerate() {
            *o = 0.5 * (self.node_channels[a][ch] + self.node_channels[b][ch]);
        }
        out
    }

    /// Pixels (relative to the placement origin) painted by this motif and
    /// their colours, in paint order: edges first, then node discs.
    pub fn stamp(&self, node_radius: usize) -> Vec<((isize, isize), [f64; N_CHANNELS])> {
        let mut px = Vec::new();
        for &(a, b) in &self.edges {
            let color = self.edge_color(a, b);
            let (p, q) = (self.node_offsets[a], self.node_offsets[b]);
            for pt in line_pixels(
                (p.0 as isize, p.1 as isize),
                (q.0 as isize, q.1 as isize),
            ) {
                px.push((pt, color));
            }
        }
        for (i, &(r, c)) in self.node_offsets.iter().enumerate() {
            for pt in disc_pixels((r as isize, c as isize), node_radius) {
                px.push((pt, self.node_channels[i]));
            }
        }
        px
    }
}

/// Pixels of a filled disc: (dy² + dx² ≤ r²).
pub fn disc_pixels(center: (isize, isize), radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                out.push((center.0 + dy, center.1 + dx));
            }
        }
    }
    out
}

/// 1-pixel Bresenham line including both endpoints.
pub fn line_pixels(a: (isize, isize), b: (isize, isize)) -> Vec<(isize, isize)> {
    let (mut y, mut x) = a;
    let dy = -(b.0 - a.0).abs();
    let dx = (b.1 - a.1).abs();
    let sy = if a.0 < b.0 { 1 } else { -1 };
    let sx = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::new();
    loop {
        out.push((y, x));
        if (y, x) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

fn random_geometry(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> ([(usize, usize); 3], Vec<(usize, usize)>) {
    let spacing = cfg.min_node_spacing() as f64;
    loop {
        let mut pts = [(0usize, 0usize); 3];
        for p in pts.iter_mut() {
            *p = (rng.gen_range(0..=cfg.motif_extent), rng.gen_range(0..=cfg.motif_extent));
        }
        let far_enough = (0..3).all(|i| {
            (i + 1..3).all(|j| {
                let dr = pts[i].0 as f64 - pts[j].0 as f64;
                let dc = pts[i].1 as f64 - pts[j].1 as f64;
                (dr * dr + dc * dc).sqrt() >= spacing
            })
        });
        if !far_enough {
            continue;
        }
        let r0 = pts.iter().map(|p| p.0).min().unwrap();
        let c0 = pts.iter().map(|p| p.1).min().unwrap();
        for p in pts.iter_mut() {
            *p = (p.0 - r0, p.1 - c0);
        }
        let edges = if rng.gen_bool(0.5) {
            vec![(0, 1), (0, 2), (1, 2)]
        } else {
            let mid = rng.gen_range(0..3);
            let others: Vec<usize> = (0..3).filter(|&i| i != mid).collect();
            vec![(others[0].min(mid), others[0].max(mid)), (others[1].min(mid), others[1].max(mid))]
        };
        return (pts, edges);
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; N_CHANNELS] {
    loop {
        let mut c = [0.0; N_CHANNELS];
        for v in c.iter_mut() {
            *v = rng.gen::<f64>();
        }
        if c.iter().copied().fold(0.0, f64::max) >= MIN_NODE_PEAK {
            return c;
        }
    }
}

fn chroma_gap(a: &[f64; N_CHANNELS], b: &[f64; N_CHANNELS]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
    let na: f64 = a.iter().map(|p| p * p).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|p| p * p).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Neutral nodes are unconstrained; a class-specific node is redrawn until
/// its colour direction is far from every node already in the library.
fn random_channels(rng: &mut ChaCha8Rng, class_specific: bool, lib: &[Motif]) -> Option<[[f64; N_CHANNELS]; 3]> {
    let mut ch = [[0.0; N_CHANNELS]; 3];
    for node in ch.iter_mut() {
        let mut tries = 0;
        *node = loop {
            tries += 1;
            if tries > 1000 {
                return None;
            }
            let c = random_color(rng);
            let clear = !class_specific
                || lib
                    .iter()
                    .flat_map(|m| m.node_channels.iter())
                    .all(|o| chroma_gap(&c, o) >= MIN_CLASS_CHROMA_GAP);
            if clear {
                break c;
            }
        };
    }
    Some(ch)
}

fn color_gap(a: &Motif, b: &Motif) -> f64 {
    let (ca, cb) = (a.channels_in_canonical_order(), b.channels_in_canonical_order());
    ca.iter()
        .zip(&cb)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// `n_neutral` neutral motifs followed by one class-specific motif per
/// class (class 0, then class 1). Motif ids are library indices.
pub fn build_motif_library(seed: u64, n_neutral: usize, cfg: &SynthConfig) -> Result<Vec<Motif>> {
    if n_neutral == 0 {
        return Err(SynthError::InvalidConfig("n_neutral must be at least 1".into()));
    }
    let mut rng = rng_from_seed(seed);
    let wanted = n_neutral + N_CLASSES;
    let mut lib: Vec<Motif> = Vec::with_capacity(wanted);
    let mut attempts = 0;
    while lib.len() < wanted {
        attempts += 1;
        if attempts > LIBRARY_ATTEMPTS {
            return Err(SynthError::Generation { wanted, attempts: LIBRARY_ATTEMPTS });
        }
        let class_specific = lib.len().checked_sub(n_neutral);
        let (offsets, edges) = match (class_specific, cfg.shared_class_geometry) {
            (Some(1), true) => {
                let first = &lib[n_neutral];
                (first.node_offsets, first.edges.clone())
            }
            _ => random_geometry(&mut rng, cfg),
        };
        let Some(node_channels) = random_channels(&mut rng, class_specific.is_some(), &lib) else {
            lib.clear();
            continue;
        };
        let cand = Motif {
            node_offsets: offsets,
            node_channels,
            edges,
            class_specific,
        };
        let clash = lib.iter().any(|m| {
            let shared_pair = cfg.shared_class_geometry && m.class_specific.is_some() && cand.class_specific.is_some();
            if shared_pair {
                color_gap(m, &cand) < MIN_CLASS_COLOR_GAP
            } else {
                m.same_geometry(&cand)
            }
        });
        if !clash {
            lib.push(cand);
        }
    }
    Ok(lib)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeAnnotation {
    pub row: usize,
    pub col: usize,
    pub motif: usize,
    pub node: usize,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// 3×S×S, values in [0,1], background 0.
    pub image: Tensor,
    pub class_label: usize,
    pub nodes: Vec<NodeAnnotation>,
    pub gt_mask: Mask,
}

impl Sample {
    pub fn image_size(&self) -> usize {
        self.image.shape()[1]
    }
}

fn footprint(motif: &Motif, origin: (usize, usize), size: usize, radius: usize) -> Mask {
    let mut m = Mask::new(size, size);
    for ((dr, dc), _) in motif.stamp(radius) {
        let (r, c) = (origin.0 as isize + dr, origin.1 as isize + dc);
        m.set(r as usize, c as usize, true);
    }
    m
}

fn paint(image: &mut Tensor, motif: &Motif, origin: (usize, usize), radius: usize) {
    let s = image.shape()[1];
    for ((dr, dc), color) in motif.stamp(radius) {
        let (r, c) = ((origin.0 as isize + dr) as usize, (origin.1 as isize + dc) as usize);
        for (ch, v) in color.iter().enumerate() {
            image.data_mut()[ch * s * s + r * s + c] = *v;
        }
    }
}

fn place(
    rng: &mut ChaCha8Rng,
    motif: &Motif,
    motif_id: usize,
    occupied: &mut Mask,
    cfg: &SynthConfig,
) -> Result<(usize, usize, Mask)> {
    let s = cfg.image_size;
    let r = cfg.node_radius;
    let (mr, mc) = motif.max_offset();
    let fail = SynthError::Placement {
        sample: None,
        motif: motif_id,
        attempts: cfg.max_attempts,
    };
    if r + mr + r >= s || r + mc + r >= s {
        return Err(fail);
    }
    for _ in 0..cfg.max_attempts {
        let r0 = rng.gen_range(r..=s - 1 - r - mr);
        let c0 = rng.gen_range(r..=s - 1 - r - mc);
        let fp = footprint(motif, (r0, c0), s, r);
        let grown = fp.dilate(1);
        if !grown.intersects(occupied) {
            occupied.union_with(&grown);
            return Ok((r0, c0, fp));
        }
    }
    Err(fail)
}

/// One image of class `class`: the class motif plus a uniform number of
/// neutral instances in `[neutral_count_min, neutral_count_max]`.
pub fn generate_sample(library: &[Motif], class: usize, cfg: &SynthConfig, seed: u64) -> Result<Sample> {
    let class_id = library
        .iter()
        .position(|m| m.class_specific == Some(class))
        .ok_or_else(|| SynthError::InvalidConfig(format!("library has no motif for class {class}")))?;
    let neutral_ids: Vec<usize> = (0..library.len()).filter(|&i| library[i].class_specific.is_none()).collect();
    if neutral_ids.is_empty() {
        return Err(SynthError::InvalidConfig("library has no neutral motifs".into()));
    }
    let s = cfg.image_size;
    let mut rng = rng_from_seed(seed);
    let mut occupied = Mask::new(s, s);
    let mut placements = Vec::new();

    let (r0, c0, class_fp) = place(&mut rng, &library[class_id], class_id, &mut occupied, cfg)?;
    placements.push((class_id, r0, c0));
    let n_neutral = rng.gen_range(cfg.neutral_count_min..=cfg.neutral_count_max);
    for _ in 0..n_neutral {
        let id = *neutral_ids.choose(&mut rng).unwrap();
        let (r0, c0, _) = place(&mut rng, &library[id], id, &mut occupied, cfg)?;
        placements.push((id, r0, c0));
    }

    let mut image = Tensor::zeros(&[N_CHANNELS, s, s]);
    let mut nodes = Vec::with_capacity(3 * placements.len());
    for &(id, r0, c0) in &placements {
        let motif = &library[id];
        paint(&mut image, motif, (r0, c0), cfg.node_radius);
        let role = if motif.class_specific.is_some() {
            Role::Tumor
        } else {
            Role::NonTumor
        };
        for (node, &(dr, dc)) in motif.node_offsets.iter().enumerate() {
            nodes.push(NodeAnnotation {
                row: r0 + dr,
                col: c0 + dc,
                motif: id,
                node,
                role,
            });
        }
    }
    Ok(Sample {
        id: 0,
        image,
        class_label: class,
        nodes,
        gt_mask: class_fp.dilate(1),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub fractions: (f64, f64, f64),
}

impl DatasetSplit {
    pub fn split(&self, name: SplitName) -> &[Sample] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, name: SplitName) -> &mut Vec<Sample> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Val => &mut self.val,
            SplitName::Test => &mut self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn library_seed(master: u64) -> u64 {
    derive_seed(master, STREAM_LIBRARY, 0)
}

/// Sample `i` has class `i % 2` and seed `derive_seed(master, STREAM_SAMPLE, i)`;
/// splits are contiguous index blocks (train, val, test).
pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let library = build_motif_library(library_seed(seed), cfg.n_neutral_motifs, cfg)?;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let mut s = generate_sample(&library, i % N_CLASSES, cfg, derive_seed(seed, STREAM_SAMPLE, i as u64))
            .map_err(|e| match e {
                SynthError::Placement { motif, attempts, .. } => SynthError::Placement {
                    sample: Some(i),
                    motif,
                    attempts,
                },
                other => other,
            })?;
        s.id = i;
        samples.push(s);
    }
    let (n_train, n_val, _) = cfg.split_sizes();
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok(DatasetSplit {
        train: samples,
        val,
        test,
        fractions: (cfg.train_fraction, cfg.val_fraction, cfg.test_fraction),
    })
}

/// Replaces every foreground pixel's channel vector with (0.5, 0.5, 0.5),
/// keeping geometry, masks and annotations untouched.
pub fn ablate_constant_cells(data: &DatasetSplit) -> DatasetSplit {
    let mut out = data.clone();
    for name in SplitName::ALL {
        for s in out.split_mut(name) {
            let size = s.image_size();
            let plane = size * size;
            let d = s.image.data_mut();
            for p in 0..plane {
                if (0..N_CHANNELS).any(|c| d[c * plane + p] != 0.0) {
                    for c in 0..N_CHANNELS {
                        d[c * plane + p] = 0.5;
                    }
                }
            }
        }
    }
    out
}

fn ptn_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + t.len() * 8);
    write_ptn(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

fn annotation_tsv(samples: &[Sample]) -> String {
    let mut out = String::from("idx\tclass\tnodes\n");
    for s in samples {
        let nodes: Vec<String> = s
            .nodes
            .iter()
            .map(|n| format!("{},{},{},{},{}", n.row, n.col, n.motif, n.node, n.role.as_str()))
            .collect();
        let _ = writeln!(out, "{}\t{}\t{}", s.id, s.class_label, nodes.join(";"));
    }
    out
}

/// Writes the dataset layout: `images/{split}/{idx}.ptn`,
/// `masks/{split}/{idx}.ptn`, `annotations/{split}.tsv` and `manifest.txt`.
pub fn write_dataset(dir: &Path, data: &DatasetSplit, manifest: &str) -> Result<()> {
    for name in SplitName::ALL {
        let samples = data.split(name);
        for s in samples {
            write_atomic(
                &dir.join("images").join(name.as_str()).join(format!("{}.ptn", s.id)),
                &ptn_bytes(&s.image),
            )?;
            write_atomic(
                &dir.join("masks").join(name.as_str()).join(format!("{}.ptn", s.id)),
                &ptn_bytes(&s.gt_mask.to_tensor()),
            )?;
        }
        write_atomic(
            &dir.join("annotations").join(format!("{}.tsv", name.as_str())),
            annotation_tsv(samples).as_bytes(),
        )?;
    }
    write_atomic(&dir.join("manifest.txt"), manifest.as_bytes())?;
    Ok(())
}

/// Manifest text: master seed followed by the effective generator config.
pub fn manifest_text(cfg: &SynthConfig, seed: u64) -> String {
    let body = toml::to_string(cfg).expect("config serialises");
    format!("seed = {seed}\n\n[synthgen]\n{body}")
}

fn malformed(path: &Path, reason: impl Into<String>) -> SynthError {
    SynthError::Malformed {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn parse_annotations(path: &Path) -> Result<Vec<(usize, usize, Vec<NodeAnnotation>)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(malformed(path, format!("line {}: expected 3 columns", ln + 1)));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| malformed(path, format!("line {}: bad number {s:?}", ln + 1)));
        let idx = num(cols[0])?;
        let class = num(cols[1])?;
        let mut nodes = Vec::new();
        for item in cols[2].split(';').filter(|s| !s.is_empty()) {
            let f: Vec<&str> = item.split(',').collect();
            if f.len() != 5 {
                return Err(malformed(path, format!("line {}: bad node {item:?}", ln + 1)));
            }
            let role = Role::parse(f[4]).ok_or_else(|| malformed(path, format!("bad role {:?}", f[4])))?;
            nodes.push(NodeAnnotation {
                row: num(f[0])?,
                col: num(f[1])?,
                motif: num(f[2])?,
                node: num(f[3])?,
                role,
            });
        }
        rows.push((idx, class, nodes));
    }
    Ok(rows)
}

/// Reads a dataset directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    if !dir.join("manifest.txt").is_file() {
        return Err(malformed(dir, "missing manifest.txt"));
    }
    let mut out = DatasetSplit {
        train: vec![],
        val: vec![],
        test: vec![],
        fractions: (0.0, 0.0, 0.0),
    };
    for name in SplitName::ALL {
        let ann = dir.join("annotations").join(format!("{}.tsv", name.as_str()));
        for (idx, class, nodes) in parse_annotations(&ann)? {
            let img_path = dir.join("images").join(name.as_str()).join(format!("{idx}.ptn"));
            let image = read_ptn_file(&img_path)?;
            if image.rank() != 3 || image.shape()[0] != N_CHANNELS {
                return Err(malformed(&img_path, format!("expected 3×S×S image, got {:?}", image.shape())));
            }
            let mask_path = dir.join("masks").join(name.as_str()).join(format!("{idx}.ptn"));
            let gt_mask =
                Mask::from_tensor(&read_ptn_file(&mask_path)?).ok_or_else(|| malformed(&mask_path, "mask is not H×W"))?;
            out.split_mut(name).push(Sample {
                id: idx,
                image,
                class_label: class,
                nodes,
                gt_mask,
            });
        }
    }
    let n = out.len().max(1) as f64;
    out.fractions = (out.train.len() as f64 / n, out.val.len() as f64 / n, out.test.len() as f64 / n);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_samples: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn library_cardinality_and_determinism() {
        let cfg = SynthConfig::default();
        let a = build_motif_library(1, 4, &cfg).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a.iter().filter(|m| m.class_specific.is_some()).count(), 2);
        assert_eq!(a[4].class_specific, Some(0));
        assert_eq!(a[5].class_specific, Some(1));
        assert_eq!(a, build_motif_library(1, 4, &cfg).unwrap());
        assert!(build_motif_library(1, 0, &cfg).is_err());
    }

    #[test]
    fn shared_geometry_variant_differs_only_in_colour() {
        let cfg = SynthConfig {
            shared_class_geometry: true,
            ..SynthConfig::default()
        };
        let lib = build_motif_library(3, 4, &cfg).unwrap();
        assert!(lib[4].same_geometry(&lib[5]));
        assert!(!lib[4].equivalent(&lib[5]));
        for n in &lib[..4] {
            assert!(!n.same_geometry(&lib[4]));
        }
    }

    #[test]
    fn disc_of_radius_two_has_13_pixels() {
        assert_eq!(disc_pixels((10, 10), 2).len(), 13);
    }

    #[test]
    fn empty_neutral_set_leaves_only_the_class_motif() {
        let cfg = SynthConfig {
            neutral_count_min: 0,
            neutral_count_max: 0,
            ..small_cfg()
        };
        let lib = build_motif_library(2, 3, &cfg).unwrap();
        let s = generate_sample(&lib, 1, &cfg, 99).unwrap();
        assert_eq!(s.nodes.len(), 3);
        assert!(s.nodes.iter().all(|n| n.role == Role::Tumor && n.motif == 4));
        let size = cfg.image_size;
        let fg = Mask::from_fn(size, size, |r, c| (0..3).any(|ch| s.image.at(&[ch, r, c]) != 0.0));
        assert_eq!(fg.dilate(1), s.gt_mask);
    }

    #[test]
    fn sample_generation_is_deterministic() {
        let cfg = small_cfg();
        let lib = build_motif_library(2, 4, &cfg).unwrap();
        let a = generate_sample(&lib, 0, &cfg, 5).unwrap();
        let b = generate_sample(&lib, 0, &cfg, 5).unwrap();
        assert_eq!(a.image.to_le_bytes(), b.image.to_le_bytes());
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_placement_is_an_error() {
        let cfg = SynthConfig {
            image_size: 16,
            neutral_count_min: 6,
            neutral_count_max: 6,
            max_attempts: 50,
            ..small_cfg()
        };
        let err = generate_dataset(&cfg, 1).unwrap_err();
        assert!(matches!(err, SynthError::Placement { sample: Some(0), .. }), "{err}");
    }

    #[test]
    fn split_sizes_and_balance() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.split_sizes(), (360, 120, 120));
        let data = generate_dataset(&small_cfg(), 4).unwrap();
        assert_eq!((data.train.len(), data.val.len(), data.test.len()), (12, 4, 4));
        for name in SplitName::ALL {
            let part = data.split(name);
            let ones = part.iter().filter(|s| s.class_label == 1).count();
            assert!((2 * ones).abs_diff(part.len()) <= 1);
        }
    }

    #[test]
    fn bad_fractions_are_rejected() {
        let cfg = SynthConfig {
            val_fraction: 0.3,
            ..SynthConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(SynthError::InvalidConfig(_))));
    }

    #[test]
    fn constant_cells_keeps_background_and_geometry() {
        let data = generate_dataset(&small_cfg(), 8).unwrap();
        let ablated = ablate_constant_cells(&data);
        for (a, b) in data.all().zip(ablated.all()) {
            assert_eq!(a.gt_mask, b.gt_mask);
            assert_eq!(a.nodes, b.nodes);
            for (x, y) in a.image.data().iter().zip(b.image.data()) {
                if *x == 0.0 {
                    assert!(*y == 0.0 || *y == 0.5);
                } else {
                    assert_eq!(*y, 0.5);
                }
            }
        }
    }
}
