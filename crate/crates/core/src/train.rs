//! Optimisation: composite loss, Adam, step schedule, prototype push,
//! the epoch loop and the two ablations.

use std::fmt::Write as _;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{argmax, Model, ModelError, Provenance, Trainable};
use crate::rng::{derived_rng, STREAM_ABLATION, STREAM_BATCH};
use crate::synthgen::{DatasetSplit, Sample};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("non-finite gradient for parameter {param} at epoch {epoch}, batch {batch}")]
    NonFiniteGradient { epoch: usize, batch: usize, param: usize },
    #[error("loss diverged (non-finite) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("push verification failed for prototype {prototype}: {reason}")]
    PushVerification { prototype: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_step: usize,
    pub lr_gamma: f64,
    pub push_interval: usize,
    pub lambda_clst: f64,
    pub lambda_sep: f64,
    /// Head-only epochs run on cached scores after each push.
    pub last_layer_epochs: usize,
    /// Full-batch head fitting used by the random-prototype ablation.
    pub head_iterations: usize,
    pub head_learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            learning_rate: 1e-3,
            lr_step: 20,
            lr_gamma: 0.5,
            push_interval: 10,
            lambda_clst: 0.8,
            lambda_sep: 0.08,
            last_layer_epochs: 0,
            head_iterations: 3000,
            head_learning_rate: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.lr_step == 0 {
            return bad("lr_step must be at least 1");
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad("lr_gamma must lie in (0, 1]");
        }
        if self.push_interval == 0 {
            return bad("push_interval must be at least 1");
        }
        if !self.lambda_clst.is_finite() || !self.lambda_sep.is_finite() {
            return bad("loss weights must be finite");
        }
        if !(self.head_learning_rate > 0.0) {
            return bad("head_learning_rate must be positive");
        }
        Ok(())
    }
}

pub fn steplr(epoch: usize, base_lr: f64, step: usize, gamma: f64) -> f64 {
    base_lr * gamma.powi((epoch / step.max(1)) as i32)
}

fn check_ownership(class_of: &[usize], n_classes: usize) -> Result<()> {
    for c in 0..n_classes {
        if !class_of.contains(&c) {
            return Err(TrainError::InvalidConfig(format!("class {c} owns no prototype")));
        }
    }
    Ok(())
}

/// CE + λ_clst·mean(own-class min g) − λ_sep·mean(other-class min g).
pub fn record_composite_loss(
    tape: &mut Tape,
    logits: Var,
    scores: Var,
    labels: &[usize],
    class_of: &[usize],
    lambda_clst: f64,
    lambda_sep: f64,
) -> Result<Var> {
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    if lambda_clst == 0.0 && lambda_sep == 0.0 {
        return Ok(ce);
    }
    let own: Vec<bool> = labels.iter().flat_map(|&y| class_of.iter().map(move |&c| c == y)).collect();
    let other: Vec<bool> = own.iter().map(|b| !b).collect();
    let clst_min = tape.masked_row_min(scores, &own)?;
    let clst = tape.mean(clst_min)?;
    let sep_min = tape.masked_row_min(scores, &other)?;
    let sep = tape.mean(sep_min)?;
    let a = tape.scale(clst, lambda_clst);
    let b = tape.scale(sep, -lambda_sep);
    let ab = tape.add(a, b)?;
    Ok(tape.add(ce, ab)?)
}

/// Composite loss evaluated on plain values (no tape).
pub fn composite_loss(
    logits: &[Vec<f64>],
    scores: &[Vec<f64>],
    labels: &[usize],
    class_of: &[usize],
    lambda_clst: f64,
    lambda_sep: f64,
) -> Result<f64> {
    let b = labels.len();
    if b == 0 || logits.len() != b || scores.len() != b {
        return Err(TrainError::InvalidState("empty or ragged batch".into()));
    }
    let k = logits[0].len();
    let m = class_of.len();
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![b, k], logits.concat())?);
    let s = tape.constant(Tensor::new(vec![b, m], scores.concat())?);
    let out = record_composite_loss(&mut tape, l, s, labels, class_of, lambda_clst, lambda_sep)?;
    Ok(tape.value(out).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(shapes: &[&[usize]]) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
        }
    }

    pub fn for_model(model: &Model) -> Adam {
        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        Adam::new(&refs)
    }

    /// One bias-corrected step. Parameters whose gradient is `None` are left
    /// untouched along with their moments. Nothing is modified when any
    /// gradient is non-finite; the offending index is returned instead.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Option<Tensor>], lr: f64) -> std::result::Result<(), usize> {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter count mismatch");
        if let Some(bad) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.is_finite())) {
            return Err(bad);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            assert_eq!(g.shape(), p.shape(), "gradient shape mismatch for parameter {i}");
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pi, gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PushEntry {
    pub prototype: usize,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PushReport {
    /// Epoch after which the push ran; `None` for the initial push.
    pub epoch: Option<usize>,
    pub entries: Vec<PushEntry>,
}

/// Latent tensors for `samples` under the current encoder.
pub fn encode_all(model: &Model, samples: &[Sample]) -> Result<Vec<Tensor>> {
    samples.iter().map(|s| Ok(model.encode(&s.image)?)).collect()
}

/// Projects each prototype onto the nearest latent patch of `train`
/// (cosine distance; ties → lowest (sample, row, col)).
pub fn push_prototypes(model: &mut Model, train: &[Sample]) -> Result<PushReport> {
    if train.is_empty() {
        return Err(TrainError::InvalidState("cannot push onto an empty train set".into()));
    }
    let latents = encode_all(model, train)?;
    push_onto_latents(model, train, &latents)
}

pub fn push_onto_latents(model: &mut Model, train: &[Sample], latents: &[Tensor]) -> Result<PushReport> {
    let m = model.n_prototypes();
    let mut best: Vec<Option<(f64, usize, usize, usize)>> = vec![None; m];
    for (i, z) in latents.iter().enumerate() {
        let f = distance_maps(model, z)?;
        let (h, w) = (f.shape()[1], f.shape()[2]);
        for (j, b) in best.iter_mut().enumerate() {
            let map = &f.data()[j * h * w..(j + 1) * h * w];
            for (loc, &d) in map.iter().enumerate() {
                if b.is_none_or(|(bd, ..)| d < bd) {
                    *b = Some((d, i, loc / w, loc % w));
                }
            }
        }
    }
    let mut entries = Vec::with_capacity(m);
    for (j, b) in best.into_iter().enumerate() {
        let (d, i, r, c) = b.expect("non-empty train set");
        let patch = latent_patch(model, &latents[i], r, c);
        model.prototypes.set_vector(j, &patch);
        let prov = Provenance {
            sample: train[i].id,
            row: r,
            col: c,
            distance_before: d,
        };
        model.prototypes.provenance[j] = Some(prov);
        entries.push(PushEntry {
            prototype: j,
            provenance: prov,
        });
    }
    Ok(PushReport { epoch: None, entries })
}

fn distance_maps(model: &Model, latent: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, Trainable::NONE);
    let z = tape.constant(latent.clone());
    let s = model.record_prototype_layer(&mut tape, &vars, z)?;
    Ok(tape.value(s.maps).clone())
}

/// Latent window at (r, c) flattened in prototype layout (D, dy, dx).
pub fn latent_patch(model: &Model, latent: &Tensor, r: usize, c: usize) -> Vec<f64> {
    let (d, h, w) = (latent.shape()[0], latent.shape()[1], latent.shape()[2]);
    let (ph, pw) = (model.config.prototype_height, model.config.prototype_width);
    let mut out = Vec::with_capacity(d * ph * pw);
    for ch in 0..d {
        for dy in 0..ph {
            for dx in 0..pw {
                out.push(latent.data()[ch * h * w + (r + dy) * w + (c + dx)]);
            }
        }
    }
    out
}

/// Re-runs the provenance samples and checks that every prototype has
/// distance exactly 0 at its recorded location and similarity exactly 1.
pub fn verify_push(model: &Model, data: &DatasetSplit) -> Result<()> {
    for j in 0..model.n_prototypes() {
        let fail = |reason: String| TrainError::PushVerification { prototype: j, reason };
        let prov = model.prototypes.provenance[j].ok_or_else(|| fail("no provenance".into()))?;
        let sample = data
            .all()
            .find(|s| s.id == prov.sample)
            .ok_or_else(|| fail(format!("sample {} not in dataset", prov.sample)))?;
        let f = model.forward(&sample.image)?;
        let (h, w) = (f.maps.shape()[1], f.maps.shape()[2]);
        let d = f.maps.data()[j * h * w + prov.row * w + prov.col];
        if d != 0.0 {
            return Err(fail(format!("distance at provenance is {d:e}")));
        }
        let s = f.similarities()[j];
        if s != 1.0 {
            return Err(fail(format!("similarity on provenance sample is {s}")));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
    pub pushed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub pushes: Vec<PushReport>,
    pub best_epoch: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

fn fmt_f(v: f64) -> String {
    format!("{v:.17e}")
}

impl RunRecord {
    /// `epoch, split, loss, accuracy, lr, push_flag`; the final row holds
    /// the test evaluation of the selected (best-val) model.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tsplit\tloss\taccuracy\tlr\tpush_flag\n");
        for e in &self.epochs {
            let p = e.pushed as u8;
            let _ = writeln!(s, "{}\ttrain\t{}\t{}\t{}\t{p}", e.epoch, fmt_f(e.train_loss), fmt_f(e.train_accuracy), fmt_f(e.lr));
            let _ = writeln!(s, "{}\tval\t{}\t{}\t{}\t{p}", e.epoch, fmt_f(e.val_loss), fmt_f(e.val_accuracy), fmt_f(e.lr));
        }
        let lr = self.epochs.get(self.best_epoch).map_or(0.0, |e| e.lr);
        let _ = writeln!(
            s,
            "{}\ttest\t{}\t{}\t{}\t1",
            self.best_epoch,
            fmt_f(self.test_loss),
            fmt_f(self.test_accuracy),
            fmt_f(lr)
        );
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Best {
    pub epoch: usize,
    pub val_accuracy: f64,
    pub model: Model,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub seed: u64,
    /// Next epoch to run.
    pub epoch: usize,
    pub model: Model,
    pub optimizer: Adam,
    pub best: Option<Best>,
    pub records: Vec<EpochRecord>,
    pub pushes: Vec<PushReport>,
}

impl TrainState {
    /// Fresh state: the initial push is applied immediately.
    pub fn start(mut model: Model, data: &DatasetSplit, seed: u64) -> Result<TrainState> {
        let mut report = push_prototypes(&mut model, &data.train)?;
        verify_push(&model, data)?;
        report.epoch = None;
        Ok(TrainState {
            seed,
            epoch: 0,
            optimizer: Adam::for_model(&model),
            model,
            best: None,
            records: vec![],
            pushes: vec![report],
        })
    }

    pub fn is_finished(&self, cfg: &TrainConfig) -> bool {
        self.epoch >= cfg.epochs
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Composite loss and accuracy over `samples`, in chunks of `batch` for the
/// loss means.
pub fn evaluate(model: &Model, samples: &[Sample], cfg: &TrainConfig) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(TrainError::InvalidState("evaluation on an empty split".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for s in samples {
        let f = model.forward(&s.image)?;
        loss += composite_loss(
            std::slice::from_ref(&f.logits),
            std::slice::from_ref(&f.scores),
            &[s.class_label],
            &model.prototypes.class_of,
            cfg.lambda_clst,
            cfg.lambda_sep,
        )?;
        if f.predicted_class() == s.class_label {
            correct += 1;
        }
    }
    Ok(Evaluation {
        loss: loss / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
    })
}

pub fn accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    let mut correct = 0;
    for s in samples {
        if model.forward(&s.image)?.predicted_class() == s.class_label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

fn is_push_epoch(epoch: usize, cfg: &TrainConfig) -> bool {
    (epoch + 1).is_multiple_of(cfg.push_interval) || epoch + 1 == cfg.epochs
}

/// Runs one epoch of joint training (plus the push/selection bookkeeping
/// that follows it).
pub fn run_epoch(state: &mut TrainState, data: &DatasetSplit, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    check_ownership(&state.model.prototypes.class_of, state.model.config.n_classes)?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(TrainError::InvalidState("train and val splits must be non-empty".into()));
    }
    let epoch = state.epoch;
    let lr = steplr(epoch, cfg.learning_rate, cfg.lr_step, cfg.lr_gamma);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    order.shuffle(&mut derived_rng(state.seed, STREAM_BATCH, epoch as u64));

    let class_of = state.model.prototypes.class_of.clone();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let xs: Vec<&Tensor> = chunk.iter().map(|&i| &data.train[i].image).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| data.train[i].class_label).collect();
        let mut tape = Tape::new();
        let vars = state.model.register(&mut tape, Trainable::ALL);
        let b = state.model.record_batch(&mut tape, &vars, &xs)?;
        let loss = record_composite_loss(&mut tape, b.logits, b.scores, &labels, &class_of, cfg.lambda_clst, cfg.lambda_sep)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(TrainError::Diverged { epoch, batch: bi });
        }
        loss_sum += lv * chunk.len() as f64;
        let k = state.model.config.n_classes;
        for (r, &y) in tape.value(b.logits).data().chunks(k).zip(&labels) {
            if argmax(r) == y {
                correct += 1;
            }
        }
        let mut grads = tape.backward(loss)?;
        let g: Vec<Option<Tensor>> = vars.params.iter().map(|&v| grads.take(v)).collect();
        let mut params = state.model.params_mut();
        state
            .optimizer
            .step(&mut params, &g, lr)
            .map_err(|param| TrainError::NonFiniteGradient { epoch, batch: bi, param })?;
    }

    let pushed = is_push_epoch(epoch, cfg);
    if pushed {
        let mut report = push_prototypes(&mut state.model, &data.train)?;
        verify_push(&state.model, data)?;
        report.epoch = Some(epoch);
        state.pushes.push(report);
        if cfg.last_layer_epochs > 0 {
            last_layer_stage(state, data, cfg, lr)?;
        }
    }
    let val = evaluate(&state.model, &data.val, cfg)?;
    let n = data.train.len() as f64;
    state.records.push(EpochRecord {
        epoch,
        train_loss: loss_sum / n,
        train_accuracy: correct as f64 / n,
        val_loss: val.loss,
        val_accuracy: val.accuracy,
        lr,
        pushed,
    });
    info!(
        "epoch {epoch}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}{}",
        loss_sum / n,
        correct as f64 / n,
        val.loss,
        val.accuracy,
        if pushed { " (push)" } else { "" }
    );
    if pushed && state.best.as_ref().is_none_or(|b| val.accuracy > b.val_accuracy) {
        state.best = Some(Best {
            epoch,
            val_accuracy: val.accuracy,
            model: state.model.clone(),
        });
    }
    state.epoch += 1;
    Ok(())
}

fn last_layer_stage(state: &mut TrainState, data: &DatasetSplit, cfg: &TrainConfig, lr: f64) -> Result<()> {
    let scores = score_matrix(&state.model, &data.train)?;
    let labels: Vec<usize> = data.train.iter().map(|s| s.class_label).collect();
    let n_params = state.model.params().len();
    for e in 0..cfg.last_layer_epochs {
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut derived_rng(state.seed, STREAM_BATCH, ((state.epoch as u64) << 16) | (e as u64 + 1)));
        for chunk in order.chunks(cfg.batch_size) {
            let (g, _) = head_gradient(&state.model, chunk.iter().map(|&i| &scores[i]), chunk.iter().map(|&i| labels[i]))?;
            let mut grads: Vec<Option<Tensor>> = vec![None; n_params];
            grads[n_params - 2] = Some(g.0);
            grads[n_params - 1] = Some(g.1);
            let mut params = state.model.params_mut();
            state
                .optimizer
                .step(&mut params, &grads, lr)
                .map_err(|param| TrainError::NonFiniteGradient { epoch: state.epoch, batch: 0, param })?;
        }
    }
    Ok(())
}

/// Score vectors g for every sample.
pub fn score_matrix(model: &Model, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples.iter().map(|s| Ok(model.forward(&s.image)?.scores)).collect()
}

/// Cross-entropy gradient w.r.t. the head on fixed scores.
fn head_gradient<'a>(
    model: &Model,
    scores: impl Iterator<Item = &'a Vec<f64>>,
    labels: impl Iterator<Item = usize>,
) -> Result<((Tensor, Tensor), f64)> {
    let rows: Vec<f64> = scores.flat_map(|s| s.iter().copied()).collect();
    let labels: Vec<usize> = labels.collect();
    let m = model.n_prototypes();
    let mut tape = Tape::new();
    let w = tape.param(model.head.weight.clone());
    let b = tape.param(model.head.bias.clone());
    let g = tape.constant(Tensor::new(vec![labels.len(), m], rows)?);
    let neg = tape.scale(g, -1.0);
    let sims = tape.shift(neg, 1.0);
    let wt = tape.transpose(w)?;
    let z = tape.matmul(sims, wt)?;
    let logits = tape.row_bias(z, b)?;
    let loss = tape.softmax_cross_entropy(logits, &labels)?;
    let lv = tape.value(loss).item();
    let mut grads = tape.backward(loss)?;
    let gw = grads.take(w).expect("head weight gradient");
    let gb = grads.take(b).expect("head bias gradient");
    Ok(((gw, gb), lv))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadFit {
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Full-batch Adam on the head alone (cross-entropy on fixed scores), with
/// the learning rate halved every `iterations/6` steps.
pub fn train_head(model: &mut Model, scores: &[Vec<f64>], labels: &[usize], iterations: usize, lr: f64) -> Result<HeadFit> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(TrainError::InvalidState("head training needs matching, non-empty scores and labels".into()));
    }
    let shapes = [model.head.weight.shape().to_vec(), model.head.bias.shape().to_vec()];
    let mut adam = Adam::new(&[&shapes[0], &shapes[1]]);
    let step = (iterations / 6).max(1);
    let (_, initial_loss) = head_gradient(model, scores.iter(), labels.iter().copied())?;
    for it in 0..iterations {
        let ((gw, gb), _) = head_gradient(model, scores.iter(), labels.iter().copied())?;
        let mut params = [&mut model.head.weight, &mut model.head.bias];
        adam.step(&mut params, &[Some(gw), Some(gb)], steplr(it, lr, step, 0.5))
            .map_err(|param| TrainError::NonFiniteGradient { epoch: 0, batch: it, param })?;
    }
    let (_, final_loss) = head_gradient(model, scores.iter(), labels.iter().copied())?;
    Ok(HeadFit { initial_loss, final_loss })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// Best-val model (the one evaluated on test).
    pub best: Model,
    pub last: Model,
}

pub fn finish(state: &TrainState, data: &DatasetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let best = state
        .best
        .as_ref()
        .ok_or_else(|| TrainError::InvalidState("no post-push model has been selected".into()))?;
    let test = if data.test.is_empty() {
        warn!("test split is empty; reporting NaN test metrics");
        Evaluation {
            loss: f64::NAN,
            accuracy: f64::NAN,
        }
    } else {
        evaluate(&best.model, &data.test, cfg)?
    };
    Ok(TrainOutcome {
        record: RunRecord {
            seed: state.seed,
            epochs: state.records.clone(),
            pushes: state.pushes.clone(),
            best_epoch: best.epoch,
            test_loss: test.loss,
            test_accuracy: test.accuracy,
        },
        best: best.model.clone(),
        last: state.model.clone(),
    })
}

/// Initial push, `cfg.epochs` epochs, best-val selection, test evaluation.
pub fn train_loop(cfg: &TrainConfig, data: &DatasetSplit, model: Model, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_ownership(&model.prototypes.class_of, model.config.n_classes)?;
    let mut state = TrainState::start(model, data, seed)?;
    while !state.is_finished(cfg) {
        run_epoch(&mut state, data, cfg)?;
    }
    finish(&state, data, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutcome {
    pub model: Model,
    pub head_fit: HeadFit,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// Draws one uniformly random (train index, row, col) per prototype.
pub fn random_patch_choices(n_train: usize, grid: (usize, usize), m: usize, seed: u64) -> Vec<(usize, usize, usize)> {
    let mut rng = derived_rng(seed, STREAM_ABLATION, 1);
    (0..m)
        .map(|_| (rng.gen_range(0..n_train), rng.gen_range(0..grid.0), rng.gen_range(0..grid.1)))
        .collect()
}

/// Freezes the encoder, re-initialises the prototypes and pushes them onto
/// uniformly random train patches, then refits the head from its default
/// initialisation.
pub fn ablate_random_prototypes(trained: &Model, data: &DatasetSplit, cfg: &TrainConfig, seed: u64) -> Result<AblationOutcome> {
    if data.train.is_empty() {
        return Err(TrainError::InvalidState("empty train split".into()));
    }
    let mut model = trained.clone();
    let mut rng = derived_rng(seed, STREAM_ABLATION, 0);
    model.prototypes.vectors.data_mut().iter_mut().for_each(|v| *v = rng.gen::<f64>());
    let latents = encode_all(&model, &data.train)?;
    let (h, w) = (latents[0].shape()[1], latents[0].shape()[2]);
    let grid = (h - model.config.prototype_height + 1, w - model.config.prototype_width + 1);
    let m = model.n_prototypes();
    for (j, (i, r, c)) in random_patch_choices(data.train.len(), grid, m, seed).into_iter().enumerate() {
        let before = distance_maps(&model, &latents[i])?;
        let distance_before = before.data()[j * grid.0 * grid.1 + r * grid.1 + c];
        let patch = latent_patch(&model, &latents[i], r, c);
        model.prototypes.set_vector(j, &patch);
        model.prototypes.provenance[j] = Some(Provenance {
            sample: data.train[i].id,
            row: r,
            col: c,
            distance_before,
        });
    }
    model.head = Model::default_head(model.config.n_classes, &model.prototypes.class_of);
    let scores: Vec<Vec<f64>> = latents.iter().map(|z| model.scores_from_latent(z)).collect::<Result<_, _>>()?;
    let labels: Vec<usize> = data.train.iter().map(|s| s.class_label).collect();
    let head_fit = train_head(&mut model, &scores, &labels, cfg.head_iterations, cfg.head_learning_rate)?;
    let train_accuracy = accuracy(&model, &data.train)?;
    let val_accuracy = accuracy(&model, &data.val)?;
    let test_accuracy = accuracy(&model, &data.test)?;
    Ok(AblationOutcome {
        model,
        head_fit,
        train_accuracy,
        val_accuracy,
        test_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steplr_examples() {
        assert_eq!(steplr(5, 1e-3, 20, 0.5), 1e-3);
        assert_eq!(steplr(20, 1e-3, 20, 0.5), 5e-4);
        assert_eq!(steplr(60, 1e-3, 20, 0.5), 1.25e-4);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut p = Tensor::scalar(0.0);
        let mut adam = Adam::new(&[&[]]);
        adam.step(&mut [&mut p], &[Some(Tensor::scalar(1.0))], 1e-3).unwrap();
        assert!((p.item() + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Tensor::scalar(0.7);
        let mut adam = Adam::new(&[&[]]);
        adam.step(&mut [&mut p], &[Some(Tensor::scalar(0.0))], 1e-3).unwrap();
        assert_eq!(p.item(), 0.7);
    }

    #[test]
    fn adam_two_steps_match_unrolled_recurrence() {
        let (g, lr, b1, b2, eps) = (0.3f64, 0.01, 0.9f64, 0.999f64, 1e-8);
        let mut p = Tensor::scalar(1.0);
        let mut adam = Adam::new(&[&[]]);
        for _ in 0..2 {
            adam.step(&mut [&mut p], &[Some(Tensor::scalar(g))], lr).unwrap();
        }
        let (m1, v1) = ((1.0 - b1) * g, (1.0 - b2) * g * g);
        let x1 = 1.0 - lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let (m2, v2) = (b1 * m1 + (1.0 - b1) * g, b2 * v1 + (1.0 - b2) * g * g);
        let x2 = x1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p.item() - x2).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = Tensor::scalar(1.0);
        let mut adam = Adam::new(&[&[]]);
        assert_eq!(adam.step(&mut [&mut p], &[Some(Tensor::scalar(f64::NAN))], 1e-3), Err(0));
        assert_eq!(p.item(), 1.0);
        assert_eq!(adam.t, 0);
    }

    #[test]
    fn zero_weights_reduce_to_cross_entropy() {
        let logits = vec![vec![0.2, -0.4], vec![1.0, 0.5]];
        let scores = vec![vec![0.1, 0.6], vec![0.9, 0.3]];
        let full = composite_loss(&logits, &scores, &[0, 1], &[0, 1], 0.0, 0.0).unwrap();
        let ce = |z: &[f64], y: usize| {
            let lse = (z[0].exp() + z[1].exp()).ln();
            lse - z[y]
        };
        assert_eq!(full, (ce(&logits[0], 0) + ce(&logits[1], 1)) / 2.0);
    }

    #[test]
    fn cluster_term_vanishes_at_zero_own_distance() {
        let logits = vec![vec![0.0, 0.0]];
        let with = composite_loss(&logits, &[vec![0.0, 0.4]], &[0], &[0, 1], 0.8, 0.0).unwrap();
        assert_eq!(with, 2f64.ln());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            push_interval: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_gamma: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn class_without_prototype_is_rejected() {
        assert!(check_ownership(&[0, 0], 2).is_err());
        assert!(check_ownership(&[1, 0], 2).is_ok());
    }
}
