//! Command implementations behind the `protomotif` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use protomotif::fsutil::write_atomic;
use protomotif::interpret::{interpretation_report, motif_recovery, InterpretConfig, Recovery};
use protomotif::model::Model;
use protomotif::oracles::{composite_gradcheck, oracle_suite, GradCheckOutcome, OracleResult};
use protomotif::preprocess::Preprocessor;
use protomotif::synthgen::{
    ablate_constant_cells, generate_dataset, load_dataset, manifest_text, write_dataset, DatasetSplit, Sample, SplitName,
};
use protomotif::train::{
    ablate_random_prototypes, accuracy, evaluate, finish, run_epoch, Best, Evaluation, PushReport, RunRecord, TrainState,
};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, CONFIG_FILE};
use crate::export::{map_file_name, map_to_pgm, overlay_file_name, overlay_ppm};

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const RECORD_FILE: &str = "record.tsv";
pub const PUSH_FILE: &str = "pushes.tsv";

fn ensure_fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        ensure!(dir.is_dir(), "{} exists and is not a directory", dir.display());
        ensure!(
            fs::read_dir(dir)?.next().is_none(),
            "output directory {} is not empty",
            dir.display()
        );
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn echo_config(dir: &Path, text: &str) -> Result<()> {
    write_atomic(&dir.join(CONFIG_FILE), text.as_bytes()).context("writing config echo")
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<DatasetSplit> {
    cfg.validate()?;
    let data = generate_dataset(&cfg.synthgen, cfg.seed)?;
    ensure_fresh_dir(out)?;
    write_dataset(out, &data, &manifest_text(&cfg.synthgen, cfg.seed))?;
    echo_config(out, &cfg.to_toml())?;
    info!("wrote {} samples to {}", data.len(), out.display());
    Ok(data)
}

pub fn load_data(dir: &Path) -> Result<DatasetSplit> {
    ensure!(dir.is_dir(), "dataset directory {} does not exist", dir.display());
    load_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

/// Replaces every image by its preprocessed version.
pub fn apply_preprocessor(data: &DatasetSplit, p: &Preprocessor) -> Result<DatasetSplit> {
    let mut out = data.clone();
    for name in SplitName::ALL {
        for s in out.split_mut(name) {
            s.image = p.apply(&s.image)?;
        }
    }
    Ok(out)
}

fn model_input(data: &DatasetSplit, p: Option<&Preprocessor>) -> Result<DatasetSplit> {
    match p {
        Some(p) => apply_preprocessor(data, p),
        None => Ok(data.clone()),
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many epochs have completed.
    pub halt_after: Option<usize>,
}

#[derive(Clone, Debug)]
pub enum TrainStatus {
    Finished(RunRecord),
    Halted { epoch: usize },
}

fn checkpoint_of(config: &str, preprocessor: &Option<Preprocessor>, state: &TrainState) -> Checkpoint {
    Checkpoint {
        config: config.to_string(),
        preprocessor: preprocessor.clone(),
        state: state.clone(),
    }
}

pub fn pushes_tsv(pushes: &[PushReport]) -> String {
    let mut s = String::from("epoch\tprototype\tsample\trow\tcol\tdistance_before\n");
    for p in pushes {
        let epoch = p.epoch.map_or_else(|| "init".to_string(), |e| e.to_string());
        for e in &p.entries {
            let v = &e.provenance;
            let _ = writeln!(s, "{epoch}\t{}\t{}\t{}\t{}\t{:.17e}", e.prototype, v.sample, v.row, v.col, v.distance_before);
        }
    }
    s
}

/// Trains (or resumes) a run, writing `last.ckpt` after every epoch and the
/// record, push history and best-val checkpoint at the end.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out: &Path, opts: &TrainOptions) -> Result<TrainStatus> {
    let raw = load_data(data_dir)?;
    let (cfg, preprocessor, mut state) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let cfg = RunConfig::from_toml(&ck.config).context("checkpoint config echo")?;
            fs::create_dir_all(out)?;
            info!("resuming at epoch {} from {}", ck.state.epoch, path.display());
            (cfg, ck.preprocessor, ck.state)
        }
        None => {
            cfg.validate()?;
            ensure_fresh_dir(out)?;
            let preprocessor = if cfg.preprocess.enabled {
                let images: Vec<_> = raw.train.iter().map(|s| s.image.clone()).collect();
                Some(Preprocessor::fit(&images, cfg.preprocess.components)?)
            } else {
                None
            };
            let data = model_input(&raw, preprocessor.as_ref())?;
            let model = Model::new(cfg.model.clone(), cfg.seed)?;
            check_data_fits(&model, &data)?;
            let state = TrainState::start(model, &data, cfg.seed)?;
            (cfg.clone(), preprocessor, state)
        }
    };
    cfg.validate()?;
    let data = model_input(&raw, preprocessor.as_ref())?;
    check_data_fits(&state.model, &data)?;
    let config_text = cfg.to_toml();
    echo_config(out, &config_text)?;
    if let Some(p) = &preprocessor {
        write_atomic(&out.join("preprocess.tsv"), p.to_tsv().as_bytes())?;
    }

    while !state.is_finished(&cfg.train) {
        if opts.halt_after.is_some_and(|h| state.epoch >= h) {
            checkpoint_of(&config_text, &preprocessor, &state).save(&out.join(LAST_CHECKPOINT))?;
            info!("halted after epoch {}", state.epoch);
            return Ok(TrainStatus::Halted { epoch: state.epoch });
        }
        if let Err(e) = run_epoch(&mut state, &data, &cfg.train) {
            bail!("training failed at epoch {}: {e}; last checkpoint retained in {}", state.epoch, out.display());
        }
        checkpoint_of(&config_text, &preprocessor, &state).save(&out.join(LAST_CHECKPOINT))?;
    }
    let outcome = finish(&state, &data, &cfg.train)?;
    let best = state.best.clone().expect("finish succeeded, so a best model exists");
    let mut best_state = state.clone();
    best_state.model = best.model;
    checkpoint_of(&config_text, &preprocessor, &best_state).save(&out.join(BEST_CHECKPOINT))?;
    write_atomic(&out.join(RECORD_FILE), outcome.record.to_tsv().as_bytes())?;
    write_atomic(&out.join(PUSH_FILE), pushes_tsv(&state.pushes).as_bytes())?;
    info!(
        "best epoch {}, test accuracy {:.4}",
        outcome.record.best_epoch, outcome.record.test_accuracy
    );
    Ok(TrainStatus::Finished(outcome.record))
}

fn check_data_fits(model: &Model, data: &DatasetSplit) -> Result<()> {
    let c = &model.config;
    let want = [c.in_channels, c.image_size, c.image_size];
    for s in data.all() {
        ensure!(
            s.image.shape() == want,
            "sample {} has shape {:?} but the model expects {:?}",
            s.id,
            s.image.shape(),
            want
        );
    }
    ensure!(!data.train.is_empty() && !data.val.is_empty(), "train and val splits must be non-empty");
    Ok(())
}

/// The best-val model if one has been selected, else the current one.
pub fn selected_model(ck: &Checkpoint) -> &Model {
    ck.state.best.as_ref().map_or(&ck.state.model, |b: &Best| &b.model)
}

pub fn parse_split(name: &str) -> Result<Option<SplitName>> {
    Ok(match name {
        "all" => None,
        "train" => Some(SplitName::Train),
        "val" => Some(SplitName::Val),
        "test" => Some(SplitName::Test),
        other => bail!("unknown split `{other}` (expected all, train, val or test)"),
    })
}

fn select(data: &DatasetSplit, split: Option<SplitName>) -> Vec<Sample> {
    match split {
        Some(name) => data.split(name).to_vec(),
        None => data.all().cloned().collect(),
    }
}

pub fn cmd_eval(checkpoint: &Path, data_dir: &Path, split: Option<SplitName>) -> Result<Evaluation> {
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let cfg = RunConfig::from_toml(&ck.config)?;
    let data = model_input(&load_data(data_dir)?, ck.preprocessor.as_ref())?;
    let samples = select(&data, split);
    ensure!(!samples.is_empty(), "the selected split is empty");
    Ok(evaluate(selected_model(&ck), &samples, &cfg.train)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    pub variant: String,
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

pub fn accuracy_rows_tsv(rows: &[AccuracyRow]) -> String {
    let mut s = String::from("variant\ttrain_accuracy\tval_accuracy\ttest_accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{}\t{:.17e}\t{:.17e}\t{:.17e}", r.variant, r.train, r.val, r.test);
    }
    s
}

fn split_accuracies(variant: &str, model: &Model, data: &DatasetSplit) -> Result<AccuracyRow> {
    Ok(AccuracyRow {
        variant: variant.to_string(),
        train: accuracy(model, &data.train)?,
        val: accuracy(model, &data.val)?,
        test: accuracy(model, &data.test)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMode {
    RandomPrototypes,
    ConstantCells,
}

impl AblationMode {
    pub fn parse(s: &str) -> Option<AblationMode> {
        match s {
            "random-prototypes" => Some(AblationMode::RandomPrototypes),
            "constant-cells" => Some(AblationMode::ConstantCells),
            _ => None,
        }
    }
}

/// Paired comparison of the full model against the ablated one.
pub fn cmd_ablate(
    mode: AblationMode,
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    data_dir: &Path,
    out: &Path,
) -> Result<Vec<AccuracyRow>> {
    let rows = match mode {
        AblationMode::RandomPrototypes => {
            let path = checkpoint.context("random-prototypes ablation needs a trained --checkpoint")?;
            let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let run_cfg = RunConfig::from_toml(&ck.config)?;
            let data = model_input(&load_data(data_dir)?, ck.preprocessor.as_ref())?;
            ensure_fresh_dir(out)?;
            echo_config(out, &ck.config)?;
            let full = selected_model(&ck);
            let ablated = ablate_random_prototypes(full, &data, &run_cfg.train, run_cfg.seed)?;
            vec![
                split_accuracies("full", full, &data)?,
                AccuracyRow {
                    variant: "random-prototypes".into(),
                    train: ablated.train_accuracy,
                    val: ablated.val_accuracy,
                    test: ablated.test_accuracy,
                },
            ]
        }
        AblationMode::ConstantCells => {
            cfg.validate()?;
            let raw = load_data(data_dir)?;
            ensure_fresh_dir(out)?;
            echo_config(out, &cfg.to_toml())?;
            let derived = out.join("data");
            let ablated_data = ablate_constant_cells(&raw);
            fs::create_dir_all(&derived)?;
            let manifest = fs::read_to_string(data_dir.join("manifest.txt")).unwrap_or_default();
            write_dataset(&derived, &ablated_data, &format!("{manifest}# derived: constant-cells ablation\n"))?;
            let full_row = match checkpoint {
                Some(path) => {
                    let ck = Checkpoint::load(path)?;
                    let data = model_input(&raw, ck.preprocessor.as_ref())?;
                    split_accuracies("full", selected_model(&ck), &data)?
                }
                None => {
                    let run = out.join("full");
                    cmd_train(cfg, data_dir, &run, &TrainOptions::default())?;
                    let ck = Checkpoint::load(&run.join(BEST_CHECKPOINT))?;
                    let data = model_input(&raw, ck.preprocessor.as_ref())?;
                    split_accuracies("full", selected_model(&ck), &data)?
                }
            };
            let run = out.join("ablated");
            cmd_train(cfg, &derived, &run, &TrainOptions::default())?;
            let ck = Checkpoint::load(&run.join(BEST_CHECKPOINT))?;
            let data = model_input(&ablated_data, ck.preprocessor.as_ref())?;
            vec![full_row, split_accuracies("constant-cells", selected_model(&ck), &data)?]
        }
    };
    write_atomic(&out.join("ablation.tsv"), accuracy_rows_tsv(&rows).as_bytes())?;
    Ok(rows)
}

pub fn recovery_tsv(rows: &[Recovery]) -> String {
    let mut s = String::from("prototype\tclass\tsample\tsample_class\targmax_row\targmax_col\trecovered\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.prototype, r.class, r.sample, r.sample_class, r.argmax.0, r.argmax.1, r.recovered as u8
        );
    }
    s
}

/// Metric report, summary statistics, motif-recovery check and per-region
/// PGM/PPM images.
pub fn cmd_interpret(
    checkpoint: &Path,
    data_dir: &Path,
    out: &Path,
    icfg: &InterpretConfig,
    split: Option<SplitName>,
) -> Result<Vec<Recovery>> {
    icfg.validate()?;
    let ck = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let raw = load_data(data_dir)?;
    let data = model_input(&raw, ck.preprocessor.as_ref())?;
    let samples = select(&data, split);
    let raw_samples = select(&raw, split);
    let model = selected_model(&ck);
    ensure_fresh_dir(out)?;
    let mut echo = RunConfig::from_toml(&ck.config)?;
    echo.interpret = icfg.clone();
    echo_config(out, &echo.to_toml())?;

    let report = interpretation_report(model, &samples, icfg)?;
    write_atomic(&out.join("regions.tsv"), report.records_tsv().as_bytes())?;
    write_atomic(&out.join("summary.tsv"), report.summary_tsv().as_bytes())?;
    let mut top = String::from("prototype\trank\tsample\tsimilarity\n");
    for (j, ranked) in report.top.iter().enumerate() {
        for (rank, (id, sim)) in ranked.iter().enumerate() {
            let _ = writeln!(top, "{j}\t{rank}\t{id}\t{sim:.17e}");
        }
    }
    write_atomic(&out.join("top_samples.tsv"), top.as_bytes())?;

    let recovery = (0..model.n_prototypes())
        .map(|j| motif_recovery(model, &samples, j, 2))
        .collect::<Result<Vec<_>, _>>()?;
    write_atomic(&out.join("recovery.tsv"), recovery_tsv(&recovery).as_bytes())?;

    let images = out.join("images");
    fs::create_dir_all(&images)?;
    for v in &report.views {
        if v.region.degenerate {
            warn!("prototype {} sample {}: constant activation map", v.prototype, v.sample);
        }
        let raw_image = &raw_samples.iter().find(|s| s.id == v.sample).expect("same ids").image;
        write_atomic(&images.join(map_file_name(v.prototype, v.sample)), map_to_pgm(&v.map).as_bytes())?;
        write_atomic(
            &images.join(overlay_file_name(v.prototype, v.sample)),
            overlay_ppm(raw_image, &v.region.mask).as_bytes(),
        )?;
    }
    Ok(recovery)
}

pub fn cmd_gradcheck(seed: u64, points: usize, step: f64) -> Result<GradCheckOutcome> {
    Ok(composite_gradcheck(seed, points, step)?)
}

pub fn cmd_oracle_suite(seed: u64, instances: usize) -> Vec<OracleResult> {
    oracle_suite(seed, instances)
}
