//! Acceptance run: criteria 1-11 at their stated tolerances, one PASS/FAIL
//! line each. `ACCEPTANCE_ONLY=6,7,11` restricts the run to a subset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use protomotif::interpret::{modularity, motif_recovery, rank_sum_exact, rank_sum_normal, CellGraph, GraphNode};
use protomotif::model::Model;
use protomotif::preprocess::pca_fit;
use protomotif::rng::rng_from_seed;
use protomotif::synthgen::{ablate_constant_cells, generate_dataset, DatasetSplit, Role};
use protomotif::train::{ablate_random_prototypes, finish, run_epoch, verify_push, TrainOutcome, TrainState};
use protomotif_cli::checkpoint::Checkpoint;
use protomotif_cli::commands::cmd_gradcheck;
use protomotif_cli::config::RunConfig;
use rand::Rng;
use sha2::{Digest, Sha256};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

struct Run {
    outcome: TrainOutcome,
    data: DatasetSplit,
    seconds: f64,
    pushes_verified: usize,
    push_failures: Vec<String>,
}

/// Generate + train in process, checking the push invariant after every push.
fn train_run(cfg: &RunConfig, data: Option<DatasetSplit>) -> Result<Run> {
    let t0 = Instant::now();
    let data = match data {
        Some(d) => d,
        None => generate_dataset(&cfg.synthgen, cfg.seed)?,
    };
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut state = TrainState::start(model, &data, cfg.seed)?;
    let mut pushes_verified = 0;
    let mut push_failures = Vec::new();
    let mut check = |state: &TrainState| {
        pushes_verified += 1;
        if let Err(e) = verify_push(&state.model, &data) {
            push_failures.push(format!("seed {} epoch {}: {e}", cfg.seed, state.epoch));
        }
    };
    check(&state);
    while !state.is_finished(&cfg.train) {
        run_epoch(&mut state, &data, &cfg.train)?;
        if state.records.last().is_some_and(|r| r.pushed) {
            check(&state);
        }
    }
    let outcome = finish(&state, &data, &cfg.train)?;
    Ok(Run {
        outcome,
        data,
        seconds: t0.elapsed().as_secs_f64(),
        pushes_verified,
        push_failures,
    })
}

fn seeded(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        ..RunConfig::default()
    }
}

fn progress(msg: &str) {
    eprintln!("[acceptance] {msg}");
}

struct DefaultRuns {
    runs: Vec<(u64, Run)>,
}

fn default_runs() -> Result<DefaultRuns> {
    let mut runs = Vec::new();
    for seed in SEEDS {
        let run = train_run(&seeded(seed), None)?;
        progress(&format!(
            "default seed {seed}: test {:.4} in {:.0}s",
            run.outcome.record.test_accuracy, run.seconds
        ));
        runs.push((seed, run));
    }
    Ok(DefaultRuns { runs })
}

fn criterion_1(d: &DefaultRuns) -> Verdict {
    let parts: Vec<String> = d
        .runs
        .iter()
        .map(|(s, r)| format!("seed {s}: {:.4} ({:.0}s)", r.outcome.record.test_accuracy, r.seconds))
        .collect();
    let pass = d
        .runs
        .iter()
        .all(|(_, r)| r.outcome.record.test_accuracy >= 0.99 && r.seconds < 600.0);
    verdict(pass, format!("test accuracy >= 0.99 and < 600 s per seed; {}", parts.join(", ")))
}

fn criterion_2(d: &DefaultRuns) -> Result<Verdict> {
    let mut at_least_one = 0;
    let mut both = 0;
    let mut parts = Vec::new();
    for (seed, run) in &d.runs {
        let model = &run.outcome.best;
        let samples: Vec<_> = run.data.all().cloned().collect();
        let mut classes = vec![false; model.config.n_classes];
        for j in 0..model.n_prototypes() {
            let r = motif_recovery(model, &samples, j, 2)?;
            classes[r.class] |= r.recovered;
        }
        let n = classes.iter().filter(|&&c| c).count();
        at_least_one += usize::from(n >= 1);
        both += usize::from(n == classes.len());
        parts.push(format!("seed {seed}: {n}"));
    }
    Ok(verdict(
        at_least_one == SEEDS.len(),
        format!(
            "seeds recovering >= 1 class: {at_least_one}/5; both classes: {both}/5 [{}]",
            parts.join(", ")
        ),
    ))
}

fn criterion_3(d: &DefaultRuns) -> Result<Verdict> {
    let mut default_ok = true;
    let mut parts = Vec::new();
    for (seed, run) in &d.runs {
        let ab = ablate_random_prototypes(&run.outcome.best, &run.data, &seeded(*seed).train, *seed)?;
        let learned = run.outcome.record.test_accuracy;
        default_ok &= ab.test_accuracy <= learned;
        parts.push(format!("default s{seed} {learned:.3}->{:.3}", ab.test_accuracy));
    }
    let mut dense_ok = true;
    let mut strict = 0;
    for seed in SEEDS {
        let mut cfg = seeded(seed);
        cfg.synthgen.neutral_count_min = 4;
        cfg.synthgen.neutral_count_max = 8;
        let run = train_run(&cfg, None)?;
        let ab = ablate_random_prototypes(&run.outcome.best, &run.data, &cfg.train, seed)?;
        let learned = run.outcome.record.test_accuracy;
        dense_ok &= ab.test_accuracy <= learned;
        strict += usize::from(ab.test_accuracy < learned);
        parts.push(format!("dense s{seed} {learned:.3}->{:.3}", ab.test_accuracy));
        progress(&format!("dense seed {seed}: learned {learned:.4}, ablated {:.4}", ab.test_accuracy));
    }
    Ok(verdict(
        default_ok && dense_ok && strict >= 3,
        format!(
            "ablated <= learned on every seed; strict drops at counts (4,8): {strict}/5 [{}]",
            parts.join(", ")
        ),
    ))
}

fn criterion_4() -> Result<Verdict> {
    let mut cfg = seeded(0);
    cfg.synthgen.shared_class_geometry = true;
    let full = train_run(&cfg, None)?;
    let ablated_data = ablate_constant_cells(&full.data);
    let ablated = train_run(&cfg, Some(ablated_data))?;
    let (f, a) = (full.outcome.record.test_accuracy, ablated.outcome.record.test_accuracy);
    Ok(verdict(
        f >= 0.99 && a <= 0.60,
        format!("shared geometry, seed 0: full {f:.4} (>= 0.99), constant-cells {a:.4} (<= 0.60)"),
    ))
}

fn criterion_6() -> Result<Verdict> {
    let out = cmd_gradcheck(0, 20, 1e-6)?;
    let err = out.max_rel_error();
    Ok(verdict(
        out.reports.len() == 20 && err < 1e-5,
        format!(
            "max relative error {err:.3e} over {} points (< 1e-5); {} near-kink points excluded",
            out.reports.len(),
            out.excluded.len()
        ),
    ))
}

fn binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_protomotif"))
}

fn criterion_7() -> Result<Verdict> {
    let out = Command::new(binary())
        .args(["oracle-suite", "--instances", "100"])
        .output()
        .context("running oracle-suite")?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    let failed: Vec<&str> = stdout.lines().filter(|l| l.starts_with("FAIL")).collect();
    Ok(verdict(
        out.status.success() && failed.is_empty() && stdout.lines().count() > 0,
        format!(
            "oracle-suite exit {:?}, {} checks, failing: {:?}",
            out.status.code(),
            stdout.lines().count(),
            failed
        ),
    ))
}

fn criterion_8(d: &DefaultRuns) -> Verdict {
    let checked: usize = d.runs.iter().map(|(_, r)| r.pushes_verified).sum();
    let failures: Vec<&String> = d.runs.iter().flat_map(|(_, r)| &r.push_failures).collect();
    verdict(
        failures.is_empty() && checked > 0,
        format!("{checked} push events checked across 5 runs, {} violations {:?}", failures.len(), failures),
    )
}

fn criterion_9() -> Verdict {
    let (n, c) = (500, 8);
    let mut rng = rng_from_seed(2024);
    let mix: Vec<f64> = (0..c * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pixels: Vec<f64> = (0..n)
        .flat_map(|_| {
            let z: Vec<f64> = (0..c).map(|i| rng.gen::<f64>() * (c - i) as f64).collect();
            (0..c).map(|r| (0..c).map(|j| mix[r * c + j] * z[j]).sum::<f64>()).collect::<Vec<_>>()
        })
        .collect();
    let x = nalgebra::DMatrix::from_row_slice(n, c, &pixels);
    let mean = x.row_mean();
    let centered = nalgebra::DMatrix::from_fn(n, c, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut align = 0.0f64;
    let mut ortho = 0.0f64;
    let mut ordered = true;
    for k in [3, c] {
        let pca = match pca_fit(&pixels, c, k) {
            Ok(p) => p,
            Err(e) => return verdict(false, format!("pca_fit failed: {e}")),
        };
        ordered &= pca.eigenvalues.windows(2).all(|w| w[0] >= w[1]);
        for i in 0..k {
            let v = pca.component(i);
            let u = eig.eigenvectors.column(order[i]);
            let dot: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            align = align.max((dot.abs() - 1.0).abs());
            for j in 0..k {
                let d: f64 = v.iter().zip(pca.component(j)).map(|(a, b)| a * b).sum();
                ortho = ortho.max((d - f64::from(i == j)).abs());
            }
        }
    }
    verdict(
        align <= 1e-8 && ortho <= 1e-10 && ordered,
        format!(
            "500x8: max | |<v,u>| - 1 | = {align:.2e} (<= 1e-8), orthonormality {ortho:.2e} (<= 1e-10), eigenvalues non-increasing: {ordered}"
        ),
    )
}

fn tree_hash(dir: &Path) -> Result<String> {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, files)?;
            } else {
                files.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir)?.to_string_lossy().as_bytes());
        h.update(fs::read(&f)?);
    }
    Ok(format!("{:x}", h.finalize()))
}

fn cli(args: &[&str]) -> Result<()> {
    let out = Command::new(binary()).args(args).output()?;
    ensure!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn criterion_10() -> Result<Verdict> {
    let tmp = tempfile::tempdir()?;
    let small = ["--seed", "7", "--set", "synthgen.n_samples=60", "--set", "train.epochs=4"];
    let mut hashes = Vec::new();
    for name in ["a", "b"] {
        let data = tmp.path().join(name).join("data");
        let run = tmp.path().join(name).join("run");
        let (d, r) = (data.to_string_lossy().into_owned(), run.to_string_lossy().into_owned());
        let mut g = vec!["generate", "--out", &d];
        g.extend(small);
        cli(&g)?;
        let mut t = vec!["train", "--data", &d, "--out", &r];
        t.extend(small);
        cli(&t)?;
        hashes.push((
            tree_hash(&data)?,
            fs::read(run.join("record.tsv"))?,
            fs::read(run.join("best.ckpt"))?,
            fs::read(run.join("last.ckpt"))?,
        ));
    }
    let dataset = hashes[0].0 == hashes[1].0;
    let record = hashes[0].1 == hashes[1].1;
    let ckpt = hashes[0].2 == hashes[1].2 && hashes[0].3 == hashes[1].3;
    let bytes = &hashes[0].2;
    let roundtrip = Checkpoint::from_bytes(bytes).map(|c| &c.to_bytes() == bytes).unwrap_or(false);
    let path = tmp.path().join("copy.ckpt");
    Checkpoint::from_bytes(bytes)?.save(&path)?;
    let file_roundtrip = &fs::read(&path)? == bytes && Checkpoint::load(&path)?.to_bytes() == *bytes;
    Ok(verdict(
        dataset && record && ckpt && roundtrip && file_roundtrip,
        format!(
            "dataset dirs identical: {dataset}; records identical: {record}; checkpoints identical: {ckpt}; save/load byte roundtrip: {}",
            roundtrip && file_roundtrip
        ),
    ))
}

fn criterion_11() -> Result<Verdict> {
    let mut rng = rng_from_seed(11);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let shift = rng.gen_range(0.0..1.5);
        let a: Vec<f64> = (0..8).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() + shift).collect();
        let diff = (rank_sum_exact(&a, &b)?.p - rank_sum_normal(&a, &b)?.p).abs();
        worst = worst.max(diff);
    }
    let nodes = (0..6)
        .map(|id| GraphNode {
            id,
            row: 0,
            col: id,
            role: if id < 3 { Role::Tumor } else { Role::NonTumor },
        })
        .collect();
    let g = CellGraph {
        nodes,
        edges: vec![(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)],
        radius: 1.0,
    };
    let q = modularity(&g)?;
    Ok(verdict(
        worst <= 0.02 && q == 0.5,
        format!("max |p_exact - p_normal| over 500 n=8 pairs = {worst:.4} (<= 0.02); two-triangle modularity = {q}"),
    ))
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let t0 = Instant::now();
    let mut lines: Vec<(u32, &str, Option<Verdict>)> = Vec::new();

    let needs_default = [1, 2, 3, 8].iter().any(|&n| wanted(n));
    let default = if needs_default {
        match default_runs() {
            Ok(d) => Some(d),
            Err(e) => {
                progress(&format!("default runs failed: {e:#}"));
                None
            }
        }
    } else {
        None
    };
    let from_default = |f: &dyn Fn(&DefaultRuns) -> Result<Verdict>| -> Verdict {
        match &default {
            Some(d) => f(d).unwrap_or_else(|e| verdict(false, format!("error: {e:#}"))),
            None => verdict(false, "default training runs failed".into()),
        }
    };
    let lift = |r: Result<Verdict>| r.unwrap_or_else(|e| verdict(false, format!("error: {e:#}")));

    if wanted(1) {
        lines.push((1, "synthetic benchmark accuracy", Some(from_default(&|d| Ok(criterion_1(d))))));
    }
    if wanted(2) {
        lines.push((2, "prototype recovery", Some(from_default(&criterion_2))));
    }
    if wanted(3) {
        lines.push((3, "random-prototype ablation", Some(from_default(&criterion_3))));
    }
    if wanted(4) {
        progress("criterion 4");
        lines.push((4, "constant-cells ablation", Some(lift(criterion_4()))));
    }
    if wanted(5) {
        lines.push((5, "real-data headline results", None));
    }
    if wanted(6) {
        lines.push((6, "gradient integrity", Some(lift(criterion_6()))));
    }
    if wanted(7) {
        lines.push((7, "metric oracle equivalence", Some(lift(criterion_7()))));
    }
    if wanted(8) {
        lines.push((8, "push invariant", Some(from_default(&|d| Ok(criterion_8(d))))));
    }
    if wanted(9) {
        lines.push((9, "PCA correctness", Some(criterion_9())));
    }
    if wanted(10) {
        progress("criterion 10");
        lines.push((10, "reproducibility", Some(lift(criterion_10()))));
    }
    if wanted(11) {
        lines.push((11, "statistical machinery", Some(lift(criterion_11()))));
    }

    let mut failed = 0;
    for (n, name, v) in &lines {
        match v {
            Some(v) => {
                failed += usize::from(!v.pass);
                println!("{} criterion {n:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            }
            None => println!("N/A  criterion {n:>2} {name}: not reproducible without the real dataset"),
        }
    }
    println!("acceptance finished in {:.0}s, {failed} failing", t0.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
