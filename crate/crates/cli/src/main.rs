use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use protomotif_cli::commands::{
    accuracy_rows_tsv, cmd_ablate, cmd_eval, cmd_generate, cmd_gradcheck, cmd_interpret, cmd_oracle_suite, cmd_train,
    parse_split, recovery_tsv, AblationMode, TrainOptions, TrainStatus,
};
use protomotif_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "protomotif", version, about = "Prototype networks on planted-motif images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration (defaults apply to missing keys)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config)
    #[arg(long)]
    seed: Option<u64>,
    /// Override a config key, e.g. `--set train.epochs=5` (repeatable)
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model (or resume a run)
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; its config echo replaces --config/--set
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete, leaving last.ckpt
        #[arg(long)]
        halt_after: Option<usize>,
    },
    /// Run an ablation: random-prototypes or constant-cells
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpret a trained model's prototypes
    Interpret {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        percentile: Option<f64>,
        #[arg(long)]
        topk: Option<usize>,
        /// all, train, val or test
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Evaluate a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Finite-difference check of the full composite-loss gradient
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
    /// Compare metric and math routines against brute-force oracles
    OracleSuite {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = common.run_config().map_err(usage)?;
            cfg.validate().map_err(usage)?;
            cmd_generate(&cfg, &out).map_err(runtime)?;
        }
        Command::Train {
            common,
            data,
            out,
            resume,
            halt_after,
        } => {
            let cfg = common.run_config().map_err(usage)?;
            if resume.is_none() {
                cfg.validate().map_err(usage)?;
            }
            let opts = TrainOptions { resume, halt_after };
            match cmd_train(&cfg, &data, &out, &opts).map_err(runtime)? {
                TrainStatus::Finished(r) => println!("best_epoch\t{}\ntest_accuracy\t{}", r.best_epoch, r.test_accuracy),
                TrainStatus::Halted { epoch } => println!("halted_at_epoch\t{epoch}"),
            }
        }
        Command::Ablate {
            common,
            mode,
            checkpoint,
            data,
            out,
        } => {
            let mode = AblationMode::parse(&mode)
                .with_context(|| format!("unknown ablation mode `{mode}` (expected random-prototypes or constant-cells)"))
                .map_err(usage)?;
            if mode == AblationMode::RandomPrototypes && checkpoint.is_none() {
                return Err(usage(anyhow::anyhow!("random-prototypes ablation needs --checkpoint")));
            }
            let cfg = common.run_config().map_err(usage)?;
            let rows = cmd_ablate(mode, &cfg, checkpoint.as_deref(), &data, &out).map_err(runtime)?;
            print!("{}", accuracy_rows_tsv(&rows));
        }
        Command::Interpret {
            common,
            checkpoint,
            data,
            out,
            percentile,
            topk,
            split,
        } => {
            let mut icfg = common.run_config().map_err(usage)?.interpret;
            if let Some(p) = percentile {
                icfg.percentile = p;
            }
            if let Some(k) = topk {
                icfg.top_k = k;
            }
            icfg.validate().map_err(usage)?;
            let split = parse_split(&split).map_err(usage)?;
            let rec = cmd_interpret(&checkpoint, &data, &out, &icfg, split).map_err(runtime)?;
            print!("{}", recovery_tsv(&rec));
        }
        Command::Eval { checkpoint, data, split } => {
            let name = split.clone();
            let split = parse_split(&split).map_err(usage)?;
            let e = cmd_eval(&checkpoint, &data, split).map_err(runtime)?;
            println!("split\tloss\taccuracy\n{name}\t{}\t{}", e.loss, e.accuracy);
        }
        Command::Gradcheck {
            common,
            points,
            step,
            tolerance,
        } => {
            let seed = common.run_config().map_err(usage)?.seed;
            let out = cmd_gradcheck(seed, points, step).map_err(runtime)?;
            let err = out.max_rel_error();
            println!(
                "points\t{}\nexcluded_near_kinks\t{}\nmax_rel_error\t{err:e}",
                out.reports.len(),
                out.excluded.len()
            );
            if !(err < tolerance) {
                return Err(runtime(anyhow::anyhow!("max relative error {err:e} exceeds {tolerance:e}")));
            }
        }
        Command::OracleSuite { common, instances } => {
            let seed = common.run_config().map_err(usage)?.seed;
            let results = cmd_oracle_suite(seed, instances);
            for r in &results {
                println!(
                    "{}\t{}\tinstances={}\tfailures={}\tmax_error={:e}\ttolerance={:e}",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.name,
                    r.instances,
                    r.failures,
                    r.max_error,
                    r.tolerance
                );
            }
            if results.iter().any(|r| !r.passed()) {
                return Err(runtime(anyhow::anyhow!("oracle suite failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
