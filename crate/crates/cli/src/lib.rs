//! The `anticipate` command line.
//!
//! Exit codes: 0 ok, 1 usage, 2 data or config, 3 numeric.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anticipate_core::corpus::Corpus;
use anticipate_core::metrics::Marginal;
use anticipate_core::model::Model;
use anticipate_core::pipeline::{
    ablate_modalities, evaluate, load_for, parse_sets, run_finetune, run_pretrain, summary_csv, sweep_actions, EvalOptions, ExperimentConfig,
};
use anticipate_core::synthworld::{build_world, export_corpus};
use anticipate_core::trainer::{FinetuneMode, RunLog};
use anticipate_core::verify::{run_scope, SCOPES};
use anticipate_core::{Error, Result};
use anticipate_tensor::OpKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_USAGE: i32 = 1;
pub const LOG_ENV: &str = "ANTICIPATE_LOG";

#[derive(Debug, Parser)]
#[command(name = "anticipate", version, about = "Multi-modal action anticipation on a synthetic world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a synthetic world and export its corpus.
    GenWorld {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pre-training; writes a checkpoint and a run log.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out>.runlog.csv`.
        #[arg(long)]
        runlog: Option<PathBuf>,
    },
    /// Classification fine-tuning from a checkpoint or from scratch.
    Finetune {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, required_unless_present = "from_scratch", conflicts_with = "from_scratch")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        from_scratch: bool,
        /// Overrides the config's finetune mode.
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        runlog: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated subset of the checkpoint's modalities.
        #[arg(long, value_delimiter = ',')]
        modalities: Option<Vec<String>>,
        /// JSON report path; a CSV is written next to it. Prints JSON when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MarginalArg::Sum)]
        marginal: MarginalArg,
    },
    /// One full pipeline per modality set; one CSV row per set.
    AblateModalities {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Sets separated by `;`, modalities by `,`.
        #[arg(long)]
        sets: String,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Evaluate this checkpoint with modalities dropped instead of retraining.
        #[arg(long, requires = "checkpoint")]
        mask_only: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate with the action-text stream corrupted at each keep probability.
    SweepActions {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1")]
        p_list: Vec<f64>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = MarginalArg::Sum)]
        marginal: MarginalArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks in double precision.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = clap::builder::PossibleValuesParser::new(SCOPES))]
        scope: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Sign-flip this op's backward rule; the run must then fail.
        #[arg(long)]
        fault: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config JSON; the desk preset when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut exp = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::desk(),
        };
        if let Some(s) = self.seed {
            exp.seed = s;
        }
        Ok(exp)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Frozen,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MarginalArg {
    Sum,
    Max,
}

impl From<MarginalArg> for Marginal {
    fn from(m: MarginalArg) -> Self {
        match m {
            MarginalArg::Sum => Marginal::Sum,
            MarginalArg::Max => Marginal::Max,
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    if let Err(msg) = init_logging() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging() -> std::result::Result<(), String> {
    let level = std::env::var(LOG_ENV).unwrap_or_else(|_| "info".into());
    if !["error", "info", "debug"].contains(&level.as_str()) {
        return Err(format!("{LOG_ENV} must be one of error, info, debug; got {level:?}"));
    }
    // Already initialized when called repeatedly in one process.
    let _ = env_logger::Builder::new().parse_filters(&level).format_timestamp(None).try_init();
    Ok(())
}

fn runlog_path(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".runlog.csv");
        PathBuf::from(s)
    })
}

fn write_runlog(log: &RunLog, path: &Path) -> Result<()> {
    log.write_csv(path)?;
    log::info!("run log written to {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::GenWorld { config, out } => {
            let exp = config.load()?;
            let world = build_world(&exp.world, exp.seed)?;
            let s = export_corpus(&world, &out, exp.finetune.exec)?;
            println!("segments={} train={} eval={}", s.segments, s.train_segments, s.eval_segments);
            println!(
                "label_oracle_top1={:.4} chance=1/{} ({:.4}) over {} eval segments",
                s.oracle.label_oracle_top1,
                world.classes(),
                s.oracle.chance,
                s.oracle.segments
            );
        }
        Command::Pretrain { corpus, config, out, runlog } => {
            let exp = config.load()?;
            let corpus = Corpus::load(&corpus)?;
            let (_, log) = run_pretrain(&corpus, &exp, Some(&out))?;
            write_runlog(&log, &runlog_path(&out, runlog))?;
            println!("checkpoint={}", out.display());
        }
        Command::Finetune {
            corpus,
            config,
            checkpoint,
            from_scratch,
            mode,
            out,
            runlog,
        } => {
            let mut exp = config.load()?;
            if let Some(m) = mode {
                exp.finetune.mode = Some(match m {
                    Mode::Frozen => FinetuneMode::Frozen,
                    Mode::Full => FinetuneMode::Full,
                });
            }
            let corpus = Corpus::load(&corpus)?;
            let mut model = match (checkpoint, from_scratch) {
                (Some(path), false) => load_for(&corpus, &path)?,
                _ => Model::<f32>::new(exp.model_config()?, exp.seed)?,
            };
            let log = run_finetune(&mut model, &corpus, &exp, Some(&out))?;
            write_runlog(&log, &runlog_path(&out, runlog))?;
            println!("checkpoint={}", out.display());
        }
        Command::Eval {
            corpus,
            checkpoint,
            modalities,
            report,
            marginal,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let model = load_for(&corpus, &checkpoint)?;
            let opts = EvalOptions {
                keep: modalities.as_deref(),
                marginal: marginal.into(),
                ..EvalOptions::default()
            };
            let (r, _) = evaluate(&model, &corpus, &opts)?;
            match report {
                Some(path) => {
                    r.write(&path)?;
                    println!("action top1={:.4} report={}", r.action_top1(), path.display());
                }
                None => print!("{}", r.to_json()),
            }
        }
        Command::AblateModalities {
            corpus,
            config,
            sets,
            checkpoint_dir,
            mask_only,
            checkpoint,
            out,
        } => {
            let exp = config.load()?;
            let sets = parse_sets(&sets)?;
            let corpus = Corpus::load(&corpus)?;
            let base = match (mask_only, checkpoint) {
                (true, Some(path)) => Some(load_for(&corpus, &path)?),
                _ => None,
            };
            let rows = ablate_modalities(&corpus, &exp, &sets, checkpoint_dir.as_deref(), base.as_ref())?;
            let refs: Vec<_> = rows.iter().map(|(l, r)| (l.clone(), r)).collect();
            write_text(&out, &summary_csv("set", &refs)?)?;
            println!("{} rows written to {}", rows.len(), out.display());
        }
        Command::SweepActions {
            corpus,
            checkpoint,
            p_list,
            seed,
            marginal,
            out,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let model = load_for(&corpus, &checkpoint)?;
            let rows = sweep_actions(&model, &corpus, &p_list, seed, marginal.into(), Default::default())?;
            let refs: Vec<_> = rows.iter().map(|(p, r)| (format!("{p}"), r)).collect();
            write_text(&out, &summary_csv("p", &refs)?)?;
            println!("{} rows written to {}", rows.len(), out.display());
        }
        Command::Gradcheck { scope, seed, fault } => {
            let fault = match fault {
                Some(name) => Some(OpKind::from_name(&name).ok_or_else(|| Error::Config(format!("unknown op {name:?}")))?),
                None => None,
            };
            let checks = run_scope(&scope, seed, fault)?;
            let mut failed = Vec::new();
            for c in &checks {
                let verdict = if c.passed() { "pass" } else { "FAIL" };
                println!("{verdict} {:<28} max_rel_err={:.3e} elements={}", c.name, c.max_rel_err, c.elements);
                if !c.passed() {
                    failed.push(c.name.clone());
                }
            }
            if !failed.is_empty() {
                println!("{} of {} checks failed: {}", failed.len(), checks.len(), failed.join(", "));
                return Ok(3);
            }
            println!("all {} checks passed", checks.len());
        }
    }
    Ok(0)
}
