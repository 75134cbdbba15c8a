//! `drope`: train, strip-and-recalibrate, evaluate and analyze desk-scale models.

mod commands;
mod config;
mod error;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use toml::{Table, Value};

use config::set_path;
use error::CliError;

#[derive(Parser)]
#[command(name = "drope", version, about = "Positional-embedding laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from scratch.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Also save a checkpoint every N steps.
        #[arg(long)]
        save_every: Option<usize>,
    },
    /// Strip positional embeddings from a checkpoint and recalibrate.
    Drope {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        parent: PathBuf,
        /// Fit the logit temperature coefficient after recalibration.
        #[arg(long)]
        fit_temperature: bool,
        /// Fit lengths, as multiples (`2x`) or token counts.
        #[arg(long, default_value = "2x,4x")]
        lengths: String,
    },
    /// Perplexity and NIAH sweeps over lengths and scaling methods.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma list of `ppl`, `niah-standard`, `niah-multiquery`, `niah-multikey`, `niah-multivalue`.
        #[arg(long, default_value = "ppl")]
        task: String,
        #[arg(long, default_value = "1x,2x")]
        lengths: String,
        /// Comma list of `none`, `pi`, `ntk`, `yarn`, `dynamic-*`, `<method>+temp`, `temp=<a>`.
        #[arg(long, default_value = "none")]
        scaling: String,
        /// Add the crop baseline.
        #[arg(long)]
        crop: bool,
        /// Add a logit temperature `1 + a·ln s`.
        #[arg(long)]
        temperature: Option<f64>,
        /// Results file stem under `results/`.
        #[arg(long, default_value = "eval")]
        name: String,
    },
    /// Positional-bias, bound, profile and frequency reports.
    Analyze(commands::AnalyzeArgs),
    /// Print a checkpoint's configuration and provenance.
    Inspect {
        checkpoint: PathBuf,
    },
}

/// Options shared by every run-producing command; each overrides the config file.
#[derive(Args, Clone, Default)]
pub struct RunArgs {
    /// TOML run configuration (a `config.snapshot` works too).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    experiment: Option<String>,
    /// Output root; defaults to $DROPE_OUT or `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `rope`, `nope` or `alibi`.
    #[arg(long, value_parser = ["rope", "nope", "alibi"])]
    scheme: Option<String>,
    #[arg(long)]
    rope_base: Option<f64>,
    /// `off`, `on` or `queries-only`.
    #[arg(long, value_parser = ["off", "on", "queries-only"])]
    qk_norm: Option<String>,
    #[arg(long)]
    context: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    drope_steps: Option<usize>,
    #[arg(long)]
    drope_lr: Option<f64>,
    #[arg(long)]
    drope_warmup: Option<usize>,
    /// Recalibrate without query/key normalization.
    #[arg(long)]
    no_qknorm: bool,
    /// NIAH samples per cell.
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    ppl_sequences: Option<usize>,
}

fn parse_preset(s: &str) -> Result<String, String> {
    s.parse::<drope_core::model::Preset>().map(|_| s.to_string()).map_err(|e| e.to_string())
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

impl RunArgs {
    fn overrides(&self) -> Table {
        let mut t = Table::new();
        let mut put = |path: &str, v: Option<Value>| {
            if let Some(v) = v {
                set_path(&mut t, path, v);
            }
        };
        put("preset", self.preset.clone().map(Value::String));
        put("seed", self.seed.map(|s| Value::Integer(s as i64)));
        put("experiment", self.experiment.clone().map(Value::String));
        put("out_root", self.out.as_ref().map(|p| Value::String(p.display().to_string())));
        put("model.context", self.context.map(int));
        put("model.qk_norm", self.qk_norm.clone().map(Value::String));
        put("train.total_steps", self.steps.map(int));
        put("train.peak_lr", self.lr.map(Value::Float));
        put("train.warmup_steps", self.warmup.map(int));
        put("train.batch_size", self.batch_size.map(int));
        put("drope.steps", self.drope_steps.map(int));
        put("drope.peak_lr", self.drope_lr.map(Value::Float));
        put("drope.warmup_steps", self.drope_warmup.map(int));
        put("drope.enable_qknorm", self.no_qknorm.then_some(Value::Boolean(false)));
        put("eval.trials", self.trials.map(int));
        put("eval.ppl_sequences", self.ppl_sequences.map(int));
        t
    }

    /// Resolve the run configuration (flag > file > preset).
    pub fn resolve(&self) -> Result<config::RunConfig, CliError> {
        let mut cfg = config::resolve(self.config.as_deref(), &self.overrides())?;
        let base = self
            .rope_base
            .or_else(|| cfg.model.scheme.rope_params().and_then(|p| p.base))
            .unwrap_or(drope_core::model::PRESET_ROPE_BASE);
        let scheme = match (self.scheme.as_deref(), self.rope_base) {
            (Some("nope"), _) => Some(drope_core::attention::PositionalScheme::nope()),
            (Some("alibi"), _) => Some(drope_core::attention::PositionalScheme::alibi(cfg.model.heads)?),
            (Some("rope"), _) => Some(drope_core::attention::PositionalScheme::rope(base, cfg.model.head_dim)?),
            (None, Some(_)) if cfg.model.scheme.rope_params().is_some() => {
                Some(drope_core::attention::PositionalScheme::rope(base, cfg.model.head_dim)?)
            }
            _ => None,
        };
        if let Some(s) = scheme {
            cfg.model.scheme = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { run, save_every } => commands::train(&run.resolve()?, save_every),
        Command::Drope { run, parent, fit_temperature, lengths } => {
            commands::drope(&run.resolve()?, &parent, fit_temperature.then_some(lengths.as_str()))
        }
        Command::Eval { run, checkpoint, task, lengths, scaling, crop, temperature, name } => {
            let spec = commands::EvalSpec { task, lengths, scaling, crop, temperature, name };
            commands::eval(&run.resolve()?, &checkpoint, &spec)
        }
        Command::Analyze(args) => commands::analyze(&args),
        Command::Inspect { checkpoint } => commands::inspect(&checkpoint),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
