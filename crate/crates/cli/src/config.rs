use std::path::{Path, PathBuf};

use drope_core::drope::DropeRecipe;
use drope_core::model::{ModelConfig, Preset, TrainRecipe};
use drope_core::tasks::{SweepConfig, SynthCorpusConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DROPE_OUT";
const DEFAULT_OUT: &str = "runs";

/// Recalibration schedule; batch geometry and optimizer settings come from `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropeSettings {
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub enable_qknorm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// NIAH samples per cell.
    pub trials: usize,
    pub ppl_sequences: usize,
}

/// Everything a command needs; the snapshot written next to the outputs reproduces a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub experiment: String,
    pub preset: Preset,
    /// Seeds initialization, the training stream and evaluation samples.
    pub seed: u64,
    pub out_root: PathBuf,
    pub model: ModelConfig,
    pub train: TrainRecipe,
    pub drope: DropeSettings,
    pub corpus: SynthCorpusConfig,
    pub eval: EvalSettings,
}

fn default_steps(preset: Preset) -> usize {
    match preset {
        Preset::Tiny => 50,
        Preset::Small | Preset::Medium => 1000,
    }
}

impl RunConfig {
    /// Preset defaults with explicit step counts (warmups follow from them).
    pub fn preset(preset: Preset, seed: u64, steps: usize, drope_steps: usize) -> Self {
        let model = ModelConfig::preset(preset);
        let train = TrainRecipe::desk(steps, model.context, seed);
        let rec = DropeRecipe::desk(drope_steps, &train);
        Self {
            experiment: "desk".into(),
            preset,
            seed,
            out_root: std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from),
            corpus: SynthCorpusConfig::for_vocab(model.vocab, seed),
            model,
            train,
            drope: DropeSettings {
                steps: rec.steps,
                warmup_steps: rec.warmup_steps,
                peak_lr: rec.peak_lr,
                enable_qknorm: rec.enable_qknorm,
            },
            eval: EvalSettings { trials: 500, ppl_sequences: 16 },
        }
    }

    pub fn drope_recipe(&self, context: usize) -> DropeRecipe {
        DropeRecipe {
            steps: self.drope.steps,
            warmup_steps: self.drope.warmup_steps,
            peak_lr: self.drope.peak_lr,
            enable_qknorm: self.drope.enable_qknorm,
            base: TrainRecipe { seq_len: context, ..self.train.clone() },
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig { trials: self.eval.trials, ppl_sequences: self.eval.ppl_sequences, seed: self.seed }
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Runtime(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        if self.drope.warmup_steps > self.drope.steps {
            return Err(CliError::Usage("drope warmup cannot exceed drope steps".into()));
        }
        if self.corpus.vocab != self.model.vocab {
            return Err(CliError::Usage(format!(
                "corpus vocabulary {} differs from model vocabulary {}",
                self.corpus.vocab, self.model.vocab
            )));
        }
        drope_core::tasks::SynthCorpus::new(self.corpus.clone())?;
        Ok(())
    }
}

/// Recursively overlay `top` onto `base`.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Set `path` (dotted) in `table`, creating intermediate tables.
pub fn set_path(table: &mut Table, path: &str, value: Value) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .expect("intermediate key is a table");
    }
    cur.insert(last.to_string(), value);
}

fn get_path<'a>(table: &'a Table, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

fn read_file(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<Table>().map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

fn lookup<T: for<'de> Deserialize<'de>>(flags: &Table, file: &Table, path: &str) -> Result<Option<T>, CliError> {
    match get_path(flags, path).or_else(|| get_path(file, path)) {
        Some(v) => v.clone().try_into().map(Some).map_err(|e| CliError::Usage(format!("{path}: {e}"))),
        None => Ok(None),
    }
}

/// Resolve with precedence flag > file > preset default.
///
/// `flags` holds dotted-path overrides already converted to TOML values.
pub fn resolve(file: Option<&Path>, flags: &Table) -> Result<RunConfig, CliError> {
    let file = match file {
        Some(p) => read_file(p)?,
        None => Table::new(),
    };
    let preset: Preset = match lookup::<String>(flags, &file, "preset")? {
        Some(name) => name.parse().map_err(|e: drope_core::Error| CliError::Usage(e.to_string()))?,
        None => Preset::Small,
    };
    let seed = lookup::<u64>(flags, &file, "seed")?.unwrap_or(0);
    let steps = lookup::<usize>(flags, &file, "train.total_steps")?.unwrap_or_else(|| default_steps(preset));
    let drope_steps = lookup::<usize>(flags, &file, "drope.steps")?.unwrap_or(steps / 8);

    let base = RunConfig::preset(preset, seed, steps, drope_steps);
    let mut table = Table::try_from(&base).map_err(|e| CliError::Runtime(e.to_string()))?;
    merge(&mut table, file);
    merge(&mut table, flags.clone());
    let mut cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Usage(format!("invalid configuration: {e}")))?;
    // One seed and one context drive everything.
    cfg.train.seed = cfg.seed;
    cfg.corpus.seed = cfg.seed;
    cfg.train.seq_len = cfg.model.context;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(pairs: &[(&str, Value)]) -> Table {
        let mut t = Table::new();
        for (k, v) in pairs {
            set_path(&mut t, k, v.clone());
        }
        t
    }

    #[test]
    fn preset_defaults_resolve() {
        let cfg = resolve(None, &Table::new()).unwrap();
        assert_eq!(cfg.preset, Preset::Small);
        assert_eq!(cfg.train.total_steps, 1000);
        assert_eq!(cfg.drope.steps, 125);
        assert_eq!(cfg.train.seq_len, 128);
    }

    #[test]
    fn flag_beats_file_beats_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\n[train]\ntotal_steps = 40\npeak_lr = 0.02\n").unwrap();
        let cfg = resolve(Some(&path), &flags(&[("train.peak_lr", Value::Float(0.5))])).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.train.total_steps, 40);
        assert_eq!(cfg.train.warmup_steps, 4);
        assert_eq!(cfg.train.peak_lr, 0.5);
        assert_eq!(cfg.train.batch_size, 8);
    }

    #[test]
    fn snapshot_round_trips() {
        let cfg = resolve(None, &flags(&[("preset", Value::String("tiny".into())), ("seed", Value::Integer(9))])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.snapshot");
        std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
        assert_eq!(resolve(Some(&path), &Table::new()).unwrap(), cfg);
    }

    #[test]
    fn unknown_preset_is_usage_error() {
        let err = resolve(None, &flags(&[("preset", Value::String("huge".into()))])).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }
}
