//! Dropping positional embeddings from a trained checkpoint and recalibrating.
//!
//! The pipeline is strip → recalibrate at the original context length, plus two
//! experiment drivers: the drop-step ablation and the logit-temperature fit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::PositionalScheme;
use crate::error::{invalid, Error, Result};
use crate::model::{
    build_model, layer_param, sequence_loss, train, BatchSource, Checkpoint, MetricRow, ModelConfig,
    QkNorm, TrainHooks, TrainOutcome, TrainRecipe,
};
use crate::numerics::{RngStream, Tensor};
use crate::rope_scaling::REFERENCE_TEMPERATURE_COEFFICIENTS;
use crate::tasks::eval_perplexity;

/// Coefficient reported for a model trained from scratch without positions.
pub const REFERENCE_COEFFICIENT_SCRATCH: f64 = REFERENCE_TEMPERATURE_COEFFICIENTS[0];
/// Coefficient reported for a recalibrated pretrained model.
pub const REFERENCE_COEFFICIENT_RECALIBRATED: f64 = REFERENCE_TEMPERATURE_COEFFICIENTS[1];

/// Remove positional information from every layer, keeping all weights.
///
/// With `enable_qknorm`, RMS normalization of queries and keys is switched on and its
/// gains are appended at 1.
pub fn strip_positional_embeddings(ck: &Checkpoint, enable_qknorm: bool) -> Result<Checkpoint> {
    strip_with(ck, if enable_qknorm { QkNorm::On } else { QkNorm::Off })
}

/// [`strip_positional_embeddings`] with an explicit normalization mode.
///
/// `QkNorm::Off` keeps whatever normalization the checkpoint already had.
pub fn strip_with(ck: &Checkpoint, qk_norm: QkNorm) -> Result<Checkpoint> {
    if ck.scheme().is_nope() {
        return Err(invalid("checkpoint has no positional embeddings to strip"));
    }
    let mut out = ck.clone();
    let temperature = ck.scheme().temperature;
    out.config.scheme = PositionalScheme::nope().with_temperature(temperature)?;
    let (q, kv) = (ck.config.heads * ck.config.head_dim, ck.config.kv_heads * ck.config.head_dim);
    let want_q = ck.config.qk_norm.queries() || qk_norm.queries();
    let want_k = ck.config.qk_norm.keys() || qk_norm.keys();
    for layer in 0..ck.config.layers {
        if want_q {
            out.params.entry(layer_param(layer, "attn.q_norm.gain")).or_insert_with(|| Tensor::full(&[q], 1.0));
        }
        if want_k {
            out.params.entry(layer_param(layer, "attn.k_norm.gain")).or_insert_with(|| Tensor::full(&[kv], 1.0));
        }
    }
    out.config.qk_norm = match (want_q, want_k) {
        (true, true) => QkNorm::On,
        (true, false) => QkNorm::QueriesOnly,
        (false, false) => QkNorm::Off,
        (false, true) => return Err(invalid("keys-only normalization is not supported")),
    };
    out.record(format!("drope-strip@step={}", ck.step));
    out.validate()?;
    Ok(out)
}

/// Schedule for the recalibration phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropeRecipe {
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub enable_qknorm: bool,
    /// Everything else (batch size, betas, decay, clip, seed) comes from here.
    pub base: TrainRecipe,
}

impl DropeRecipe {
    /// Desk defaults: a tenth of the steps as warmup and a third of the parent's peak rate.
    pub fn desk(steps: usize, base: &TrainRecipe) -> Self {
        Self {
            steps,
            warmup_steps: (steps / 10).max(1).min(steps),
            peak_lr: base.peak_lr / 3.0,
            enable_qknorm: true,
            base: base.clone(),
        }
    }

    /// Training recipe for a checkpoint whose context length is `context`.
    pub fn train_recipe(&self, context: usize) -> TrainRecipe {
        TrainRecipe {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps.min(self.steps),
            total_steps: self.steps,
            seq_len: context,
            ..self.base.clone()
        }
    }
}

/// Continue training a stripped checkpoint at its original context length.
///
/// Adam moments are reset and the schedule restarts with its own warmup.
pub fn recalibrate(ck: &Checkpoint, source: &mut dyn BatchSource, recipe: &DropeRecipe) -> Result<TrainOutcome> {
    if !ck.scheme().is_nope() {
        return Err(invalid("recalibration expects a stripped checkpoint"));
    }
    if recipe.base.seq_len != ck.config.context {
        return Err(invalid(format!(
            "recalibration runs at the training context {}, recipe asks for {}",
            ck.config.context, recipe.base.seq_len
        )));
    }
    let mut start = ck.clone();
    start.optimizer = None;
    train(start, source, &recipe.train_recipe(ck.config.context), &mut TrainHooks::default())
}

/// One arm of the drop-step ablation.
#[derive(Clone, Debug)]
pub struct AblationRun {
    pub fraction: f64,
    /// Global step at which positions were removed; `None` if never.
    pub drop_step: Option<usize>,
    pub val_loss: f64,
    pub checkpoint: Checkpoint,
    /// Metrics of the whole run, parent steps first.
    pub metrics: Vec<MetricRow>,
}

/// Row of the ablation CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub fraction: f64,
    pub drop_step: Option<usize>,
    pub total_steps: usize,
    pub val_loss: f64,
}

impl AblationRun {
    pub fn row(&self, total_steps: usize) -> AblationRow {
        AblationRow { fraction: self.fraction, drop_step: self.drop_step, total_steps, val_loss: self.val_loss }
    }
}

/// Equal-budget runs that drop positions after `fraction · total_steps` steps.
///
/// `config` is the positional parent configuration, initialized from `init_seed`.
/// Fraction 0 is a position-free model trained from scratch with `recipe`; fraction 1
/// is the parent run itself. Other fractions branch from the parent at the drop step
/// and recalibrate for the remaining steps with `drope`'s rate and warmup.
pub fn drop_step_ablation(
    config: &ModelConfig,
    init_seed: u64,
    source: &mut dyn BatchSource,
    recipe: &TrainRecipe,
    drope: &DropeRecipe,
    fractions: &[f64],
    val: &[Vec<usize>],
) -> Result<Vec<AblationRun>> {
    if config.scheme.is_nope() {
        return Err(invalid("ablation parent must carry positional embeddings"));
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..=1.0).contains(*f)) {
        return Err(invalid(format!("drop fraction {f} outside [0, 1]")));
    }
    let total = recipe.total_steps;
    let drop_at = |f: f64| (f * total as f64).round() as usize;
    let branch_steps: Vec<usize> = fractions
        .iter()
        .filter(|&&f| f > 0.0 && f < 1.0)
        .map(|&f| drop_at(f))
        .collect();
    let need_parent = fractions.iter().any(|&f| f > 0.0);

    let mut snapshots: Vec<(usize, Checkpoint)> = Vec::new();
    let parent = if need_parent {
        let init = build_model(config, &mut RngStream::new(init_seed, "init"))?;
        let mut hooks = TrainHooks::on_step(|row, ck| {
            if branch_steps.contains(&row.step) && !snapshots.iter().any(|(s, _)| *s == row.step) {
                snapshots.push((row.step, ck.clone()));
            }
            Ok(())
        });
        let out = train(init.clone(), source, recipe, &mut hooks)?;
        drop(hooks);
        if branch_steps.contains(&0) {
            snapshots.push((0, init));
        }
        Some(out)
    } else {
        None
    };

    let mut runs = Vec::new();
    for &fraction in fractions {
        let run = if fraction == 0.0 {
            let nope = config.clone().with_scheme(PositionalScheme::nope());
            let init = build_model(&nope, &mut RngStream::new(init_seed, "init"))?;
            let out = train(init, source, recipe, &mut TrainHooks::default())?;
            (None, out.checkpoint, out.metrics)
        } else if fraction == 1.0 {
            let p = parent.as_ref().expect("parent trained");
            (None, p.checkpoint.clone(), p.metrics.clone())
        } else {
            let k = drop_at(fraction);
            let p = parent.as_ref().expect("parent trained");
            let snap = &snapshots.iter().find(|(s, _)| *s == k).expect("snapshot taken").1;
            let stripped = strip_positional_embeddings(snap, drope.enable_qknorm)?;
            let rec = DropeRecipe { steps: total - k, ..drope.clone() };
            let out = recalibrate(&stripped, source, &rec)?;
            let mut metrics: Vec<MetricRow> = p.metrics.iter().take(k).cloned().collect();
            metrics.extend(out.metrics);
            (Some(k), out.checkpoint, metrics)
        };
        let (drop_step, checkpoint, metrics) = run;
        let val_loss = sequence_loss(&checkpoint, val)?;
        runs.push(AblationRun { fraction, drop_step, val_loss, checkpoint, metrics });
    }
    Ok(runs)
}

pub fn write_ablation_csv(path: &Path, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse-temperature grid `0.80, 0.82, …, 2.00`; contains 1 exactly.
pub fn temperature_grid() -> Vec<f64> {
    (40..=100).map(|i| i as f64 / 50.0).collect()
}

/// Best grid temperature at one evaluation length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperaturePoint {
    pub s: f64,
    pub beta_grid_argmin: f64,
    pub ppl_at_argmin: f64,
    pub ppl_at_beta1: f64,
}

/// Least-squares fit of `β(s) = 1 + a·ln s` to per-length optimal temperatures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub coefficient: f64,
    pub lengths: Vec<usize>,
    pub points: Vec<TemperaturePoint>,
}

impl TemperatureFit {
    pub fn beta(&self, s: f64) -> f64 {
        1.0 + self.coefficient * s.ln()
    }
}

/// Per-length grid search for the perplexity-minimizing temperature.
///
/// `heldout(length)` supplies sequences of `length + 1` tokens.
pub fn temperature_scan(
    ck: &Checkpoint,
    heldout: &dyn Fn(usize) -> Vec<Vec<usize>>,
    lengths: &[usize],
) -> Result<Vec<TemperaturePoint>> {
    if !ck.scheme().is_nope() {
        return Err(invalid("temperature fitting expects a position-free checkpoint"));
    }
    let c_train = ck.config.context;
    if let Some(l) = lengths.iter().find(|&&l| l < c_train) {
        return Err(invalid(format!("length {l} below the training context {c_train}")));
    }
    let base = ck.scheme().temperature;
    let mut points = Vec::new();
    for &length in lengths {
        let seqs = heldout(length);
        let mut best = (f64::NAN, f64::INFINITY);
        let mut at_one = f64::NAN;
        for beta in temperature_grid() {
            let mut probe = ck.clone();
            probe.config.scheme = probe.config.scheme.clone().with_temperature(base * beta)?;
            let ppl = eval_perplexity(&probe, &seqs, None)?.ppl;
            if beta == 1.0 {
                at_one = ppl;
            }
            if ppl < best.1 {
                best = (beta, ppl);
            }
        }
        points.push(TemperaturePoint {
            s: length as f64 / c_train as f64,
            beta_grid_argmin: best.0,
            ppl_at_argmin: best.1,
            ppl_at_beta1: at_one,
        });
    }
    Ok(points)
}

/// Least-squares `a` in `β = 1 + a·ln s` through the scanned optima.
pub fn fit_coefficient(points: &[TemperaturePoint]) -> Result<f64> {
    let informative: Vec<&TemperaturePoint> = points.iter().filter(|p| p.s > 1.0).collect();
    if informative.is_empty() {
        return Err(Error::DegenerateFit("no length beyond the training context; ln s = 0 carries no signal".into()));
    }
    let grid = temperature_grid();
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    if informative.iter().all(|p| p.beta_grid_argmin == lo || p.beta_grid_argmin == hi) {
        return Err(Error::DegenerateFit(format!("every optimum sits at the grid edge [{lo}, {hi}]")));
    }
    let (num, den) = informative
        .iter()
        .fold((0.0, 0.0), |(n, d), p| (n + p.s.ln() * (p.beta_grid_argmin - 1.0), d + p.s.ln().powi(2)));
    Ok(num / den)
}

/// Scan then fit; see [`temperature_scan`] and [`fit_coefficient`].
pub fn fit_temperature(
    ck: &Checkpoint,
    heldout: &dyn Fn(usize) -> Vec<Vec<usize>>,
    lengths: &[usize],
) -> Result<TemperatureFit> {
    if lengths.iter().all(|&l| l == ck.config.context) {
        return Err(Error::DegenerateFit("no length beyond the training context; ln s = 0 carries no signal".into()));
    }
    let points = temperature_scan(ck, heldout, lengths)?;
    let coefficient = fit_coefficient(&points)?;
    Ok(TemperatureFit { coefficient, lengths: lengths.to_vec(), points })
}

/// Write `s, beta_grid_argmin, ppl_at_argmin, ppl_at_beta1` rows.
pub fn write_temperature_csv(path: &Path, fit: &TemperatureFit) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in &fit.points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_temperature_csv(path: &Path) -> Result<Vec<TemperaturePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
