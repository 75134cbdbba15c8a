use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::{AdamState, Checkpoint};
use super::config::{cosine_lr, TrainRecipe};
use super::forward::loss_and_grads;
use crate::error::{invalid, Error, Result};
use crate::numerics::Tensor;

/// Supplier of training sequences.
///
/// Batches are addressed by global step so that a run resumed or branched at step `k`
/// sees exactly the data the uninterrupted run would have seen.
pub trait BatchSource {
    /// `batch` sequences of `seq_len + 1` tokens for global step `step` (1-based).
    fn batch(&mut self, step: usize, batch: usize, seq_len: usize) -> Result<Vec<Vec<usize>>>;
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub tokens_seen: u64,
}

type StepCallback<'a> = Box<dyn FnMut(&MetricRow, &Checkpoint) -> Result<()> + 'a>;

/// Optional interventions in the step loop.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Stop after this many local steps even if the schedule runs longer.
    pub stop_after: Option<usize>,
    /// Called after every update with the new checkpoint.
    pub on_step: Option<StepCallback<'a>>,
}

impl<'a> TrainHooks<'a> {
    pub fn on_step(f: impl FnMut(&MetricRow, &Checkpoint) -> Result<()> + 'a) -> Self {
        Self { stop_after: None, on_step: Some(Box::new(f)) }
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricRow>,
}

fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

fn adamw_update(ck: &mut Checkpoint, grads: &BTreeMap<String, Tensor>, lr: f64, clip_scale: f64, r: &TrainRecipe) -> Result<()> {
    let state = ck.optimizer.get_or_insert_with(AdamState::default);
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - r.beta1.powi(t), 1.0 - r.beta2.powi(t));
    for (name, g) in grads {
        let p = ck.params.get_mut(name).ok_or_else(|| invalid(format!("gradient for unknown {name}")))?;
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        // Decay matrices only; gains and other vectors are exempt.
        let decay = if p.shape().len() == 2 { r.weight_decay } else { 0.0 };
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (((w, m), v), &g) in pd.iter_mut().zip(md).zip(vd).zip(g.data()) {
            let g = g * clip_scale;
            *m = r.beta1 * *m + (1.0 - r.beta1) * g;
            *v = r.beta2 * *v + (1.0 - r.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + r.eps);
            *w -= lr * (update + decay * *w);
        }
    }
    Ok(())
}

/// Run `recipe.total_steps` AdamW steps (warmup + cosine) starting from `ck`.
///
/// Steps are numbered from `ck.step + 1`; the schedule is indexed by the local step.
/// A non-finite loss or gradient aborts with [`Error::Diverged`] holding the last
/// finite checkpoint.
pub fn train(
    ck: Checkpoint,
    source: &mut dyn BatchSource,
    recipe: &TrainRecipe,
    hooks: &mut TrainHooks<'_>,
) -> Result<TrainOutcome> {
    recipe.validate()?;
    ck.validate()?;
    let mut ck = ck;
    let mut metrics = Vec::new();
    let limit = hooks.stop_after.map_or(recipe.total_steps, |s| s.min(recipe.total_steps));
    let start = ck.step;
    for local in 1..=limit {
        let step = start + local;
        let lr = cosine_lr(local, recipe);
        let batch = source.batch(step, recipe.batch_size, recipe.seq_len)?;
        let diverged = |ck: Checkpoint, reason: String| Error::Diverged { step, reason, last_good: Box::new(ck) };
        let (loss, grads) = match loss_and_grads(&ck, &batch) {
            Ok(x) => x,
            Err(Error::NonFinite { location }) => return Err(diverged(ck, format!("non-finite value at {location}"))),
            Err(e) => return Err(e),
        };
        let grad_norm = global_norm(&grads);
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(diverged(ck, format!("loss {loss}, gradient norm {grad_norm}")));
        }
        let clip_scale = match recipe.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let before = ck.clone();
        adamw_update(&mut ck, &grads, lr, clip_scale, recipe)?;
        if ck.params.values().any(|p| !p.all_finite()) {
            return Err(diverged(before, "non-finite parameters after update".into()));
        }
        drop(before);
        ck.step = step;
        ck.tokens_seen += (recipe.batch_size * recipe.seq_len) as u64;
        let row = MetricRow { step, lr, loss, grad_norm, tokens_seen: ck.tokens_seen };
        if let Some(f) = hooks.on_step.as_mut() {
            f(&row, &ck)?;
        }
        metrics.push(row);
    }
    if limit > 0 {
        ck.record(format!("train@steps={}..{},lr={},seed={}", start + 1, start + limit, recipe.peak_lr, recipe.seed));
    }
    Ok(TrainOutcome { checkpoint: ck, metrics })
}

/// Append rows to a metrics CSV, writing the header when the file is new or empty.
pub fn append_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
