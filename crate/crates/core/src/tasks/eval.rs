use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::SynthCorpus;
use super::niah::{gen_niah, run_niah, NiahVariant};
use crate::error::{invalid, Result};
use crate::model::{forward_batch, Checkpoint};
use crate::rope_scaling::{scaled_scheme, temperature, ScalingMethod};

/// Context truncation for the crop baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    /// Maximum context per scored position.
    pub window: usize,
    /// Window advance; 1 is exact, larger values re-encode less often.
    pub stride: usize,
}

impl Crop {
    /// Default stride of a quarter window.
    pub fn new(window: usize) -> Self {
        Self { window, stride: (window / 4).max(1) }
    }

    pub fn exact(window: usize) -> Self {
        Self { window, stride: 1 }
    }
}

/// Token-averaged next-token perplexity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perplexity {
    pub ppl: f64,
    pub mean_nll: f64,
    pub tokens: usize,
}

fn log_softmax_at(row: &[f64], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
    row[target] - max - z.ln()
}

/// Sum of next-token NLL over `positions` of each window, windows batched `batch` at a time.
fn windowed_nll(ck: &Checkpoint, windows: &[(Vec<usize>, std::ops::Range<usize>)], batch: usize) -> Result<(f64, usize)> {
    let (mut nll, mut count) = (0.0, 0);
    let mut by_len: std::collections::BTreeMap<usize, Vec<&(Vec<usize>, std::ops::Range<usize>)>> = Default::default();
    for w in windows {
        by_len.entry(w.0.len()).or_default().push(w);
    }
    for group in by_len.values() {
        for chunk in group.chunks(batch.max(1)) {
            let inputs: Vec<Vec<usize>> = chunk.iter().map(|(s, _)| s[..s.len() - 1].to_vec()).collect();
            let t = inputs[0].len();
            let (logits, _) = forward_batch(ck, &inputs, false)?;
            for (b, (s, range)) in chunk.iter().enumerate() {
                for p in range.clone() {
                    nll -= log_softmax_at(logits.row(b * t + p), s[p + 1]);
                    count += 1;
                }
            }
        }
    }
    Ok((nll, count))
}

/// Perplexity over `sequences` (each `eval_length + 1` tokens), optionally cropped.
///
/// With a crop, each scored position sees at most `window` tokens of context: windows
/// start every `stride` tokens and each scores only positions not scored before.
pub fn eval_perplexity(ck: &Checkpoint, sequences: &[Vec<usize>], crop: Option<Crop>) -> Result<Perplexity> {
    let n = sequences.first().map_or(0, Vec::len);
    if n < 2 || sequences.iter().any(|s| s.len() != n) {
        return Err(invalid("sequences must share a length of at least 2"));
    }
    let len = n - 1;
    let mut windows = Vec::new();
    for s in sequences {
        match crop {
            None => windows.push((s.clone(), 0..len)),
            Some(c) => {
                if c.window == 0 || c.stride == 0 || c.window > len || c.stride > c.window {
                    return Err(invalid(format!("crop {c:?} invalid for length {len}")));
                }
                let mut next = 0;
                let mut start = 0;
                loop {
                    let start_eff = start.min(len - c.window);
                    let end = start_eff + c.window;
                    windows.push((s[start_eff..=end].to_vec(), next - start_eff..c.window));
                    next = end;
                    if end == len {
                        break;
                    }
                    start += c.stride;
                }
            }
        }
    }
    let (nll, tokens) = windowed_nll(ck, &windows, 8)?;
    let mean_nll = nll / tokens as f64;
    Ok(Perplexity { ppl: mean_nll.exp(), mean_nll, tokens })
}

/// How a checkpoint is evaluated beyond its training length.
#[derive(Clone, Debug, PartialEq)]
pub enum SweepMethod {
    /// As trained.
    Base,
    /// Rotary frequency scaling with `s = length / C_train` (rotary checkpoints only).
    Scaled(ScalingMethod),
    /// Frequency scaling plus the logit temperature `β = (1 + 0.1·ln s)²`.
    ScaledWithTemperature(ScalingMethod),
    /// Logit temperature `β = 1 + a·ln s`.
    Temperature(f64),
    /// Contexts truncated to `C_train`.
    Crop,
}

impl SweepMethod {
    pub fn label(&self) -> String {
        match self {
            SweepMethod::Base => "none".into(),
            SweepMethod::Scaled(m) => m.to_string(),
            SweepMethod::ScaledWithTemperature(m) => format!("{m}+temp"),
            SweepMethod::Temperature(a) => format!("temp(a={a})"),
            SweepMethod::Crop => "crop".into(),
        }
    }
}

/// Checkpoint whose scheme is adjusted for evaluation at `length`.
pub fn adapt_for_length(ck: &Checkpoint, method: &SweepMethod, length: usize) -> Result<Checkpoint> {
    let c_train = ck.config.context;
    let s = (length as f64 / c_train as f64).max(1.0);
    let mut out = ck.clone();
    let scheme = &ck.config.scheme;
    out.config.scheme = match method {
        SweepMethod::Base | SweepMethod::Crop => scheme.clone(),
        SweepMethod::Scaled(m) => scaled_scheme(scheme, m, s, c_train)?,
        SweepMethod::ScaledWithTemperature(m) => {
            let beta = (1.0 + 0.1 * s.ln()).powi(2);
            let t = scheme.temperature;
            scaled_scheme(scheme, m, s, c_train)?.with_temperature(t * beta)?
        }
        SweepMethod::Temperature(a) => scheme.clone().with_temperature(scheme.temperature * temperature(s, *a)?)?,
    };
    Ok(out)
}

/// Evaluation task of a sweep cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Perplexity,
    Niah(NiahVariant),
}

impl Task {
    pub fn name(&self) -> String {
        match self {
            Task::Perplexity => "ppl".into(),
            Task::Niah(v) => format!("niah-{v}"),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ppl" {
            Ok(Task::Perplexity)
        } else {
            Ok(Task::Niah(s.parse()?))
        }
    }
}

/// One row of the results CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub method: String,
    pub scheme: String,
    pub scaling: String,
    pub s: f64,
    pub length: usize,
    pub task: String,
    pub trials: usize,
    pub success_rate: Option<f64>,
    pub partial_credit: Option<f64>,
    pub ppl: Option<f64>,
}

/// Sizes of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    /// NIAH samples per cell.
    pub trials: usize,
    /// Held-out sequences per perplexity cell.
    pub ppl_sequences: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { trials: 500, ppl_sequences: 16, seed: 0 }
    }
}

/// Evaluate `ck` for every `(method, length, task)` combination.
pub fn length_sweep(
    ck: &Checkpoint,
    label: &str,
    corpus: &SynthCorpus,
    methods: &[SweepMethod],
    lengths: &[usize],
    tasks: &[Task],
    cfg: &SweepConfig,
) -> Result<Vec<EvalResult>> {
    let c_train = ck.config.context;
    let mut rows = Vec::new();
    for method in methods {
        if matches!(method, SweepMethod::Scaled(_) | SweepMethod::ScaledWithTemperature(_)) && ck.config.scheme.rope_params().is_none() {
            return Err(invalid(format!("scaling {} needs a rotary checkpoint", method.label())));
        }
        for &length in lengths {
            let model = adapt_for_length(ck, method, length)?;
            for task in tasks {
                let mut row = EvalResult {
                    method: label.to_string(),
                    scheme: ck.config.scheme.name().to_string(),
                    scaling: method.label(),
                    s: length as f64 / c_train as f64,
                    length,
                    task: task.name(),
                    trials: 0,
                    success_rate: None,
                    partial_credit: None,
                    ppl: None,
                };
                match task {
                    Task::Perplexity => {
                        let seqs: Vec<Vec<usize>> = (0..cfg.ppl_sequences)
                            .map(|i| corpus.split_document(&format!("heldout-{}", cfg.seed), i, length + 1))
                            .collect();
                        let crop = (*method == SweepMethod::Crop && length > c_train).then(|| Crop::new(c_train));
                        row.ppl = Some(eval_perplexity(&model, &seqs, crop)?.ppl);
                        row.trials = seqs.len();
                    }
                    Task::Niah(variant) => {
                        if *method == SweepMethod::Crop {
                            continue;
                        }
                        let samples = (0..cfg.trials)
                            .map(|i| {
                                let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                                gen_niah(corpus, *variant, length, variant.default_needles(), c_train, seed)
                            })
                            .collect::<Result<Vec<_>>>()?;
                        let (success, partial) = run_niah(&model, &samples, 16)?;
                        row.trials = samples.len();
                        row.success_rate = Some(success);
                        row.partial_credit = Some(partial);
                    }
                }
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn write_results_csv(path: &Path, rows: &[EvalResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<EvalResult>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(crate::Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PositionalScheme;
    use crate::model::{build_model, sequence_loss, ModelConfig, Preset};
    use crate::numerics::RngStream;
    use crate::tasks::corpus::SynthCorpusConfig;

    fn setup(scheme: PositionalScheme) -> (Checkpoint, SynthCorpus) {
        let mut c = ModelConfig::preset(Preset::Small).with_scheme(scheme);
        c.context = 32;
        c.init_sigma = 0.2;
        let ck = build_model(&c, &mut RngStream::new(0, "init")).unwrap();
        (ck, SynthCorpus::new(SynthCorpusConfig::for_vocab(64, 0)).unwrap())
    }

    #[test]
    fn uncropped_matches_training_loss() {
        let (ck, cp) = setup(PositionalScheme::rope(10_000.0, 16).unwrap());
        let seqs = cp.heldout(3, 41);
        let p = eval_perplexity(&ck, &seqs, None).unwrap();
        assert_eq!(p.tokens, 120);
        let loss = sequence_loss(&ck, &seqs).unwrap();
        assert!((p.mean_nll - loss).abs() < 1e-12);
    }

    #[test]
    fn full_window_crop_is_identity() {
        let (ck, cp) = setup(PositionalScheme::rope(10_000.0, 16).unwrap());
        let seqs = cp.heldout(2, 41);
        let a = eval_perplexity(&ck, &seqs, None).unwrap();
        let b = eval_perplexity(&ck, &seqs, Some(Crop::new(40))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn exact_crop_matches_per_position_windows() {
        let (ck, cp) = setup(PositionalScheme::rope(10_000.0, 16).unwrap());
        let seq = cp.split_document("x", 0, 21);
        let w = 6;
        let mut nll = 0.0;
        for p in 0usize..20 {
            let start = (p + 1).saturating_sub(w);
            let (logits, _) = crate::model::forward(&ck, &seq[start..=p], false).unwrap();
            nll -= log_softmax_at(logits.row(p - start), seq[p + 1]);
        }
        let got = eval_perplexity(&ck, &[seq.clone()], Some(Crop::exact(w))).unwrap();
        assert_eq!(got.tokens, 20);
        assert!((got.mean_nll - nll / 20.0).abs() < 1e-12);
        let strided = eval_perplexity(&ck, &[seq], Some(Crop::new(8))).unwrap();
        assert_eq!(strided.tokens, 20);
    }

    #[test]
    fn unit_factor_methods_agree_at_training_length() {
        let (ck, cp) = setup(PositionalScheme::rope(10_000.0, 16).unwrap());
        let methods = [
            SweepMethod::Base,
            SweepMethod::Scaled(ScalingMethod::pi()),
            SweepMethod::Scaled(ScalingMethod::ntk()),
            SweepMethod::Scaled(ScalingMethod::yarn()),
            SweepMethod::ScaledWithTemperature(ScalingMethod::yarn()),
            SweepMethod::Crop,
        ];
        let cfg = SweepConfig { trials: 4, ppl_sequences: 2, seed: 1 };
        let rows = length_sweep(&ck, "rope", &cp, &methods, &[32], &[Task::Perplexity, Task::Niah(NiahVariant::MultiKey)], &cfg).unwrap();
        let ppl: Vec<f64> = rows.iter().filter_map(|r| r.ppl).collect();
        assert_eq!(ppl.len(), methods.len());
        assert!(ppl.iter().all(|&p| p == ppl[0]), "{ppl:?}");
        let niah: Vec<f64> = rows.iter().filter_map(|r| r.success_rate).collect();
        assert!(niah.iter().all(|&p| p == niah[0]));
        assert!(rows.iter().all(|r| r.s == 1.0));
    }

    #[test]
    fn scaling_rejected_on_nope() {
        let (ck, cp) = setup(PositionalScheme::nope());
        let cfg = SweepConfig { trials: 1, ppl_sequences: 1, seed: 0 };
        let r = length_sweep(&ck, "nope", &cp, &[SweepMethod::Scaled(ScalingMethod::yarn())], &[64], &[Task::Perplexity], &cfg);
        assert!(r.is_err());
    }

    #[test]
    fn results_csv_round_trip() {
        let (ck, cp) = setup(PositionalScheme::nope());
        let cfg = SweepConfig { trials: 2, ppl_sequences: 1, seed: 0 };
        let rows = length_sweep(&ck, "nope", &cp, &[SweepMethod::Base, SweepMethod::Temperature(0.4)], &[64], &[Task::Perplexity, Task::Niah(NiahVariant::Standard)], &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_results_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("method,scheme,scaling,s,length,task,trials,success_rate,partial_credit,ppl\n"));
        assert_eq!(read_results_csv(&path).unwrap(), rows);
    }
}
