use std::path::{Path, PathBuf};

use clap::Args;
use drope_core::analysis::{
    attention_profile, head_bias_profile, trace_bias_gradients, uniformity_report, write_bias_csv,
    HeadBiasRow, LayerParams, WeightsKind,
};
use drope_core::attention::{rope_frequencies, AttentionParams};
use drope_core::drope::{fit_temperature, recalibrate, strip_positional_embeddings, write_temperature_csv};
use drope_core::model::{
    append_metrics_csv, build_model, forward, load_checkpoint, save_checkpoint, sequence_loss, train as run_train,
    Checkpoint, MetricRow, TrainHooks,
};
use drope_core::numerics::RngStream;
use drope_core::rope_scaling::{phase_report, write_gamma_csv, write_phase_csv, ScalingMethod};
use drope_core::tasks::{length_sweep, write_results_csv, SweepMethod, SynthCorpus, Task};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::layout::RunDir;
use crate::RunArgs;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn corpus_for(cfg: &RunConfig, ck: &Checkpoint) -> Result<SynthCorpus, CliError> {
    if cfg.corpus.vocab != ck.config.vocab {
        return Err(usage(format!(
            "corpus vocabulary {} does not match the checkpoint's {}",
            cfg.corpus.vocab, ck.config.vocab
        )));
    }
    Ok(SynthCorpus::new(cfg.corpus.clone())?)
}

fn load(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(load_checkpoint(path)?)
}

/// Held-out sequences of `length + 1` tokens, as used by the sweeps.
fn heldout(corpus: &SynthCorpus, cfg: &RunConfig, length: usize) -> Vec<Vec<usize>> {
    (0..cfg.eval.ppl_sequences)
        .map(|i| corpus.split_document(&format!("heldout-{}", cfg.seed), i, length + 1))
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// `2x` → `2·c_train`, `300` → 300.
pub fn parse_lengths(spec: &str, c_train: usize) -> Result<Vec<usize>, CliError> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let parsed = match s.strip_suffix('x') {
                Some(m) => m.parse::<f64>().map(|m| (m * c_train as f64).round() as usize),
                None => s.parse::<f64>().map(|v| v as usize),
            };
            match parsed {
                Ok(l) if l > 0 => Ok(l),
                _ => Err(usage(format!("bad length {s:?}"))),
            }
        })
        .collect()
}

pub fn parse_scaling(spec: &str) -> Result<Vec<SweepMethod>, CliError> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let method = |m: &str| m.parse::<ScalingMethod>().map_err(|e| usage(e.to_string()));
            Ok(if s == "none" {
                SweepMethod::Base
            } else if s == "crop" {
                SweepMethod::Crop
            } else if let Some(a) = s.strip_prefix("temp=") {
                SweepMethod::Temperature(a.parse().map_err(|_| usage(format!("bad temperature {a:?}")))?)
            } else if let Some(m) = s.strip_suffix("+temp") {
                SweepMethod::ScaledWithTemperature(method(m)?)
            } else {
                SweepMethod::Scaled(method(s)?)
            })
        })
        .collect()
}

fn report_every(total: usize) -> usize {
    (total / 20).max(1)
}

/// Training loop shared by `train` and `drope`: progress on stderr, metrics flushed in blocks.
fn train_logged(
    ck: Checkpoint,
    corpus: &mut SynthCorpus,
    recipe: &drope_core::model::TrainRecipe,
    metrics_path: &Path,
    save_every: Option<usize>,
    dir: &RunDir,
) -> Result<Checkpoint, CliError> {
    if metrics_path.exists() {
        std::fs::remove_file(metrics_path)?;
    }
    let every = report_every(recipe.total_steps);
    let mut pending: Vec<MetricRow> = Vec::new();
    let mut hooks = TrainHooks::on_step(|row, ck| {
        pending.push(row.clone());
        if row.step % every == 0 {
            eprintln!("step {:>6}  loss {:.4}  lr {:.2e}  grad {:.3}", row.step, row.loss, row.lr, row.grad_norm);
            append_metrics_csv(metrics_path, &pending)?;
            pending.clear();
        }
        if let Some(n) = save_every {
            if n > 0 && row.step % n == 0 {
                save_checkpoint(ck, &dir.checkpoint(&format!("step-{}.ckpt", row.step)))?;
            }
        }
        Ok(())
    });
    let result = run_train(ck, corpus, recipe, &mut hooks);
    drop(hooks);
    append_metrics_csv(metrics_path, &pending)?;
    match result {
        Ok(out) => Ok(out.checkpoint),
        Err(drope_core::Error::Diverged { step, reason, last_good }) => {
            let path = dir.checkpoint("last_good.ckpt");
            save_checkpoint(&last_good, &path)?;
            Err(CliError::Runtime(format!(
                "training diverged at step {step}: {reason}; last good checkpoint saved to {}",
                path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Serialize)]
struct Summary {
    checkpoint: PathBuf,
    step: usize,
    tokens_seen: u64,
    final_loss: Option<f64>,
    val_loss: f64,
}

fn summarize(dir: &RunDir, cfg: &RunConfig, corpus: &SynthCorpus, ck: &Checkpoint, path: PathBuf, metrics: &Path, name: &str) -> Result<(), CliError> {
    let val = heldout(corpus, cfg, ck.config.context);
    let val_loss = sequence_loss(ck, &val)?;
    let final_loss = drope_core::model::read_metrics_csv(metrics).ok().and_then(|m| m.last().map(|r| r.loss));
    println!("saved {} (step {}, val loss {val_loss:.4})", path.display(), ck.step);
    let summary = Summary { checkpoint: path, step: ck.step, tokens_seen: ck.tokens_seen, final_loss, val_loss };
    write_json(&dir.results(name), &summary)
}

pub fn train(cfg: &RunConfig, save_every: Option<usize>) -> Result<(), CliError> {
    let dir = RunDir::open(cfg)?;
    let ck = build_model(&cfg.model, &mut RngStream::new(cfg.seed, "init"))?;
    let mut corpus = SynthCorpus::new(cfg.corpus.clone())?;
    let metrics = dir.metrics("train.csv");
    let ck = train_logged(ck, &mut corpus, &cfg.train, &metrics, save_every, &dir)?;
    let path = dir.checkpoint("final.ckpt");
    save_checkpoint(&ck, &path)?;
    summarize(&dir, cfg, &corpus, &ck, path, &metrics, "train_summary.json")
}

#[derive(Serialize)]
struct FitSummary {
    coefficient: f64,
    lengths: Vec<usize>,
}

pub fn drope(cfg: &RunConfig, parent: &Path, fit_lengths: Option<&str>) -> Result<(), CliError> {
    let parent = load(parent)?;
    if parent.scheme().is_nope() {
        return Err(usage("parent checkpoint has no positional embeddings to strip"));
    }
    let mut corpus = corpus_for(cfg, &parent)?;
    let lengths = fit_lengths.map(|s| parse_lengths(s, parent.config.context)).transpose()?;
    let dir = RunDir::open(cfg)?;
    let stripped = strip_positional_embeddings(&parent, cfg.drope.enable_qknorm)?;
    let recipe = cfg.drope_recipe(parent.config.context);
    let metrics = dir.metrics("recalibration.csv");
    let ck = if recipe.steps == 0 {
        if metrics.exists() {
            std::fs::remove_file(&metrics)?;
        }
        recalibrate(&stripped, &mut corpus, &recipe)?.checkpoint
    } else {
        let mut start = stripped;
        start.optimizer = None;
        // Same as `recalibrate`, with progress and metric logging.
        train_logged(start, &mut corpus, &recipe.train_recipe(parent.config.context), &metrics, None, &dir)?
    };
    let path = dir.checkpoint("drope.ckpt");
    save_checkpoint(&ck, &path)?;
    summarize(&dir, cfg, &corpus, &ck, path, &metrics, "drope_summary.json")?;
    if let Some(lengths) = lengths {
        let source = |l: usize| heldout(&corpus, cfg, l);
        let fit = fit_temperature(&ck, &source, &lengths)?;
        write_temperature_csv(&dir.results("temperature_fit.csv"), &fit)?;
        write_json(&dir.results("temperature_fit.json"), &FitSummary { coefficient: fit.coefficient, lengths: fit.lengths.clone() })?;
        println!("temperature coefficient a = {:.4}", fit.coefficient);
        for p in &fit.points {
            println!(
                "  s={:<5} beta*={:.2}  ppl(beta*)={:.4}  ppl(1)={:.4}  beta_fit={:.3}",
                p.s,
                p.beta_grid_argmin,
                p.ppl_at_argmin,
                p.ppl_at_beta1,
                fit.beta(p.s)
            );
        }
    }
    Ok(())
}

pub struct EvalSpec {
    pub task: String,
    pub lengths: String,
    pub scaling: String,
    pub crop: bool,
    pub temperature: Option<f64>,
    pub name: String,
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, spec: &EvalSpec) -> Result<(), CliError> {
    let ck = load(checkpoint)?;
    let corpus = corpus_for(cfg, &ck)?;
    let tasks = spec
        .task
        .split(',')
        .map(|t| t.trim().parse::<Task>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let lengths = parse_lengths(&spec.lengths, ck.config.context)?;
    let mut methods = parse_scaling(&spec.scaling)?;
    if spec.crop {
        methods.push(SweepMethod::Crop);
    }
    if let Some(a) = spec.temperature {
        methods.push(SweepMethod::Temperature(a));
    }
    let rotary = ck.scheme().rope_params().is_some();
    if let Some(m) = methods
        .iter()
        .find(|m| matches!(m, SweepMethod::Scaled(_) | SweepMethod::ScaledWithTemperature(_)) && !rotary)
    {
        return Err(usage(format!(
            "--scaling {} applies only to rotary checkpoints; this one is {}",
            m.label(),
            ck.scheme().name()
        )));
    }
    let dir = RunDir::open(cfg)?;
    let label = ck
        .provenance
        .iter()
        .any(|p| p.starts_with("drope-strip"))
        .then_some("drope")
        .unwrap_or(ck.scheme().name());
    let rows = length_sweep(&ck, label, &corpus, &methods, &lengths, &tasks, &cfg.sweep_config())?;
    let path = dir.results(&format!("{}.csv", spec.name));
    write_results_csv(&path, &rows)?;
    println!("{:<16} {:>7} {:<18} {:>8} {:>10}", "scaling", "length", "task", "success", "ppl");
    for r in &rows {
        let fmt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |v| format!("{v:.p$}"));
        println!("{:<16} {:>7} {:<18} {:>8} {:>10}", r.scaling, r.length, r.task, fmt(r.success_rate, 3), fmt(r.ppl, 4));
    }
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to analyze; a fresh initialization from the config when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Positional bias and its gradients per head.
    #[arg(long)]
    bias: bool,
    /// Uniformity bounds of a position-free checkpoint.
    #[arg(long)]
    bounds: bool,
    /// Per-head bias profile and one attention row.
    #[arg(long)]
    profiles: bool,
    /// Rotary phase census and scaling factors (model-free).
    #[arg(long)]
    frequencies: bool,
    #[arg(long, default_value_t = 10_000.0)]
    base: f64,
    #[arg(long, default_value_t = 64)]
    dk: usize,
    #[arg(long, default_value_t = 32_000)]
    ctrain: usize,
    /// Test length for the census; twice `--ctrain` by default.
    #[arg(long)]
    ctest: Option<usize>,
    /// Comma list of `diagonal`, `off-diagonal`, `deviation`.
    #[arg(long, default_value = "diagonal,off-diagonal")]
    weights: String,
    /// Sequences averaged for `--bias`.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    /// Sequence length; the training context by default.
    #[arg(long)]
    length: Option<usize>,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    #[arg(long, default_value_t = 0)]
    head: usize,
    /// Query position for the attention row; the last position by default.
    #[arg(long)]
    query: Option<usize>,
}

#[derive(Serialize)]
struct ProfileRow {
    layer: usize,
    head: usize,
    weights_kind: String,
    bias: f64,
    most_positional: bool,
}

#[derive(Serialize)]
struct AttentionRow {
    layer: usize,
    head: usize,
    query: usize,
    key: usize,
    weight: f64,
}

fn csv_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn analyze(args: &AnalyzeArgs) -> Result<(), CliError> {
    if !(args.bias || args.bounds || args.profiles || args.frequencies) {
        return Err(usage("choose at least one of --bias, --bounds, --profiles, --frequencies"));
    }
    let cfg = args.run.resolve()?;
    let dir = RunDir::open(&cfg)?;
    if args.frequencies {
        let freqs = rope_frequencies(args.base, args.dk)?;
        let ctest = args.ctest.unwrap_or(2 * args.ctrain);
        let methods = [ScalingMethod::pi(), ScalingMethod::ntk(), ScalingMethod::yarn()];
        let report = phase_report(&freqs, args.ctrain, ctest, &methods)?;
        write_phase_csv(&dir.analysis("phases.csv"), &report)?;
        let s = ctest as f64 / args.ctrain as f64;
        write_gamma_csv(&dir.analysis("gammas.csv"), &freqs, &methods, &[s], args.ctrain)?;
        println!(
            "base {} d_k {} C_train {}: {} of {} frequencies complete less than one cycle",
            args.base,
            args.dk,
            args.ctrain,
            report.subcycle_count(),
            freqs.len()
        );
        for (name, g) in report.lowest_frequency_gammas() {
            println!("  lowest-frequency gamma {name}: {g:.6} (1/s = {:.6})", 1.0 / s);
        }
    }
    if !(args.bias || args.bounds || args.profiles) {
        return Ok(());
    }
    let ck = match &args.checkpoint {
        Some(p) => load(p)?,
        None => build_model(&cfg.model, &mut RngStream::new(cfg.seed, "init"))?,
    };
    let corpus = corpus_for(&cfg, &ck)?;
    let length = args.length.unwrap_or(ck.config.context);
    let sequence = |i: usize| corpus.split_document(&format!("analysis-{}", cfg.seed), i, length);
    let params = (0..ck.config.layers).map(|l| ck.attention_params(l)).collect::<drope_core::Result<Vec<AttentionParams>>>()?;
    let refs: Vec<&AttentionParams> = params.iter().collect();

    if args.bias {
        let kinds = args
            .weights
            .split(',')
            .map(|k| k.trim().parse::<WeightsKind>().map_err(|e| usage(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let mut sums: Vec<HeadBiasRow> = Vec::new();
        for i in 0..args.samples.max(1) {
            let (_, trace) = forward(&ck, &sequence(i), true)?;
            let trace = trace.expect("trace requested");
            let mut rows = Vec::new();
            for &kind in &kinds {
                rows.extend(trace_bias_gradients(&trace, &refs, ck.scheme(), kind)?);
            }
            if sums.is_empty() {
                sums = rows;
            } else {
                for (s, r) in sums.iter_mut().zip(rows) {
                    s.bias += r.bias;
                    s.grad_norm_q += r.grad_norm_q;
                    s.grad_norm_k += r.grad_norm_k;
                }
            }
        }
        let n = args.samples.max(1) as f64;
        for s in &mut sums {
            s.bias /= n;
            s.grad_norm_q /= n;
            s.grad_norm_k /= n;
        }
        write_bias_csv(&dir.analysis("bias.csv"), &sums)?;
        for s in &sums {
            println!(
                "layer {} head {} {:<12} bias {:+.3e}  |grad| {:.3e}",
                s.layer,
                s.head,
                s.weights_kind,
                s.bias,
                s.grad_norm()
            );
        }
    }
    if args.bounds {
        let (_, trace) = forward(&ck, &sequence(0), true)?;
        let trace = trace.expect("trace requested");
        let mlps = (0..ck.config.layers).map(|l| ck.mlp_params(l)).collect::<drope_core::Result<Vec<_>>>()?;
        let layers: Vec<LayerParams<'_>> = params
            .iter()
            .zip(&mlps)
            .map(|(attn, (w1, w2))| LayerParams { attn, mlp: Some((w1, w2)) })
            .collect();
        let report = uniformity_report(&trace, &layers, ck.scheme())?;
        report.write_csv(&dir.analysis("bounds.csv"))?;
        println!("{} bound checks, {} violations", report.bounds.len(), report.violations().len());
    }
    if args.profiles {
        let (_, trace) = forward(&ck, &sequence(0), true)?;
        let trace = trace.expect("trace requested");
        let mut rows = Vec::new();
        for kind in [WeightsKind::Diagonal, WeightsKind::OffDiagonal, WeightsKind::Deviation] {
            let profile = head_bias_profile(&trace, kind)?;
            for (l, heads) in profile.values.iter().enumerate() {
                for (h, &bias) in heads.iter().enumerate() {
                    rows.push(ProfileRow { layer: l, head: h, weights_kind: kind.to_string(), bias, most_positional: profile.argmax[l] == h });
                }
            }
        }
        csv_rows(&dir.analysis("head_profile.csv"), &rows)?;
        let query = args.query.unwrap_or(length - 1);
        let weights = attention_profile(&trace, args.layer, args.head, query, 0..query + 1)?;
        let attention: Vec<AttentionRow> = weights
            .iter()
            .enumerate()
            .map(|(key, &weight)| AttentionRow { layer: args.layer, head: args.head, query, key, weight })
            .collect();
        csv_rows(&dir.analysis("attention_profile.csv"), &attention)?;
        println!("wrote head_profile.csv and attention_profile.csv (layer {}, head {}, query {query})", args.layer, args.head);
    }
    Ok(())
}

#[derive(Serialize)]
struct Inspection<'a> {
    config: &'a drope_core::model::ModelConfig,
    step: usize,
    tokens_seen: u64,
    parameter_count: usize,
    has_optimizer_state: bool,
    provenance: &'a [String],
}

pub fn inspect(path: &Path) -> Result<(), CliError> {
    let ck = load(path)?;
    let view = Inspection {
        config: &ck.config,
        step: ck.step,
        tokens_seen: ck.tokens_seen,
        parameter_count: ck.parameter_count(),
        has_optimizer_state: ck.optimizer.is_some(),
        provenance: &ck.provenance,
    };
    println!("{}", serde_json::to_string_pretty(&view).map_err(|e| CliError::Runtime(e.to_string()))?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lengths_accept_multiples_and_counts() {
        assert_eq!(parse_lengths("1x,2x, 300", 128).unwrap(), vec![128, 256, 300]);
        assert!(parse_lengths("0", 128).is_err());
        assert!(parse_lengths("twice", 128).is_err());
    }

    #[test]
    fn scaling_names() {
        let m = parse_scaling("none,pi,yarn+temp,temp=0.4,crop,dynamic-ntk").unwrap();
        assert_eq!(m[0], SweepMethod::Base);
        assert_eq!(m[1], SweepMethod::Scaled(ScalingMethod::pi()));
        assert_eq!(m[2], SweepMethod::ScaledWithTemperature(ScalingMethod::yarn()));
        assert_eq!(m[3], SweepMethod::Temperature(0.4));
        assert_eq!(m[4], SweepMethod::Crop);
        assert_eq!(m[5], SweepMethod::Scaled(ScalingMethod::ntk().dynamic()));
        assert!(parse_scaling("rope2").is_err());
    }
}
