//! Python bindings: build, train, strip and probe desk models from a notebook.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use drope_core::analysis::{deviation_weights, diagonal_weights, offdiagonal_weights, positional_bias as bias, sign_deviation_weights};
use drope_core::attention::{rope_frequencies as freqs, PositionalScheme};
use drope_core::drope::{recalibrate, strip_positional_embeddings, DropeRecipe};
use drope_core::model::{
    build_model, forward, load_checkpoint, save_checkpoint, sequence_loss, train, Checkpoint, ModelConfig, Preset,
    TrainHooks, TrainRecipe, PRESET_ROPE_BASE,
};
use drope_core::numerics::{softmax_row, RngStream, Tensor};
use drope_core::rope_scaling::{gammas as scaling_gammas, ScalingMethod};
use drope_core::tasks::{eval_perplexity, length_sweep, Crop, SweepConfig, SweepMethod, SynthCorpus, SynthCorpusConfig, Task};

fn py_err(e: drope_core::Error) -> PyErr {
    match e {
        drope_core::Error::InvalidArgument(m) => PyValueError::new_err(m),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for drope_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn scheme_named(name: &str, base: Option<f64>, config: &ModelConfig) -> PyResult<PositionalScheme> {
    match name {
        "rope" => PositionalScheme::rope(base.unwrap_or(PRESET_ROPE_BASE), config.head_dim).py(),
        "nope" => Ok(PositionalScheme::nope()),
        "alibi" => PositionalScheme::alibi(config.heads).py(),
        other => Err(PyValueError::new_err(format!("unknown scheme {other:?}"))),
    }
}

fn scaling_named(name: &str) -> PyResult<ScalingMethod> {
    match name {
        "pi" => Ok(ScalingMethod::pi()),
        "ntk" => Ok(ScalingMethod::ntk()),
        "yarn" => Ok(ScalingMethod::yarn()),
        other => Err(PyValueError::new_err(format!("unknown scaling method {other:?}"))),
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Synthetic key/value corpus matched to a vocabulary size.
#[pyclass(module = "drope_lab", skip_from_py_object)]
#[derive(Clone)]
struct Corpus {
    inner: SynthCorpus,
}

#[pymethods]
impl Corpus {
    #[new]
    #[pyo3(signature = (vocab = 64, seed = 0))]
    fn new(vocab: usize, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: SynthCorpus::new(SynthCorpusConfig::for_vocab(vocab, seed)).py()? })
    }

    /// Deterministic document `index` of a named split.
    fn document(&self, split: &str, index: usize, length: usize) -> Vec<usize> {
        self.inner.split_document(split, index, length)
    }

    fn heldout(&self, count: usize, length: usize) -> Vec<Vec<usize>> {
        self.inner.heldout(count, length)
    }

    /// Entropy rate of the background chain, in nats.
    fn entropy(&self) -> f64 {
        self.inner.stationary_entropy()
    }
}

/// A checkpoint: configuration, parameters, optimizer state and provenance.
#[pyclass(module = "drope_lab", skip_from_py_object)]
#[derive(Clone)]
struct Model {
    inner: Checkpoint,
}

#[pymethods]
impl Model {
    /// Fresh model from a preset (`tiny`, `small`, `medium`).
    #[staticmethod]
    #[pyo3(signature = (preset = "small", scheme = "rope", rope_base = None, seed = 0))]
    fn preset(preset: &str, scheme: &str, rope_base: Option<f64>, seed: u64) -> PyResult<Self> {
        let p: Preset = preset.parse().py()?;
        let mut config = ModelConfig::preset(p);
        config.scheme = scheme_named(scheme, rope_base, &config)?;
        Ok(Self { inner: build_model(&config, &mut RngStream::new(seed, "init")).py()? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(path.as_ref()).py()? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, path.as_ref()).py()
    }

    #[getter]
    fn step(&self) -> usize {
        self.inner.step
    }

    #[getter]
    fn scheme(&self) -> &'static str {
        self.inner.scheme().name()
    }

    #[getter]
    fn context(&self) -> usize {
        self.inner.config.context
    }

    #[getter]
    fn provenance(&self) -> Vec<String> {
        self.inner.provenance.clone()
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Configuration as a JSON string.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// Next-token logits, one row per position.
    fn logits(&self, tokens: Vec<usize>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&forward(&self.inner, &tokens, false).py()?.0))
    }

    /// Attention matrices indexed `[layer][head]`.
    fn attention(&self, tokens: Vec<usize>) -> PyResult<Vec<Vec<Vec<Vec<f64>>>>> {
        let (_, trace) = forward(&self.inner, &tokens, true).py()?;
        let trace = trace.ok_or_else(|| PyRuntimeError::new_err("no trace captured"))?;
        Ok(trace.layers.iter().map(|l| l.heads.iter().map(|h| rows(&h.weights)).collect()).collect())
    }

    /// Mean next-token loss over equal-length sequences.
    fn loss(&self, sequences: Vec<Vec<usize>>) -> PyResult<f64> {
        sequence_loss(&self.inner, &sequences).py()
    }

    /// Perplexity, optionally cropping contexts to `crop` tokens.
    #[pyo3(signature = (sequences, crop = None))]
    fn perplexity(&self, sequences: Vec<Vec<usize>>, crop: Option<usize>) -> PyResult<f64> {
        Ok(eval_perplexity(&self.inner, &sequences, crop.map(Crop::new)).py()?.ppl)
    }

    /// Train with the desk recipe on `corpus`; returns the per-step losses.
    #[pyo3(signature = (corpus, steps, seed = 0, batch_size = None, lr = None))]
    fn train(
        &mut self,
        corpus: &mut Corpus,
        steps: usize,
        seed: u64,
        batch_size: Option<usize>,
        lr: Option<f64>,
    ) -> PyResult<Vec<f64>> {
        let mut recipe = TrainRecipe::desk(steps, self.inner.config.context, seed);
        if let Some(b) = batch_size {
            recipe.batch_size = b;
        }
        if let Some(lr) = lr {
            recipe.peak_lr = lr;
        }
        let out = train(self.inner.clone(), &mut corpus.inner, &recipe, &mut TrainHooks::default()).py()?;
        self.inner = out.checkpoint;
        Ok(out.metrics.iter().map(|m| m.loss).collect())
    }

    /// Copy of this model with positional embeddings removed.
    #[pyo3(signature = (enable_qknorm = true))]
    fn strip(&self, enable_qknorm: bool) -> PyResult<Self> {
        Ok(Self { inner: strip_positional_embeddings(&self.inner, enable_qknorm).py()? })
    }

    /// Recalibrate a stripped model in place; returns the per-step losses.
    #[pyo3(signature = (corpus, steps, seed = 0))]
    fn recalibrate(&mut self, corpus: &mut Corpus, steps: usize, seed: u64) -> PyResult<Vec<f64>> {
        let base = TrainRecipe::desk(steps, self.inner.config.context, seed);
        let recipe = DropeRecipe::desk(steps, &base);
        let out = recalibrate(&self.inner, &mut corpus.inner, &recipe).py()?;
        self.inner = out.checkpoint;
        Ok(out.metrics.iter().map(|m| m.loss).collect())
    }

    /// NIAH success rate at `length` (`standard`, `multiquery`, `multikey`, `multivalue`).
    #[pyo3(signature = (corpus, length, variant = "multiquery", trials = 100, seed = 0, scaling = None))]
    fn niah(
        &self,
        corpus: &Corpus,
        length: usize,
        variant: &str,
        trials: usize,
        seed: u64,
        scaling: Option<&str>,
    ) -> PyResult<f64> {
        let task: Task = variant.parse().py()?;
        let method = match scaling {
            None | Some("none") => SweepMethod::Base,
            Some(name) => SweepMethod::Scaled(scaling_named(name)?),
        };
        let cfg = SweepConfig { trials, ppl_sequences: 0, seed };
        let rows = length_sweep(&self.inner, "py", &corpus.inner, &[method], &[length], &[task], &cfg).py()?;
        rows.first()
            .and_then(|r| r.success_rate)
            .ok_or_else(|| PyRuntimeError::new_err("NIAH produced no result"))
    }
}

/// Rotary frequencies `base^(-2(m-1)/head_dim)`.
#[pyfunction]
fn rope_frequencies(base: f64, head_dim: usize) -> PyResult<Vec<f64>> {
    freqs(base, head_dim).py()
}

/// Per-frequency scaling factors of `pi`, `ntk` or `yarn` at factor `s`.
#[pyfunction]
fn gammas(method: &str, frequencies: Vec<f64>, s: f64, c_train: usize) -> PyResult<Vec<f64>> {
    scaling_gammas(&scaling_named(method)?, &frequencies, s, c_train).py()
}

/// `A^c` of an attention matrix under `diagonal`, `off-diagonal`, `deviation` or `sign-deviation` weights.
#[pyfunction]
#[pyo3(signature = (alpha, weights = "diagonal"))]
fn positional_bias(alpha: Vec<Vec<f64>>, weights: &str) -> PyResult<f64> {
    let a = Tensor::from_rows(&alpha).py()?;
    let w = match weights {
        "diagonal" => diagonal_weights(a.rows()),
        "off-diagonal" => offdiagonal_weights(a.rows()),
        "deviation" => deviation_weights(&a),
        "sign-deviation" => sign_deviation_weights(&a),
        other => return Err(PyValueError::new_err(format!("unknown weights {other:?}"))),
    }
    .py()?;
    bias(&a, &w).py()
}

#[pyfunction]
fn softmax(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    softmax_row(&logits).py()
}

#[pymodule]
fn drope_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Corpus>()?;
    m.add_function(wrap_pyfunction!(rope_frequencies, m)?)?;
    m.add_function(wrap_pyfunction!(gammas, m)?)?;
    m.add_function(wrap_pyfunction!(positional_bias, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    Ok(())
}
