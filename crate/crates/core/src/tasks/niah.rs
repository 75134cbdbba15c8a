use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::SynthCorpus;
use crate::error::{invalid, Result};
use crate::model::{forward_batch, Checkpoint};
use crate::numerics::RngStream;

/// Needle-in-a-haystack variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NiahVariant {
    /// One needle, queried once.
    Standard,
    /// Several needles with distinct keys, all queried.
    MultiQuery,
    /// Several needles with distinct keys, one queried.
    MultiKey,
    /// Several values under one key; every value is expected.
    MultiValue,
}

impl NiahVariant {
    pub const ALL: [NiahVariant; 4] =
        [NiahVariant::Standard, NiahVariant::MultiQuery, NiahVariant::MultiKey, NiahVariant::MultiValue];

    pub fn name(self) -> &'static str {
        match self {
            NiahVariant::Standard => "standard",
            NiahVariant::MultiQuery => "multiquery",
            NiahVariant::MultiKey => "multikey",
            NiahVariant::MultiValue => "multivalue",
        }
    }

    /// Needles inserted when the caller does not choose.
    pub fn default_needles(self) -> usize {
        match self {
            NiahVariant::Standard => 1,
            _ => 4,
        }
    }
}

impl std::fmt::Display for NiahVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for NiahVariant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.strip_prefix("niah-").unwrap_or(s);
        NiahVariant::ALL
            .into_iter()
            .find(|v| v.name() == s.replace('-', ""))
            .ok_or_else(|| invalid(format!("unknown NIAH variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Needle {
    pub key: usize,
    pub value: Vec<usize>,
    /// Index of the key token in the prompt.
    pub position: usize,
}

/// A generated retrieval problem.
///
/// The model reads `tokens`, then for each entry of `queries` the query tokens are
/// appended and `answer_len` tokens are decoded greedily.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiahSample {
    pub variant: NiahVariant,
    pub tokens: Vec<usize>,
    pub needles: Vec<Needle>,
    pub queries: Vec<Vec<usize>>,
    pub answer_len: usize,
    /// Value strings that must appear in the decoded continuation.
    pub answers: Vec<Vec<usize>>,
}

impl NiahSample {
    /// Prompt length through the first query.
    pub fn total_length(&self) -> usize {
        self.tokens.len() + self.queries.first().map_or(0, Vec::len)
    }

    /// Tokens a perfect model would decode, in order.
    pub fn ground_truth_output(&self) -> Vec<usize> {
        match self.variant {
            NiahVariant::MultiQuery => self.answers.concat(),
            _ => {
                let mut out = self.answers.concat();
                out.resize(self.answer_len * self.queries.len(), out.last().copied().unwrap_or(0));
                out
            }
        }
    }
}

/// Needle layout of [`gen_niah_at`]: fractional depths in `[0, 1]`.
fn positions_from_depths(depths: &[f64], span: usize, body: usize) -> Result<Vec<usize>> {
    let room = body.checked_sub(span).ok_or_else(|| invalid("needle longer than haystack"))?;
    let pos: Vec<usize> = depths
        .iter()
        .map(|&d| {
            if !(0.0..=1.0).contains(&d) {
                return Err(invalid(format!("depth {d} outside [0, 1]")));
            }
            Ok((d * room as f64).round() as usize)
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..pos.len()).collect();
    order.sort_by_key(|&i| pos[i]);
    for w in order.windows(2) {
        if pos[w[1]] < pos[w[0]] + span {
            return Err(invalid("needles overlap"));
        }
    }
    Ok(pos)
}

fn random_positions(n: usize, span: usize, body: usize, rng: &mut RngStream) -> Result<Vec<usize>> {
    if n * span > body {
        return Err(invalid(format!("{n} needles of {span} tokens do not fit in {body} tokens")));
    }
    // Uniform over non-overlapping layouts: choose n gaps in the free space, then expand.
    let free = body - n * span;
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.below(free + 1)).collect();
    cuts.sort_unstable();
    let mut pos: Vec<usize> = cuts.iter().enumerate().map(|(i, c)| c + i * span).collect();
    // Shuffle which needle sits where so needle order carries no depth information.
    for i in (1..n).rev() {
        pos.swap(i, rng.below(i + 1));
    }
    Ok(pos)
}

/// Generate one sample of `variant` with prompt length `total_length` (through the first query).
pub fn gen_niah(
    corpus: &SynthCorpus,
    variant: NiahVariant,
    total_length: usize,
    n_needles: usize,
    c_train: usize,
    seed: u64,
) -> Result<NiahSample> {
    build(corpus, variant, total_length, n_needles, c_train, seed, None)
}

/// As [`gen_niah`] with needle depths fixed (fractions of the haystack).
pub fn gen_niah_at(
    corpus: &SynthCorpus,
    variant: NiahVariant,
    total_length: usize,
    depths: &[f64],
    c_train: usize,
    seed: u64,
) -> Result<NiahSample> {
    build(corpus, variant, total_length, depths.len(), c_train, seed, Some(depths))
}

fn build(
    corpus: &SynthCorpus,
    variant: NiahVariant,
    total_length: usize,
    n: usize,
    c_train: usize,
    seed: u64,
    depths: Option<&[f64]>,
) -> Result<NiahSample> {
    let cfg = &corpus.config;
    if total_length < c_train {
        return Err(invalid(format!("total length {total_length} below training context {c_train}")));
    }
    if n == 0 {
        return Err(invalid("at least one needle is required"));
    }
    if variant == NiahVariant::Standard && n != 1 {
        return Err(invalid("the standard variant has exactly one needle"));
    }
    let distinct_keys = matches!(variant, NiahVariant::MultiQuery | NiahVariant::MultiKey | NiahVariant::Standard);
    if distinct_keys && n > cfg.keys {
        return Err(invalid(format!("{n} distinct keys requested, corpus has {}", cfg.keys)));
    }
    let mut rng = RngStream::new(seed, &format!("niah/{}", variant.name()));
    let span = 1 + cfg.value_len;
    let body = total_length - 1;
    let positions = match depths {
        Some(d) => positions_from_depths(d, span, body)?,
        None => random_positions(n, span, body, &mut rng)?,
    };

    let keys: Vec<usize> = if distinct_keys {
        let mut all: Vec<usize> = (0..cfg.keys).collect();
        for i in 0..n {
            let j = i + rng.below(cfg.keys - i);
            all.swap(i, j);
        }
        all.truncate(n);
        all
    } else {
        vec![rng.below(cfg.keys); n]
    };
    let mut values: Vec<Vec<usize>> = Vec::with_capacity(n);
    for &k in &keys {
        let mut tries = 0;
        loop {
            let v = corpus.draw_value(k, &mut rng);
            if !values.contains(&v) {
                values.push(v);
                break;
            }
            tries += 1;
            if tries > 1000 {
                return Err(invalid("not enough distinct values for the requested needles"));
            }
        }
    }

    let mut tokens = corpus.background(body, &mut rng);
    let mut needles = Vec::with_capacity(n);
    for ((&k, v), &p) in keys.iter().zip(&values).zip(&positions) {
        let key = cfg.key_token(k);
        tokens[p] = key;
        tokens[p + 1..p + span].copy_from_slice(v);
        needles.push(Needle { key, value: v.clone(), position: p });
    }

    let (queries, answers, answer_len) = match variant {
        NiahVariant::Standard => (vec![vec![needles[0].key]], vec![values[0].clone()], cfg.value_len),
        NiahVariant::MultiKey => {
            let target = rng.below(n);
            (vec![vec![needles[target].key]], vec![values[target].clone()], cfg.value_len)
        }
        NiahVariant::MultiQuery => {
            (needles.iter().map(|nd| vec![nd.key]).collect(), values.clone(), cfg.value_len)
        }
        NiahVariant::MultiValue => (vec![vec![needles[0].key]], values.clone(), n * cfg.value_len),
    };
    Ok(NiahSample { variant, tokens, needles, queries, answer_len, answers })
}

/// Outcome of scoring one sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NiahScore {
    pub success: bool,
    /// Fraction of expected value strings found.
    pub partial: f64,
}

fn contains_run(haystack: &[usize], needle: &[usize]) -> bool {
    needle.is_empty() || haystack.windows(needle.len()).any(|w| w == needle)
}

/// Success iff every expected value string occurs as a contiguous run of `output`.
pub fn score_niah(output: &[usize], sample: &NiahSample) -> NiahScore {
    let found = sample.answers.iter().filter(|a| contains_run(output, a)).count();
    let partial = found as f64 / sample.answers.len().max(1) as f64;
    NiahScore { success: found == sample.answers.len(), partial }
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc }).0
}

/// Greedy continuation of every sample (equal prompt structure across the batch).
pub fn greedy_outputs(ck: &Checkpoint, samples: &[NiahSample]) -> Result<Vec<Vec<usize>>> {
    let Some(first) = samples.first() else { return Ok(Vec::new()) };
    if samples.iter().any(|s| {
        s.tokens.len() != first.tokens.len()
            || s.answer_len != first.answer_len
            || s.queries.iter().map(Vec::len).ne(first.queries.iter().map(Vec::len))
    }) {
        return Err(invalid("samples in one decoding batch must share their layout"));
    }
    let mut seqs: Vec<Vec<usize>> = samples.iter().map(|s| s.tokens.clone()).collect();
    let mut outputs = vec![Vec::new(); samples.len()];
    for qi in 0..first.queries.len() {
        for (seq, s) in seqs.iter_mut().zip(samples) {
            seq.extend_from_slice(&s.queries[qi]);
        }
        for _ in 0..first.answer_len {
            let (logits, _) = forward_batch(ck, &seqs, false)?;
            let t = seqs[0].len();
            for (b, (seq, out)) in seqs.iter_mut().zip(outputs.iter_mut()).enumerate() {
                let next = argmax(logits.row(b * t + t - 1));
                seq.push(next);
                out.push(next);
            }
        }
    }
    Ok(outputs)
}

/// Mean success and partial credit over `samples`, decoded in batches of `batch`.
pub fn run_niah(ck: &Checkpoint, samples: &[NiahSample], batch: usize) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(invalid("no samples"));
    }
    let (mut success, mut partial) = (0.0, 0.0);
    for chunk in samples.chunks(batch.max(1)) {
        for (out, s) in greedy_outputs(ck, chunk)?.iter().zip(chunk) {
            let sc = score_niah(out, s);
            success += f64::from(u8::from(sc.success));
            partial += sc.partial;
        }
    }
    let n = samples.len() as f64;
    Ok((success / n, partial / n))
}

/// One JSON object per line: tokens, needles, queries and answers.
pub fn write_samples_jsonl(path: &Path, samples: &[NiahSample]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_jsonl(path: &Path) -> Result<Vec<NiahSample>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().filter(|l| !l.is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}
