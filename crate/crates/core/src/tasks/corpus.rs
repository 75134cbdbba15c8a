use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::BatchSource;
use crate::numerics::RngStream;

/// Synthetic language: an order-2 Markov background interleaved with key→value events.
///
/// Token layout: `[0, background)` background, then `keys` key tokens, then the value
/// tokens. With `per_key_values` each key owns a disjoint block of `values / keys` value
/// tokens; otherwise all keys share the whole value range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpusConfig {
    pub vocab: usize,
    pub background: usize,
    pub keys: usize,
    pub values: usize,
    #[serde(default)]
    pub per_key_values: bool,
    pub value_len: usize,
    /// Probability that an event starts at any given position.
    pub pattern_rate: f64,
    /// Scale of the Gaussian logits behind each Markov row; larger is more predictable.
    pub concentration: f64,
    /// Length of the documents concatenated by [`SynthCorpus::stream`].
    pub document_length: usize,
    pub seed: u64,
}

impl SynthCorpusConfig {
    /// Layout filling a vocabulary of `vocab` tokens.
    pub fn for_vocab(vocab: usize, seed: u64) -> Self {
        let keys = (vocab / 16).max(1);
        let values = (vocab / 2).max(keys) / keys * keys;
        Self {
            vocab,
            background: vocab - keys - values,
            keys,
            values,
            per_key_values: true,
            value_len: 1,
            pattern_rate: 0.1,
            concentration: 3.0,
            document_length: 1024,
            seed,
        }
    }

    pub fn key_token(&self, k: usize) -> usize {
        self.background + k
    }

    pub fn value_base(&self) -> usize {
        self.background + self.keys
    }

    /// Value tokens available to key `k`.
    pub fn value_range(&self, k: usize) -> std::ops::Range<usize> {
        let base = self.value_base();
        if self.per_key_values {
            let n = self.values / self.keys;
            base + k * n..base + (k + 1) * n
        } else {
            base..base + self.values
        }
    }

    pub fn is_key(&self, token: usize) -> bool {
        (self.background..self.background + self.keys).contains(&token)
    }

    pub fn validate(&self) -> Result<()> {
        if self.background < 2 || self.keys == 0 || self.values == 0 || self.value_len == 0 {
            return Err(invalid("corpus needs ≥2 background tokens and at least one key and value"));
        }
        if self.background + self.keys + self.values > self.vocab {
            return Err(invalid(format!(
                "background {} + keys {} + values {} overlap beyond vocabulary {}",
                self.background, self.keys, self.values, self.vocab
            )));
        }
        if self.per_key_values && self.values % self.keys != 0 {
            return Err(invalid("per-key value blocks need values divisible by keys"));
        }
        if !(0.0..1.0).contains(&self.pattern_rate) {
            return Err(invalid("pattern rate must lie in [0, 1)"));
        }
        if !(self.concentration >= 0.0) || self.document_length < 2 {
            return Err(invalid("concentration must be nonnegative and documents at least 2 tokens"));
        }
        Ok(())
    }
}

/// A corpus instance: the config plus its seeded transition table.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub config: SynthCorpusConfig,
    /// `transition[(a·n + b)·n + c] = P(c | a, b)` over background tokens.
    transition: Vec<f64>,
}

impl SynthCorpus {
    pub fn new(config: SynthCorpusConfig) -> Result<Self> {
        config.validate()?;
        let n = config.background;
        let mut rng = RngStream::new(config.seed, "corpus/transition");
        let mut transition = Vec::with_capacity(n * n * n);
        for _ in 0..n * n {
            let logits: Vec<f64> = (0..n).map(|_| config.concentration * rng.normal()).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            transition.extend(e.iter().map(|x| x / z));
        }
        Ok(Self { config, transition })
    }

    pub fn transition(&self, a: usize, b: usize) -> &[f64] {
        let n = self.config.background;
        &self.transition[(a * n + b) * n..(a * n + b + 1) * n]
    }

    fn next_background(&self, a: usize, b: usize, rng: &mut RngStream) -> usize {
        let row = self.transition(a, b);
        let u = rng.uniform();
        let mut acc = 0.0;
        for (c, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return c;
            }
        }
        row.len() - 1
    }

    /// A fresh value string for key `k`.
    pub fn draw_value(&self, k: usize, rng: &mut RngStream) -> Vec<usize> {
        let range = self.config.value_range(k);
        (0..self.config.value_len).map(|_| range.start + rng.below(range.len())).collect()
    }

    /// Background-only tokens.
    pub fn background(&self, len: usize, rng: &mut RngStream) -> Vec<usize> {
        let n = self.config.background;
        let (mut a, mut b) = (rng.below(n), rng.below(n));
        (0..len)
            .map(|_| {
                let c = self.next_background(a, b, rng);
                (a, b) = (b, c);
                c
            })
            .collect()
    }

    /// One document. Each key keeps a single value within a document, so a repeated key
    /// is followed by the value string of its first occurrence.
    pub fn document(&self, len: usize, rng: &mut RngStream) -> Vec<usize> {
        let c = &self.config;
        let n = c.background;
        let (mut a, mut b) = (rng.below(n), rng.below(n));
        let mut assigned: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut out = Vec::with_capacity(len + c.value_len + 1);
        while out.len() < len {
            if rng.uniform() < c.pattern_rate {
                let k = rng.below(c.keys);
                if !assigned.contains_key(&k) {
                    let v = self.draw_value(k, rng);
                    assigned.insert(k, v);
                }
                out.push(c.key_token(k));
                out.extend_from_slice(&assigned[&k]);
            } else {
                let t = self.next_background(a, b, rng);
                (a, b) = (b, t);
                out.push(t);
            }
        }
        out.truncate(len);
        out
    }

    /// Document `index` of the named split; independent of every other document.
    pub fn split_document(&self, split: &str, index: usize, len: usize) -> Vec<usize> {
        let mut rng = RngStream::new(self.config.seed, &format!("corpus/{split}/{index}"));
        self.document(len, &mut rng)
    }

    /// `count` held-out documents of `len` tokens.
    pub fn heldout(&self, count: usize, len: usize) -> Vec<Vec<usize>> {
        (0..count).map(|i| self.split_document("heldout", i, len)).collect()
    }

    /// Endless stream of concatenated documents of `document_length` tokens.
    pub fn stream(&self, split: &str) -> impl Iterator<Item = usize> + '_ {
        let split = split.to_string();
        let len = self.config.document_length;
        (0..).flat_map(move |i| self.split_document(&split, i, len))
    }

    /// Stationary distribution of background tokens under the order-2 chain.
    pub fn stationary_distribution(&self) -> Vec<f64> {
        let n = self.config.background;
        let mut pair = vec![1.0 / (n * n) as f64; n * n];
        for _ in 0..2000 {
            let mut next = vec![0.0; n * n];
            for a in 0..n {
                for b in 0..n {
                    let w = pair[a * n + b];
                    for (c, p) in self.transition(a, b).iter().enumerate() {
                        next[b * n + c] += w * p;
                    }
                }
            }
            let delta: f64 = next.iter().zip(&pair).map(|(x, y)| (x - y).abs()).sum();
            pair = next;
            if delta < 1e-15 {
                break;
            }
        }
        (0..n).map(|b| (0..n).map(|a| pair[a * n + b]).sum()).collect()
    }

    /// Entropy (nats) of the stationary background unigram distribution.
    pub fn stationary_entropy(&self) -> f64 {
        entropy(&self.stationary_distribution())
    }
}

pub(crate) fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|x| -x * x.ln()).sum()
}

/// Empirical unigram entropy (nats) of a token sequence.
pub fn unigram_entropy(tokens: &[usize]) -> f64 {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let n = tokens.len() as f64;
    let p: Vec<f64> = counts.values().map(|&c| c as f64 / n).collect();
    entropy(&p)
}

impl BatchSource for SynthCorpus {
    fn batch(&mut self, step: usize, batch: usize, seq_len: usize) -> Result<Vec<Vec<usize>>> {
        Ok((0..batch).map(|i| self.split_document("train", step * batch + i, seq_len + 1)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(rate: f64) -> SynthCorpus {
        SynthCorpus::new(SynthCorpusConfig { pattern_rate: rate, ..SynthCorpusConfig::for_vocab(64, 3) }).unwrap()
    }

    #[test]
    fn layout_is_disjoint() {
        let c = SynthCorpusConfig::for_vocab(64, 0);
        c.validate().unwrap();
        assert_eq!(c.background + c.keys + c.values, 64);
        assert!(c.value_range(0).end <= c.value_range(1).start);
        let bad = SynthCorpusConfig { values: 60, ..c.clone() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pure_markov_matches_transition_table() {
        let cp = corpus(0.0);
        let n = cp.config.background;
        let tokens: Vec<usize> = cp.stream("check").take(400_000).collect();
        assert!(tokens.iter().all(|&t| t < n));
        // Conditional frequencies of the most visited context.
        let mut counts = vec![0usize; n * n * n];
        for w in tokens.windows(3) {
            counts[(w[0] * n + w[1]) * n + w[2]] += 1;
        }
        let ctx = (0..n * n).max_by_key(|&i| counts[i * n..(i + 1) * n].iter().sum::<usize>()).unwrap();
        let row = &counts[ctx * n..(ctx + 1) * n];
        let total: usize = row.iter().sum();
        let p = cp.transition(ctx / n, ctx % n);
        for (c, &k) in row.iter().enumerate() {
            let sd = (p[c] * (1.0 - p[c]) / total as f64).sqrt();
            assert!((k as f64 / total as f64 - p[c]).abs() <= 5.0 * sd + 1e-9, "token {c}");
        }
    }

    #[test]
    fn unigram_entropy_matches_stationary() {
        let cp = corpus(0.0);
        let tokens: Vec<usize> = cp.stream("entropy").take(1_000_000).collect();
        let h = unigram_entropy(&tokens);
        let h0 = cp.stationary_entropy();
        assert!((h - h0).abs() / h0 < 0.02, "{h} vs {h0}");
        let pi = cp.stationary_distribution();
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<usize> = corpus(0.06).stream("x").take(1_000_000).collect();
        let b: Vec<usize> = corpus(0.06).stream("x").take(1_000_000).collect();
        assert_eq!(a, b);
        let c: Vec<usize> = corpus(0.06).stream("y").take(1000).collect();
        assert_ne!(a[..1000], c[..]);
    }

    #[test]
    fn repeated_keys_repeat_their_value() {
        let cp = corpus(0.1);
        let cfg = &cp.config;
        let mut repeats = 0;
        for i in 0..50 {
            let doc = cp.split_document("train", i, 300);
            let mut seen: HashMap<usize, usize> = HashMap::new();
            for (p, &t) in doc.iter().enumerate() {
                if cfg.is_key(t) && p + 1 < doc.len() {
                    let v = doc[p + 1];
                    assert!(cfg.value_range(t - cfg.background).contains(&v));
                    if let Some(&prev) = seen.get(&t) {
                        assert_eq!(prev, v);
                        repeats += 1;
                    }
                    seen.insert(t, v);
                }
            }
        }
        assert!(repeats > 50, "{repeats}");
    }

    #[test]
    fn batches_are_addressed_by_step() {
        let mut cp = corpus(0.06);
        let a = cp.batch(7, 4, 16).unwrap();
        let b = cp.batch(7, 4, 16).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.len() == 17));
        assert_ne!(cp.batch(8, 4, 16).unwrap(), a);
    }
}
