use super::checkpoint::{layer_param, Checkpoint, EMBED, FINAL_NORM, HEAD};
use crate::attention::{attention_block, AttentionTrace, AttnVars, LayerTrace};
use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Tape handles produced by [`record_forward`].
pub(crate) struct Recorded {
    pub logits: Var,
    /// Per layer: residual stream entering the layer, normed attention input, attention node.
    pub layers: Vec<(Var, Var, Var)>,
}

enum Input<'a> {
    Tokens(&'a [usize]),
    Embeddings(&'a Tensor),
}

fn record(tape: &mut Tape, ck: &Checkpoint, input: Input<'_>, batch: usize, seq: usize) -> Result<Recorded> {
    let c = &ck.config;
    let d = c.dim;
    tape.set_scope("embedding");
    let embed = tape.param(EMBED, ck.param(EMBED)?.clone());
    let mut h = match input {
        Input::Tokens(ids) => {
            if let Some(&bad) = ids.iter().find(|&&t| t >= c.vocab) {
                return Err(invalid(format!("token {bad} outside vocabulary of {}", c.vocab)));
            }
            tape.embed(embed, ids)
        }
        Input::Embeddings(x) => tape.leaf(x.clone()),
    };
    let mut layers = Vec::with_capacity(c.layers);
    for l in 0..c.layers {
        tape.set_scope(format!("layer {l}"));
        let mut p = |s: &str| -> Result<Var> {
            let name = layer_param(l, s);
            let t = ck.param(&name)?.clone();
            Ok(tape.param(&name, t))
        };
        let attn_gain = p("attn_norm.gain")?;
        let vars = AttnVars {
            wq: p("attn.wq")?,
            wk: p("attn.wk")?,
            wv: p("attn.wv")?,
            wo: p("attn.wo")?,
            q_gain: if c.qk_norm.queries() { Some(p("attn.q_norm.gain")?) } else { None },
            k_gain: if c.qk_norm.keys() { Some(p("attn.k_norm.gain")?) } else { None },
        };
        let mlp_gain = p("mlp_norm.gain")?;
        let w1 = p("mlp.w1")?;
        let w2 = p("mlp.w2")?;

        let normed = tape.rmsnorm(h, attn_gain, d);
        let block = attention_block(tape, normed, &vars, c.layout(), &c.scheme, batch, seq)?;
        layers.push((h, normed, block.attn));
        h = tape.add(h, block.out);
        let m = tape.rmsnorm(h, mlp_gain, d);
        let up = tape.matmul(m, w1, true);
        let act = tape.silu(up);
        let down = tape.matmul(act, w2, true);
        h = tape.add(h, down);
    }
    tape.set_scope("output");
    let gain = tape.param(FINAL_NORM, ck.param(FINAL_NORM)?.clone());
    let fin = tape.rmsnorm(h, gain, d);
    let head = if c.tied_embeddings { embed } else { tape.param(HEAD, ck.param(HEAD)?.clone()) };
    let logits = tape.matmul(fin, head, true);
    Ok(Recorded { logits, layers })
}

/// Record the forward pass of `batch` sequences of length `seq`, flattened into `ids`.
pub(crate) fn record_forward(tape: &mut Tape, ck: &Checkpoint, ids: &[usize], batch: usize, seq: usize) -> Result<Recorded> {
    if ids.len() != batch * seq || seq == 0 {
        return Err(shape(format!("{} ids for {batch} sequences of length {seq}", ids.len())));
    }
    record(tape, ck, Input::Tokens(ids), batch, seq)
}

fn new_tape(ck: &Checkpoint, capture: bool) -> Tape {
    let mut tape = Tape::with_precision(ck.config.precision);
    tape.set_checked(true);
    tape.set_record_logits(capture);
    tape
}

fn ensure_finite(tape: &Tape) -> Result<()> {
    match tape.first_nonfinite() {
        Some(loc) => Err(Error::NonFinite { location: loc.to_string() }),
        None => Ok(()),
    }
}

fn row_slice(t: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    t.row_block(start, len)
}

fn collect_trace(tape: &Tape, rec: &Recorded, sequence: usize, seq: usize) -> Result<AttentionTrace> {
    let layers = rec
        .layers
        .iter()
        .map(|&(hidden, normed, attn)| {
            LayerTrace::from_tape(
                tape,
                attn,
                sequence,
                row_slice(tape.value(hidden), sequence * seq, seq)?,
                row_slice(tape.value(normed), sequence * seq, seq)?,
            )
        })
        .collect::<Result<_>>()?;
    Ok(AttentionTrace { layers })
}

/// `T × vocab` logits of one sequence, and its attention trace when `capture_trace`.
pub fn forward(ck: &Checkpoint, tokens: &[usize], capture_trace: bool) -> Result<(Tensor, Option<AttentionTrace>)> {
    let mut tape = new_tape(ck, capture_trace);
    let rec = record_forward(&mut tape, ck, tokens, 1, tokens.len())?;
    ensure_finite(&tape)?;
    let trace = capture_trace.then(|| collect_trace(&tape, &rec, 0, tokens.len())).transpose()?;
    Ok((tape.value(rec.logits).clone(), trace))
}

/// Forward pass starting from residual-stream inputs `h0` (`T × d`) instead of token ids.
pub fn forward_embeddings(ck: &Checkpoint, h0: &Tensor, capture_trace: bool) -> Result<(Tensor, Option<AttentionTrace>)> {
    let (t, d) = h0.dims2()?;
    if d != ck.config.dim {
        return Err(shape(format!("input width {d}, model dim {}", ck.config.dim)));
    }
    let mut tape = new_tape(ck, capture_trace);
    let rec = record(&mut tape, ck, Input::Embeddings(h0), 1, t)?;
    ensure_finite(&tape)?;
    let trace = capture_trace.then(|| collect_trace(&tape, &rec, 0, t)).transpose()?;
    Ok((tape.value(rec.logits).clone(), trace))
}

/// Equal-length sequences in one pass: stacked `(batch·T) × vocab` logits and, when
/// `capture_trace`, one trace per sequence.
pub fn forward_batch(ck: &Checkpoint, sequences: &[Vec<usize>], capture_trace: bool) -> Result<(Tensor, Vec<AttentionTrace>)> {
    let seq = sequences.first().map_or(0, Vec::len);
    if sequences.iter().any(|s| s.len() != seq) {
        return Err(shape("sequences must share one length"));
    }
    let ids: Vec<usize> = sequences.concat();
    let mut tape = new_tape(ck, capture_trace);
    let rec = record_forward(&mut tape, ck, &ids, sequences.len(), seq)?;
    ensure_finite(&tape)?;
    let traces = if capture_trace {
        (0..sequences.len()).map(|b| collect_trace(&tape, &rec, b, seq)).collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok((tape.value(rec.logits).clone(), traces))
}

/// Split training sequences (length `T+1`) into flattened inputs and next-token targets.
pub(crate) fn shift(sequences: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    let n = sequences.first().map_or(0, Vec::len);
    if n < 2 || sequences.iter().any(|s| s.len() != n) {
        return Err(shape("training sequences need a common length of at least 2"));
    }
    let mut inputs = Vec::with_capacity(sequences.len() * (n - 1));
    let mut targets = Vec::with_capacity(inputs.capacity());
    for s in sequences {
        inputs.extend_from_slice(&s[..n - 1]);
        targets.extend_from_slice(&s[1..]);
    }
    Ok((inputs, targets, n - 1))
}

/// Mean next-token cross-entropy over sequences of length `T+1`.
pub fn sequence_loss(ck: &Checkpoint, sequences: &[Vec<usize>]) -> Result<f64> {
    let (inputs, targets, seq) = shift(sequences)?;
    let mut tape = new_tape(ck, false);
    let rec = record_forward(&mut tape, ck, &inputs, sequences.len(), seq)?;
    let loss = tape.cross_entropy(rec.logits, &targets);
    ensure_finite(&tape)?;
    Ok(tape.value(loss).data()[0])
}

/// Loss and named parameter gradients of one batch.
pub fn loss_and_grads(
    ck: &Checkpoint,
    sequences: &[Vec<usize>],
) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
    let (inputs, targets, seq) = shift(sequences)?;
    let mut tape = new_tape(ck, false);
    let rec = record_forward(&mut tape, ck, &inputs, sequences.len(), seq)?;
    let loss = tape.cross_entropy(rec.logits, &targets);
    let value = tape.value(loss).data()[0];
    if let Some(loc) = tape.first_nonfinite() {
        return Err(Error::NonFinite { location: loc.to_string() });
    }
    let grads = tape.backward(loss)?.named();
    Ok((value, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::PositionalScheme;
    use crate::model::checkpoint::build_model;
    use crate::model::config::{ModelConfig, Preset};
    use crate::numerics::RngStream;

    fn model(scheme: PositionalScheme, seed: u64) -> Checkpoint {
        let c = ModelConfig::preset(Preset::Small).with_scheme(scheme);
        let mut ck = build_model(&c, &mut RngStream::new(seed, "init")).unwrap();
        // Larger weights so that attention is far from uniform on ordinary inputs.
        for (name, t) in ck.params.iter_mut() {
            if !name.ends_with(".gain") {
                *t = t.scale(10.0);
            }
        }
        ck
    }

    fn max_row_spread(logits: &Tensor) -> f64 {
        let first = logits.row(0).to_vec();
        (1..logits.rows())
            .flat_map(|i| logits.row(i).iter().zip(&first).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }

    #[test]
    fn constant_tokens_give_constant_logits() {
        let tokens = vec![7; 32];
        for scheme in [PositionalScheme::nope(), PositionalScheme::rope(10_000.0, 16).unwrap()] {
            let ck = model(scheme, 3);
            let (logits, trace) = forward(&ck, &tokens, true).unwrap();
            assert_eq!(logits.shape(), [32, 64]);
            assert!(max_row_spread(&logits) <= 1e-10, "{}", max_row_spread(&logits));
            assert!(trace.unwrap().max_stochasticity_error() < 1e-12);
        }
    }

    #[test]
    fn single_token_matches_oracle() {
        let ck = model(PositionalScheme::rope(10_000.0, 16).unwrap(), 4);
        let c = &ck.config;
        let (logits, _) = forward(&ck, &[5], false).unwrap();

        let rms = |x: &[f64], g: &Tensor| -> Vec<f64> {
            let r = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64 + 1e-6).sqrt();
            x.iter().zip(g.data()).map(|(v, g)| v / r * g).collect()
        };
        let mut h = ck.param(EMBED).unwrap().row(5).to_vec();
        for l in 0..c.layers {
            let p = |s: &str| ck.param(&layer_param(l, s)).unwrap();
            let n = rms(&h, p("attn_norm.gain"));
            // A lone token attends only to itself: output is W_O·W_V·x.
            let v = p("attn.wv").matvec(&n).unwrap();
            let o = p("attn.wo").matvec(&v).unwrap();
            h.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let m = rms(&h, p("mlp_norm.gain"));
            let u: Vec<f64> = p("mlp.w1").matvec(&m).unwrap().iter().map(|z| z / (1.0 + (-z).exp())).collect();
            let w = p("mlp.w2").matvec(&u).unwrap();
            h.iter_mut().zip(&w).for_each(|(a, b)| *a += b);
        }
        let f = rms(&h, ck.param(FINAL_NORM).unwrap());
        let expect = ck.output_head().unwrap().matvec(&f).unwrap();
        for (a, b) in logits.row(0).iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batch_matches_individual_and_traces_match() {
        let ck = model(PositionalScheme::rope(10_000.0, 16).unwrap(), 5);
        let a: Vec<usize> = (0..12).map(|i| (i * 7) % 64).collect();
        let b: Vec<usize> = (0..12).map(|i| (i * 3 + 1) % 64).collect();
        let (batch, traces) = forward_batch(&ck, &[a.clone(), b.clone()], true).unwrap();
        let (la, ta) = forward(&ck, &a, true).unwrap();
        let (lb, _) = forward(&ck, &b, false).unwrap();
        assert!(batch.row_block(0, 12).unwrap().max_abs_diff(&la).unwrap() < 1e-12);
        assert!(batch.row_block(12, 12).unwrap().max_abs_diff(&lb).unwrap() < 1e-12);
        let ta = ta.unwrap();
        assert_eq!(traces.len(), 2);
        assert!(traces[0].weights(1, 2).unwrap().max_abs_diff(ta.weights(1, 2).unwrap()).unwrap() < 1e-12);
        assert!(traces[0].layers[1].hidden.max_abs_diff(&ta.layers[1].hidden).unwrap() < 1e-12);
    }

    #[test]
    fn embeddings_entry_matches_tokens() {
        let ck = model(PositionalScheme::nope(), 6);
        let tokens = [1usize, 9, 4, 4, 2];
        let rows: Vec<Vec<f64>> = tokens.iter().map(|&t| ck.param(EMBED).unwrap().row(t).to_vec()).collect();
        let h0 = Tensor::from_rows(&rows).unwrap();
        let (a, _) = forward(&ck, &tokens, false).unwrap();
        let (b, _) = forward_embeddings(&ck, &h0, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_tokens_and_nonfinite_inputs_rejected() {
        let ck = model(PositionalScheme::nope(), 7);
        assert!(forward(&ck, &[64], false).is_err());
        let mut h0 = Tensor::zeros(&[3, 64]);
        h0.data_mut()[5] = f64::NAN;
        match forward_embeddings(&ck, &h0, false) {
            Err(Error::NonFinite { location }) => assert!(location.contains("embedding"), "{location}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn loss_is_batch_permutation_equivariant() {
        let ck = model(PositionalScheme::rope(10_000.0, 16).unwrap(), 8);
        let mut rng = RngStream::new(1, "perm");
        let seqs: Vec<Vec<usize>> = (0..4).map(|_| (0..9).map(|_| rng.below(64)).collect()).collect();
        let mut rev = seqs.clone();
        rev.reverse();
        let a = sequence_loss(&ck, &seqs).unwrap();
        let b = sequence_loss(&ck, &rev).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }
}
