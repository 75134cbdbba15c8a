use drope_core::numerics::{AttnSpec, RngStream, Tape, Tensor, Var};

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn eval(inputs: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    tape.value(loss).data()[0]
}

/// Largest relative error between tape gradients and central differences.
fn check(inputs: Vec<Tensor>, build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var).unwrap();
        for idx in 0..inputs[which].len() {
            let mut plus = inputs.clone();
            plus[which].data_mut()[idx] += h;
            let mut minus = inputs.clone();
            minus[which].data_mut()[idx] -= h;
            let fd = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
            let a = analytic.data()[idx];
            let err = (a - fd).abs() / (a.abs().max(fd.abs()).max(1e-3));
            worst = worst.max(err);
        }
    }
    worst
}

/// Reduce any node to a scalar with a fixed non-uniform weighting.
fn weighted_sum(tape: &mut Tape, x: Var) -> Var {
    let shape = tape.value(x).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
    let w = tape.leaf(w);
    let p = tape.mul(x, w);
    tape.sum(p)
}

#[test]
fn square_sum_gradient_is_two_x() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let xx = tape.mul(x, x);
    let g = tape.backward(xx).unwrap();
    assert_eq!(g.wrt(x).unwrap().data()[0], 6.0);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    assert!(tape.backward(x).is_err());
}

#[test]
fn elementwise_ops_match_finite_differences() {
    let mut rng = RngStream::new(1, "fd-elementwise");
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let err = check(vec![a, b], &|t, v| {
        let s = t.add(v[0], v[1]);
        let m = t.mul(s, v[1]);
        let k = t.scale(m, -0.7);
        let y = t.silu(k);
        weighted_sum(t, y)
    });
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn matmul_matches_finite_differences() {
    let mut rng = RngStream::new(2, "fd-matmul");
    let a = random(&[3, 5], &mut rng);
    let b = random(&[5, 2], &mut rng);
    let c = random(&[4, 5], &mut rng);
    let err = check(vec![a, b, c], &|t, v| {
        let ab = t.matmul(v[0], v[1], false);
        let act = t.matmul(v[0], v[2], true);
        let s1 = weighted_sum(t, ab);
        let s2 = weighted_sum(t, act);
        t.add(s1, s2)
    });
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn rmsnorm_matches_finite_differences() {
    let mut rng = RngStream::new(3, "fd-rmsnorm");
    let x = random(&[3, 8], &mut rng);
    let g = random(&[8], &mut rng);
    for group in [8, 4] {
        let err = check(vec![x.clone(), g.clone()], &move |t, v| {
            let y = t.rmsnorm(v[0], v[1], group);
            weighted_sum(t, y)
        });
        assert!(err < 1e-6, "group {group}: relative error {err}");
    }
}

#[test]
fn rope_matches_finite_differences() {
    let mut rng = RngStream::new(4, "fd-rope");
    let x = random(&[4, 8], &mut rng);
    let err = check(vec![x], &|t, v| {
        let y = t.rope(v[0], 4, &[1.0, 0.1], &[0, 1, 5, 9]);
        weighted_sum(t, y)
    });
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn embed_and_cross_entropy_match_finite_differences() {
    let mut rng = RngStream::new(5, "fd-ce");
    let table = random(&[6, 4], &mut rng);
    let proj = random(&[6, 4], &mut rng);
    let err = check(vec![table, proj], &|t, v| {
        let h = t.embed(v[0], &[1, 3, 3, 0, 5]);
        let logits = t.matmul(h, v[1], true);
        t.cross_entropy(logits, &[2, 0, 5, 1, 1])
    });
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = RngStream::new(6, "fd-attn");
    let (batch, seq, heads, kv_heads, dk) = (2, 4, 4, 2, 3);
    let q = random(&[batch * seq, heads * dk], &mut rng);
    let k = random(&[batch * seq, kv_heads * dk], &mut rng);
    let vv = random(&[batch * seq, kv_heads * dk], &mut rng);
    for alibi in [None, Some(vec![0.5, 0.25, 0.125, 0.0625])] {
        let spec = AttnSpec {
            batch,
            seq_len: seq,
            heads,
            kv_heads,
            head_dim: dk,
            logit_scale: 1.3 / (dk as f64).sqrt(),
            alibi_slopes: alibi,
        };
        let err = check(vec![q.clone(), k.clone(), vv.clone()], &move |t, v| {
            let z = t.attention(v[0], v[1], v[2], spec.clone());
            weighted_sum(t, z)
        });
        assert!(err < 1e-6, "relative error {err}");
    }
}

#[test]
fn two_layer_mlp_matches_finite_differences() {
    let mut rng = RngStream::new(7, "fd-mlp");
    let x = random(&[5, 6], &mut rng);
    let w1 = random(&[8, 6], &mut rng).scale(0.4);
    let w2 = random(&[3, 8], &mut rng).scale(0.4);
    let err = check(vec![x, w1, w2], &|t, v| {
        let h = t.matmul(v[0], v[1], true);
        let a = t.silu(h);
        let logits = t.matmul(a, v[2], true);
        t.cross_entropy(logits, &[0, 1, 2, 1, 0])
    });
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn named_gradients_sum_repeated_names() {
    let mut tape = Tape::new();
    let a = tape.param("w", Tensor::scalar(2.0));
    let b = tape.param("w", Tensor::scalar(2.0));
    let p = tape.mul(a, b);
    let g = tape.backward(p).unwrap().named();
    assert_eq!(g["w"].data()[0], 4.0);
}
