use super::weights::{positional_bias, BiasWeights};
use crate::attention::PositionalScheme;
use crate::error::{invalid, shape, Result};
use crate::numerics::kernels::{rotate_pairs, softmax_in_place};
use crate::numerics::Tensor;

/// One head's query/key projections (`head_dim × d`, stored `out × in`).
#[derive(Clone, Copy, Debug)]
pub struct HeadProjections<'a> {
    pub wq: &'a Tensor,
    pub wk: &'a Tensor,
    /// Head index, used for ALiBi slopes.
    pub head: usize,
}

/// Queries, keys (both after the positional transform) and attention of one head.
pub(crate) struct HeadState {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub alpha: Tensor,
    pub scale: f64,
    pub head_dim: usize,
}

fn rotate_rows(m: &mut [f64], dk: usize, freqs: &[f64], inverse: bool) {
    let mut cos = vec![0.0; freqs.len()];
    let mut sin = vec![0.0; freqs.len()];
    for (i, row) in m.chunks_mut(dk).enumerate() {
        for (mi, w) in freqs.iter().enumerate() {
            let a = i as f64 * w;
            cos[mi] = a.cos();
            sin[mi] = a.sin();
        }
        rotate_pairs(row, &cos, &sin, inverse);
    }
}

pub(crate) fn head_state(
    x: &Tensor,
    proj: HeadProjections<'_>,
    scheme: &PositionalScheme,
) -> Result<HeadState> {
    let (t, d) = x.dims2()?;
    let (dk, dq) = proj.wq.dims2()?;
    if proj.wk.shape() != [dk, d] || dq != d {
        return Err(shape(format!(
            "projections {:?}/{:?} do not match input width {d}",
            proj.wq.shape(),
            proj.wk.shape()
        )));
    }
    let mut q = x.matmul(&proj.wq.transpose()?)?.into_vec();
    let mut k = x.matmul(&proj.wk.transpose()?)?.into_vec();
    if let Some(freqs) = scheme.effective_freqs() {
        if 2 * freqs.len() != dk {
            return Err(shape(format!("{} frequencies for head_dim {dk}", freqs.len())));
        }
        rotate_rows(&mut q, dk, &freqs, false);
        rotate_rows(&mut k, dk, &freqs, false);
    }
    let slope = match scheme.alibi_slopes() {
        Some(s) => *s
            .get(proj.head)
            .ok_or_else(|| invalid(format!("no ALiBi slope for head {}", proj.head)))?,
        None => 0.0,
    };
    let scale = scheme.temperature / (dk as f64).sqrt();
    let mut alpha = vec![0.0; t * t];
    for i in 0..t {
        let row = &mut alpha[i * t..i * t + i + 1];
        let qi = &q[i * dk..(i + 1) * dk];
        for (j, s) in row.iter_mut().enumerate() {
            let kj = &k[j * dk..(j + 1) * dk];
            *s = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>()
                - slope * (i - j) as f64;
        }
        softmax_in_place(row);
    }
    Ok(HeadState { q, k, alpha: Tensor::matrix(t, t, alpha)?, scale, head_dim: dk })
}

/// Attention matrix of one head over `x` (`T × d`).
pub fn head_attention(x: &Tensor, proj: HeadProjections<'_>, scheme: &PositionalScheme) -> Result<Tensor> {
    Ok(head_state(x, proj, scheme)?.alpha)
}

/// `A^c` of one head over `x`, with `weights` held fixed.
pub fn head_bias(
    x: &Tensor,
    proj: HeadProjections<'_>,
    scheme: &PositionalScheme,
    weights: &BiasWeights,
) -> Result<f64> {
    positional_bias(&head_attention(x, proj, scheme)?, weights)
}

/// Closed-form gradients of a head's positional bias.
#[derive(Clone, Debug)]
pub struct BiasGradients {
    pub bias: f64,
    /// `∂A^c/∂W_Q`, shaped like `W_Q`.
    pub dwq: Tensor,
    pub dwk: Tensor,
    /// `g_ij = ∂A^c/∂s_ij` (lower triangular).
    pub g: Tensor,
}

impl BiasGradients {
    /// `sqrt(‖∂W_Q‖_F² + ‖∂W_K‖_F²)`.
    pub fn norm(&self) -> f64 {
        self.dwq.frobenius().hypot(self.dwk.frobenius())
    }
}

/// Gradients of `A^c` with respect to one head's `W_Q` and `W_K`.
///
/// With `g_ij = α_ij(c_ij − Σ_p α_ip c_ip)/T` and logit scale `λ`,
/// `∂W_Q = λ Σ_i R_iᵀ(Σ_j g_ij k̃_j) x_iᵀ` and `∂W_K = λ Σ_j R_jᵀ(Σ_i g_ij q̃_i) x_jᵀ`,
/// where `R_i` is the rotation at position `i` (identity without rotary embeddings).
pub fn bias_gradients_analytic(
    x: &Tensor,
    proj: HeadProjections<'_>,
    scheme: &PositionalScheme,
    weights: &BiasWeights,
) -> Result<BiasGradients> {
    let st = head_state(x, proj, scheme)?;
    let t = st.alpha.rows();
    if weights.len() != t {
        return Err(shape(format!("weights for length {}, input has {t} rows", weights.len())));
    }
    let dk = st.head_dim;
    let mut g = vec![0.0; t * t];
    for i in 0..t {
        let a = &st.alpha.row(i)[..=i];
        let c = weights.row(i);
        let c_alpha: f64 = a.iter().zip(c).map(|(a, c)| a * c).sum();
        for j in 0..=i {
            g[i * t + j] = a[j] * (c[j] - c_alpha) / t as f64;
        }
    }
    let g = Tensor::matrix(t, t, g)?;
    let q = Tensor::matrix(t, dk, st.q)?;
    let k = Tensor::matrix(t, dk, st.k)?;
    let mut dq = g.matmul(&k)?.scale(st.scale).into_vec();
    let mut dk_rot = g.transpose()?.matmul(&q)?.scale(st.scale).into_vec();
    if let Some(freqs) = scheme.effective_freqs() {
        rotate_rows(&mut dq, dk, &freqs, true);
        rotate_rows(&mut dk_rot, dk, &freqs, true);
    }
    let dwq = Tensor::matrix(t, dk, dq)?.transpose()?.matmul(x)?;
    let dwk = Tensor::matrix(t, dk, dk_rot)?.transpose()?.matmul(x)?;
    let bias = positional_bias(&st.alpha, weights)?;
    Ok(BiasGradients { bias, dwq, dwk, g })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::weights::{deviation_weights, diagonal_weights, offdiagonal_weights};
    use crate::numerics::{gaussian_init, RngStream};

    fn fd_check(x: &Tensor, wq: &Tensor, wk: &Tensor, scheme: &PositionalScheme, w: &BiasWeights) -> f64 {
        let proj = HeadProjections { wq, wk, head: 0 };
        let an = bias_gradients_analytic(x, proj, scheme, w).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for which in 0..2 {
            let base = if which == 0 { wq } else { wk };
            let analytic = if which == 0 { &an.dwq } else { &an.dwk };
            for idx in 0..base.len() {
                let eval = |delta: f64| {
                    let mut m = base.clone();
                    m.data_mut()[idx] += delta;
                    let p = if which == 0 {
                        HeadProjections { wq: &m, wk, head: 0 }
                    } else {
                        HeadProjections { wq, wk: &m, head: 0 }
                    };
                    head_bias(x, p, scheme, w).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[idx];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
            }
        }
        worst
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = RngStream::new(17, "bias-grad");
        let (t, d, dk) = (6, 8, 4);
        let x = gaussian_init(&[t, d], 1.0, &mut rng).unwrap();
        let wq = gaussian_init(&[dk, d], 0.5, &mut rng).unwrap();
        let wk = gaussian_init(&[dk, d], 0.5, &mut rng).unwrap();
        let schemes = [
            PositionalScheme::nope(),
            PositionalScheme::rope(10.0, dk).unwrap().with_temperature(1.4).unwrap(),
            PositionalScheme::alibi(1).unwrap(),
        ];
        for scheme in &schemes {
            for w in [diagonal_weights(t).unwrap(), offdiagonal_weights(t).unwrap()] {
                let err = fd_check(&x, &wq, &wk, scheme, &w);
                assert!(err < 1e-6, "{} {}: {err}", scheme.name(), w.kind());
            }
        }
    }

    #[test]
    fn g_rows_sum_to_zero() {
        let mut rng = RngStream::new(2, "bias-grad");
        let x = gaussian_init(&[9, 8], 1.0, &mut rng).unwrap();
        let wq = gaussian_init(&[4, 8], 0.5, &mut rng).unwrap();
        let wk = gaussian_init(&[4, 8], 0.5, &mut rng).unwrap();
        let scheme = PositionalScheme::rope(100.0, 4).unwrap();
        let g = bias_gradients_analytic(
            &x,
            HeadProjections { wq: &wq, wk: &wk, head: 0 },
            &scheme,
            &diagonal_weights(9).unwrap(),
        )
        .unwrap()
        .g;
        for i in 0..9 {
            assert!(g.row(i).iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn constant_input_nope_has_zero_gradient() {
        let mut rng = RngStream::new(4, "bias-grad");
        let row: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let x = Tensor::from_rows(&vec![row; 10]).unwrap();
        let wq = gaussian_init(&[4, 8], 0.5, &mut rng).unwrap();
        let wk = gaussian_init(&[4, 8], 0.5, &mut rng).unwrap();
        let proj = HeadProjections { wq: &wq, wk: &wk, head: 0 };
        let nope = PositionalScheme::nope();
        for w in [diagonal_weights(10).unwrap(), offdiagonal_weights(10).unwrap()] {
            let gr = bias_gradients_analytic(&x, proj, &nope, &w).unwrap();
            assert!(gr.bias.abs() <= 1e-15);
            assert!(gr.dwq.max_abs() <= 1e-15 && gr.dwk.max_abs() <= 1e-15);
        }
        let rope = PositionalScheme::rope(10.0, 4).unwrap();
        let alpha = head_attention(&x, proj, &rope).unwrap();
        let gr = bias_gradients_analytic(&x, proj, &rope, &deviation_weights(&alpha).unwrap()).unwrap();
        assert!(gr.bias > 0.0 && gr.dwq.frobenius() > 0.0);
    }
}
