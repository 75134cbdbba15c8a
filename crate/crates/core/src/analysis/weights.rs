use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::numerics::Tensor;

/// Which positional pattern a [`BiasWeights`] matrix rewards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsKind {
    Diagonal,
    OffDiagonal,
    Deviation,
    Custom,
}

impl fmt::Display for WeightsKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightsKind::Diagonal => "diagonal",
            WeightsKind::OffDiagonal => "off-diagonal",
            WeightsKind::Deviation => "deviation",
            WeightsKind::Custom => "custom",
        })
    }
}

impl std::str::FromStr for WeightsKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(WeightsKind::Diagonal),
            "off-diagonal" | "offdiagonal" => Ok(WeightsKind::OffDiagonal),
            "deviation" => Ok(WeightsKind::Deviation),
            "custom" => Ok(WeightsKind::Custom),
            other => Err(invalid(format!("unknown weights kind {other:?}"))),
        }
    }
}

/// Centered lower-triangular positional weights `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasWeights {
    c: Tensor,
    kind: WeightsKind,
}

/// Row-sum tolerance used when accepting externally supplied weights.
const CENTER_TOL: f64 = 1e-9;

impl BiasWeights {
    /// Validate a user-supplied matrix: square, zero above the diagonal, rows centered.
    pub fn custom(c: Tensor) -> Result<Self> {
        Self::checked(c, WeightsKind::Custom)
    }

    fn checked(c: Tensor, kind: WeightsKind) -> Result<Self> {
        let (r, cols) = c.dims2()?;
        if r != cols {
            return Err(shape(format!("positional weights must be square, got {r}×{cols}")));
        }
        for i in 0..r {
            let row = c.row(i);
            if row[i + 1..].iter().any(|&x| x != 0.0) {
                return Err(invalid(format!("row {i} has weight above the diagonal")));
            }
            let sum: f64 = row[..=i].iter().sum();
            let scale = row[..=i].iter().fold(1.0f64, |m, x| m.max(x.abs()));
            if sum.abs() > CENTER_TOL * scale {
                return Err(invalid(format!("row {i} sums to {sum}, weights must be centered")));
            }
        }
        Ok(Self { c, kind })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.c
    }

    pub fn kind(&self) -> WeightsKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.c.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.c.row(i)[..=i]
    }
}

fn build(t: usize, kind: WeightsKind, mut f: impl FnMut(usize, &mut [f64])) -> Result<BiasWeights> {
    if t == 0 {
        return Err(invalid("sequence length must be positive"));
    }
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        f(i, &mut data[i * t..i * t + i + 1]);
    }
    Ok(BiasWeights { c: Tensor::matrix(t, t, data)?, kind })
}

/// `1` on the diagonal, `-1/(i-1)` elsewhere in the causal row (first row zero).
pub fn diagonal_weights(t: usize) -> Result<BiasWeights> {
    build(t, WeightsKind::Diagonal, |i, row| {
        if i == 0 {
            return;
        }
        row.fill(-1.0 / i as f64);
        row[i] = 1.0;
    })
}

/// `1` on the previous-token entry, `-1/(i-1)` elsewhere in the causal row (first row zero).
pub fn offdiagonal_weights(t: usize) -> Result<BiasWeights> {
    build(t, WeightsKind::OffDiagonal, |i, row| {
        if i == 0 {
            return;
        }
        row.fill(-1.0 / i as f64);
        row[i - 1] = 1.0;
    })
}

fn check_attention(alpha: &Tensor) -> Result<usize> {
    let (t, c) = alpha.dims2()?;
    if t != c {
        return Err(shape(format!("attention matrix must be square, got {t}×{c}")));
    }
    Ok(t)
}

/// `c_ij = α_ij − 1/i`: the functional then measures distance from uniform attention.
pub fn deviation_weights(alpha: &Tensor) -> Result<BiasWeights> {
    let t = check_attention(alpha)?;
    build(t, WeightsKind::Deviation, |i, row| {
        let u = 1.0 / (i + 1) as f64;
        for (c, a) in row.iter_mut().zip(&alpha.row(i)[..=i]) {
            *c = a - u;
        }
    })
}

/// Centered sign of the deviation from uniform: the functional then equals the mean
/// `ℓ₁` distance `(1/T)Σ_i‖α_i − u_i‖₁`.
pub fn sign_deviation_weights(alpha: &Tensor) -> Result<BiasWeights> {
    let t = check_attention(alpha)?;
    build(t, WeightsKind::Custom, |i, row| {
        let u = 1.0 / (i + 1) as f64;
        for (c, a) in row.iter_mut().zip(&alpha.row(i)[..=i]) {
            let d = a - u;
            *c = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
        }
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        for c in row.iter_mut() {
            *c -= mean;
        }
    })
}

/// `A^c = (1/T) Σ_i Σ_{j≤i} c_ij α_ij`.
pub fn positional_bias(alpha: &Tensor, weights: &BiasWeights) -> Result<f64> {
    let t = check_attention(alpha)?;
    if t != weights.len() {
        return Err(shape(format!("attention is {t}×{t}, weights are {0}×{0}", weights.len())));
    }
    let mut total = 0.0;
    for i in 0..t {
        total += weights
            .row(i)
            .iter()
            .zip(&alpha.row(i)[..=i])
            .map(|(c, a)| c * a)
            .sum::<f64>();
    }
    Ok(total / t as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn identity_attention(t: usize) -> Tensor {
        Tensor::identity(t)
    }

    fn uniform_attention(t: usize) -> Tensor {
        let mut d = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..=i {
                d[i * t + j] = 1.0 / (i + 1) as f64;
            }
        }
        Tensor::matrix(t, t, d).unwrap()
    }

    fn random_attention(t: usize, rng: &mut RngStream) -> Tensor {
        let mut d = vec![0.0; t * t];
        for i in 0..t {
            let logits: Vec<f64> = (0..=i).map(|_| 2.0 * rng.normal()).collect();
            let p = crate::numerics::softmax_row(&logits).unwrap();
            d[i * t..i * t + i + 1].copy_from_slice(&p);
        }
        Tensor::matrix(t, t, d).unwrap()
    }

    fn max_row_sum(w: &BiasWeights) -> f64 {
        (0..w.len()).map(|i| w.row(i).iter().sum::<f64>().abs()).fold(0.0, f64::max)
    }

    #[test]
    fn diagonal_rows() {
        assert_eq!(diagonal_weights(1).unwrap().matrix().data(), &[0.0]);
        let w = diagonal_weights(3).unwrap();
        assert_eq!(w.row(2), &[-0.5, -0.5, 1.0]);
        assert!(max_row_sum(&diagonal_weights(17).unwrap()) < 1e-12);
    }

    #[test]
    fn offdiagonal_rows() {
        let w = offdiagonal_weights(3).unwrap();
        assert_eq!(w.row(1), &[1.0, -1.0]);
        assert_eq!(w.row(2), &[-0.5, 1.0, -0.5]);
        assert!(max_row_sum(&offdiagonal_weights(17).unwrap()) < 1e-12);
    }

    #[test]
    fn deviation_rows() {
        let w = deviation_weights(&uniform_attention(5)).unwrap();
        assert!(w.matrix().data().iter().all(|&x| x == 0.0));
        let w = deviation_weights(&identity_attention(4)).unwrap();
        for i in 0..4 {
            assert!((w.row(i)[i] - (1.0 - 1.0 / (i + 1) as f64)).abs() < 1e-15);
        }
    }

    #[test]
    fn bias_hand_values() {
        let c = diagonal_weights(6).unwrap();
        assert!(positional_bias(&uniform_attention(6), &c).unwrap().abs() < 1e-15);
        // the first row carries zero weight, so identity attention scores (T-1)/T
        let t = 6;
        let b = positional_bias(&identity_attention(t), &c).unwrap();
        assert!((b - (t - 1) as f64 / t as f64).abs() < 1e-15);
        let off = offdiagonal_weights(3).unwrap();
        let b = positional_bias(&identity_attention(3), &off).unwrap();
        assert!((b - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn non_centered_rejected() {
        let mut c = diagonal_weights(3).unwrap().matrix().clone();
        c.data_mut()[8] = 2.0;
        assert!(BiasWeights::custom(c).is_err());
        assert!(BiasWeights::custom(Tensor::zeros(&[2, 3])).is_err());
        let upper = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(BiasWeights::custom(upper).is_err());
    }

    #[test]
    fn sign_weights_measure_l1_distance() {
        let mut rng = RngStream::new(3, "attn");
        let a = random_attention(12, &mut rng);
        let w = sign_deviation_weights(&a).unwrap();
        assert!(max_row_sum(&w) < 1e-12);
        let direct: f64 = (0..12)
            .map(|i| a.row(i)[..=i].iter().map(|x| (x - 1.0 / (i + 1) as f64).abs()).sum::<f64>())
            .sum::<f64>()
            / 12.0;
        assert!((positional_bias(&a, &w).unwrap() - direct).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn deviation_bias_is_nonnegative(seed in 0u64..10_000, t in 1usize..20) {
            let mut rng = RngStream::new(seed, "attn");
            let a = random_attention(t, &mut rng);
            let w = deviation_weights(&a).unwrap();
            let b = positional_bias(&a, &w).unwrap();
            let closed: f64 = (0..t)
                .map(|i| a.row(i)[..=i].iter().map(|x| x * x).sum::<f64>() - 1.0 / (i + 1) as f64)
                .sum::<f64>() / t as f64;
            prop_assert!(b >= -1e-15);
            prop_assert!((b - closed).abs() < 1e-12);
        }

        #[test]
        fn uniform_attention_has_no_bias(seed in 0u64..10_000, t in 1usize..20) {
            let mut rng = RngStream::new(seed, "weights");
            let mut d = vec![0.0; t * t];
            for i in 0..t {
                let row: Vec<f64> = (0..=i).map(|_| rng.normal()).collect();
                let m = row.iter().sum::<f64>() / row.len() as f64;
                for (j, x) in row.iter().enumerate() {
                    d[i * t + j] = x - m;
                }
            }
            let c = BiasWeights::custom(Tensor::matrix(t, t, d).unwrap()).unwrap();
            prop_assert!(positional_bias(&uniform_attention(t), &c).unwrap().abs() < 1e-12);
        }
    }
}
