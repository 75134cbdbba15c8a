use super::{kernels, RngStream, Tensor};
use crate::error::{invalid, Result};

/// Softmax of a finite logit vector.
pub fn softmax_row(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(invalid("softmax logits must be finite"));
    }
    let mut out = vec![0.0; logits.len()];
    kernels::softmax_into(logits, &mut out);
    Ok(out)
}

/// Power-iteration estimate of the largest singular value of a matrix.
///
/// Iterates on `AᵀA` from a fixed pseudo-random start; the estimate
/// `‖A v_k‖` is nondecreasing in `k`.
pub fn spectral_norm(matrix: &Tensor, iterations: usize) -> Result<f64> {
    let (r, c) = matrix.dims2()?;
    let a = matrix.data();
    let mut rng = RngStream::new(0x5eed, "spectral-norm");
    let mut v: Vec<f64> = (0..c).map(|_| rng.normal()).collect();
    normalize(&mut v);
    let mut av = vec![0.0; r];
    let mut best = apply(a, r, c, &v, &mut av);
    for _ in 0..iterations {
        // v ← Aᵀ(Av) / ‖·‖
        let mut next = vec![0.0; c];
        kernels::gemm(1, r, c, &av, false, a, false, &mut next, false);
        if normalize(&mut next) == 0.0 {
            break;
        }
        v = next;
        let est = apply(a, r, c, &v, &mut av);
        best = best.max(est);
    }
    Ok(best)
}

fn apply(a: &[f64], r: usize, c: usize, v: &[f64], out: &mut [f64]) -> f64 {
    kernels::gemm(r, c, 1, a, false, v, false, out, false);
    super::norm2(out)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = super::norm2(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::strategy::Strategy;

    #[test]
    fn softmax_constant_logits_are_uniform() {
        let p = softmax_row(&[2.5, 2.5, 2.5]).unwrap();
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_hand_value() {
        let p = softmax_row(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_empty_and_nonfinite() {
        assert!(softmax_row(&[]).is_err());
        assert!(softmax_row(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn spectral_norm_of_identity_and_diagonal() {
        let id = Tensor::identity(8);
        assert!((spectral_norm(&id, 10).unwrap() - 1.0).abs() < 1e-12);
        let mut d = vec![0.0; 9];
        d[0] = 3.0;
        d[4] = 1.0;
        d[8] = 0.5;
        let m = Tensor::matrix(3, 3, d).unwrap();
        assert!((spectral_norm(&m, 100).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn spectral_norm_rejects_vectors() {
        assert!(spectral_norm(&Tensor::vector(vec![1.0, 2.0]), 5).is_err());
    }

    #[test]
    fn spectral_norm_matches_svd() {
        let mut rng = crate::numerics::RngStream::new(11, "spectral");
        let data: Vec<f64> = (0..64 * 64).map(|_| rng.normal()).collect();
        let m = Tensor::matrix(64, 64, data.clone()).unwrap();
        let oracle = nalgebra::DMatrix::from_row_slice(64, 64, &data).singular_values().max();
        let got = spectral_norm(&m, 200).unwrap();
        assert!((got - oracle).abs() <= 1e-6 * oracle, "{got} vs {oracle}");
    }

    proptest::proptest! {
        #[test]
        fn softmax_is_one_smooth(
            pairs in (2usize..=64).prop_flat_map(|n| (
                proptest::collection::vec(-20.0f64..20.0, n),
                proptest::collection::vec(-5.0f64..5.0, n),
            ))
        ) {
            let (a, b) = pairs;
            let shifted: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let p = softmax_row(&a).unwrap();
            let q = softmax_row(&shifted).unwrap();
            let l1: f64 = p.iter().zip(&q).map(|(x, y)| (x - y).abs()).sum();
            let sup = b.iter().fold(0.0f64, |m, y| m.max(y.abs()));
            proptest::prop_assert!(l1 <= sup + 1e-12);
        }
    }
}
