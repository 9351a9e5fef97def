use crate::error::{Error, Result};
use crate::tensor::ops::{softmax_in_place, softmax_rows_backward};
use crate::tensor::{gemm, gemm_into, MatRef, Scalar, Tensor};

/// `softmax(Q·Kᵀ/√d_k)·V` for a single head.
pub fn attention_exact<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (l, dk, dv) = check_qkv(q, k, v)?;
    let (out, _) = exact_forward(q.data(), k.data(), v.data(), l, dk, dv);
    Tensor::from_vec(&[l, dv], out)
}

pub(crate) fn check_qkv<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let ok = q.ndim() == 2
        && k.ndim() == 2
        && v.ndim() == 2
        && q.shape() == k.shape()
        && v.dim(0) == q.dim(0)
        && q.dim(1) > 0;
    if !ok {
        return Err(Error::Dimension(format!(
            "attention: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok((q.dim(0), q.dim(1), v.dim(1)))
}

/// Returns the output and the attention matrix `P` (L×L).
pub(crate) fn exact_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    l: usize,
    dk: usize,
    dv: usize,
) -> (Vec<T>, Vec<T>) {
    let mut p = gemm(MatRef::new(q, l, dk), MatRef::new(k, l, dk).t());
    let scale = T::of(1.0 / (dk as f64).sqrt());
    for row in p.chunks_mut(l) {
        row.iter_mut().for_each(|s| *s *= scale);
        softmax_in_place(row);
    }
    let out = gemm(MatRef::new(&p, l, l), MatRef::new(v, l, dv));
    (out, p)
}

/// Returns `(dQ, dK, dV)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn exact_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    p: &[T],
    dout: &[T],
    l: usize,
    dk: usize,
    dv: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let pm = MatRef::new(p, l, l);
    let dvv = gemm(pm.t(), MatRef::new(dout, l, dv));
    let dp = gemm(MatRef::new(dout, l, dv), MatRef::new(v, l, dv).t());
    let mut ds = vec![T::zero(); l * l];
    softmax_rows_backward(p, &dp, l, &mut ds);
    let scale = T::of(1.0 / (dk as f64).sqrt());
    ds.iter_mut().for_each(|s| *s *= scale);
    let mut dq = vec![T::zero(); l * dk];
    gemm_into(MatRef::new(&ds, l, l), MatRef::new(k, l, dk), &mut dq, false);
    let mut dkk = vec![T::zero(); l * dk];
    gemm_into(MatRef::new(&ds, l, l).t(), MatRef::new(q, l, dk), &mut dkk, false);
    (dq, dkk, dvv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_abs_diff, Rng};

    /// Per-row loop: scores, explicit max-shifted exponentials, weighted sum.
    pub(crate) fn naive(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
        let (l, d, dv) = (q.dim(0), q.dim(1), v.dim(1));
        let mut out = vec![0.0; l * dv];
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|c| q.data()[i * d + c] * k.data()[j * d + c]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            for j in 0..l {
                for c in 0..dv {
                    out[i * dv + c] += w[j] / z * v.data()[j * dv + c];
                }
            }
        }
        Tensor::from_vec(&[l, dv], out).unwrap()
    }

    #[test]
    fn zero_queries_average_values() {
        let mut rng = Rng::new(1);
        let k = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[5, 2], 1.0, &mut rng);
        let out = attention_exact(&Tensor::zeros(&[5, 3]), &k, &v).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..5).map(|j| v.data()[j * 2 + c]).sum::<f64>() / 5.0;
            for i in 0..5 {
                assert!((out.data()[i * 2 + c] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_returns_value_row() {
        let q = Tensor::<f64>::from_vec(&[1, 2], vec![3.0, -1.0]).unwrap();
        let v = Tensor::<f64>::from_vec(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(attention_exact(&q, &q, &v).unwrap(), v);
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = Rng::new(2);
        let q = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        assert!(max_abs_diff(&attention_exact(&q, &k, &v).unwrap(), &naive(&q, &k, &v)) < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[3, 2]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        assert!(matches!(attention_exact(&a, &b, &a), Err(Error::Dimension(_))));
    }
}
