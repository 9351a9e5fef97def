//! Forward and backward kernels for the dense layers.

use serde::{Deserialize, Serialize};

use super::{gemm_into, MatRef, Scalar, Tensor};
use crate::error::{Error, Result};

/// Matrix product over the two trailing axes.
///
/// `b` is either a plain `k×n` matrix shared by every leading index of `a`, or
/// has exactly the same leading axes as `a`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let err = || Error::shapes("matmul", a.shape(), b.shape());
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(err());
    }
    let (m, k) = (a.dim(a.ndim() - 2), a.dim(a.ndim() - 1));
    let (kb, n) = (b.dim(b.ndim() - 2), b.dim(b.ndim() - 1));
    if k != kb {
        return Err(err());
    }
    let lead_a = &a.shape()[..a.ndim() - 2];
    let lead_b = &b.shape()[..b.ndim() - 2];
    if !lead_b.is_empty() && lead_a != lead_b {
        return Err(err());
    }
    let batch: usize = lead_a.iter().product();
    let mut shape = lead_a.to_vec();
    shape.extend([m, n]);
    let mut out = Tensor::zeros(&shape);
    for i in 0..batch {
        let ai = MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k);
        let bi = if lead_b.is_empty() {
            MatRef::new(b.data(), k, n)
        } else {
            MatRef::new(&b.data()[i * k * n..(i + 1) * k * n], k, n)
        };
        gemm_into(ai, bi, &mut out.data_mut()[i * m * n..(i + 1) * m * n], false);
    }
    Ok(out)
}

/// Row-wise softmax over the trailing axis, stabilized by max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let mut out = x.clone();
    let n = x.last_dim();
    if n > 0 {
        out.data_mut().chunks_mut(n).for_each(softmax_in_place);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = sum.recip();
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Gradient of a row softmax given its output `p` and upstream `dp`.
pub fn softmax_rows_backward<T: Scalar>(p: &[T], dp: &[T], n: usize, dx: &mut [T]) {
    for ((pr, dpr), dxr) in p.chunks(n).zip(dp.chunks(n)).zip(dx.chunks_mut(n)) {
        let dot: T = pr.iter().zip(dpr).map(|(&a, &b)| a * b).sum();
        for ((d, &pv), &g) in dxr.iter_mut().zip(pr).zip(dpr) {
            *d = pv * (g - dot);
        }
    }
}

/// Values saved by [`layer_norm_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Normalize each trailing-axis row to zero mean / unit variance, then apply
/// `gamma`, `beta`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    Ok(layer_norm_forward(x, gamma, beta, eps)?.0)
}

pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.last_dim();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm over trailing axis {d} with gamma {:?} and beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let rows = x.len() / d.max(1);
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    let inv_d = T::of(1.0 / d as f64);
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let is = (var + T::of(eps)).sqrt().recip();
        inv_std[r] = is;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out.data_mut()[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = (row[j] - mean) * is;
            o[j] = xh[j] * g[j] + b[j];
        }
    }
    Ok((out, LayerNormCache { xhat, inv_std }))
}

/// Returns `dx`; accumulates into `dgamma`, `dbeta`.
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &LayerNormCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let d = gamma.len();
    let mut dx = vec![T::zero(); dy.len()];
    let inv_d = T::of(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for (r, &is) in cache.inv_std.iter().enumerate() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let (mut s1, mut s2) = (T::zero(), T::zero());
        for j in 0..d {
            dgamma[j] += dyr[j] * xh[j];
            dbeta[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma[j];
            s1 += dxhat[j];
            s2 += dxhat[j] * xh[j];
        }
        let (m1, m2) = (s1 * inv_d, s2 * inv_d);
        for (j, o) in dx[r * d..(r + 1) * d].iter_mut().enumerate() {
            *o = is * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

/// `x·w + b` over the trailing axis; `w` is `Din×Dout`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if w.ndim() != 2 || x.last_dim() != w.dim(0) || b.is_some_and(|b| b.len() != w.dim(1)) {
        return Err(Error::Dimension(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.map(|b| b.shape().to_vec())
        )));
    }
    let (din, dout) = (w.dim(0), w.dim(1));
    let rows = x.len() / din.max(1);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    let mut out = Tensor::zeros(&shape);
    linear_rows(x.data(), rows, din, w.data(), b.map(|b| b.data()), dout, out.data_mut());
    Ok(out)
}

pub(crate) fn linear_rows<T: Scalar>(
    x: &[T],
    rows: usize,
    din: usize,
    w: &[T],
    b: Option<&[T]>,
    dout: usize,
    out: &mut [T],
) {
    match b {
        Some(b) => {
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(b);
            }
            gemm_into(MatRef::new(x, rows, din), MatRef::new(w, din, dout), out, true);
        }
        None => gemm_into(MatRef::new(x, rows, din), MatRef::new(w, din, dout), out, false),
    }
}

/// Accumulates `dw += xᵀ·dy`, `db += Σ dy` and returns `dx = dy·wᵀ`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_rows_backward<T: Scalar>(
    x: &[T],
    dy: &[T],
    rows: usize,
    din: usize,
    dout: usize,
    w: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Vec<T> {
    gemm_into(
        MatRef::new(x, rows, din).t(),
        MatRef::new(dy, rows, dout),
        dw,
        true,
    );
    if let Some(db) = db {
        for row in dy.chunks(dout) {
            db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
        }
    }
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![T::zero(); rows * din];
    gemm_into(
        MatRef::new(dy, rows, dout),
        MatRef::new(w, din, dout).t(),
        &mut dx,
        false,
    );
    dx
}

/// Feed-forward nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation of GELU
    #[default]
    Gelu,
    Relu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => gelu_scalar(x),
            Activation::Relu => x.max(T::zero()),
        }
    }

    /// Derivative at the pre-activation value.
    pub fn grad<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{max_abs_diff, Rng};

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        Tensor::from_vec(&[m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let x = Tensor::<f32>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &x).unwrap(), x);
        let z = Tensor::<f32>::zeros(&[2, 3]);
        assert_eq!(matmul(&Tensor::eye(2), &z).unwrap(), z);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(11);
        let a = Tensor::<f64>::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[7, 3], 1.0, &mut rng);
        let want = naive_matmul(&a, &b);
        let got = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap();
        assert!(max_abs_diff(&got.cast::<f64>(), &want) < 1e-6 * 10.0);
        assert!(max_abs_diff(&matmul(&a, &b).unwrap(), &want) < 1e-12);
    }

    #[test]
    fn matmul_batched_and_shared_rhs() {
        let mut rng = Rng::new(12);
        let a = Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[5, 2], 1.0, &mut rng);
        let bb = Tensor::<f64>::randn(&[3, 5, 2], 1.0, &mut rng);
        let shared = matmul(&a, &b).unwrap();
        let per = matmul(&a, &bb).unwrap();
        assert_eq!(shared.shape(), &[3, 4, 2]);
        for i in 0..3 {
            let ai = Tensor::from_vec(&[4, 5], a.slab(i).to_vec()).unwrap();
            let bi = Tensor::from_vec(&[5, 2], bb.slab(i).to_vec()).unwrap();
            assert_eq!(matmul(&ai, &b).unwrap().data(), shared.slab(i));
            assert_eq!(matmul(&ai, &bi).unwrap().data(), per.slab(i));
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4, 2]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = Rng::new(13);
        for _ in 0..20 {
            let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
            let c = Tensor::<f64>::randn(&[5, 2], 1.0, &mut rng);
            let l = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let r = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            assert!(max_abs_diff(&l, &r) < 1e-10);
        }
    }

    #[test]
    fn softmax_examples() {
        let t = |v: &[f64]| Tensor::from_vec(&[1, v.len()], v.to_vec()).unwrap();
        assert_eq!(softmax_rows(&t(&[0.0, 0.0])).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(softmax_rows(&t(&[1000.0, 1000.0])).unwrap().data(), &[0.5, 0.5]);
        let p = softmax_rows(&t(&[0.0, 3f64.ln()])).unwrap();
        assert!((p.data()[0] - 0.25).abs() < 1e-12 && (p.data()[1] - 0.75).abs() < 1e-12);
        assert!(matches!(softmax_rows(&t(&[f64::NAN, 0.0])), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::<f64>::full(&[2], 1.0);
        let zero = Tensor::<f64>::zeros(&[2]);
        let c = Tensor::from_vec(&[1, 2], vec![5.0, 5.0]).unwrap();
        assert_eq!(layer_norm(&c, &one, &zero, 1e-5).unwrap().data(), &[0.0, 0.0]);
        let r = Tensor::from_vec(&[1, 2], vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&r, &one, &zero, 0.0).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
        let b = Tensor::from_vec(&[2], vec![0.3, 0.3]).unwrap();
        let y = layer_norm(&r, &zero, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.3));
        let g3 = Tensor::<f64>::full(&[3], 1.0);
        assert!(matches!(layer_norm(&r, &g3, &g3, 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn linear_examples() {
        let mut rng = Rng::new(5);
        let x = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        let id = Tensor::eye(3);
        assert_eq!(linear(&x, &id, Some(&Tensor::zeros(&[3]))).unwrap(), x);
        let b = Tensor::from_vec(&[2], vec![0.5, -1.0]).unwrap();
        let w = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let y0 = linear(&Tensor::zeros(&[4, 3]), &w, Some(&b)).unwrap();
        assert!(y0.data().chunks(2).all(|r| r == b.data()));
        let y = linear(&x, &w, Some(&b)).unwrap();
        let mut oracle = matmul(&x, &w).unwrap();
        oracle.data_mut().chunks_mut(2).for_each(|r| {
            r[0] += 0.5;
            r[1] -= 1.0;
        });
        assert!(max_abs_diff(&y, &oracle) < 1e-12);
        assert!(linear(&x, &Tensor::zeros(&[2, 2]), None).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-9);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        assert!((gelu_scalar(1.0f64) - 0.841_192).abs() < 1e-3);
    }
}
