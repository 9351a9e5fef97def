//! FAVOR+ linear attention: positive orthogonal random features for the
//! softmax kernel.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::exact::check_qkv;
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_into, MatRef, Rng, Scalar, Tensor};

/// When the random projection is resampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedrawPolicy {
    #[default]
    Fixed,
    PerForward,
}

/// `m` features for inputs of width `d_k`: `2·d_k`, already a multiple of `d_k`.
pub fn default_feature_count(dk: usize) -> usize {
    2 * dk
}

/// Projection matrix Ω (`m × d_k`) of block-orthogonal Gaussian rows.
#[derive(Debug)]
pub struct FavorFeatures {
    omega: Tensor<f64>,
    policy: RedrawPolicy,
    seed: u64,
    draws: AtomicU64,
}

impl Clone for FavorFeatures {
    fn clone(&self) -> Self {
        Self {
            omega: self.omega.clone(),
            policy: self.policy,
            seed: self.seed,
            draws: AtomicU64::new(self.draws.load(Ordering::Relaxed)),
        }
    }
}

impl FavorFeatures {
    pub fn new(dk: usize, m: usize, policy: RedrawPolicy, seed: u64) -> Self {
        Self {
            omega: orthogonal_gaussian(m, dk, &mut Rng::new(seed)),
            policy,
            seed,
            draws: AtomicU64::new(0),
        }
    }

    pub fn fixed(dk: usize, m: usize, rng: &mut Rng) -> Self {
        Self {
            omega: orthogonal_gaussian(m, dk, rng),
            policy: RedrawPolicy::Fixed,
            seed: rng.seed(),
            draws: AtomicU64::new(0),
        }
    }

    pub fn omega(&self) -> &Tensor<f64> {
        &self.omega
    }

    pub fn num_features(&self) -> usize {
        self.omega.dim(0)
    }

    pub fn dk(&self) -> usize {
        self.omega.dim(1)
    }

    pub fn policy(&self) -> RedrawPolicy {
        self.policy
    }

    /// Projection to use for the next forward pass.
    ///
    /// Under [`RedrawPolicy::PerForward`] the k-th call draws from stream k of
    /// the seed, so a sequence of forwards is reproducible.
    pub fn next_omega(&self) -> Cow<'_, Tensor<f64>> {
        match self.policy {
            RedrawPolicy::Fixed => Cow::Borrowed(&self.omega),
            RedrawPolicy::PerForward => {
                let k = self.draws.fetch_add(1, Ordering::Relaxed);
                let mut rng = Rng::new(self.seed).split(k);
                Cow::Owned(orthogonal_gaussian(self.num_features(), self.dk(), &mut rng))
            }
        }
    }
}

/// Rows in blocks of `d`: each block is an orthonormalized Gaussian square
/// matrix whose rows are rescaled to the norms of fresh `N(0, I_d)` vectors.
pub fn orthogonal_gaussian(m: usize, d: usize, rng: &mut Rng) -> Tensor<f64> {
    let mut out = Vec::with_capacity(m * d);
    while out.len() < m * d {
        let mut block: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| rng.normal()).collect())
            .collect();
        // modified Gram-Schmidt
        for i in 0..d {
            for j in 0..i {
                let dot: f64 = (0..d).map(|c| block[i][c] * block[j][c]).sum();
                for c in 0..d {
                    block[i][c] -= dot * block[j][c];
                }
            }
            let norm = block[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            block[i].iter_mut().for_each(|v| *v /= norm);
        }
        for row in block {
            if out.len() == m * d {
                break;
            }
            let chi = (0..d).map(|_| rng.normal().powi(2)).sum::<f64>().sqrt();
            out.extend(row.iter().map(|v| v * chi));
        }
    }
    Tensor::from_vec(&[m, d], out).expect("m*d entries")
}

/// How the exponent is shifted before exponentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Shift {
    None,
    /// per-row maximum; cancels in the query-side normalizer
    Row,
    /// one maximum over all rows; cancels between numerator and normalizer
    Global,
}

/// `φ(x)_j = m^{-1/2}·exp(ω_jᵀx̂ − ‖x̂‖²/2 − shift)` for already scaled rows `x̂`.
pub(crate) fn features<T: Scalar>(xhat: &[T], l: usize, dk: usize, omega: &[T], m: usize, shift: Shift) -> Vec<T> {
    let mut f = gemm(MatRef::new(xhat, l, dk), MatRef::new(omega, m, dk).t());
    for (row, x) in f.chunks_mut(m).zip(xhat.chunks(dk)) {
        let half_sq = x.iter().map(|&v| v * v).sum::<T>() * T::of(0.5);
        row.iter_mut().for_each(|v| *v -= half_sq);
    }
    match shift {
        Shift::None => {}
        Shift::Row => {
            for row in f.chunks_mut(m) {
                let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                row.iter_mut().for_each(|v| *v -= mx);
            }
        }
        Shift::Global => {
            let mx = f.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            f.iter_mut().for_each(|v| *v -= mx);
        }
    }
    let c = T::of(1.0 / (m as f64).sqrt());
    f.iter_mut().for_each(|v| *v = c * v.exp());
    f
}

/// Gradient w.r.t. `x̂` given features `f` and their upstream gradient.
///
/// The shift is treated as a constant: the attention output does not depend
/// on it, so its total derivative is zero.
fn features_backward<T: Scalar>(xhat: &[T], f: &[T], df: &[T], l: usize, dk: usize, omega: &[T], m: usize) -> Vec<T> {
    let g: Vec<T> = f.iter().zip(df).map(|(&a, &b)| a * b).collect();
    let mut dx = vec![T::zero(); l * dk];
    gemm_into(MatRef::new(&g, l, m), MatRef::new(omega, m, dk), &mut dx, false);
    for ((dxr, gr), xr) in dx.chunks_mut(dk).zip(g.chunks(m)).zip(xhat.chunks(dk)) {
        let s: T = gr.iter().copied().sum();
        dxr.iter_mut().zip(xr).for_each(|(d, &x)| *d -= s * x);
    }
    dx
}

/// Unshifted positive random features of raw inputs `x` (`L×d_k` → `L×m`).
pub fn favor_feature_map<T: Scalar>(x: &Tensor<T>, features_: &FavorFeatures) -> Result<Tensor<T>> {
    let (l, dk) = (x.dim(0), x.dim(1));
    if x.ndim() != 2 || dk != features_.dk() {
        return Err(Error::shapes("favor_feature_map", x.shape(), features_.omega.shape()));
    }
    let scale = T::of((dk as f64).powf(-0.25));
    let xhat: Vec<T> = x.data().iter().map(|&v| v * scale).collect();
    let omega = features_.omega.cast::<T>();
    let m = features_.num_features();
    Tensor::from_vec(&[l, m], features(&xhat, l, dk, omega.data(), m, Shift::None))
}

/// Linear-time approximation of [`attention_exact`](super::attention_exact).
pub fn attention_favor<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    features_: &FavorFeatures,
) -> Result<Tensor<T>> {
    let (l, dk, dv) = check_qkv(q, k, v)?;
    if dk != features_.dk() {
        return Err(Error::shapes("attention_favor", q.shape(), features_.omega.shape()));
    }
    let omega = features_.next_omega().cast::<T>();
    let cache = favor_forward(q.data(), k.data(), v.data(), l, dk, dv, omega.data(), features_.num_features())?;
    Tensor::from_vec(&[l, dv], cache.out)
}

#[derive(Debug, Clone)]
pub(crate) struct FavorCache<T> {
    qhat: Vec<T>,
    khat: Vec<T>,
    qf: Vec<T>,
    kf: Vec<T>,
    kv: Vec<T>,
    ksum: Vec<T>,
    den: Vec<T>,
    pub out: Vec<T>,
}

/// `D⁻¹·(Q′·(K′ᵀ·V))`, associated so no `L×L` matrix is formed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn favor_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    l: usize,
    dk: usize,
    dv: usize,
    omega: &[T],
    m: usize,
) -> Result<FavorCache<T>> {
    let scale = T::of((dk as f64).powf(-0.25));
    let qhat: Vec<T> = q.iter().map(|&x| x * scale).collect();
    let khat: Vec<T> = k.iter().map(|&x| x * scale).collect();
    let qf = features(&qhat, l, dk, omega, m, Shift::Row);
    let kf = features(&khat, l, dk, omega, m, Shift::Global);
    let kv = gemm(MatRef::new(&kf, l, m).t(), MatRef::new(v, l, dv));
    let mut ksum = vec![T::zero(); m];
    for row in kf.chunks(m) {
        ksum.iter_mut().zip(row).for_each(|(s, &x)| *s += x);
    }
    let mut out = gemm(MatRef::new(&qf, l, m), MatRef::new(&kv, m, dv));
    let mut den = vec![T::zero(); l];
    for (i, (d, row)) in den.iter_mut().zip(qf.chunks(m)).enumerate() {
        *d = row.iter().zip(&ksum).map(|(&a, &b)| a * b).sum();
        if !(*d > T::zero()) {
            return Err(Error::Numeric(format!("FAVOR+ normalizer {d} at token {i}")));
        }
        let inv = d.recip();
        out[i * dv..(i + 1) * dv].iter_mut().for_each(|o| *o *= inv);
    }
    Ok(FavorCache {
        qhat,
        khat,
        qf,
        kf,
        kv,
        ksum,
        den,
        out,
    })
}

/// Returns `(dQ, dK, dV)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn favor_backward<T: Scalar>(
    c: &FavorCache<T>,
    v: &[T],
    dout: &[T],
    l: usize,
    dk: usize,
    dv: usize,
    omega: &[T],
    m: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    // out = num / den
    let mut dnum = vec![T::zero(); l * dv];
    let mut dden = vec![T::zero(); l];
    for i in 0..l {
        let inv = c.den[i].recip();
        let (g, o) = (&dout[i * dv..(i + 1) * dv], &c.out[i * dv..(i + 1) * dv]);
        let mut dot = T::zero();
        for j in 0..dv {
            dnum[i * dv + j] = g[j] * inv;
            dot += g[j] * o[j];
        }
        dden[i] = -dot * inv;
    }
    // num = qf·kv, den = qf·ksum
    let mut dqf = gemm(MatRef::new(&dnum, l, dv), MatRef::new(&c.kv, m, dv).t());
    for (row, &g) in dqf.chunks_mut(m).zip(&dden) {
        row.iter_mut().zip(&c.ksum).for_each(|(d, &s)| *d += g * s);
    }
    let dkv = gemm(MatRef::new(&c.qf, l, m).t(), MatRef::new(&dnum, l, dv));
    let mut dksum = vec![T::zero(); m];
    for (row, &g) in c.qf.chunks(m).zip(&dden) {
        dksum.iter_mut().zip(row).for_each(|(d, &q)| *d += g * q);
    }
    // kv = kfᵀ·v, ksum = kfᵀ·1
    let mut dkf = gemm(MatRef::new(v, l, dv), MatRef::new(&dkv, m, dv).t());
    for row in dkf.chunks_mut(m) {
        row.iter_mut().zip(&dksum).for_each(|(d, &s)| *d += s);
    }
    let dvv = gemm(MatRef::new(&c.kf, l, m), MatRef::new(&dkv, m, dv));
    let scale = T::of((dk as f64).powf(-0.25));
    let mut dq = features_backward(&c.qhat, &c.qf, &dqf, l, dk, omega, m);
    let mut dkk = features_backward(&c.khat, &c.kf, &dkf, l, dk, omega, m);
    dq.iter_mut().for_each(|x| *x *= scale);
    dkk.iter_mut().for_each(|x| *x *= scale);
    (dq, dkk, dvv)
}
