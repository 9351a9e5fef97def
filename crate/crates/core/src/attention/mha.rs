use super::exact::{exact_backward, exact_forward};
use super::favor::{favor_backward, favor_forward, FavorCache, FavorFeatures, RedrawPolicy};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{ParamId, ParameterStore};
use crate::tensor::ops::linear;
use crate::tensor::{Rng, Scalar, Tensor};

/// Attention kernel used inside a multi-head layer.
#[derive(Debug, Clone)]
pub enum Kernel {
    Exact,
    Favor(FavorFeatures),
}

/// Plain-tensor weights for [`mha`]: column block `h` of `wq`/`wk`/`wv` is head
/// `h`'s projection; `wo` maps the concatenated heads back to `D`.
#[derive(Debug, Clone)]
pub struct MhaWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Option<Tensor<T>>,
    pub heads: usize,
}

pub(crate) fn head_dim(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "model dim {dim} is not divisible by head count {heads}"
        )));
    }
    Ok(dim / heads)
}

/// Exact multi-head self-attention of one token sequence `x` (`L×D`).
pub fn mha<T: Scalar>(x: &Tensor<T>, w: &MhaWeights<T>) -> Result<Tensor<T>> {
    if x.ndim() != 2 {
        return Err(Error::Dimension(format!("mha expects L×D, got {:?}", x.shape())));
    }
    let (l, d) = (x.dim(0), x.dim(1));
    let width = w.wq.dim(1);
    let dh = head_dim(width, w.heads)?;
    if w.wo.dim(0) != w.heads * dh {
        return Err(Error::shapes("mha output projection", w.wo.shape(), &[w.heads * dh, d]));
    }
    let q = linear(x, &w.wq, None)?;
    let k = linear(x, &w.wk, None)?;
    let v = linear(x, &w.wv, None)?;
    let (concat, _) = heads_forward(q.data(), k.data(), v.data(), 1, l, w.heads, dh, None)?;
    let concat = Tensor::from_vec(&[l, width], concat)?;
    linear(&concat, &w.wo, w.bo.as_ref())
}

#[derive(Debug, Clone)]
enum HeadCache<T> {
    Exact { p: Vec<T> },
    Favor(FavorCache<T>),
}

fn extract<T: Scalar>(buf: &[T], n: usize, l: usize, heads: usize, dh: usize, h: usize) -> Vec<T> {
    let width = heads * dh;
    let mut out = Vec::with_capacity(l * dh);
    for t in 0..l {
        let base = (n * l + t) * width + h * dh;
        out.extend_from_slice(&buf[base..base + dh]);
    }
    out
}

fn scatter<T: Scalar>(buf: &mut [T], src: &[T], n: usize, l: usize, heads: usize, dh: usize, h: usize) {
    let width = heads * dh;
    for t in 0..l {
        let base = (n * l + t) * width + h * dh;
        buf[base..base + dh].copy_from_slice(&src[t * dh..(t + 1) * dh]);
    }
}

/// Per-sample, per-head attention over projected `q`, `k`, `v`
/// (`n·l × heads·dh` each). `omega` selects FAVOR+ (`m × dh`).
#[allow(clippy::too_many_arguments)]
fn heads_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    l: usize,
    heads: usize,
    dh: usize,
    omega: Option<&Tensor<T>>,
) -> Result<(Vec<T>, Vec<HeadCache<T>>)> {
    let mut concat = vec![T::zero(); n * l * heads * dh];
    let mut caches = Vec::with_capacity(n * heads);
    for s in 0..n {
        for h in 0..heads {
            let (qh, kh, vh) = (
                extract(q, s, l, heads, dh, h),
                extract(k, s, l, heads, dh, h),
                extract(v, s, l, heads, dh, h),
            );
            let (out, cache) = match omega {
                None => {
                    let (out, p) = exact_forward(&qh, &kh, &vh, l, dh, dh);
                    (out, HeadCache::Exact { p })
                }
                Some(om) => {
                    let c = favor_forward(&qh, &kh, &vh, l, dh, dh, om.data(), om.dim(0))?;
                    (c.out.clone(), HeadCache::Favor(c))
                }
            };
            scatter(&mut concat, &out, s, l, heads, dh, h);
            caches.push(cache);
        }
    }
    Ok((concat, caches))
}

/// Multi-head self-attention layer: bias-free (by default) Q/K/V projections,
/// biased output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub dim: usize,
    pub kernel: Kernel,
}

#[derive(Debug, Clone)]
pub struct MhaCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    concat: Vec<T>,
    heads: Vec<HeadCache<T>>,
    omega: Option<Tensor<T>>,
    n: usize,
    l: usize,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        favor: Option<(usize, RedrawPolicy)>,
        qkv_bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let dh = head_dim(dim, heads)?;
        let wq = Linear::new(store, &format!("{name}.wq"), dim, dim, qkv_bias, rng)?;
        let wk = Linear::new(store, &format!("{name}.wk"), dim, dim, qkv_bias, rng)?;
        let wv = Linear::new(store, &format!("{name}.wv"), dim, dim, qkv_bias, rng)?;
        let wo = Linear::new(store, &format!("{name}.wo"), dim, dim, true, rng)?;
        let kernel = match favor {
            None => Kernel::Exact,
            Some((m, policy)) => Kernel::Favor(FavorFeatures::new(dh, m, policy, rng.next_u64())),
        };
        Ok(Self {
            wq,
            wk,
            wv,
            wo,
            heads,
            dim,
            kernel,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `x` is `n` sequences of `l` tokens of width `dim`, flattened.
    pub fn forward<T: Scalar>(
        &self,
        p: &ParameterStore<T>,
        x: &[T],
        n: usize,
        l: usize,
    ) -> Result<(Vec<T>, MhaCache<T>)> {
        let q = self.wq.forward(p, x);
        let k = self.wk.forward(p, x);
        let v = self.wv.forward(p, x);
        let omega = match &self.kernel {
            Kernel::Exact => None,
            Kernel::Favor(f) => Some(f.next_omega().cast::<T>()),
        };
        let (concat, heads) = heads_forward(&q, &k, &v, n, l, self.heads, self.head_dim(), omega.as_ref())?;
        let out = self.wo.forward(p, &concat);
        Ok((
            out,
            MhaCache {
                q,
                k,
                v,
                concat,
                heads,
                omega,
                n,
                l,
            },
        ))
    }

    pub fn backward<T: Scalar>(&self, p: &mut ParameterStore<T>, c: &MhaCache<T>, x: &[T], dout: &[T]) -> Vec<T> {
        let (n, l, heads, dh) = (c.n, c.l, self.heads, self.head_dim());
        let dconcat = self.wo.backward(p, &c.concat, dout, true);
        let width = heads * dh;
        let mut dq = vec![T::zero(); n * l * width];
        let mut dk = vec![T::zero(); n * l * width];
        let mut dv = vec![T::zero(); n * l * width];
        for s in 0..n {
            for h in 0..heads {
                let g = extract(&dconcat, s, l, heads, dh, h);
                let vh = extract(&c.v, s, l, heads, dh, h);
                let (gq, gk, gv) = match &c.heads[s * heads + h] {
                    HeadCache::Exact { p: pm } => {
                        let qh = extract(&c.q, s, l, heads, dh, h);
                        let kh = extract(&c.k, s, l, heads, dh, h);
                        exact_backward(&qh, &kh, &vh, pm, &g, l, dh, dh)
                    }
                    HeadCache::Favor(fc) => {
                        let om = c.omega.as_ref().expect("favor cache carries omega");
                        favor_backward(fc, &vh, &g, l, dh, dh, om.data(), om.dim(0))
                    }
                };
                scatter(&mut dq, &gq, s, l, heads, dh, h);
                scatter(&mut dk, &gk, s, l, heads, dh, h);
                scatter(&mut dv, &gv, s, l, heads, dh, h);
            }
        }
        let mut dx = self.wq.backward(p, x, &dq, true);
        for (a, b) in dx.iter_mut().zip(self.wk.backward(p, x, &dk, true)) {
            *a += b;
        }
        for (a, b) in dx.iter_mut().zip(self.wv.backward(p, x, &dv, true)) {
            *a += b;
        }
        dx
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        [&self.wq, &self.wk, &self.wv, &self.wo]
            .into_iter()
            .flat_map(|l| l.param_ids())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::attention_exact;
    use crate::tensor::{max_abs_diff, Rng};

    fn cols(t: &Tensor<f64>, lo: usize, hi: usize) -> Tensor<f64> {
        let (r, c) = (t.dim(0), t.dim(1));
        let data = (0..r).flat_map(|i| t.data()[i * c + lo..i * c + hi].to_vec()).collect();
        Tensor::from_vec(&[r, hi - lo], data).unwrap()
    }

    #[test]
    fn single_head_identity_collapses_to_attention() {
        let mut rng = Rng::new(1);
        let x = Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng);
        let w = MhaWeights {
            wq: Tensor::eye(4),
            wk: Tensor::eye(4),
            wv: Tensor::eye(4),
            wo: Tensor::eye(4),
            bo: None,
            heads: 1,
        };
        let want = attention_exact(&x, &x, &x).unwrap();
        assert!(max_abs_diff(&mha(&x, &w).unwrap(), &want) < 1e-12);
    }

    #[test]
    fn zero_value_projection_leaves_bias() {
        let mut rng = Rng::new(2);
        let x = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let bo = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = MhaWeights {
            wq: Tensor::randn(&[4, 4], 1.0, &mut rng),
            wk: Tensor::randn(&[4, 4], 1.0, &mut rng),
            wv: Tensor::zeros(&[4, 4]),
            wo: Tensor::randn(&[4, 4], 1.0, &mut rng),
            bo: Some(bo.clone()),
            heads: 2,
        };
        let out = mha(&x, &w).unwrap();
        assert!(out.data().chunks(4).all(|r| r == bo.data()));
    }

    #[test]
    fn two_heads_match_manual_construction() {
        let mut rng = Rng::new(3);
        let x = Tensor::<f64>::randn(&[6, 4], 1.0, &mut rng);
        let w = MhaWeights {
            wq: Tensor::randn(&[4, 4], 0.5, &mut rng),
            wk: Tensor::randn(&[4, 4], 0.5, &mut rng),
            wv: Tensor::randn(&[4, 4], 0.5, &mut rng),
            wo: Tensor::randn(&[4, 4], 0.5, &mut rng),
            bo: None,
            heads: 2,
        };
        let q = linear(&x, &w.wq, None).unwrap();
        let k = linear(&x, &w.wk, None).unwrap();
        let v = linear(&x, &w.wv, None).unwrap();
        let h0 = attention_exact(&cols(&q, 0, 2), &cols(&k, 0, 2), &cols(&v, 0, 2)).unwrap();
        let h1 = attention_exact(&cols(&q, 2, 4), &cols(&k, 2, 4), &cols(&v, 2, 4)).unwrap();
        let concat: Vec<f64> = (0..6)
            .flat_map(|i| [h0.slab(i), h1.slab(i)].concat())
            .collect();
        let concat = Tensor::from_vec(&[6, 4], concat).unwrap();
        let want = linear(&concat, &w.wo, None).unwrap();
        assert!(max_abs_diff(&mha(&x, &w).unwrap(), &want) < 1e-12);
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut store = ParameterStore::<f32>::new();
        let err = MultiHeadAttention::new(&mut store, "a", 6, 4, None, false, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
