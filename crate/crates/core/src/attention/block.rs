use serde::{Deserialize, Serialize};

use super::favor::RedrawPolicy;
use super::mha::{MhaCache, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::layers::{LayerNorm, Linear};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::ops::{Activation, LayerNormCache};
use crate::tensor::{Rng, Scalar, Tensor};

/// Where layer normalization sits relative to each residual add.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// `LN(x + f(x))`
    #[default]
    Post,
    /// `x + f(LN(x))`
    Pre,
}

#[derive(Debug, Clone)]
pub struct BlockSpec {
    pub dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    /// `Some(m)` selects FAVOR+ with `m` features, `None` exact attention.
    pub favor_features: Option<usize>,
    pub redraw: RedrawPolicy,
    pub norm: NormPlacement,
    pub activation: Activation,
    pub qkv_bias: bool,
}

/// Self-attention and a two-layer feed-forward network, each wrapped in a
/// residual connection with layer normalization.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub norm: NormPlacement,
    pub activation: Activation,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    attn_in: Vec<T>,
    attn: MhaCache<T>,
    ln1: LayerNormCache<T>,
    ffn_in: Vec<T>,
    hidden_pre: Vec<T>,
    hidden: Vec<T>,
    ln2: LayerNormCache<T>,
}

fn add<T: Scalar>(mut a: Vec<T>, b: &[T]) -> Vec<T> {
    a.iter_mut().zip(b).for_each(|(x, &y)| *x += y);
    a
}

impl TransformerBlock {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, spec: &BlockSpec, rng: &mut Rng) -> Result<Self> {
        let hidden = spec.dim * spec.ffn_ratio;
        if hidden == 0 {
            return Err(Error::Config(format!("{name}: zero feed-forward width")));
        }
        Ok(Self {
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                spec.dim,
                spec.heads,
                spec.favor_features.map(|m| (m, spec.redraw)),
                spec.qkv_bias,
                rng,
            )?,
            ff1: Linear::new(store, &format!("{name}.ff1"), spec.dim, hidden, true, rng)?,
            ff2: Linear::new(store, &format!("{name}.ff2"), hidden, spec.dim, true, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), spec.dim)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), spec.dim)?,
            norm: spec.norm,
            activation: spec.activation,
            dim: spec.dim,
        })
    }

    /// Applies the block to a `[N, L, D]` or `[L, D]` token batch.
    pub fn apply<T: Scalar>(&self, p: &ParameterStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, l) = match *x.shape() {
            [n, l, d] if d == self.dim => (n, l),
            [l, d] if d == self.dim => (1, l),
            _ => {
                return Err(Error::Dimension(format!(
                    "block of width {} applied to {:?}",
                    self.dim,
                    x.shape()
                )))
            }
        };
        let (out, _) = self.forward(p, x.data().to_vec(), n, l)?;
        Tensor::from_vec(x.shape(), out)
    }

    fn ffn<T: Scalar>(&self, p: &ParameterStore<T>, x: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let pre = self.ff1.forward(p, x);
        let act: Vec<T> = pre.iter().map(|&v| self.activation.apply(v)).collect();
        let out = self.ff2.forward(p, &act);
        (pre, act, out)
    }

    fn ffn_backward<T: Scalar>(&self, p: &mut ParameterStore<T>, c: &BlockCache<T>, dout: &[T]) -> Vec<T> {
        let mut dh = self.ff2.backward(p, &c.hidden, dout, true);
        dh.iter_mut()
            .zip(&c.hidden_pre)
            .for_each(|(g, &h)| *g *= self.activation.grad(h));
        self.ff1.backward(p, &c.ffn_in, &dh, true)
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParameterStore<T>,
        x: Vec<T>,
        n: usize,
        l: usize,
    ) -> Result<(Vec<T>, BlockCache<T>)> {
        match self.norm {
            NormPlacement::Post => {
                let (a, attn) = self.attn.forward(p, &x, n, l)?;
                let (y, ln1) = self.ln1.forward(p, add(a, &x));
                let (hidden_pre, hidden, f) = self.ffn(p, &y);
                let (out, ln2) = self.ln2.forward(p, add(f, &y));
                Ok((
                    out,
                    BlockCache {
                        attn_in: x,
                        attn,
                        ln1,
                        ffn_in: y,
                        hidden_pre,
                        hidden,
                        ln2,
                    },
                ))
            }
            NormPlacement::Pre => {
                let (u, ln1) = self.ln1.forward(p, x.clone());
                let (a, attn) = self.attn.forward(p, &u, n, l)?;
                let y = add(a, &x);
                let (v, ln2) = self.ln2.forward(p, y.clone());
                let (hidden_pre, hidden, f) = self.ffn(p, &v);
                let out = add(f, &y);
                Ok((
                    out,
                    BlockCache {
                        attn_in: u,
                        attn,
                        ln1,
                        ffn_in: v,
                        hidden_pre,
                        hidden,
                        ln2,
                    },
                ))
            }
        }
    }

    pub fn backward<T: Scalar>(&self, p: &mut ParameterStore<T>, c: &BlockCache<T>, dout: &[T]) -> Vec<T> {
        match self.norm {
            NormPlacement::Post => {
                let dz2 = self.ln2.backward(p, &c.ln2, dout);
                let dy = add(self.ffn_backward(p, c, &dz2), &dz2);
                let dz1 = self.ln1.backward(p, &c.ln1, &dy);
                add(self.attn.backward(p, &c.attn, &c.attn_in, &dz1), &dz1)
            }
            NormPlacement::Pre => {
                let dv = self.ffn_backward(p, c, dout);
                let dy = add(self.ln2.backward(p, &c.ln2, &dv), dout);
                let du = self.attn.backward(p, &c.attn, &c.attn_in, &dy);
                add(self.ln1.backward(p, &c.ln1, &du), &dy)
            }
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.attn
            .param_ids()
            .chain(self.ff1.param_ids())
            .chain(self.ff2.param_ids())
            .chain(self.ln1.param_ids())
            .chain(self.ln2.param_ids())
    }
}
