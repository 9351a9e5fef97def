//! Parameterized building blocks shared by the attention and model modules.

use crate::error::Result;
use crate::params::{ParamId, ParameterStore};
use crate::tensor::ops::{
    layer_norm_backward, layer_norm_forward, linear_rows, linear_rows_backward, LayerNormCache,
};
use crate::tensor::{Rng, Scalar, Tensor};

/// Fully connected map over the trailing axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    /// Weights `U(±1/√din)`, bias zero.
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (din as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::rand_uniform(&[din, dout], -bound, bound, rng),
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[dout]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            din,
            dout,
        })
    }

    /// `x` holds `rows × din` values; returns `rows × dout`.
    pub fn forward<T: Scalar>(&self, p: &ParameterStore<T>, x: &[T]) -> Vec<T> {
        let rows = x.len() / self.din;
        let mut out = vec![T::zero(); rows * self.dout];
        let b = self.bias.map(|b| p.value(b).data());
        linear_rows(x, rows, self.din, p.value(self.weight).data(), b, self.dout, &mut out);
        out
    }

    /// Accumulates parameter gradients; returns `dx` when `want_dx`.
    pub fn backward<T: Scalar>(
        &self,
        p: &mut ParameterStore<T>,
        x: &[T],
        dy: &[T],
        want_dx: bool,
    ) -> Vec<T> {
        let rows = x.len() / self.din;
        let mut db = self.bias.map(|b| std::mem::take(p.grad_mut(b).data_mut_vec()));
        let (w, dw) = p.split_mut(self.weight);
        let dx = linear_rows_backward(
            x,
            dy,
            rows,
            self.din,
            self.dout,
            w.data(),
            dw.data_mut(),
            db.as_deref_mut(),
            want_dx,
        );
        if let (Some(b), Some(db)) = (self.bias, db) {
            *p.grad_mut(b).data_mut_vec() = db;
        }
        dx
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        std::iter::once(self.weight).chain(self.bias)
    }
}

/// Layer normalization over the trailing axis with affine parameters.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParameterStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim]))?,
            dim,
            eps: LN_EPS,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParameterStore<T>, x: Vec<T>) -> (Vec<T>, LayerNormCache<T>) {
        let rows = x.len() / self.dim;
        let x = Tensor::from_vec(&[rows, self.dim], x).expect("row-aligned input");
        let (y, cache) = layer_norm_forward(&x, p.value(self.gamma), p.value(self.beta), self.eps)
            .expect("gamma/beta sized at construction");
        (y.into_data(), cache)
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &mut ParameterStore<T>,
        cache: &LayerNormCache<T>,
        dy: &[T],
    ) -> Vec<T> {
        let mut dbeta = std::mem::take(p.grad_mut(self.beta).data_mut_vec());
        let (gamma, dgamma) = p.split_mut(self.gamma);
        let dx = layer_norm_backward(dy, cache, gamma.data(), dgamma.data_mut(), &mut dbeta);
        *p.grad_mut(self.beta).data_mut_vec() = dbeta;
        dx
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        [self.gamma, self.beta].into_iter()
    }
}
