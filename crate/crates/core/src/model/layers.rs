//! Patch-based encoder/decoder layers and the transformer bottleneck.

use crate::attention::{positional_encoding, BlockCache, BlockSpec, TransformerBlock};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{ParamId, ParameterStore};
use crate::patching::{
    grid_to_tokens, patch_project, patch_project_backward, resize_backward, resize_to, tokens_to_grid,
    unfold, unfold_backward, Interp, UnfoldSpec,
};
use crate::tensor::{Rng, Scalar, Tensor};

pub(crate) fn image_hw<T: Scalar>(x: &Tensor<T>) -> (usize, usize) {
    (x.dim(2), x.dim(3))
}

/// Stack `[N, Cᵢ, X, Y]` maps along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
    let (n, h, w) = (first.dim(0), first.dim(2), first.dim(3));
    for p in parts {
        if p.ndim() != 4 || p.dim(0) != n || p.dim(2) != h || p.dim(3) != w {
            return Err(Error::Dimension(format!(
                "cannot concatenate {:?} with {:?} along channels",
                first.shape(),
                p.shape()
            )));
        }
    }
    let c: usize = parts.iter().map(|p| p.dim(1)).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        for p in parts {
            data.extend_from_slice(p.slab(s));
        }
    }
    Tensor::from_vec(&[n, c, h, w], data)
}

/// Inverse of [`concat_channels`].
pub fn split_channels<T: Scalar>(x: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    let plane = h * w;
    let total: usize = widths.iter().sum();
    debug_assert_eq!(total, x.dim(1));
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
    for s in 0..n {
        let slab = x.slab(s);
        let mut off = 0;
        for (part, &c) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&slab[off * plane..(off + c) * plane]);
            off += c;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &c)| Tensor::from_vec(&[n, c, h, w], d).expect("sizes follow widths"))
        .collect()
}

/// Unfold, embed each token to `cout`, run one performer block, regrid.
#[derive(Debug, Clone)]
pub struct PatchEmbedBlock {
    pub spec: UnfoldSpec,
    pub embed: Linear,
    pub block: TransformerBlock,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Debug, Clone)]
pub struct PatchCache<T> {
    grid: (usize, usize),
    block: BlockCache<T>,
}

impl PatchEmbedBlock {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        spec: UnfoldSpec,
        block: &BlockSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let embed = Linear::new(store, &format!("{name}.embed"), spec.token_dim(cin), cout, true, rng)?;
        let block = TransformerBlock::new(
            store,
            &format!("{name}.block"),
            &BlockSpec {
                dim: cout,
                ..block.clone()
            },
            rng,
        )?;
        Ok(Self {
            spec,
            embed,
            block,
            cin,
            cout,
        })
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<()> {
        if x.ndim() != 4 || x.dim(1) != self.cin {
            return Err(Error::Dimension(format!(
                "layer expecting {} channels got input {:?}",
                self.cin,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward<T: Scalar>(&self, p: &ParameterStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, PatchCache<T>)> {
        self.check_input(x)?;
        let (h, w) = image_hw(x);
        let grid = (self.spec.grid_extent(h), self.spec.grid_extent(w));
        let (n, l) = (x.dim(0), grid.0 * grid.1);
        let b = self.embed.bias.map(|b| p.value(b).data());
        let e = patch_project(x, self.spec, p.value(self.embed.weight).data(), b, self.cout)?;
        let (out, block) = self.block.forward(p, e.into_data(), n, l)?;
        let out = tokens_to_grid(&Tensor::from_vec(&[n, l, self.cout], out)?, grid.0, grid.1)?;
        Ok((out, PatchCache { grid, block }))
    }

    /// `x` is the tensor the forward pass saw; the unfold is recomputed
    /// rather than cached.
    pub fn backward<T: Scalar>(
        &self,
        p: &mut ParameterStore<T>,
        c: &PatchCache<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        want_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        if dy.shape() != [x.dim(0), self.cout, c.grid.0, c.grid.1] {
            return Err(Error::Dimension(format!(
                "output gradient {:?} does not match the cached forward",
                dy.shape()
            )));
        }
        let dtok = grid_to_tokens(dy)?;
        let de = self.block.backward(p, &c.block, dtok.data());
        let mut db = self.embed.bias.map(|b| std::mem::take(p.grad_mut(b).data_mut_vec()));
        let (w, dw) = p.split_mut(self.embed.weight);
        let dx = patch_project_backward(x, self.spec, w.data(), self.cout, &de, dw.data_mut(), db.as_deref_mut(), want_dx);
        if let (Some(b), Some(db)) = (self.embed.bias, db) {
            *p.grad_mut(b).data_mut_vec() = db;
        }
        dx
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.embed.param_ids().chain(self.block.param_ids())
    }
}

/// Encoder stage: a strided [`PatchEmbedBlock`] on the input grid.
#[derive(Debug, Clone)]
pub struct PerformerEncoder(pub PatchEmbedBlock);

impl PerformerEncoder {
    pub fn forward<T: Scalar>(&self, p: &ParameterStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, PatchCache<T>)> {
        self.0.forward(p, x)
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &mut ParameterStore<T>,
        c: &PatchCache<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        want_dx: bool,
    ) -> Result<Option<Tensor<T>>> {
        self.0.backward(p, c, x, dy, want_dx)
    }

    pub fn output_extent(&self, h: usize, w: usize) -> (usize, usize) {
        (self.0.spec.grid_extent(h), self.0.spec.grid_extent(w))
    }
}

/// Decoder stage: resize to the target grid, then a stride-1
/// [`PatchEmbedBlock`].
#[derive(Debug, Clone)]
pub struct PerformerDecoder {
    pub inner: PatchEmbedBlock,
    pub interp: Interp,
}

#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    input_hw: (usize, usize),
    resized: Tensor<T>,
    inner: PatchCache<T>,
}

impl PerformerDecoder {
    pub fn forward<T: Scalar>(
        &self,
        p: &ParameterStore<T>,
        x: &Tensor<T>,
        out_hw: (usize, usize),
    ) -> Result<(Tensor<T>, DecoderCache<T>)> {
        self.inner.check_input(x)?;
        let input_hw = image_hw(x);
        let resized = if input_hw == out_hw {
            x.clone()
        } else {
            resize_to(x, out_hw.0, out_hw.1, self.interp)?
        };
        let (y, inner) = self.inner.forward(p, &resized)?;
        Ok((
            y,
            DecoderCache {
                input_hw,
                resized,
                inner,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &mut ParameterStore<T>,
        c: &DecoderCache<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let dr = self
            .inner
            .backward(p, &c.inner, &c.resized, dy, true)?
            .expect("input gradient requested");
        if image_hw(&dr) == c.input_hw {
            Ok(dr)
        } else {
            resize_backward(&dr, c.input_hw.0, c.input_hw.1, self.interp)
        }
    }
}

/// Strided unfold, projection to `C_embd`, positional encoding and a stack
/// of exact-attention transformer blocks.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub spec: UnfoldSpec,
    pub proj: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub cin: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone)]
pub struct BottleneckCache<T> {
    grid: (usize, usize),
    blocks: Vec<BlockCache<T>>,
}

impl Bottleneck {
    pub fn new<T: Scalar>(
        store: &mut ParameterStore<T>,
        name: &str,
        cin: usize,
        depth: usize,
        block: &BlockSpec,
        rng: &mut Rng,
    ) -> Result<Self> {
        let spec = UnfoldSpec::new(3, 2);
        let proj = Linear::new(store, &format!("{name}.proj"), spec.token_dim(cin), block.dim, true, rng)?;
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(store, &format!("{name}.block{i}"), block, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            proj,
            blocks,
            cin,
            embed_dim: block.dim,
        })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn forward<T: Scalar>(&self, p: &ParameterStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, BottleneckCache<T>)> {
        if x.ndim() != 4 || x.dim(1) != self.cin {
            return Err(Error::Dimension(format!(
                "bottleneck expecting {} channels got {:?}",
                self.cin,
                x.shape()
            )));
        }
        let (h, w) = image_hw(x);
        let grid = (self.spec.grid_extent(h), self.spec.grid_extent(w));
        let tokens = unfold(x, self.spec)?;
        let (n, l) = (tokens.dim(0), tokens.dim(1));
        let mut z = self.proj.forward(p, tokens.data());
        let pe = positional_encoding::<T>(l, self.embed_dim)?;
        for sample in z.chunks_mut(l * self.embed_dim) {
            sample.iter_mut().zip(pe.data()).for_each(|(v, &e)| *v += e);
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, c) = b.forward(p, z, n, l)?;
            caches.push(c);
            z = next;
        }
        let out = tokens_to_grid(&Tensor::from_vec(&[n, l, self.embed_dim], z)?, grid.0, grid.1)?;
        Ok((out, BottleneckCache { grid, blocks: caches }))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &mut ParameterStore<T>,
        c: &BottleneckCache<T>,
        x: &Tensor<T>,
        dy: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if dy.shape() != [x.dim(0), self.embed_dim, c.grid.0, c.grid.1] {
            return Err(Error::Dimension(format!(
                "bottleneck gradient {:?} does not match the cached forward",
                dy.shape()
            )));
        }
        let mut dz = grid_to_tokens(dy)?.into_data();
        for (b, bc) in self.blocks.iter().zip(&c.blocks).rev() {
            dz = b.backward(p, bc, &dz);
        }
        let tokens = unfold(x, self.spec)?;
        let dt = self.proj.backward(p, tokens.data(), &dz, true);
        let dt = Tensor::from_vec(tokens.shape(), dt)?;
        let (h, w) = image_hw(x);
        unfold_backward(&dt, self.spec, self.cin, h, w)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.proj
            .param_ids()
            .chain(self.blocks.iter().flat_map(|b| b.param_ids()))
    }
}
