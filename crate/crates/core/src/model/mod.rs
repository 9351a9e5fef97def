//! The two-branch pyramid network, its hand-composed backward pass and
//! checkpoint storage.

mod branch;
mod checkpoint;
mod config;
mod layers;
mod probe;

pub use branch::{Branch, BranchCache};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, PTCK_MAGIC, PTCK_VERSION};
pub use config::{PtNetConfig, SkipMode};
pub use probe::{check_model_gradients, ProbeObjective};
pub use layers::{
    concat_channels, split_channels, Bottleneck, BottleneckCache, DecoderCache, PatchCache, PatchEmbedBlock,
    PerformerDecoder, PerformerEncoder,
};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{ParamId, ParameterStore};
use crate::patching::{grid_to_tokens, resize_backward, resize_to, tokens_to_grid};
use crate::tensor::{Rng, Scalar, Tensor};

/// Activations saved by [`PtNet::forward_train`] for one backward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    cache: Option<PtNetCache<T>>,
}

impl<T> Default for Tape<T> {
    fn default() -> Self {
        Self { cache: None }
    }
}

impl<T> Tape<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_recorded(&self) -> bool {
        self.cache.is_some()
    }
}

#[derive(Debug, Clone)]
struct PtNetCache<T> {
    hw: (usize, usize),
    high: BranchCache<T>,
    low: Option<(BranchCache<T>, (usize, usize))>,
    features: Tensor<T>,
}

/// Layer layout of a built network. Weights live in a separate
/// [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct PtNet {
    pub config: PtNetConfig,
    pub seed: u64,
    pub high: Branch,
    pub low: Option<Branch>,
    pub proj: Linear,
}

impl PtNet {
    /// Builds the layers and a freshly initialized parameter store.
    pub fn new<T: Scalar>(config: &PtNetConfig, seed: u64) -> Result<(Self, ParameterStore<T>)> {
        config.validate()?;
        let mut store = ParameterStore::new();
        let mut rng = Rng::new(seed);
        let k = config.encoder_channels.len();
        let low = if config.branches == 2 {
            Some(Branch::new(&mut store, "low", config, 1, 1, 0, &mut rng)?)
        } else {
            None
        };
        let fused = low.as_ref().map_or(0, Branch::out_channels);
        let high = Branch::new(&mut store, "high", config, 0, 1, fused, &mut rng)?;
        let proj = Linear::new(&mut store, "proj", config.decoder_channels[k], 1, true, &mut rng)?;
        Ok((
            Self {
                config: config.clone(),
                seed,
                high,
                low,
                proj,
            },
            store,
        ))
    }

    /// Transformer blocks in each branch's bottleneck, high branch first.
    pub fn bottleneck_depths(&self) -> Vec<usize> {
        std::iter::once(&self.high)
            .chain(&self.low)
            .map(|b| b.bottleneck.depth())
            .collect()
    }

    /// Bottleneck grid of the high branch for an `h × w` input.
    pub fn deepest_grid(&self, h: usize, w: usize) -> (usize, usize) {
        *self.high.level_extents(h, w).last().unwrap()
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.low
            .iter()
            .flat_map(|b| b.param_ids())
            .chain(self.high.param_ids())
            .chain(self.proj.param_ids())
    }

    fn check_input<T: Scalar>(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let [n, c, h, w] = *x.shape() else {
            return Err(Error::Dimension(format!("expected N×1×X×Y input, got {:?}", x.shape())));
        };
        if c != 1 || n == 0 {
            return Err(Error::Dimension(format!("expected N×1×X×Y input, got {:?}", x.shape())));
        }
        let m = self.config.required_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "input extents {h}×{w} must be positive multiples of {m}"
            )));
        }
        Ok((n, h, w))
    }

    /// Inference pass; keeps no state, so it may run concurrently.
    pub fn forward<T: Scalar>(&self, p: &ParameterStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(p, x).map(|(y, _)| y)
    }

    /// Forward pass that records what [`PtNet::backward`] needs on `tape`.
    pub fn forward_train<T: Scalar>(
        &self,
        p: &ParameterStore<T>,
        x: &Tensor<T>,
        tape: &mut Tape<T>,
    ) -> Result<Tensor<T>> {
        let (y, cache) = self.run(p, x)?;
        tape.cache = Some(cache);
        Ok(y)
    }

    fn run<T: Scalar>(&self, p: &ParameterStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, PtNetCache<T>)> {
        let (n, h, w) = self.check_input(x)?;
        let low = match &self.low {
            Some(branch) => {
                let half = (h / 2, w / 2);
                let xl = resize_to(x, half.0, half.1, self.config.interp)?;
                let (yl, cl) = branch.forward(p, xl, None)?;
                let up = resize_to(&yl, h, w, self.config.interp)?;
                Some((up, cl, half))
            }
            None => None,
        };
        let (features, high) = self.high.forward(p, x.clone(), low.as_ref().map(|l| &l.0))?;
        let tokens = grid_to_tokens(&features)?;
        let y = self.proj.forward(p, tokens.data());
        let y = Tensor::from_vec(&[n, 1, h, w], y)?;
        Ok((
            y,
            PtNetCache {
                hw: (h, w),
                high,
                low: low.map(|(_, c, half)| (c, half)),
                features,
            },
        ))
    }

    /// Accumulates `∂loss/∂θ` into the store's gradient slots given
    /// `dy = ∂loss/∂output`. Consumes the tape.
    pub fn backward<T: Scalar>(&self, p: &mut ParameterStore<T>, tape: &mut Tape<T>, dy: &Tensor<T>) -> Result<()> {
        let c = tape.cache.take().ok_or_else(|| {
            Error::State("backward called without a recorded forward pass".into())
        })?;
        let (n, (h, w)) = (c.features.dim(0), c.hw);
        if dy.shape() != [n, 1, h, w] {
            return Err(Error::Dimension(format!(
                "output gradient {:?} does not match output {:?}",
                dy.shape(),
                [n, 1, h, w]
            )));
        }
        let tokens = grid_to_tokens(&c.features)?;
        let dt = self.proj.backward(p, tokens.data(), dy.data(), true);
        let dfeat = tokens_to_grid(&Tensor::from_vec(tokens.shape(), dt)?, h, w)?;
        let dfused = self.high.backward(p, &c.high, &dfeat)?;
        if let (Some(branch), Some((cl, half)), Some(dup)) = (&self.low, &c.low, dfused) {
            let dyl = resize_backward(&dup, half.0, half.1, self.config.interp)?;
            branch.backward(p, cl, &dyl)?;
        }
        Ok(())
    }
}
