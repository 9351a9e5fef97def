use super::{PtNet, PtNetConfig, Tape};
use crate::error::Result;
use crate::params::ParameterStore;
use crate::tensor::gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Objective};
use crate::tensor::{Rng, Tensor};

/// `Σ probe ⊙ net(x)` for a fixed random probe, so every output pixel
/// contributes to the gradient.
pub struct ProbeObjective {
    pub net: PtNet,
    pub x: Tensor<f64>,
    pub probe: Tensor<f64>,
    /// Test hook: scales every analytic gradient, breaking the backward
    /// pass on purpose.
    pub corrupt: Option<f64>,
}

impl ProbeObjective {
    fn score(&self, y: &Tensor<f64>) -> f64 {
        y.data().iter().zip(self.probe.data()).map(|(a, b)| a * b).sum()
    }
}

impl Objective for ProbeObjective {
    fn loss(&self, p: &ParameterStore<f64>) -> Result<f64> {
        Ok(self.score(&self.net.forward(p, &self.x)?))
    }

    fn loss_and_grad(&self, p: &mut ParameterStore<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let y = self.net.forward_train(p, &self.x, &mut tape)?;
        self.net.backward(p, &mut tape, &self.probe)?;
        if let Some(k) = self.corrupt {
            for q in p.iter_mut() {
                q.grad = q.grad.map(|g| g * k);
            }
        }
        Ok(self.score(&y))
    }
}

/// Builds `cfg` in f64 with non-default norm and bias values, then checks
/// every parameter tensor against central differences on a batch of two
/// `h × w` images.
pub fn check_model_gradients(
    cfg: &PtNetConfig,
    seed: u64,
    (h, w): (usize, usize),
    opts: &GradCheckOptions,
    corrupt: Option<f64>,
) -> Result<GradCheckReport> {
    let (net, mut p) = PtNet::new::<f64>(cfg, seed)?;
    let mut rng = Rng::new(seed.wrapping_add(100));
    for q in p.iter_mut() {
        if q.name.ends_with(".bias") || q.name.ends_with(".beta") {
            q.value = Tensor::randn(q.value.shape(), 0.1, &mut rng);
        }
        if q.name.ends_with(".gamma") {
            q.value = Tensor::rand_uniform(q.value.shape(), 0.5, 1.5, &mut rng);
        }
    }
    let obj = ProbeObjective {
        net,
        x: Tensor::rand_uniform(&[2, 1, h, w], 0.0, 1.0, &mut rng),
        probe: Tensor::randn(&[2, 1, h, w], 1.0, &mut rng),
        corrupt,
    };
    grad_check(&obj, &mut p, opts)
}
