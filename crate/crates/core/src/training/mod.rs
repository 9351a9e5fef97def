//! Losses, the optimizer, the learning-rate schedule and the training loop
//! with best-on-validation selection.

mod loss;
mod optim;

pub use loss::{mae_loss, mse_loss, Loss};
pub use optim::{clip_grad_norm, Adam, AdamConfig};

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SlicePair;
use crate::error::{Error, Result};
use crate::eval::validation_ssim;
use crate::model::{save_checkpoint, Checkpoint, CheckpointMeta, PtNet, PtNetConfig, Tape};
use crate::params::ParameterStore;
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPlan {
    pub batch_size: usize,
    /// Epochs at the constant base rate.
    pub epochs_fixed: usize,
    /// Epochs over which the rate falls linearly to zero.
    pub epochs_decay: usize,
    pub lr: f64,
    pub loss: Loss,
    pub seed: u64,
    /// Global gradient-norm clip; off by default.
    pub clip: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            batch_size: 4,
            epochs_fixed: 5,
            epochs_decay: 5,
            lr: 2e-4,
            loss: Loss::Mse,
            seed: 0,
            clip: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainPlan {
    pub fn epochs(&self) -> usize {
        self.epochs_fixed + self.epochs_decay
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs() == 0 {
            return Err(Error::Config("batch size and epoch count must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        Ok(())
    }
}

/// Base rate for the first `epochs_fixed` epochs, then a per-step linear
/// ramp that reaches exactly zero on the final step.
pub fn lr_at(step: usize, plan: &TrainPlan, steps_per_epoch: usize) -> f64 {
    let fixed = plan.epochs_fixed * steps_per_epoch;
    let decay = plan.epochs_decay * steps_per_epoch;
    if step < fixed {
        return plan.lr;
    }
    if decay <= 1 {
        return 0.0;
    }
    let k = (step - fixed).min(decay - 1);
    plan.lr * (1.0 - k as f64 / (decay - 1) as f64)
}

/// Index of the largest value, earliest on ties; NaN never wins.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: usize,
    /// Rate used for the epoch's last step.
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub val_ssim: f64,
}

pub struct TrainOutcome {
    pub net: PtNet,
    pub params: ParameterStore<f32>,
    pub best: Checkpoint<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub step_losses: Vec<f64>,
}

fn stack(pairs: &[&SlicePair], pick: fn(&SlicePair) -> &Tensor<f32>) -> Result<Tensor<f32>> {
    let first = pick(pairs[0]);
    let (x, y) = (first.dim(1), first.dim(2));
    let mut data = Vec::with_capacity(pairs.len() * x * y);
    for p in pairs {
        let t = pick(p);
        if t.shape() != first.shape() {
            return Err(Error::shapes("training batch", first.shape(), t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&[pairs.len(), 1, x, y], data)
}

/// Train with the default validator, mean per-volume global SSIM on `val`.
pub fn train(
    cfg: &PtNetConfig,
    train: &[SlicePair],
    val: &[SlicePair],
    plan: &TrainPlan,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let batch = plan.batch_size;
    train_with_validator(cfg, train, plan, out_dir, &mut |net, p| validation_ssim(net, p, val, batch))
}

/// Training loop with a caller-supplied per-epoch validation score.
///
/// Writes `log.jsonl`, `epoch_NNN.ptck` and `best.ptck` under `out_dir`
/// when given.
pub fn train_with_validator(
    cfg: &PtNetConfig,
    train: &[SlicePair],
    plan: &TrainPlan,
    out_dir: Option<&Path>,
    validate: &mut dyn FnMut(&PtNet, &ParameterStore<f32>) -> Result<f64>,
) -> Result<TrainOutcome> {
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let (net, mut params) = PtNet::new::<f32>(cfg, plan.seed)?;
    let mut opt = Adam::new(&params, plan.adam);
    let spe = plan.steps_per_epoch(train.len());
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("log.jsonl");
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let meta = |epoch: usize, val_ssim: f64| CheckpointMeta {
        config: cfg.clone(),
        seed: plan.seed,
        epoch: Some(epoch),
        val_ssim: Some(val_ssim),
    };

    let mut log = Vec::with_capacity(plan.epochs());
    let mut step_losses = Vec::with_capacity(plan.epochs() * spe);
    let mut best: Option<(usize, Checkpoint<f32>)> = None;
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=plan.epochs() {
        order.sort_unstable();
        Rng::new(plan.seed ^ epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut lr = plan.lr;
        for chunk in order.chunks(plan.batch_size) {
            let pairs: Vec<&SlicePair> = chunk.iter().map(|&i| &train[i]).collect();
            let x = stack(&pairs, |p| &p.source)?;
            let y = stack(&pairs, |p| &p.target)?;
            lr = lr_at(step, plan, spe);
            let diagnose = |e: Error, loss: Option<f64>| match e {
                Error::Numeric(m) => {
                    let recent = &step_losses[step_losses.len().saturating_sub(5)..];
                    let at = loss.map_or(String::new(), |l| format!("loss became {l} "));
                    Error::Numeric(format!(
                        "{at}at step {step} (epoch {epoch}, lr {lr:e}): {m}; preceding losses {recent:?}"
                    ))
                }
                other => other,
            };
            params.zero_grad();
            let mut tape = Tape::new();
            let pred = net.forward_train(&params, &x, &mut tape).map_err(|e| diagnose(e, None))?;
            let (loss, dy) = plan.loss.eval(&pred, &y)?;
            if !loss.is_finite() {
                return Err(diagnose(Error::Numeric("non-finite loss".into()), Some(loss)));
            }
            net.backward(&mut params, &mut tape, &dy)?;
            if let Some(c) = plan.clip {
                clip_grad_norm(&mut params, c);
            }
            opt.update(&mut params, lr).map_err(|e| diagnose(e, Some(loss)))?;
            step_losses.push(loss);
            epoch_loss += loss;
            step += 1;
        }
        let val_ssim = validate(&net, &params)?;
        let entry = EpochLog {
            epoch,
            step,
            lr,
            loss: epoch_loss / spe as f64,
            val_ssim,
        };
        log::info!(
            "epoch {epoch}: loss {:.6} val_ssim {val_ssim:.5} lr {lr:.3e}",
            entry.loss
        );
        let ckpt = Checkpoint::capture(&params, meta(epoch, val_ssim));
        if let Some(dir) = out_dir {
            save_checkpoint(dir.join(format!("epoch_{epoch:03}.ptck")), &ckpt)?;
        }
        if let Some((file, path)) = &mut log_file {
            let line = serde_json::to_string(&entry)?;
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        log.push(entry);
        let scores: Vec<f64> = log.iter().map(|e| e.val_ssim).collect();
        if select_best(&scores) == Some(epoch - 1) {
            best = Some((epoch, ckpt));
        }
    }
    let (best_epoch, best) = best.ok_or_else(|| {
        Error::Numeric("no epoch produced a finite validation score".into())
    })?;
    if let Some(dir) = out_dir {
        save_checkpoint(dir.join("best.ptck"), &best)?;
    }
    Ok(TrainOutcome {
        net,
        params,
        best,
        best_epoch,
        log,
        step_losses,
    })
}
