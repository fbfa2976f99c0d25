//! Training and evaluation loops.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{epoch_batches, stack, Batch, LoaderOptions, PairedSample};
use crate::error::{Error, Result};
use crate::loss::{evaluate_losses, LossReport, LossWeights};
use crate::metrics::{psnr, ssim};
use crate::network::{forward_padded, Network};
use crate::optim::{lr_at, Adam, AdamConfig};
use crate::tensor::{with_precision, Precision, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs over which the learning rate halves.
    pub lr_window: f64,
    pub epochs: usize,
    pub batch: usize,
    pub crop: Option<usize>,
    pub augment: bool,
    pub weights: LossWeights,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
    /// Matrix-product precision used during training.
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr_window: 100.0,
            epochs: 100,
            batch: 4,
            crop: Some(64),
            augment: true,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            out_dir: None,
            precision: Precision::Single,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("eps", self.eps),
            ("lr_window", self.lr_window),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config("epochs and batch must be at least 1".into()));
        }
        self.weights.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: u64,
    pub l_s1: f64,
    pub l_s2: f64,
    pub l_total: f64,
    pub lr: f64,
    /// Mean over the epoch's training batches of the stage-2 output.
    pub psnr: f64,
    pub ssim: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} step={} l_s1={:.6} l_s2={:.6} l_total={:.6} lr={:.6e} psnr={:.4} ssim={:.4}",
            self.epoch, self.steps, self.l_s1, self.l_s2, self.l_total, self.lr, self.psnr, self.ssim
        )
    }
}

/// Mean PSNR and SSIM of a batch, per image.
fn batch_metrics(y: &Tensor, gt: &Tensor) -> Result<(f64, f64)> {
    let (n, _, h, w) = y.dims4("metrics")?;
    let (mut p, mut s) = (0.0, 0.0);
    for i in 0..n {
        let a = y.narrow(0, i, 1)?.detach();
        let b = gt.narrow(0, i, 1)?;
        p += psnr(&a, &b, 1.0)?;
        if h.min(w) >= crate::metrics::SSIM_WINDOW {
            s += ssim(&a, &b)?;
        } else {
            s += f64::NAN;
        }
    }
    Ok((p / n as f64, s / n as f64))
}

/// One optimisation step on a batch. Returns the loss breakdown and the
/// detached stage-2 output.
pub fn train_step(
    net: &Network,
    opt: &mut Adam,
    batch: &Batch,
    weights: &LossWeights,
    lr: f64,
) -> Result<(LossReport, Tensor)> {
    let trace = net.forward(&batch.low)?;
    let (loss, report) = evaluate_losses(&trace.y1, &trace.y2, &batch.low, &batch.gt, weights)?;
    if !report.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: opt.steps() as usize,
            detail: format!("{report:?}"),
        });
    }
    loss.backward()?;
    opt.step(net.parameters(), lr)?;
    net.zero_grad();
    Ok((report, trace.y2.detach()))
}

/// Trains `net` on `pairs`, calling `on_epoch` after every epoch.
pub fn train(
    net: &Network,
    pairs: &[PairedSample],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let pairs = Arc::new(pairs.to_vec());
    let mut opt = Adam::new(net.parameters(), config.adam());
    let batches_per_epoch = pairs.len().div_ceil(config.batch);
    let opts = LoaderOptions {
        batch: config.batch,
        crop: config.crop,
        augment: config.augment,
        seed: config.seed,
        prefetch: 2,
    };
    let mut history = Vec::with_capacity(config.epochs);
    with_precision(config.precision, || {
        for epoch in 0..config.epochs {
            let mut sums = [0.0; 5];
            let mut count = 0usize;
            let mut lr = config.lr0;
            for (b, batch) in epoch_batches(Arc::clone(&pairs), epoch as u64, opts).into_iter().enumerate() {
                let batch = batch?;
                let progress = epoch as f64 + b as f64 / batches_per_epoch as f64;
                lr = lr_at(progress, config.lr0, config.lr_window);
                let (report, y2) = train_step(net, &mut opt, &batch, &config.weights, lr)?;
                let (p, s) = batch_metrics(&y2, &batch.gt)?;
                for (acc, v) in sums.iter_mut().zip([report.l_s1, report.l_s2, report.l_total, p, s]) {
                    *acc += v;
                }
                count += 1;
            }
            let k = count as f64;
            let log = EpochLog {
                epoch,
                steps: opt.steps(),
                l_s1: sums[0] / k,
                l_s2: sums[1] / k,
                l_total: sums[2] / k,
                lr,
                psnr: sums[3] / k,
                ssim: sums[4] / k,
            };
            on_epoch(&log);
            history.push(log);
            if let Some(dir) = &config.out_dir {
                let last = epoch + 1 == config.epochs;
                if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 {
                    save_checkpoint(net, &dir.join(format!("epoch{:04}.fsid", epoch + 1)))?;
                }
                if last {
                    save_checkpoint(net, &dir.join("final.fsid"))?;
                }
            }
        }
        Ok(history)
    })
}

/// Metrics of one evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Enhances every pair at full size (reflect-padding when needed) and
/// scores the clamped stage-2 output against the reference.
pub fn evaluate(net: &Network, pairs: &[PairedSample]) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    with_precision(Precision::Double, || {
        let mut images = Vec::with_capacity(pairs.len());
        for pair in pairs {
            let batch = stack(std::slice::from_ref(pair))?;
            let y2 = forward_padded(net, &batch.low)?.y2.detach().clamp(0.0, 1.0);
            images.push(ImageMetrics {
                id: pair.id.clone(),
                psnr: psnr(&y2, &batch.gt, 1.0)?,
                ssim: ssim(&y2, &batch.gt)?,
            });
        }
        let n = images.len() as f64;
        let mean_psnr = images.iter().map(|m| m.psnr).sum::<f64>() / n;
        let mean_ssim = images.iter().map(|m| m.ssim).sum::<f64>() / n;
        Ok(EvalReport {
            images,
            mean_psnr,
            mean_ssim,
        })
    })
}

pub fn log_path(out_dir: &Path) -> PathBuf {
    out_dir.join("train.log")
}
