//! Dual-domain stage losses.
//!
//! Every L1 term is a mean over all elements.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::fourier::{image_amplitude, image_phase, swap_amplitude};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the amplitude term of the stage-1 loss.
    pub alpha: f64,
    /// Weight of the phase term of the stage-2 loss.
    pub beta: f64,
    /// Weight of the stage-1 loss in the total.
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.2,
            beta: 0.1,
            lambda: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Stage-1 target: the ground-truth amplitude on the input phase.
pub fn stage1_target(x_in: &Tensor, x_gt: &Tensor) -> Result<Tensor> {
    swap_amplitude(&image_amplitude(&x_gt.detach())?, &image_phase(&x_in.detach())?)
}

/// Individual terms of a stage loss.
#[derive(Clone, Debug)]
pub struct StageLoss {
    /// Weighted sum of the two terms.
    pub total: Tensor,
    pub spatial: Tensor,
    pub fourier: Tensor,
}

/// `|y1 - ifft(A(gt), P(in))| + alpha * |A(y1) - A(gt)|`.
pub fn stage1_loss(y1: &Tensor, x_in: &Tensor, x_gt: &Tensor, w: &LossWeights) -> Result<StageLoss> {
    same_shape("stage1_loss", y1, x_in)?;
    same_shape("stage1_loss", y1, x_gt)?;
    let spatial = y1.mae(&stage1_target(x_in, x_gt)?)?;
    let fourier = image_amplitude(y1)?.mae(&image_amplitude(&x_gt.detach())?)?;
    let total = spatial.add(&fourier.scale(w.alpha))?;
    Ok(StageLoss {
        total,
        spatial,
        fourier,
    })
}

/// `|y2 - gt| + beta * |P(y2) - P(gt)|`, with the raw phase difference.
pub fn stage2_loss(y2: &Tensor, x_gt: &Tensor, w: &LossWeights) -> Result<StageLoss> {
    same_shape("stage2_loss", y2, x_gt)?;
    let gt = x_gt.detach();
    let spatial = y2.mae(&gt)?;
    let fourier = image_phase(y2)?.mae(&image_phase(&gt)?)?;
    let total = spatial.add(&fourier.scale(w.beta))?;
    Ok(StageLoss {
        total,
        spatial,
        fourier,
    })
}

/// Scalar summary of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub l_s1: f64,
    pub l_s2: f64,
    pub l_total: f64,
    pub s1_spatial: f64,
    pub s1_amplitude: f64,
    pub s2_spatial: f64,
    pub s2_phase: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.l_s1,
            self.l_s2,
            self.l_total,
            self.s1_spatial,
            self.s1_amplitude,
            self.s2_spatial,
            self.s2_phase,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// `L_s2 + lambda * L_s1` on scalars.
pub fn combine(l_s1: f64, l_s2: f64, lambda: f64) -> f64 {
    l_s2 + lambda * l_s1
}

/// Differentiable total loss together with its scalar breakdown.
pub fn total_loss(s1: &StageLoss, s2: &StageLoss, w: &LossWeights) -> Result<(Tensor, LossReport)> {
    let total = s2.total.add(&s1.total.scale(w.lambda))?;
    let (l_s1, l_s2) = (s1.total.item(), s2.total.item());
    let report = LossReport {
        l_s1,
        l_s2,
        l_total: combine(l_s1, l_s2, w.lambda),
        s1_spatial: s1.spatial.item(),
        s1_amplitude: s1.fourier.item(),
        s2_spatial: s2.spatial.item(),
        s2_phase: s2.fourier.item(),
    };
    Ok((total, report))
}

/// Evaluates both stage losses and the total for one forward pass.
pub fn evaluate_losses(
    y1: &Tensor,
    y2: &Tensor,
    x_in: &Tensor,
    x_gt: &Tensor,
    w: &LossWeights,
) -> Result<(Tensor, LossReport)> {
    let s1 = stage1_loss(y1, x_in, x_gt, w)?;
    let s2 = stage2_loss(y2, x_gt, w)?;
    total_loss(&s1, &s2, w)
}
