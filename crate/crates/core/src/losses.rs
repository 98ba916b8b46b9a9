//! Pixel L1, logit binary cross-entropy, and the hybrid generator /
//! averaged discriminator objectives built from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Default weight of the L1 term in the generator objective.
pub const DEFAULT_LAMBDA_L1: f64 = 100.0;

/// Loss values of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub adv_g: f64,
    pub adv_d_real: f64,
    pub adv_d_fake: f64,
    pub total_g: f64,
    pub total_d: f64,
    pub lambda_l1: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.l1, self.adv_g, self.adv_d_real, self.adv_d_fake, self.total_g, self.total_d]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Mean absolute error between two tensors of equal shape.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("l1_loss", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
        .sum();
    Ok(total / pred.len() as f64)
}

/// Stable `max(x,0) − x·y + ln(1 + e^{−|x|})` for one logit.
#[inline]
pub fn bce_with_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy of `sigmoid(logits)` against label `target`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, target: f64) -> f64 {
    logits.data().iter().map(|&x| bce_with_logit(x.as_f64(), target)).sum::<f64>() / logits.len() as f64
}

/// `bce(D(fake), 1) + λ·l1(fake, real)`; returns the adversarial term, the
/// L1 term and the total as graph nodes.
pub fn generator_loss<T: Scalar>(
    g: &mut Graph<T>,
    d_logits_fake: Var,
    ab_fake: Var,
    ab_real: Var,
    lambda_l1: f64,
) -> Result<(Var, Var, Var)> {
    let adv = g.bce_with_logits(d_logits_fake, 1.0);
    let l1 = g.l1_loss(ab_fake, ab_real)?;
    let weighted = g.scale(l1, lambda_l1);
    let total = g.add(adv, weighted)?;
    Ok((adv, l1, total))
}

/// `½·[bce(D(real), 1) + bce(D(fake), 0)]`; returns the real term, the
/// fake term and the total as graph nodes.
pub fn discriminator_loss<T: Scalar>(g: &mut Graph<T>, d_logits_real: Var, d_logits_fake: Var) -> Result<(Var, Var, Var)> {
    let real = g.bce_with_logits(d_logits_real, 1.0);
    let fake = g.bce_with_logits(d_logits_fake, 0.0);
    let sum = g.add(real, fake)?;
    let total = g.scale(sum, 0.5);
    Ok((real, fake, total))
}
