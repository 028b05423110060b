//! Adversarial, L1 and combined conditional-GAN objectives.
//!
//! With `F` the adversarial criterion, `D` the discriminator, `x` the
//! conditioning frames, `y` the real next frame and `y_hat` the generator's
//! prediction:
//!
//! ```text
//! L_G = F(D(x, y_hat), 1) + alpha * L1(y_hat, y)
//! L_D = F(D(x, y_hat), 0) + F(D(x, y), 1)
//! ```
//!
//! All terms use mean reduction so `alpha` does not depend on resolution.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::{shape_mismatch, Error, Result};
use crate::nn::{discriminator_forward, Discriminator, ForwardCtx};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Binary cross-entropy on `sigmoid(score)`.
    Bce,
    /// Least squares on the raw score.
    #[default]
    Mse,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Bce => "bce",
            LossKind::Mse => "mse",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bce" => Ok(LossKind::Bce),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::InvalidConfig(format!("unknown loss kind {other:?} (expected bce or mse)"))),
        }
    }
}

/// `F(scores, label)` averaged over the score map.
pub fn adversarial_term<'t, R: Real>(kind: LossKind, scores: Var<'t, R>, label: f64) -> Var<'t, R> {
    match kind {
        LossKind::Mse => scores.add_scalar(-label).square().mean(),
        LossKind::Bce => scores.bce_with_logits(label).mean(),
    }
}

/// Mean absolute difference.
pub fn l1_loss<'t, R: Real>(pred: Var<'t, R>, target: Var<'t, R>) -> Result<Var<'t, R>> {
    if pred.shape() != target.shape() {
        return Err(shape_mismatch(format!(
            "l1_loss: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(pred.sub(target)?.abs().mean())
}

pub struct GeneratorLoss<'t, R: Real> {
    pub total: Var<'t, R>,
    pub adversarial: Var<'t, R>,
    pub l1: Var<'t, R>,
    /// `D(x, y_hat)`.
    pub scores: Var<'t, R>,
}

pub struct DiscriminatorLoss<'t, R: Real> {
    pub total: Var<'t, R>,
    pub fake_scores: Var<'t, R>,
    pub real_scores: Var<'t, R>,
}

/// `F(D(x, y_hat), 1) + alpha * L1(y_hat, y)`. Gradients flow through `D`
/// into `y_hat`; whether `D`'s own parameters get gradients depends on how
/// `d_vars` were bound.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss<'t, R: Real>(
    disc: &mut Discriminator<R>,
    d_vars: &[Var<'t, R>],
    frames: Var<'t, R>,
    pred: Var<'t, R>,
    target: Var<'t, R>,
    kind: LossKind,
    alpha: f64,
) -> Result<GeneratorLoss<'t, R>> {
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidConfig(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let l1 = l1_loss(pred, target)?;
    let scores = discriminator_forward(disc, d_vars, frames, pred, ForwardCtx::train(0))?;
    let adversarial = adversarial_term(kind, scores, 1.0);
    let total = if alpha == 0.0 {
        adversarial
    } else {
        adversarial.add(l1.scale(alpha))?
    };
    Ok(GeneratorLoss {
        total,
        adversarial,
        l1,
        scores,
    })
}

/// `F(fake, 0) + F(real, 1)` from precomputed score maps.
pub fn discriminator_loss_from_scores<'t, R: Real>(
    kind: LossKind,
    fake_scores: Var<'t, R>,
    real_scores: Var<'t, R>,
) -> Result<Var<'t, R>> {
    adversarial_term(kind, fake_scores, 0.0).add(adversarial_term(kind, real_scores, 1.0))
}

/// `F(D(x, y_hat), 0) + F(D(x, y), 1)`. `pred` is detached first, so no
/// gradient reaches the generator from this loss.
pub fn discriminator_loss<'t, R: Real>(
    disc: &mut Discriminator<R>,
    d_vars: &[Var<'t, R>],
    frames: Var<'t, R>,
    pred: Var<'t, R>,
    target: Var<'t, R>,
    kind: LossKind,
) -> Result<DiscriminatorLoss<'t, R>> {
    if pred.shape() != target.shape() {
        return Err(shape_mismatch(format!(
            "discriminator_loss: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let fake = pred.detach();
    let fake_scores = discriminator_forward(disc, d_vars, frames, fake, ForwardCtx::train(0))?;
    let real_scores = discriminator_forward(disc, d_vars, frames, target, ForwardCtx::train(0))?;
    let total = discriminator_loss_from_scores(kind, fake_scores, real_scores)?;
    Ok(DiscriminatorLoss {
        total,
        fake_scores,
        real_scores,
    })
}
