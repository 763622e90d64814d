//! Training losses, recorded on a tape so they differentiate end to end.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const DICE_EPS: f64 = 1e-6;
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub w_dice: f64,
    pub w_bce: f64,
    pub w_mse: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w_dice: 5.0,
            w_bce: 2.0,
            w_mse: 2.0,
            dice_eps: DICE_EPS,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_dice > 0.0 && self.w_bce > 0.0 && self.w_mse > 0.0 && self.dice_eps > 0.0 {
            Ok(())
        } else {
            Err(Error::contract(format!("loss weights must be positive: {self:?}")))
        }
    }
}

fn same_shape<T: Real>(tape: &Tape<T>, pred: Var, truth: Var, name: &str) -> Result<()> {
    if tape.shape(pred) != tape.shape(truth) {
        return Err(Error::dim(format!(
            "{name}: prediction {:?} vs truth {:?}",
            tape.shape(pred),
            tape.shape(truth)
        )));
    }
    Ok(())
}

/// `1 - (2 * sum(p * t) + eps) / (sum(p) + sum(t) + eps)`.
pub fn dice_loss<T: Real>(tape: &mut Tape<T>, pred: Var, truth: Var, eps: f64) -> Result<Var> {
    same_shape(tape, pred, truth, "dice_loss")?;
    let pt = tape.mul(pred, truth)?;
    let inter = tape.sum(pt)?;
    let num = tape.scale(inter, T::lit(2.0))?;
    let num = tape.add_scalar(num, T::lit(eps))?;
    let sp = tape.sum(pred)?;
    let st = tape.sum(truth)?;
    let den = tape.add(sp, st)?;
    let den = tape.add_scalar(den, T::lit(eps))?;
    let ratio = tape.div(num, den)?;
    let neg = tape.scale(ratio, -T::one())?;
    tape.add_scalar(neg, T::one())
}

/// Mean binary cross entropy with probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Real>(tape: &mut Tape<T>, pred: Var, truth: Var) -> Result<Var> {
    same_shape(tape, pred, truth, "bce_loss")?;
    let p = tape.clamp(pred, T::lit(BCE_CLAMP), T::lit(1.0 - BCE_CLAMP))?;
    let lp = tape.ln(p)?;
    let np = tape.scale(p, -T::one())?;
    let np = tape.add_scalar(np, T::one())?;
    let lnp = tape.ln(np)?;
    let nt = tape.scale(truth, -T::one())?;
    let nt = tape.add_scalar(nt, T::one())?;
    let a = tape.mul(truth, lp)?;
    let b = tape.mul(nt, lnp)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.scale(m, -T::one())
}

pub fn mse_loss<T: Real>(tape: &mut Tape<T>, pred: Var, truth: Var) -> Result<Var> {
    same_shape(tape, pred, truth, "mse_loss")?;
    let d = tape.sub(pred, truth)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// The weighted total and its three components.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub dice: Var,
    pub bce: Var,
    pub mse: Var,
}

/// Scalar values of a [`LossTerms`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub dice: f64,
    pub bce: f64,
    pub mse: f64,
}

impl LossTerms {
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossValues {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossValues {
            total: v(self.total),
            dice: v(self.dice),
            bce: v(self.bce),
            mse: v(self.mse),
        }
    }
}

/// `w_dice * dice + w_bce * bce + w_mse * mse`.
pub fn combined_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    truth: Var,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let dice = dice_loss(tape, pred, truth, cfg.dice_eps)?;
    let bce = bce_loss(tape, pred, truth)?;
    let mse = mse_loss(tape, pred, truth)?;
    let total = weighted(tape, [dice, bce, mse], [cfg.w_dice, cfg.w_bce, cfg.w_mse])?;
    Ok(LossTerms { total, dice, bce, mse })
}

fn weighted<T: Real>(tape: &mut Tape<T>, terms: [Var; 3], weights: [f64; 3]) -> Result<Var> {
    let a = tape.scale(terms[0], T::lit(weights[0]))?;
    let b = tape.scale(terms[1], T::lit(weights[1]))?;
    let c = tape.scale(terms[2], T::lit(weights[2]))?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Evaluates the combined loss on plain tensors without keeping a tape.
pub fn evaluate<T: Real>(pred: &Tensor<T>, truth: &Tensor<T>, cfg: &LossConfig) -> Result<LossValues> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let t = tape.constant(truth.clone());
    Ok(combined_loss(&mut tape, p, t, cfg)?.values(&tape))
}
