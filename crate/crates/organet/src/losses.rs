//! Training losses: isoperimetric-quotient, soft Dice, and focal, plus their
//! weighted total.
//!
//! All losses act on a `[h, w]` foreground-probability map. The discrete
//! isoperimetric quotient uses forward differences with a zero-padded border;
//! its numerator scales with the perimeter (not the squared perimeter), which
//! is kept as defined. Dice is the soft relaxation (evaluation uses the hard
//! form in the metrics module).

use autodiff::Var;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stabilizer added to the soft area in the isoperimetric denominator.
pub const IQ_AREA_EPS: f64 = 1e-6;
/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before logarithms.
pub const FOCAL_PROB_CLAMP: f64 = 1e-7;

/// Loss weighting and per-loss constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_iq: f64,
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub dice_smooth: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_iq: 0.5,
            lambda_dice: 0.6,
            lambda_focal: 0.4,
            dice_smooth: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_iq", self.lambda_iq),
            ("lambda_dice", self.lambda_dice),
            ("lambda_focal", self.lambda_focal),
            ("dice_smooth", self.dice_smooth),
            ("focal_alpha", self.focal_alpha),
            ("focal_gamma", self.focal_gamma),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn check_pair(pred: &Var, target: &Array2<f64>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::Argument(format!(
            "prediction {:?} and target {:?} shapes disagree",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Discrete isoperimetric quotient of a soft mask:
/// `sum(dx^2 + dy^2) / (4 pi (sum(p) + eps))`.
pub fn iq_loss(pred: &Var) -> Var {
    let dx = pred.diff_x();
    let dy = pred.diff_y();
    let boundary = dx.mul(&dx).add(&dy.mul(&dy));
    let num = boundary.sum_all();
    let den = pred
        .sum_all()
        .add_scalar(IQ_AREA_EPS)
        .mul_scalar(4.0 * std::f64::consts::PI);
    num.div(&den)
}

/// Soft Dice loss: `1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)`.
pub fn dice_loss(pred: &Var, target: &Array2<f64>, smooth: f64) -> Result<Var> {
    check_pair(pred, target)?;
    let target_dyn = target.clone().into_dyn();
    let inter = pred.mul_const(&target_dyn).sum_all();
    let target_sum: f64 = target.iter().sum();
    let num = inter.mul_scalar(2.0).add_scalar(smooth);
    let den = pred.sum_all().add_scalar(target_sum + smooth);
    Ok(num.div(&den).rsub_scalar(1.0))
}

/// Focal loss: mean over pixels of `-alpha (1 - p_t)^gamma ln(p_t)` where
/// `p_t` is the predicted probability of the true class.
pub fn focal_loss(pred: &Var, target: &Array2<f64>, alpha: f64, gamma: f64) -> Result<Var> {
    check_pair(pred, target)?;
    let y = target.clone().into_dyn();
    let one_minus_y = y.mapv(|v| 1.0 - v);
    let p_t = pred
        .mul_const(&y)
        .add(&pred.rsub_scalar(1.0).mul_const(&one_minus_y))
        .clamp(FOCAL_PROB_CLAMP, 1.0 - FOCAL_PROB_CLAMP);
    let focus = p_t.rsub_scalar(1.0).powf_const(gamma);
    Ok(p_t.ln().mul(&focus).mean_all().mul_scalar(-alpha))
}

/// The three loss components and their weighted total.
pub struct LossParts {
    pub total: Var,
    pub iq: Var,
    pub dice: Var,
    pub focal: Var,
}

pub fn loss_parts(pred: &Var, target: &Array2<f64>, w: &LossWeights) -> Result<LossParts> {
    w.validate()?;
    let iq = iq_loss(pred);
    let dice = dice_loss(pred, target, w.dice_smooth)?;
    let focal = focal_loss(pred, target, w.focal_alpha, w.focal_gamma)?;
    let total = iq
        .mul_scalar(w.lambda_iq)
        .add(&dice.mul_scalar(w.lambda_dice))
        .add(&focal.mul_scalar(w.lambda_focal));
    Ok(LossParts {
        total,
        iq,
        dice,
        focal,
    })
}

/// `lambda_iq L_IQ + lambda_dice L_Dice + lambda_focal L_Focal`
pub fn total_loss(pred: &Var, target: &Array2<f64>, w: &LossWeights) -> Result<Var> {
    Ok(loss_parts(pred, target, w)?.total)
}
