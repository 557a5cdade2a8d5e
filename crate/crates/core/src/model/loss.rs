//! Mask reconstruction, binary cross-entropy and the combined objective.

use ndarray::Array2;

use crate::dsp::MaskPair;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[CLS_CLAMP, 1 - CLS_CLAMP]` before the log.
pub const CLS_CLAMP: f64 = 1e-7;

pub const DEFAULT_LAMBDA_CLS: f64 = 0.1;

fn check_pair(pred: &MaskPair, target: &MaskPair) -> Result<()> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    Ok(())
}

fn mean_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Mean absolute error per mask, summed over the two masks.
pub fn recon_loss(pred: &MaskPair, target: &MaskPair) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(mean_abs(&pred.left, &target.left) + mean_abs(&pred.right, &target.right))
}

/// Gradient of [`recon_loss`] with respect to each predicted mask. The
/// subgradient at equality is 0.
pub fn recon_grad(pred: &MaskPair, target: &MaskPair) -> Result<(Array2<f64>, Array2<f64>)> {
    check_pair(pred, target)?;
    let n = pred.left.len() as f64;
    let g = |p: &Array2<f64>, t: &Array2<f64>| {
        let mut out = p - t;
        out.mapv_inplace(|d| {
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        });
        out
    };
    Ok((g(&pred.left, &target.left), g(&pred.right, &target.right)))
}

/// Binary cross-entropy `-[y ln p + (1-y) ln(1-p)]`.
pub fn cls_loss(prob: f64, label: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::invalid(format!("probability {prob} outside [0, 1]")));
    }
    if label != 0.0 && label != 1.0 {
        return Err(Error::invalid(format!("label must be 0 or 1, got {label}")));
    }
    let p = prob.clamp(CLS_CLAMP, 1.0 - CLS_CLAMP);
    Ok(-(label * p.ln() + (1.0 - label) * (1.0 - p).ln()))
}

/// Gradient of the cross-entropy with respect to the logit.
pub fn cls_logit_grad(prob: f64, label: f64) -> f64 {
    prob - label
}

pub fn total_loss(recon: f64, cls: f64, lambda_cls: f64) -> f64 {
    recon + lambda_cls * cls
}
