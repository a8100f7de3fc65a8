use crate::error::{Error, Result};
use crate::ohlc::{PatternClass, WINDOW_LEN};

use super::model::{DetectorOutput, OUTPUT_LEN};

/// Overlap of two intervals anchored at the same right edge.
pub fn iou_1d(w_pred: f64, w_true: f64) -> Result<f64> {
    if !(w_pred > 0.0 && w_true > 0.0) {
        return Err(Error::invalid(format!(
            "interval widths must be positive, got {w_pred} and {w_true}"
        )));
    }
    Ok(w_pred.min(w_true) / w_pred.max(w_true))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub coord: f64,
    pub noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            coord: 5.0,
            noobj: 0.5,
        }
    }
}

/// Weighted loss components for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub coord: f64,
    pub confidence: f64,
    pub no_object: f64,
    pub class: f64,
    /// Index of the pair supervised as the object predictor.
    pub responsible: usize,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.coord + self.confidence + self.no_object + self.class
    }
}

fn check_target(window_size: usize) -> Result<f64> {
    if window_size == 0 || window_size > WINDOW_LEN {
        return Err(Error::invalid(format!("target window size {window_size} out of range")));
    }
    Ok(window_size as f64)
}

// widths can underflow to zero through the sigmoid
const MIN_WIDTH: f64 = 1e-12;

fn decoded(w_norm: f64) -> f64 {
    w_norm.max(MIN_WIDTH) * WINDOW_LEN as f64
}

/// Pair whose decoded width overlaps the target more; ties go to pair 0.
pub fn responsible_pair(output: &DetectorOutput, w_true: f64) -> usize {
    let iou = |k: usize| {
        let w = decoded(output.pairs[k].0);
        w.min(w_true) / w.max(w_true)
    };
    usize::from(iou(1) > iou(0))
}

/// Loss components from already squashed outputs.
pub fn loss_terms(
    output: &DetectorOutput,
    class: PatternClass,
    window_size: usize,
    weights: LossWeights,
) -> Result<LossTerms> {
    let w_true = check_target(window_size)?;
    let r = responsible_pair(output, w_true);
    let (w, c) = output.pairs[r];
    let c_other = output.pairs[1 - r].1;
    let target = (w_true / WINDOW_LEN as f64).sqrt();
    let iou = iou_1d(decoded(w), w_true)?;
    let p = output.class_scores[class.index()].max(f64::MIN_POSITIVE);
    Ok(LossTerms {
        coord: weights.coord * (w.max(MIN_WIDTH).sqrt() - target).powi(2),
        confidence: (c - iou).powi(2),
        no_object: weights.noobj * c_other * c_other,
        class: -p.ln(),
        responsible: r,
    })
}

/// Loss for one sample and its gradient with respect to the 12 raw
/// (pre-activation) network outputs.
///
/// The confidence target is the live overlap of the responsible width, so
/// the gradient also flows into that width through the overlap.
pub fn detection_loss(
    raw: &[f64],
    class: PatternClass,
    window_size: usize,
    weights: LossWeights,
) -> Result<(LossTerms, [f64; OUTPUT_LEN])> {
    let out = DetectorOutput::from_raw(raw)?;
    let mut terms = loss_terms(&out, class, window_size, weights)?;
    let w_true = window_size as f64;
    let r = terms.responsible;
    let (w, c) = out.pairs[r];
    let c_other = out.pairs[1 - r].1;

    // class term via log-sum-exp for accuracy at saturated logits
    let z = &raw[4..];
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    terms.class = lse - z[class.index()];

    let mut grad = [0.0; OUTPUT_LEN];
    let ws = w.max(MIN_WIDTH);
    let sq = ws.sqrt();
    let target = (w_true / WINDOW_LEN as f64).sqrt();
    let mut d_w = weights.coord * (sq - target) / sq;

    let wd = decoded(w);
    let iou = wd.min(w_true) / wd.max(w_true);
    let diou_dw = if wd <= w_true {
        WINDOW_LEN as f64 / w_true
    } else {
        -w_true * WINDOW_LEN as f64 / (wd * wd)
    };
    d_w += -2.0 * (c - iou) * diou_dw;
    let d_c = 2.0 * (c - iou);
    let d_other = 2.0 * weights.noobj * c_other;

    let dsig = |s: f64| s * (1.0 - s);
    grad[2 * r] = if w > MIN_WIDTH { d_w * dsig(w) } else { 0.0 };
    grad[2 * r + 1] = d_c * dsig(c);
    grad[2 * (1 - r) + 1] = d_other * dsig(c_other);
    for (k, p) in out.class_scores.iter().enumerate() {
        grad[4 + k] = p - if k == class.index() { 1.0 } else { 0.0 };
    }
    Ok((terms, grad))
}
