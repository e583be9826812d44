//! Value and rank losses over predictions grouped by state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_CLAMP: f64 = 1e-12;

/// Ordered pairs `(m, n)` with `targets[m] - targets[n] > delta`.
pub fn pair_set(targets: &[f64], delta: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (m, &a) in targets.iter().enumerate() {
        for (n, &b) in targets.iter().enumerate() {
            if a - b > delta {
                out.push((m, n));
            }
        }
    }
    out
}

fn check_shapes(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<()> {
    if predictions.len() != targets.len() {
        return Err(Error::usage(format!(
            "{} prediction groups vs {} target groups",
            predictions.len(),
            targets.len()
        )));
    }
    for (p, t) in predictions.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::usage("prediction and target group sizes differ"));
        }
        if p.is_empty() {
            return Err(Error::usage("empty group"));
        }
    }
    Ok(())
}

pub fn bce(target: f64, prediction: f64) -> f64 {
    let p = prediction.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// `-ln(sigmoid(d))`, stable for large `|d|`.
pub fn neg_log_sigmoid(d: f64) -> f64 {
    if d > 0.0 {
        (-d).exp().ln_1p()
    } else {
        -d + d.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean over groups of the mean binary cross-entropy within each group.
pub fn value_loss(predictions: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    check_shapes(predictions, targets)?;
    if predictions.is_empty() {
        return Err(Error::usage("no groups"));
    }
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| p.iter().zip(t).map(|(&p, &r)| bce(r, p)).sum::<f64>() / p.len() as f64)
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Mean over groups of the mean of `-ln sigmoid(p_m - p_n)` over the group's
/// pair set. Groups without pairs add zero but still count in the mean.
pub fn rank_loss(predictions: &[Vec<f64>], targets: &[Vec<f64>], delta: f64) -> Result<f64> {
    check_shapes(predictions, targets)?;
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let pairs = pair_set(t, delta);
            if pairs.is_empty() {
                0.0
            } else {
                pairs.iter().map(|&(m, n)| neg_log_sigmoid(p[m] - p[n])).sum::<f64>() / pairs.len() as f64
            }
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

pub fn total_loss(value: f64, rank: f64, lambda: f64) -> f64 {
    value + lambda * rank
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub value: f64,
    pub rank: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Soft,
    Hard,
}

/// Soft labels pass through; hard labels become `1` above the threshold and
/// `0` otherwise.
pub fn apply_label_mode(targets: &[f64], mode: LabelMode, hard_threshold: f64) -> Vec<f64> {
    match mode {
        LabelMode::Soft => targets.to_vec(),
        LabelMode::Hard => targets.iter().map(|&r| if r > hard_threshold { 1.0 } else { 0.0 }).collect(),
    }
}
