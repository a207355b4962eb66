//! ROC, AUC, low-FPR operating points and precision-recall tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Samples scoring at or above this value are flagged; `+inf` flags none.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

fn check_inputs(scores: &[f64], truths: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!("{} scores, {} truths", scores.len(), truths.len())));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let positives = truths.iter().filter(|t| **t).count();
    let negatives = truths.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::InsufficientSamples("ROC needs both members and non-members".into()));
    }
    Ok((positives, negatives))
}

/// Sweep every unique score as a threshold (descending) and integrate with
/// the trapezoidal rule. Tied scores move both rates in one step, which
/// credits ties with one half exactly as pairwise counting does.
pub fn roc_curve(scores: &[f64], truths: &[bool]) -> Result<Roc> {
    let (positives, negatives) = check_inputs(scores, truths)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if truths[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { fpr: fp as f64 / negatives as f64, tpr: tp as f64 / positives as f64, threshold });
    }
    let auc = points.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0).sum();
    Ok(Roc { points, auc, positives, negatives })
}

/// Best TPR among points at the largest achievable FPR not above `fpr`,
/// returned with that achieved FPR.
pub fn tpr_at_fpr(roc: &Roc, fpr: f64) -> (f64, f64) {
    let achieved = roc.points.iter().map(|p| p.fpr).filter(|f| *f <= fpr).fold(0.0, f64::max);
    let tpr = roc.points.iter().filter(|p| p.fpr == achieved).map(|p| p.tpr).fold(0.0, f64::max);
    (tpr, achieved)
}

/// TPR at the lowest FPR any threshold reaches while flagging at least one member.
pub fn tpr_at_lowest_fpr(roc: &Roc) -> (f64, f64) {
    let lowest = roc.points.iter().filter(|p| p.tpr > 0.0).map(|p| p.fpr).fold(f64::INFINITY, f64::min);
    if lowest.is_infinite() {
        return (0.0, 0.0);
    }
    tpr_at_fpr(roc, lowest)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
    pub accuracy: f64,
}

/// Rates of a bit-valued attack.
pub fn operating_point(decisions: &[bool], truths: &[bool]) -> Result<OperatingPoint> {
    let scores: Vec<f64> = decisions.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect();
    let (positives, negatives) = check_inputs(&scores, truths)?;
    let tp = decisions.iter().zip(truths).filter(|(d, t)| **d && **t).count();
    let fp = decisions.iter().zip(truths).filter(|(d, t)| **d && !**t).count();
    let tn = negatives - fp;
    let flagged = tp + fp;
    Ok(OperatingPoint {
        tpr: tp as f64 / positives as f64,
        fpr: fp as f64 / negatives as f64,
        precision: if flagged == 0 { f64::NAN } else { tp as f64 / flagged as f64 },
        accuracy: (tp + tn) as f64 / truths.len() as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall at every ROC threshold that flags at least one sample.
pub fn precision_recall(roc: &Roc) -> Vec<PrPoint> {
    roc.points
        .iter()
        .filter(|p| p.threshold.is_finite())
        .map(|p| {
            let tp = p.tpr * roc.positives as f64;
            let fp = p.fpr * roc.negatives as f64;
            PrPoint { threshold: p.threshold, precision: tp / (tp + fp), recall: p.tpr }
        })
        .collect()
}
