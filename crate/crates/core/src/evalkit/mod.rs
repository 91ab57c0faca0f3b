//! Threshold-based binary classification metrics, ROC sweep, trapezoidal
//! AUC, and Youden-optimal threshold selection. All computation is f64.

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod svg;

pub use svg::{roc_svg, RocTrace};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("ROC curve undefined: {0}")]
    UndefinedCurve(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fp: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.fp + self.tn
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub f1: f64,
}

fn check_scores_labels(scores: &[f64], labels: &[u8]) -> Result<(), EvalError> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(EvalError::Input(format!(
            "need equal non-empty score/label lists, got {} and {}",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(EvalError::Input(format!("label {bad} outside {{0, 1}}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(EvalError::Input("scores must be finite".into()));
    }
    Ok(())
}

/// Tally predictions at a threshold; prediction = 1 iff score >= threshold.
pub fn confusion_at(
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<ConfusionMatrix, EvalError> {
    check_scores_labels(scores, labels)?;
    let mut cm = ConfusionMatrix {
        tp: 0,
        fn_: 0,
        fp: 0,
        tn: 0,
    };
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => cm.tp += 1,
            (false, true) => cm.fn_ += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
        }
    }
    Ok(cm)
}

/// Sensitivity, specificity, accuracy, and F1. Metrics whose denominator is
/// zero are defined as 0 (notably F1 when tp = 0).
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics, EvalError> {
    if cm.total() == 0 {
        return Err(EvalError::Input("confusion matrix is empty".into()));
    }
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    Ok(Metrics {
        sensitivity: ratio(cm.tp, cm.tp + cm.fn_),
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        accuracy: ratio(cm.tp + cm.tn, cm.total()),
        f1: ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn_),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve points from the all-negative origin (threshold +inf) through
/// one point per distinct score, descending; tied scores move together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

pub fn roc(scores: &[f64], labels: &[u8]) -> Result<RocCurve, EvalError> {
    check_scores_labels(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::UndefinedCurve(format!(
            "both classes required, got {pos} positive / {neg} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: score,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(RocCurve { points })
}

/// Trapezoidal area under the ROC curve (over fpr). With the tie-grouped
/// sweep this equals P(score_pos > score_neg) + P(tie)/2.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|p| (p[1].fpr - p[0].fpr) * (p[1].tpr + p[0].tpr) / 2.0)
        .sum()
}

/// Threshold maximizing Youden's J = tpr - fpr over the distinct-score
/// thresholds; ties break toward lower fpr, then lower threshold.
pub fn optimal_threshold(curve: &RocCurve) -> f64 {
    // points[0] is the synthetic infinite-threshold origin, not a candidate.
    let mut best = &curve.points[1];
    for p in &curve.points[2..] {
        let j = p.tpr - p.fpr;
        let best_j = best.tpr - best.fpr;
        if j > best_j
            || (j == best_j && p.fpr < best.fpr)
            || (j == best_j && p.fpr == best.fpr && p.threshold < best.threshold)
        {
            best = p;
        }
    }
    best.threshold
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub id: String,
    pub score: f64,
    pub label: u8,
    pub prediction: u8,
}

/// Full evaluation artifact for one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub auc: f64,
    pub threshold: f64,
    pub cases: Vec<CaseOutcome>,
}

/// Score a labelled case list into a report. The threshold is Youden-optimal
/// unless overridden.
pub fn build_report(
    ids: &[String],
    scores: &[f64],
    labels: &[u8],
    threshold_override: Option<f64>,
) -> Result<EvalReport, EvalError> {
    if ids.len() != scores.len() {
        return Err(EvalError::Input(format!(
            "need one id per score, got {} and {}",
            ids.len(),
            scores.len()
        )));
    }
    let curve = roc(scores, labels)?;
    let area = auc(&curve);
    let threshold = threshold_override.unwrap_or_else(|| optimal_threshold(&curve));
    let cm = confusion_at(scores, labels, threshold)?;
    let m = metrics(&cm)?;
    Ok(EvalReport {
        confusion: cm,
        sensitivity: m.sensitivity,
        specificity: m.specificity,
        accuracy: m.accuracy,
        f1: m.f1,
        auc: area,
        threshold,
        cases: ids
            .iter()
            .zip(scores)
            .zip(labels)
            .map(|((id, &score), &label)| CaseOutcome {
                id: id.clone(),
                score,
                label,
                prediction: u8::from(score >= threshold),
            })
            .collect(),
    })
}

/// ROC points as CSV (threshold,fpr,tpr).
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in &curve.points {
        let thr = if p.threshold.is_infinite() {
            "inf".to_string()
        } else {
            format!("{}", p.threshold)
        };
        out.push_str(&format!("{},{},{}\n", thr, p.fpr, p.tpr));
    }
    out
}

/// Pairwise Mann-Whitney statistic: P(score_pos > score_neg) + P(tie)/2.
/// Quadratic; the independent oracle for [`auc`].
pub fn mann_whitney(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, (&sp, &lp)) in scores.iter().zip(labels).enumerate() {
        if lp != 1 {
            continue;
        }
        for (j, (&sn, &ln)) in scores.iter().zip(labels).enumerate() {
            if i == j || ln != 0 {
                continue;
            }
            pairs += 1.0;
            if sp > sn {
                wins += 1.0;
            } else if sp == sn {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}
