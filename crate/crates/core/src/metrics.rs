//! Classification metrics: confusion matrix, per-class report, binomial
//! proportion confidence intervals and ROC/AUC. Fragmented (class 1) is the
//! positive class throughout; sensitivity is fragmented recall and
//! specificity is unfragmented recall.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// 2x2 confusion counts, positive class = fragmented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
}

impl ConfusionMatrix {
    pub fn new(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        ConfusionMatrix { tn, fp, fn_, tp }
    }

    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }
}

/// Exact confusion counts from hard labels and predictions.
pub fn confusion(labels: &[u8], predictions: &[u8]) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(CoreError::MetricInput(format!(
            "length mismatch: {} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(CoreError::MetricInput("empty input".to_string()));
    }
    let mut cm = ConfusionMatrix::new(0, 0, 0, 0);
    for (&y, &p) in labels.iter().zip(predictions) {
        match (y, p) {
            (0, 0) => cm.tn += 1,
            (0, 1) => cm.fp += 1,
            (1, 0) => cm.fn_ += 1,
            (1, 1) => cm.tp += 1,
            _ => {
                return Err(CoreError::MetricInput(format!(
                    "labels and predictions must be 0/1, got ({y}, {p})"
                )))
            }
        }
    }
    Ok(cm)
}

/// Precision/recall/F1 and support for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a zero denominator forced a metric to 0.
    pub undefined: bool,
}

/// Point value with an optional 95% confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricWithCi {
    pub value: f64,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

/// One point on the ROC curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// Full evaluation output: classification report, proportion metrics with
/// confidence intervals and (when scores are available) the ROC sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub unfragmented: ClassMetrics,
    pub fragmented: ClassMetrics,
    pub accuracy: f64,
    pub macro_avg: ClassMetrics,
    pub weighted_avg: ClassMetrics,
    pub sensitivity: MetricWithCi,
    pub specificity: MetricWithCi,
    pub precision: MetricWithCi,
    pub accuracy_ci: MetricWithCi,
    pub f1: f64,
    #[serde(default)]
    pub roc_points: Vec<RocPoint>,
    #[serde(default)]
    pub auc: Option<f64>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

fn f1_of(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Classification report and CI-bearing proportion metrics from counts.
pub fn report(cm: &ConfusionMatrix) -> Result<EvalReport> {
    if cm.total() == 0 {
        return Err(CoreError::MetricInput("empty confusion matrix".to_string()));
    }
    let total = cm.total() as f64;

    let (frag_precision, fp_undef) = ratio(cm.tp, cm.tp + cm.fp);
    let (frag_recall, fr_undef) = ratio(cm.tp, cm.tp + cm.fn_);
    let (unfrag_precision, up_undef) = ratio(cm.tn, cm.tn + cm.fn_);
    let (unfrag_recall, ur_undef) = ratio(cm.tn, cm.tn + cm.fp);

    let fragmented = ClassMetrics {
        precision: frag_precision,
        recall: frag_recall,
        f1: f1_of(frag_precision, frag_recall),
        support: cm.tp + cm.fn_,
        undefined: fp_undef || fr_undef,
    };
    let unfragmented = ClassMetrics {
        precision: unfrag_precision,
        recall: unfrag_recall,
        f1: f1_of(unfrag_precision, unfrag_recall),
        support: cm.tn + cm.fp,
        undefined: up_undef || ur_undef,
    };

    let accuracy = (cm.tp + cm.tn) as f64 / total;
    let macro_avg = ClassMetrics {
        precision: (fragmented.precision + unfragmented.precision) / 2.0,
        recall: (fragmented.recall + unfragmented.recall) / 2.0,
        f1: (fragmented.f1 + unfragmented.f1) / 2.0,
        support: cm.total(),
        undefined: fragmented.undefined || unfragmented.undefined,
    };
    let wu = unfragmented.support as f64 / total;
    let wf = fragmented.support as f64 / total;
    let weighted_avg = ClassMetrics {
        precision: wu * unfragmented.precision + wf * fragmented.precision,
        recall: wu * unfragmented.recall + wf * fragmented.recall,
        f1: wu * unfragmented.f1 + wf * fragmented.f1,
        support: cm.total(),
        undefined: fragmented.undefined || unfragmented.undefined,
    };

    let ci = |successes: u64, n: u64, value: f64| -> MetricWithCi {
        if n == 0 {
            MetricWithCi {
                value,
                ci_low: None,
                ci_high: None,
            }
        } else {
            let (lo, hi) = wilson_ci(successes, n, 0.95).expect("valid counts");
            MetricWithCi {
                value,
                ci_low: Some(lo),
                ci_high: Some(hi),
            }
        }
    };

    Ok(EvalReport {
        confusion: *cm,
        sensitivity: ci(cm.tp, cm.tp + cm.fn_, frag_recall),
        specificity: ci(cm.tn, cm.tn + cm.fp, unfrag_recall),
        precision: ci(cm.tp, cm.tp + cm.fp, frag_precision),
        accuracy_ci: ci(cm.tp + cm.tn, cm.total(), accuracy),
        f1: fragmented.f1,
        unfragmented,
        fragmented,
        accuracy,
        macro_avg,
        weighted_avg,
        roc_points: Vec::new(),
        auc: None,
    })
}

/// Standard normal quantile (Acklam's rational approximation, |err| < 1e-9).
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    assert!(p > 0.0 && p < 1.0);
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

/// Wilson score interval for a binomial proportion.
///
/// At 95% confidence the conventional z = 1.96 is used.
pub fn wilson_ci(successes: u64, n: u64, confidence: f64) -> Result<(f64, f64)> {
    if n == 0 || successes > n {
        return Err(CoreError::MetricInput(format!(
            "invalid counts: {successes}/{n}"
        )));
    }
    if !(0.0 < confidence && confidence < 1.0) {
        return Err(CoreError::MetricInput(format!(
            "confidence must be in (0,1), got {confidence}"
        )));
    }
    let z = if (confidence - 0.95).abs() < 1e-12 {
        1.96
    } else {
        normal_quantile(1.0 - (1.0 - confidence) / 2.0)
    };
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

/// ROC sweep over unique score thresholds plus the (0,0) and (1,1) endpoints.
///
/// A sample is predicted positive when its score is >= the threshold, so tied
/// scores move together; the trapezoid AUC then equals pairwise concordance
/// with half weight for ties.
pub fn roc(labels: &[u8], scores: &[f64]) -> Result<(Vec<RocPoint>, f64)> {
    if labels.len() != scores.len() {
        return Err(CoreError::MetricInput(format!(
            "length mismatch: {} labels vs {} scores",
            labels.len(),
            scores.len()
        )));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let neg = labels.iter().filter(|&&y| y == 0).count() as f64;
    if pos == 0.0 || neg == 0.0 {
        return Err(CoreError::SingleClassRoc);
    }

    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    // Threshold above every score; kept finite so reports serialize cleanly.
    let top = scores.iter().cloned().fold(f64::MIN, f64::max) + 1.0;
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: top,
    }];
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // Consume the whole tie group at this threshold.
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp / neg,
            tpr: tp / pos,
            threshold,
        });
    }

    let mut auc = 0.0;
    for pair in points.windows(2) {
        auc += (pair[1].fpr - pair[0].fpr) * (pair[1].tpr + pair[0].tpr) / 2.0;
    }
    Ok((points, auc))
}
