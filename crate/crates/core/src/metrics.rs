//! Detection and classification metrics.
//!
//! Seen is the positive class throughout: TPR counts seen test rows kept as
//! seen, FPR counts unseen rows mistaken for seen. Accuracies are per-class
//! means, not pooled, and all values here are fractions; formatting as
//! percentages happens at the reporting boundary, never inside.

use std::collections::HashMap;

use crate::boundary::BoundarySet;
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::experts::UnseenExpert;
use crate::networks::ModelParams;

/// An ROC curve with tie-grouped points from (0,0) to (1,1).
#[derive(Debug, Clone)]
pub struct RocCurve {
    /// (false positive rate, true positive rate) pairs, fpr nondecreasing.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// GZSL accuracy triple, as fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GzslScores {
    /// Per-class top-1 accuracy over unseen classes on unseen test rows.
    pub ts: f64,
    /// Per-class top-1 accuracy over seen classes on seen test rows.
    pub tr: f64,
    pub h: f64,
}

/// Builds the ROC curve of `scores` against boolean seen labels, sweeping
/// every distinct score as a threshold. Equal scores move as one group, so
/// permuting the input never changes the curve.
pub fn roc_auc(scores: &[f64], is_seen: &[bool]) -> Result<RocCurve> {
    if scores.len() != is_seen.len() {
        return Err(Error::invalid_argument(
            "one label is needed per score",
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid_argument("scores must not contain NaN"));
    }
    let p = is_seen.iter().filter(|&&s| s).count();
    let n = is_seen.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(
            "ROC needs both seen and unseen rows".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        let threshold = scores[order[k]];
        while k < order.len() && scores[order[k]] == threshold {
            if is_seen[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    Ok(RocCurve { points, auc })
}

/// Smallest false positive rate at which the curve reaches `tpr_target`,
/// interpolating linearly between adjacent points.
pub fn fpr_at_tpr(curve: &RocCurve, tpr_target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tpr_target) {
        return Err(Error::invalid_argument(format!(
            "TPR target must lie in [0, 1], got {tpr_target}"
        )));
    }
    let pts = &curve.points;
    if pts.first() != Some(&(0.0, 0.0)) || pts.last() != Some(&(1.0, 1.0)) {
        return Err(Error::invalid_state(
            "ROC curve does not span (0,0) to (1,1)",
        ));
    }
    for w in pts.windows(2) {
        let ((f0, t0), (f1, t1)) = (w[0], w[1]);
        if t0 >= tpr_target {
            return Ok(f0);
        }
        if t1 >= tpr_target {
            if t1 == t0 {
                return Ok(f1);
            }
            return Ok(f0 + (f1 - f0) * (tpr_target - t0) / (t1 - t0));
        }
    }
    Ok(1.0)
}

/// Mean over the classes of `class_set` (those present in `labels`) of the
/// within-class accuracy.
pub fn per_class_top1(predictions: &[i64], labels: &[i64], class_set: &[i64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid_argument(
            "one prediction is needed per label",
        ));
    }
    let mut counts: HashMap<i64, (usize, usize)> = HashMap::new();
    for (&pred, &label) in predictions.iter().zip(labels) {
        let entry = counts.entry(label).or_insert((0, 0));
        entry.1 += 1;
        if pred == label {
            entry.0 += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in class_set {
        if let Some(&(correct, total)) = counts.get(c) {
            sum += correct as f64 / total as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::UndefinedMetric(
            "no class of the requested set appears in the labels".into(),
        ));
    }
    Ok(sum / present as f64)
}

/// `2 * ts * tr / (ts + tr)`, defined as 0 when both inputs are 0.
pub fn harmonic_mean(ts: f64, tr: f64) -> f64 {
    if ts + tr == 0.0 {
        0.0
    } else {
        2.0 * ts * tr / (ts + tr)
    }
}

/// Gate margins and seen labels for every test row, then the ROC curve of
/// the whole test set.
pub fn evaluate_ood(
    bundle: &DatasetBundle,
    model: &ModelParams,
    set: &BoundarySet,
) -> Result<RocCurve> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (idx, seen) in [(&bundle.test_seen_idx, true), (&bundle.test_unseen_idx, false)] {
        if idx.is_empty() {
            continue;
        }
        let x = bundle.features_of(idx);
        for d in crate::boundary::classify_ood_batch(&x.view(), set, model)? {
            scores.push(d.margin);
            labels.push(seen);
        }
    }
    roc_auc(&scores, &labels)
}

/// Routes both test splits through the gated classifier and scores them.
pub fn evaluate_gzsl(
    bundle: &DatasetBundle,
    model: &ModelParams,
    set: &BoundarySet,
    expert: &dyn UnseenExpert,
) -> Result<GzslScores> {
    let score_split = |idx: &[usize], class_set: &[i64]| -> Result<f64> {
        if idx.is_empty() {
            return Err(Error::UndefinedMetric(
                "cannot score an empty test split".into(),
            ));
        }
        let x = bundle.features_of(idx);
        let preds: Vec<i64> =
            crate::experts::gzsl_predict_batch(&x.view(), idx, set, model, expert)?
                .iter()
                .map(|p| p.class_id)
                .collect();
        per_class_top1(&preds, &bundle.labels_of(idx), class_set)
    };
    let tr = score_split(&bundle.test_seen_idx, &bundle.seen_classes)?;
    let ts = score_split(&bundle.test_unseen_idx, &bundle.unseen_classes)?;
    Ok(GzslScores {
        ts,
        tr,
        h: harmonic_mean(ts, tr),
    })
}
