//! Evaluation metrics: test accuracy, pseudo-label quality, and the
//! relative false-reject rate of a test model against a baseline at a
//! shared false-accept operating target.

use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, Model};

/// Fraction of argmax-correct predictions over the whole set, eval mode.
pub fn accuracy(model: &Model, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::domain("accuracy of an empty dataset".to_string()));
    }
    let n = ds.len();
    let classes = ds.n_classes;
    let mut correct = 0usize;
    // Chunked so evaluation memory stays flat for any corpus size.
    let chunk = 256usize;
    let mut at = 0usize;
    while at < n {
        let hi = (at + chunk).min(n);
        let indices: Vec<usize> = (at..hi).collect();
        let logits = model.forward_eval(&ds.features_of(&indices)?)?;
        for (row, &i) in indices.iter().enumerate() {
            let truth = ds
                .example(i)
                .ground_truth()
                .ok_or_else(|| Error::domain(format!("example {i} has no label to score")))?;
            let pred = argmax(&logits.data()[row * classes..(row + 1) * classes]);
            correct += usize::from(pred == truth);
        }
        at = hi;
    }
    Ok(correct as f64 / n as f64)
}

/// Pseudo-label quality against hidden ground truth:
/// (accuracy over all, accuracy over kept, kept fraction). The kept
/// accuracy is -1 when nothing was kept.
pub fn pseudo_label_metrics(
    pseudo_labels: &[usize],
    keep_mask: &[bool],
    truth: &[usize],
) -> Result<(f64, f64, f64)> {
    let n = pseudo_labels.len();
    if keep_mask.len() != n || truth.len() != n {
        return Err(Error::shape(format!(
            "{} labels, {} keep flags, {} truths",
            n,
            keep_mask.len(),
            truth.len()
        )));
    }
    if n == 0 {
        return Err(Error::domain("pseudo-label metrics of an empty batch".to_string()));
    }
    let mut correct_all = 0usize;
    let mut kept = 0usize;
    let mut correct_kept = 0usize;
    for i in 0..n {
        let ok = pseudo_labels[i] == truth[i];
        correct_all += usize::from(ok);
        if keep_mask[i] {
            kept += 1;
            correct_kept += usize::from(ok);
        }
    }
    let label_accuracy = correct_all as f64 / n as f64;
    let threshold_accuracy = if kept == 0 {
        -1.0
    } else {
        correct_kept as f64 / kept as f64
    };
    Ok((label_accuracy, threshold_accuracy, kept as f64 / n as f64))
}

/// Detection scores for a binary task: keyword-present examples against
/// keyword-absent ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

impl ScoredSet {
    fn check(&self, side: &str) -> Result<()> {
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(Error::domain(format!(
                "{side} set needs both positive and negative scores"
            )));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.positives) || !finite(&self.negatives) {
            return Err(Error::domain(format!("{side} set has a non-finite score")));
        }
        Ok(())
    }

    /// Fraction of negatives at or above the threshold.
    pub fn far(&self, t: f64) -> f64 {
        let hits = self.negatives.iter().filter(|&&s| s >= t).count();
        hits as f64 / self.negatives.len() as f64
    }

    /// Fraction of positives below the threshold.
    pub fn frr(&self, t: f64) -> f64 {
        let misses = self.positives.iter().filter(|&&s| s < t).count();
        misses as f64 / self.positives.len() as f64
    }

    /// Smallest of the set's own scores (or +inf) whose FAR meets the
    /// target. FAR never rises with the threshold, so the first hit in
    /// ascending score order is the operating point.
    pub fn threshold_at_far(&self, far_target: f64) -> f64 {
        let mut candidates: Vec<f64> = self
            .positives
            .iter()
            .chain(&self.negatives)
            .copied()
            .collect();
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        candidates.push(f64::INFINITY);
        for &t in &candidates {
            if self.far(t) <= far_target {
                return t;
            }
        }
        unreachable!("FAR at +inf is zero");
    }
}

/// FRR of the test set over FRR of the baseline, each at its own smallest
/// threshold meeting the shared FAR target. A baseline that rejects no
/// positives at its operating point leaves the ratio undefined.
pub fn frr_at_far(test: &ScoredSet, baseline: &ScoredSet, far_target: f64) -> Result<f64> {
    if !(far_target > 0.0 && far_target < 1.0) {
        return Err(Error::domain(format!(
            "far target {far_target} outside (0, 1)"
        )));
    }
    test.check("test")?;
    baseline.check("baseline")?;
    let t_b = baseline.threshold_at_far(far_target);
    let frr_b = baseline.frr(t_b);
    if frr_b == 0.0 {
        return Err(Error::domain(
            "baseline rejects no positives at the operating point".to_string(),
        ));
    }
    let t_x = test.threshold_at_far(far_target);
    Ok(test.frr(t_x) / frr_b)
}

/// Reads one score per line; blank lines are skipped.
pub fn read_score_file(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut scores = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| {
            Error::format(0, format!("{}:{}: bad score {line:?}", path.display(), lineno + 1))
        })?;
        scores.push(v);
    }
    Ok(scores)
}

/// Reads the `<stem>.pos` / `<stem>.neg` pair next to each other.
pub fn read_scored_set(stem: &Path) -> Result<ScoredSet> {
    let with_ext = |ext: &str| {
        let mut p = stem.as_os_str().to_owned();
        p.push(".");
        p.push(ext);
        std::path::PathBuf::from(p)
    };
    Ok(ScoredSet {
        positives: read_score_file(&with_ext("pos"))?,
        negatives: read_score_file(&with_ext("neg"))?,
    })
}
