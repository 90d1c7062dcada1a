//! Classification, regression, and ranking metrics.

use crate::error::{Error, Result};

pub const HIT_RATIO_K: usize = 10;

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::Eval("empty input".into()));
    }
    if a != b {
        return Err(Error::Eval(format!("length mismatch: {a} truths, {b} predictions")));
    }
    Ok(())
}

/// Micro-F1 (equal to accuracy for single-label data) and macro-F1 over
/// the classes present in either truth or predictions.
pub fn f1_scores(truth: &[u32], pred: &[u32], num_classes: usize) -> Result<(f64, f64)> {
    check_lengths(truth.len(), pred.len())?;
    if let Some(&c) = truth.iter().chain(pred).find(|&&c| c as usize >= num_classes) {
        return Err(Error::Eval(format!("unknown class {c} (expected < {num_classes})")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t as usize] += 1;
        } else {
            fp[p as usize] += 1;
            fn_[t as usize] += 1;
        }
    }
    let micro = tp.iter().sum::<usize>() as f64 / truth.len() as f64;
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        if tp[c] + fp[c] + fn_[c] == 0 {
            continue;
        }
        present += 1;
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        sum += 2.0 * tp[c] as f64 / denom as f64;
    }
    Ok((micro, sum / present as f64))
}

/// `(MAE, RMSE)`.
pub fn regression_errors(truth: &[f64], pred: &[f64]) -> Result<(f64, f64)> {
    check_lengths(truth.len(), pred.len())?;
    let n = truth.len() as f64;
    let (abs, sq) = truth
        .iter()
        .zip(pred)
        .fold((0.0, 0.0), |(a, s), (&t, &p)| (a + (t - p).abs(), s + (t - p) * (t - p)));
    Ok((abs / n, (sq / n).sqrt()))
}

/// `(MR, HR@k)` from 1-based ranks.
pub fn rank_metrics(ranks: &[usize], k: usize) -> Result<(f64, f64)> {
    if ranks.is_empty() {
        return Err(Error::Eval("empty input".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Eval("ranks are 1-based".into()));
    }
    let n = ranks.len() as f64;
    let mr = ranks.iter().sum::<usize>() as f64 / n;
    let hr = ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok((mr, hr))
}

/// 1-based rank of `scores[target]`: one plus the number of strictly
/// higher scores, plus equal scores at a smaller index.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &v)| v > s || (v == s && i < target))
        .count()
}
