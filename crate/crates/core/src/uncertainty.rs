//! Uncertainty metrics over Monte Carlo Dropout passes.

use serde::{Deserialize, Serialize};

use crate::dataset::PredictiveDistribution;
use crate::error::{Error, Result};
use crate::mlp::argmax;
use crate::sentinel::Evidence;

#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintySummary {
    pub example_id: String,
    /// Per-class average over passes.
    pub mean: Vec<f64>,
    /// Per-class population standard deviation (divides by `T`).
    pub std: Vec<f64>,
    pub variation_ratio: f64,
    pub modal_class: usize,
    pub per_pass_argmax: Vec<usize>,
}

/// Report form of a summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub example_id: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub variation_ratio: f64,
    pub modal_class: usize,
}

impl From<&UncertaintySummary> for SummaryRecord {
    fn from(s: &UncertaintySummary) -> Self {
        SummaryRecord {
            example_id: s.example_id.clone(),
            mean: s.mean.clone(),
            std: s.std.clone(),
            variation_ratio: s.variation_ratio,
            modal_class: s.modal_class,
        }
    }
}

/// Per-column mean and population std of a `T x C` matrix.
///
/// The mean is accumulated as offsets from the first row, so a constant
/// column yields its value and a std of exactly zero.
pub(crate) fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let t = rows.len() as f64;
    let Some(first) = rows.first() else {
        return (Vec::new(), Vec::new());
    };
    let mut offset = vec![0.0; first.len()];
    for row in rows {
        for ((o, v), f) in offset.iter_mut().zip(row).zip(first) {
            *o += v - f;
        }
    }
    let mean: Vec<f64> = first.iter().zip(&offset).map(|(f, o)| f + o / t).collect();
    let mut var = vec![0.0; mean.len()];
    for row in rows {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.into_iter().map(|s| (s / t).sqrt()).collect();
    (mean, std)
}

/// Most frequent class and its count; ties go to the lowest class.
fn mode(classes: &[usize], class_count: usize) -> (usize, usize) {
    let mut counts = vec![0usize; class_count];
    for &c in classes {
        counts[c] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    (best, counts[best])
}

/// Expects a distribution that already passed
/// [`validate_distribution`](crate::dataset::validate_distribution).
pub fn summarize(dist: &PredictiveDistribution) -> UncertaintySummary {
    let (mean, std) = column_stats(&dist.passes);
    let per_pass_argmax: Vec<usize> = dist.passes.iter().map(|row| argmax(row)).collect();
    let (modal_class, count) = mode(&per_pass_argmax, dist.class_count());
    let variation_ratio = 1.0 - count as f64 / per_pass_argmax.len() as f64;
    UncertaintySummary {
        example_id: dist.example_id.clone(),
        mean,
        std,
        variation_ratio,
        modal_class,
        per_pass_argmax,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population std of each evidence channel.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceSummary {
    pub example_id: String,
    pub positive: ChannelStats,
    pub negative: ChannelStats,
}

pub fn summarize_evidence(evidence: &Evidence) -> EvidenceSummary {
    let rows: Vec<Vec<f64>> = evidence.passes.iter().map(|p| p.to_vec()).collect();
    let (mean, std) = column_stats(&rows);
    let channel = |c: usize| ChannelStats {
        mean: mean.get(c).copied().unwrap_or(f64::NAN),
        std: std.get(c).copied().unwrap_or(f64::NAN),
    };
    EvidenceSummary {
        example_id: evidence.example_id.clone(),
        positive: channel(0),
        negative: channel(1),
    }
}

/// Checks that `ordering` is a permutation of `0..class_count` and returns
/// each class's ordinal rank.
pub(crate) fn ordinal_ranks(ordering: &[usize], class_count: usize) -> Result<Vec<usize>> {
    let mut rank = vec![usize::MAX; class_count];
    if ordering.len() != class_count {
        return Err(Error::InvalidArgument(format!(
            "ordering has {} classes, distribution has {class_count}",
            ordering.len()
        )));
    }
    for (r, &c) in ordering.iter().enumerate() {
        if c >= class_count || rank[c] != usize::MAX {
            return Err(Error::InvalidArgument(format!(
                "ordering {ordering:?} is not a permutation of 0..{class_count}"
            )));
        }
        rank[c] = r;
    }
    Ok(rank)
}

/// 1-based nearest-rank position `ceil(q * n)`, clamped to `[1, n]`.
///
/// The product is nudged down by 1e-9 so that values like `0.7 * 10`, which
/// land a hair above an integer in floating point, keep their exact rank.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    let pos = (q * n as f64 - 1e-9).ceil();
    (pos.max(1.0) as usize).min(n)
}

/// Nearest-rank quantile of the per-pass argmax classes, ordered by
/// `ordering` (lowest first).
pub fn ordinal_quantile(dist: &PredictiveDistribution, q: f64, ordering: &[usize]) -> Result<usize> {
    let rank = ordinal_ranks(ordering, dist.class_count())?;
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile {q} outside [0, 1]")));
    }
    let mut classes: Vec<usize> = dist.passes.iter().map(|row| argmax(row)).collect();
    if classes.is_empty() {
        return Err(Error::Empty("distribution passes"));
    }
    classes.sort_by_key(|&c| rank[c]);
    Ok(classes[nearest_rank(q, classes.len()) - 1])
}
