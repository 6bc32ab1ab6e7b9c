//! Classification and ranking metrics for before/after comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub example_id: String,
    /// Positive-class probability.
    pub score: f64,
    pub gold: bool,
}

impl ScoredPrediction {
    pub fn new(example_id: impl Into<String>, score: f64, gold: bool) -> Self {
        ScoredPrediction {
            example_id: example_id.into(),
            score,
            gold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub f1: f64,
    pub pr_auc: f64,
    pub average_precision: f64,
}

fn check_scores(preds: &[ScoredPrediction]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    if let Some(p) = preds.iter().find(|p| !(0.0..=1.0).contains(&p.score)) {
        return Err(Error::InvalidArgument(format!(
            "score {} of {:?} outside [0, 1]",
            p.score, p.example_id
        )));
    }
    Ok(())
}

/// F1 with `score > threshold` predicted positive; 0 when there are no true
/// positives.
pub fn f1_at(preds: &[ScoredPrediction], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for p in preds {
        match (p.score > threshold, p.gold) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

/// `(recall, precision)` after each distinct score threshold, highest score
/// first. Tied scores enter together.
pub fn pr_curve(preds: &[ScoredPrediction]) -> Vec<(f64, f64)> {
    let positives = preds.iter().filter(|p| p.gold).count() as f64;
    let mut order: Vec<&ScoredPrediction> = preds.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let score = order[i].score;
        while i < order.len() && order[i].score == score {
            tp += usize::from(order[i].gold);
            seen += 1;
            i += 1;
        }
        points.push((tp as f64 / positives, tp as f64 / seen as f64));
    }
    points
}

/// F1 at `threshold`, trapezoidal PR AUC anchored at (recall 0, precision 1),
/// and step-sum average precision `sum (R_k - R_{k-1}) P_k`.
pub fn classification_metrics(preds: &[ScoredPrediction], threshold: f64) -> Result<ClassificationMetrics> {
    check_scores(preds)?;
    if !preds.iter().any(|p| p.gold) {
        return Err(Error::InvalidArgument("no positive gold examples".into()));
    }
    let (mut prev_r, mut prev_p) = (0.0, 1.0);
    let (mut pr_auc, mut ap) = (0.0, 0.0);
    for (r, p) in pr_curve(preds) {
        let dr = r - prev_r;
        ap += dr * p;
        pr_auc += dr * (p + prev_p) / 2.0;
        prev_r = r;
        prev_p = p;
    }
    Ok(ClassificationMetrics {
        f1: f1_at(preds, threshold),
        pr_auc,
        average_precision: ap,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedQuery {
    pub query_id: String,
    /// 1-based rank of the first relevant item; `None` if none was retrieved.
    pub relevant_rank: Option<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub mrr: f64,
    /// Over queries with a relevant item; `None` if there are none.
    pub avg_rank: Option<f64>,
}

pub fn ranking_metrics(queries: &[RankedQuery]) -> Result<RankingMetrics> {
    if queries.is_empty() {
        return Err(Error::Empty("queries"));
    }
    let mut reciprocal = 0.0;
    let mut rank_sum = 0.0;
    let mut found = 0usize;
    for q in queries {
        match q.relevant_rank {
            Some(0) => {
                return Err(Error::InvalidArgument(format!("query {:?} has rank 0", q.query_id)));
            }
            Some(rank) => {
                reciprocal += 1.0 / rank as f64;
                rank_sum += rank as f64;
                found += 1;
            }
            None => {}
        }
    }
    Ok(RankingMetrics {
        mrr: reciprocal / queries.len() as f64,
        avg_rank: (found > 0).then(|| rank_sum / found as f64),
    })
}

/// `(new - baseline) / (1 - baseline)`.
pub fn relative_recall_change(baseline: f64, new: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&baseline) {
        return Err(Error::InvalidArgument(format!("baseline recall {baseline} outside [0, 1)")));
    }
    if !(0.0..=1.0).contains(&new) {
        return Err(Error::InvalidArgument(format!("recall {new} outside [0, 1]")));
    }
    Ok((new - baseline) / (1.0 - baseline))
}

/// Fraction of predictions with `score > tau`; 0 for no predictions.
pub fn recall_at_confidence(preds: &[ScoredPrediction], tau: f64) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().filter(|p| p.score > tau).count() as f64 / preds.len() as f64
}
