//! Reference implementations written independently of the library, and
//! randomized checks that compare the two. Each check returns a short summary
//! on success and a description of the first mismatch on failure.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ledo::dataset::{Pos, PredictiveDistribution, TaggedToken};
use ledo::evalmetrics::{classification_metrics, ScoredPrediction};
use ledo::mlp::{Model, ModelSpec};
use ledo::noisebench::{detection_scores, NoiseMask};
use ledo::policy::{
    decide_filter, decide_overwrite, BinaryLabel, Decision, FilterThresholds, OverwriteThresholds, Rule, Verdict,
};
use ledo::sdgmask::{select_masks, MaskRule, MASK};
use ledo::seed;
use ledo::uncertainty::{
    ordinal_quantile, summarize, ChannelStats, EvidenceSummary, UncertaintySummary,
};

pub type Check = Result<String, String>;

pub fn rng(s: u64) -> ChaCha8Rng {
    seed::rng(s)
}

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Brute-force PR AUC and AP: for every distinct score, recount TP and FP
/// among predictions scoring at least that much.
pub fn exhaustive_pr(preds: &[ScoredPrediction]) -> (f64, f64) {
    let positives = preds.iter().filter(|p| p.gold).count() as f64;
    let mut thresholds: Vec<f64> = preds.iter().map(|p| p.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut auc = 0.0;
    let mut ap = 0.0;
    let (mut r0, mut p0) = (0.0, 1.0);
    for thr in thresholds {
        let tp = preds.iter().filter(|p| p.score >= thr && p.gold).count() as f64;
        let predicted = preds.iter().filter(|p| p.score >= thr).count() as f64;
        let (r, p) = (tp / positives, tp / predicted);
        auc += (r - r0) * (p + p0) / 2.0;
        ap += (r - r0) * p;
        r0 = r;
        p0 = p;
    }
    (auc, ap)
}

/// Random scored predictions with at least one positive; scores come from a
/// small grid so ties are common.
pub fn random_predictions(r: &mut ChaCha8Rng) -> Vec<ScoredPrediction> {
    let n = r.random_range(1..=50);
    let levels = r.random_range(2..=20);
    let mut preds: Vec<ScoredPrediction> = (0..n)
        .map(|i| {
            let score = r.random_range(0..=levels) as f64 / levels as f64;
            ScoredPrediction::new(format!("p{i}"), score, r.random_bool(0.4))
        })
        .collect();
    let k = r.random_range(0..n);
    preds[k].gold = true;
    preds
}

pub fn pr_oracle_check(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let preds = random_predictions(&mut r);
        let m = classification_metrics(&preds, 0.5).map_err(|e| e.to_string())?;
        let (auc, ap) = exhaustive_pr(&preds);
        let delta = (m.pr_auc - auc).abs().max((m.average_precision - ap).abs());
        worst = worst.max(delta);
        ensure(delta < 1e-9, || format!("trial {trial}: pr_auc {} vs {auc}, ap {} vs {ap}", m.pr_auc, m.average_precision))?;
    }
    Ok(format!("{trials} trials, max |delta| {worst:.1e}"))
}

/// Argmax with ties to the lowest index, by explicit scan.
pub fn first_max(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Quantile by sorting on ordinal position and taking the smallest rank
/// `k` with `k >= q * T`.
pub fn sorted_quantile(dist: &PredictiveDistribution, q: f64, ordering: &[usize]) -> usize {
    let mut classes: Vec<usize> = dist.passes.iter().map(|row| first_max(row)).collect();
    classes.sort_by_key(|c| ordering.iter().position(|o| o == c).unwrap());
    let t = classes.len();
    let k = (1..=t).find(|&k| k as f64 >= q * t as f64 - 1e-9).unwrap_or(t);
    classes[k - 1]
}

/// `T x C` rows of random probabilities, optionally snapped to a coarse grid
/// to force ties.
pub fn random_dist(r: &mut ChaCha8Rng, t: usize, c: usize, id: &str) -> PredictiveDistribution {
    let coarse = r.random_bool(0.3);
    let rows = (0..t)
        .map(|_| {
            let raw: Vec<f64> = (0..c)
                .map(|_| {
                    let v: f64 = r.random();
                    if coarse {
                        (v * 3.0).floor() + 1.0
                    } else {
                        v + 1e-3
                    }
                })
                .collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|v| v / total).collect()
        })
        .collect();
    PredictiveDistribution::new(id, rows)
}

pub fn quantile_oracle_check(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for trial in 0..trials {
        let t = r.random_range(1..=30);
        let c = r.random_range(2..=5);
        let dist = random_dist(&mut r, t, c, "q");
        let mut ordering: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            ordering.swap(i, r.random_range(0..=i));
        }
        let q = if r.random_bool(0.3) {
            r.random_range(0..=t) as f64 / t as f64
        } else {
            r.random()
        };
        let got = ordinal_quantile(&dist, q, &ordering).map_err(|e| e.to_string())?;
        let want = sorted_quantile(&dist, q, &ordering);
        ensure(got == want, || format!("trial {trial}: q={q} T={t} got {got} want {want}"))?;
    }
    Ok(format!("{trials} trials exact"))
}

pub fn counted_variation_ratio(dist: &PredictiveDistribution) -> f64 {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for row in &dist.passes {
        *counts.entry(first_max(row)).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap();
    1.0 - top as f64 / dist.passes.len() as f64
}

pub fn variation_ratio_oracle_check(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for trial in 0..trials {
        let t = r.random_range(1..=30);
        let c = r.random_range(2..=5);
        let dist = random_dist(&mut r, t, c, "v");
        let got = summarize(&dist).variation_ratio;
        let want = counted_variation_ratio(&dist);
        ensure(got == want, || format!("trial {trial}: {got} vs {want}"))?;
    }
    Ok(format!("{trials} trials exact"))
}

/// Mean by a plain loop; the library may accumulate differently, so callers
/// compare with a tolerance.
pub fn loop_mean(dist: &PredictiveDistribution) -> Vec<f64> {
    let c = dist.class_count();
    let mut mean = vec![0.0; c];
    for row in &dist.passes {
        for j in 0..c {
            mean[j] += row[j];
        }
    }
    mean.iter().map(|s| s / dist.passes.len() as f64).collect()
}

pub struct DetectionCase {
    pub decisions: Vec<Decision>,
    pub mask: NoiseMask,
}

pub fn random_detection_case(r: &mut ChaCha8Rng) -> DetectionCase {
    let n = r.random_range(1..=60);
    let c = r.random_range(2..=4);
    let mut mask = NoiseMask::default();
    let mut decisions = Vec::new();
    for i in 0..n {
        let id = format!("e{i}");
        let label = r.random_range(0..c);
        if r.random_bool(0.3) {
            let original = (label + r.random_range(1..c)) % c;
            mask.corrupted_ids.insert(id.clone());
            mask.original_label_of.insert(id.clone(), original);
        }
        let verdict = match r.random_range(0..3) {
            0 => Verdict::Keep,
            1 => Verdict::Remove,
            _ => Verdict::Overwrite((label + r.random_range(1..c)) % c),
        };
        let rule = if verdict.is_flagged() { Rule::QuantileBad } else { Rule::None };
        decisions.push(Decision { example_id: id, verdict, rule });
    }
    DetectionCase { decisions, mask }
}

pub fn detection_oracle_check(trials: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for trial in 0..trials {
        let case = random_detection_case(&mut r);
        let got = detection_scores(&case.decisions, &case.mask).map_err(|e| e.to_string())?;
        let flagged: BTreeSet<&str> = case
            .decisions
            .iter()
            .filter(|d| d.verdict != Verdict::Keep)
            .map(|d| d.example_id.as_str())
            .collect();
        let corrupted: BTreeSet<&str> = case.mask.corrupted_ids.iter().map(String::as_str).collect();
        let hits = flagged.intersection(&corrupted).count();
        let precision = if flagged.is_empty() { 1.0 } else { hits as f64 / flagged.len() as f64 };
        let recall = if corrupted.is_empty() { 0.0 } else { hits as f64 / corrupted.len() as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        let overwrites: Vec<(&str, usize)> = case
            .decisions
            .iter()
            .filter_map(|d| match d.verdict {
                Verdict::Overwrite(l) => Some((d.example_id.as_str(), l)),
                _ => None,
            })
            .collect();
        let restored = overwrites
            .iter()
            .filter(|(id, l)| case.mask.original_label_of.get(*id) == Some(l))
            .count();
        let overwrite_accuracy = (!overwrites.is_empty()).then(|| restored as f64 / overwrites.len() as f64);
        let same = got.flagged == flagged.len()
            && got.corrupted == corrupted.len()
            && got.true_positives == hits
            && got.precision == precision
            && got.recall == recall
            && got.f1 == f1
            && got.overwrites == overwrites.len()
            && got.overwrite_accuracy == overwrite_accuracy;
        ensure(same, || format!("trial {trial}: {got:?}"))?;
    }
    Ok(format!("{trials} trials exact"))
}

/// Random summary channel values on a coarse grid, so threshold boundaries
/// are hit often.
fn grid_value(r: &mut ChaCha8Rng, max: f64) -> f64 {
    r.random_range(0..=20) as f64 / 20.0 * max
}

pub struct SummaryCase {
    pub evidence: EvidenceSummary,
    pub binary: UncertaintySummary,
    pub label: BinaryLabel,
}

pub fn random_summaries(n: usize, seed: u64) -> Vec<SummaryCase> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let id = format!("s{i}");
            let pos = ChannelStats { mean: grid_value(&mut r, 1.0), std: grid_value(&mut r, 0.5) };
            let neg = ChannelStats { mean: grid_value(&mut r, 1.0), std: grid_value(&mut r, 0.5) };
            let binary = UncertaintySummary {
                example_id: id.clone(),
                mean: vec![1.0 - pos.mean, pos.mean],
                std: vec![pos.std, pos.std],
                variation_ratio: 0.0,
                modal_class: usize::from(pos.mean > 0.5),
                per_pass_argmax: vec![],
            };
            let label = if r.random_bool(0.5) { BinaryLabel::Positive } else { BinaryLabel::Negative };
            SummaryCase {
                evidence: EvidenceSummary { example_id: id, positive: pos, negative: neg },
                binary,
                label,
            }
        })
        .collect()
}

fn flagged_filter(cases: &[SummaryCase], th: &FilterThresholds) -> BTreeSet<String> {
    cases
        .iter()
        .map(|c| decide_filter(&c.evidence, c.label, th).unwrap())
        .filter(|d| d.verdict.is_flagged())
        .map(|d| d.example_id)
        .collect()
}

fn flagged_overwrite(cases: &[SummaryCase], th: &OverwriteThresholds) -> BTreeSet<String> {
    cases
        .iter()
        .map(|c| decide_overwrite(&c.binary, c.label, th).unwrap())
        .filter(|d| d.verdict.is_flagged())
        .map(|d| d.example_id)
        .collect()
}

/// Tightening any single threshold by `step` must not grow the flagged set.
pub fn monotonicity_check(cases: &[SummaryCase], r: &mut ChaCha8Rng, rounds: usize) -> Check {
    for round in 0..rounds {
        let f = FilterThresholds {
            t1: grid_value(r, 0.9),
            s1: grid_value(r, 0.5) + 0.05,
            t2: grid_value(r, 0.9),
            s2: grid_value(r, 0.5) + 0.05,
        };
        let step = 0.05 * r.random_range(1..=4) as f64;
        let base = flagged_filter(cases, &f);
        let tighter = [
            FilterThresholds { t1: (f.t1 + step).min(1.0), ..f },
            FilterThresholds { s1: (f.s1 - step).max(0.0), ..f },
            FilterThresholds { t2: (f.t2 + step).min(1.0), ..f },
            FilterThresholds { s2: (f.s2 - step).max(0.0), ..f },
        ];
        for th in &tighter {
            ensure(flagged_filter(cases, th).is_subset(&base), || format!("round {round}: filter {f:?} -> {th:?}"))?;
        }

        let t1 = grid_value(r, 0.5);
        let o = OverwriteThresholds {
            t1,
            s1: grid_value(r, 0.5) + 0.05,
            t2: (t1 + grid_value(r, 0.5) + 0.05).min(1.0),
            s2: grid_value(r, 0.5) + 0.05,
        };
        let base = flagged_overwrite(cases, &o);
        let tighter = [
            OverwriteThresholds { t1: (o.t1 - step).max(0.0), ..o },
            OverwriteThresholds { s1: (o.s1 - step).max(0.0), ..o },
            OverwriteThresholds { t2: (o.t2 + step).min(1.0), ..o },
            OverwriteThresholds { s2: (o.s2 - step).max(0.0), ..o },
        ];
        for th in &tighter {
            ensure(flagged_overwrite(cases, th).is_subset(&base), || format!("round {round}: overwrite {o:?} -> {th:?}"))?;
        }
    }
    Ok(format!("{} summaries x {rounds} threshold draws x 8 tightenings", cases.len()))
}

const WORDS: [&str; 10] = ["best", "pizza", "Seattle", "find", "a", "quiet", "cafe", "near", "Paris", "open"];

pub fn random_sentence(r: &mut ChaCha8Rng) -> Vec<TaggedToken> {
    let n = r.random_range(1..=15);
    (0..n)
        .map(|i| {
            let pos = [Pos::Noun, Pos::Propn, Pos::Verb, Pos::Other][r.random_range(0..4)];
            let mut t = TaggedToken::new(format!("{}{i}", WORDS[r.random_range(0..WORDS.len())]), pos);
            if pos.is_nominal() && r.random_bool(0.3) {
                t = t.compound_head();
            }
            if r.random_bool(0.35) {
                t = t.entity();
            }
            t
        })
        .collect()
}

/// Rule 4 keeps every entity token verbatim and masks everything else.
pub fn rule4_check(sentences: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    for s in 0..sentences {
        let tokens = random_sentence(&mut r);
        let proposals = select_masks(&tokens, MaskRule::PreserveEntities).map_err(|e| e.to_string())?;
        let entities: Vec<&str> = tokens.iter().filter(|t| t.is_entity).map(|t| t.text.as_str()).collect();
        if entities.len() == tokens.len() {
            ensure(proposals.is_empty(), || format!("sentence {s}: all-entity input produced a proposal"))?;
            continue;
        }
        ensure(proposals.len() == 1, || format!("sentence {s}: {} proposals", proposals.len()))?;
        let p = &proposals[0];
        for &(a, b) in &p.spans {
            ensure(tokens[a..=b].iter().all(|t| !t.is_entity), || format!("sentence {s}: span ({a},{b}) covers an entity"))?;
        }
        let kept: Vec<&str> = p.rendered.split(' ').filter(|w| *w != MASK).collect();
        ensure(kept == entities, || format!("sentence {s}: rendered {:?} vs entities {entities:?}", p.rendered))?;
        let covered: usize = p.spans.iter().map(|(a, b)| b - a + 1).sum();
        ensure(covered + entities.len() == tokens.len(), || format!("sentence {s}: non-entity token left unmasked"))?;
    }
    Ok(format!("{sentences} sentences"))
}

fn param(m: &mut Model, layer: usize, which: usize, k: usize) -> &mut f64 {
    let layer = &mut m.layers_mut()[layer];
    if which == 0 {
        &mut layer.weights[k]
    } else {
        &mut layer.bias[k]
    }
}

/// Central-difference gradient check on random small MLPs with fixed dropout
/// masks. Returns the worst relative error.
pub fn gradient_check(configs: usize, seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for cfg in 0..configs {
        let depth = r.random_range(1..=2);
        let spec = ModelSpec {
            input_dim: r.random_range(1..=4),
            hidden_dims: (0..depth).map(|_| r.random_range(1..=8)).collect(),
            class_count: r.random_range(2..=4),
            dropout_rate: [0.0, 0.1, 0.3][r.random_range(0..3)],
        };
        let mut model = Model::init(spec.clone(), r.random()).map_err(|e| e.to_string())?;
        let batch = r.random_range(1..=4);
        let inputs: Vec<Vec<f64>> = (0..batch)
            .map(|_| (0..spec.input_dim).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..spec.class_count)).collect();
        let masks: Vec<_> = (0..batch).map(|_| model.sample_masks(&mut r)).collect();
        let refs: Vec<&[f64]> = inputs.iter().map(Vec::as_slice).collect();
        let loss = |m: &Model| m.loss_and_gradients(&refs, &labels, Some(&masks)).unwrap();
        let (_, grads) = loss(&model);

        for (l, grad) in grads.iter().enumerate() {
            for which in 0..2 {
                let count = if which == 0 { grad.weights.len() } else { grad.bias.len() };
                for k in 0..count {
                    let original = *param(&mut model, l, which, k);
                    *param(&mut model, l, which, k) = original + eps;
                    let plus = loss(&model).0;
                    *param(&mut model, l, which, k) = original - eps;
                    let minus = loss(&model).0;
                    *param(&mut model, l, which, k) = original;
                    let numeric = (plus - minus) / (2.0 * eps);
                    let analytic = if which == 0 { grad.weights[k] } else { grad.bias[k] };
                    let denom = (analytic.abs() + numeric.abs()).max(1e-8);
                    let rel = (analytic - numeric).abs() / denom;
                    worst = worst.max(rel);
                    ensure(rel < 1e-4, || {
                        format!("config {cfg} layer {l} param {which}/{k}: analytic {analytic} numeric {numeric}")
                    })?;
                }
            }
        }
    }
    Ok(worst)
}
