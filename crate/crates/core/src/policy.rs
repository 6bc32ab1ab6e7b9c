//! Decision policies over sentinel uncertainty, and their application to a
//! dataset.
//!
//! Every threshold comparison is strict: "mean above t" is `mean > t` and
//! "std below s" is `std < s`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, PredictiveDistribution};
use crate::error::{Error, Result};
use crate::uncertainty::{ordinal_quantile, ordinal_ranks, EvidenceSummary, UncertaintySummary};

/// Binary target label; class 1 is positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryLabel {
    Negative,
    Positive,
}

impl BinaryLabel {
    pub fn from_class(class: usize) -> Result<Self> {
        match class {
            0 => Ok(BinaryLabel::Negative),
            1 => Ok(BinaryLabel::Positive),
            other => Err(Error::InvalidArgument(format!("label {other} is not binary"))),
        }
    }

    pub fn class(self) -> usize {
        match self {
            BinaryLabel::Negative => 0,
            BinaryLabel::Positive => 1,
        }
    }
}

fn check_unit(name: &str, value: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::InvalidConfig(format!("{name} = {value} outside [0, 1]")));
    }
    Ok(())
}

/// Evidence thresholds for rejecting examples outright.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterThresholds {
    /// Negative-evidence mean above which a positive label is rejected.
    pub t1: f64,
    pub s1: f64,
    /// Positive-evidence mean above which a negative label is rejected.
    pub t2: f64,
    pub s2: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            t1: 0.75,
            s1: 0.2,
            t2: 0.7,
            s2: 0.2,
        }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<()> {
        check_unit("t1", self.t1)?;
        check_unit("s1", self.s1)?;
        check_unit("t2", self.t2)?;
        check_unit("s2", self.s2)
    }
}

/// Positive-class thresholds for flipping binary labels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverwriteThresholds {
    /// Positive-score floor; a positive label scoring below it is flipped.
    pub t1: f64,
    pub s1: f64,
    /// Positive-score ceiling; a negative label scoring above it is flipped.
    pub t2: f64,
    pub s2: f64,
}

impl Default for OverwriteThresholds {
    fn default() -> Self {
        OverwriteThresholds {
            t1: 0.3,
            s1: 0.15,
            t2: 0.75,
            s2: 0.15,
        }
    }
}

impl OverwriteThresholds {
    pub fn validate(&self) -> Result<()> {
        check_unit("t1", self.t1)?;
        check_unit("s1", self.s1)?;
        check_unit("t2", self.t2)?;
        check_unit("s2", self.s2)?;
        if self.t1 >= self.t2 {
            return Err(Error::InvalidConfig(format!(
                "overwrite t1 = {} must be below t2 = {}",
                self.t1, self.t2
            )));
        }
        Ok(())
    }
}

/// Quantile rejection over ordinal classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantileThresholds {
    pub q1: f64,
    pub q2: f64,
    /// Classes from lowest to highest.
    pub ordering: Vec<usize>,
    pub good_set: BTreeSet<usize>,
    pub bad_set: BTreeSet<usize>,
}

impl Default for QuantileThresholds {
    /// Three classes ordered bad (0) < neutral (1) < good (2).
    fn default() -> Self {
        QuantileThresholds {
            q1: 0.9,
            q2: 0.1,
            ordering: vec![0, 1, 2],
            good_set: BTreeSet::from([2]),
            bad_set: BTreeSet::from([0, 1]),
        }
    }
}

impl QuantileThresholds {
    pub fn validate(&self) -> Result<()> {
        check_unit("q1", self.q1)?;
        check_unit("q2", self.q2)?;
        if self.q2 >= self.q1 {
            return Err(Error::InvalidConfig(format!(
                "quantile q2 = {} must be below q1 = {}",
                self.q2, self.q1
            )));
        }
        ordinal_ranks(&self.ordering, self.ordering.len())?;
        if !self.good_set.is_disjoint(&self.bad_set) {
            return Err(Error::InvalidConfig("good_set and bad_set overlap".into()));
        }
        let all: BTreeSet<usize> = self.ordering.iter().copied().collect();
        let covered: BTreeSet<usize> = self.good_set.union(&self.bad_set).copied().collect();
        if covered != all {
            return Err(Error::InvalidConfig(
                "good_set and bad_set must partition the ordered classes".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Filter,
    Overwrite,
    Quantile,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Filter => "filter",
            PolicyKind::Overwrite => "overwrite",
            PolicyKind::Quantile => "quantile",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filter" => Ok(PolicyKind::Filter),
            "overwrite" => Ok(PolicyKind::Overwrite),
            "quantile" => Ok(PolicyKind::Quantile),
            other => Err(Error::InvalidConfig(format!("unknown policy {other:?}"))),
        }
    }
}

/// Threshold file with one section per policy. Missing sections take the
/// default values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    pub filter: FilterThresholds,
    pub overwrite: OverwriteThresholds,
    pub quantile: QuantileThresholds,
}

/// A policy together with the thresholds it runs under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Filter(FilterThresholds),
    Overwrite(OverwriteThresholds),
    Quantile(QuantileThresholds),
}

impl Policy {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Policy::Filter(_) => PolicyKind::Filter,
            Policy::Overwrite(_) => PolicyKind::Overwrite,
            Policy::Quantile(_) => PolicyKind::Quantile,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Policy::Filter(t) => t.validate(),
            Policy::Overwrite(t) => t.validate(),
            Policy::Quantile(t) => t.validate(),
        }
    }

    pub fn from_config(kind: PolicyKind, config: &ThresholdConfig) -> Policy {
        match kind {
            PolicyKind::Filter => Policy::Filter(config.filter),
            PolicyKind::Overwrite => Policy::Overwrite(config.overwrite),
            PolicyKind::Quantile => Policy::Quantile(config.quantile.clone()),
        }
    }

    /// Threshold values in a fixed order, used for lexicographic tie breaks.
    pub fn threshold_vector(&self) -> Vec<f64> {
        match self {
            Policy::Filter(t) => vec![t.t1, t.s1, t.t2, t.s2],
            Policy::Overwrite(t) => vec![t.t1, t.s1, t.t2, t.s2],
            Policy::Quantile(t) => vec![t.q1, t.q2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    None,
    /// Positive label, strong negative evidence.
    FilterPositive,
    /// Negative label, strong positive evidence.
    FilterNegative,
    /// Positive label, confidently low positive score.
    OverwritePositive,
    /// Negative label, confidently high positive score.
    OverwriteNegative,
    /// Good label, upper quantile not good.
    QuantileGood,
    /// Bad or neutral label, lower quantile good.
    QuantileBad,
}

impl Rule {
    pub fn as_str(self) -> &'static str {
        match self {
            Rule::None => "none",
            Rule::FilterPositive => "filter_positive",
            Rule::FilterNegative => "filter_negative",
            Rule::OverwritePositive => "overwrite_positive",
            Rule::OverwriteNegative => "overwrite_negative",
            Rule::QuantileGood => "quantile_good",
            Rule::QuantileBad => "quantile_bad",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Remove,
    Overwrite(usize),
}

impl Verdict {
    pub fn is_flagged(self) -> bool {
        !matches!(self, Verdict::Keep)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "DecisionRecord", try_from = "DecisionRecord")]
pub struct Decision {
    pub example_id: String,
    pub verdict: Verdict,
    pub rule: Rule,
}

impl Decision {
    fn keep(id: &str) -> Self {
        Decision {
            example_id: id.to_string(),
            verdict: Verdict::Keep,
            rule: Rule::None,
        }
    }

    fn new(id: &str, verdict: Verdict, rule: Rule) -> Self {
        Decision {
            example_id: id.to_string(),
            verdict,
            rule,
        }
    }
}

/// Line format: `{"example_id":..,"verdict":"keep"|"remove"|"overwrite","new_label":..,"rule":..}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionRecord {
    example_id: String,
    verdict: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    new_label: Option<usize>,
    rule: Rule,
}

impl From<Decision> for DecisionRecord {
    fn from(d: Decision) -> Self {
        let (verdict, new_label) = match d.verdict {
            Verdict::Keep => ("keep", None),
            Verdict::Remove => ("remove", None),
            Verdict::Overwrite(label) => ("overwrite", Some(label)),
        };
        DecisionRecord {
            example_id: d.example_id,
            verdict: verdict.into(),
            new_label,
            rule: d.rule,
        }
    }
}

impl TryFrom<DecisionRecord> for Decision {
    type Error = String;

    fn try_from(r: DecisionRecord) -> std::result::Result<Self, String> {
        let verdict = match (r.verdict.as_str(), r.new_label) {
            ("keep", None) => Verdict::Keep,
            ("remove", None) => Verdict::Remove,
            ("overwrite", Some(label)) => Verdict::Overwrite(label),
            ("overwrite", None) => return Err("overwrite decision without new_label".into()),
            (v, _) => return Err(format!("verdict {v:?} with new_label {:?}", r.new_label)),
        };
        Ok(Decision {
            example_id: r.example_id,
            verdict,
            rule: r.rule,
        })
    }
}

fn finite(stats: &[f64]) -> Result<()> {
    if stats.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidArgument("missing evidence channel".into()))
    }
}

/// Rejects positives with strong negative evidence and negatives with strong
/// positive evidence.
pub fn decide_filter(summary: &EvidenceSummary, label: BinaryLabel, th: &FilterThresholds) -> Result<Decision> {
    let (pos, neg) = (summary.positive, summary.negative);
    finite(&[pos.mean, pos.std, neg.mean, neg.std])?;
    let id = &summary.example_id;
    let decision = match label {
        BinaryLabel::Positive if neg.mean > th.t1 && neg.std < th.s1 => {
            Decision::new(id, Verdict::Remove, Rule::FilterPositive)
        }
        BinaryLabel::Negative if pos.mean > th.t2 && pos.std < th.s2 => {
            Decision::new(id, Verdict::Remove, Rule::FilterNegative)
        }
        _ => Decision::keep(id),
    };
    Ok(decision)
}

/// Flips binary labels the sentinel confidently contradicts. Class 1 is
/// positive.
pub fn decide_overwrite(
    summary: &UncertaintySummary,
    label: BinaryLabel,
    th: &OverwriteThresholds,
) -> Result<Decision> {
    if summary.mean.len() != 2 || summary.std.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "overwrite policy needs a binary summary, got {} classes",
            summary.mean.len()
        )));
    }
    let (mean, std) = (summary.mean[1], summary.std[1]);
    let id = &summary.example_id;
    let decision = match label {
        BinaryLabel::Positive if mean < th.t1 && std < th.s1 => Decision::new(
            id,
            Verdict::Overwrite(BinaryLabel::Negative.class()),
            Rule::OverwritePositive,
        ),
        BinaryLabel::Negative if mean > th.t2 && std < th.s2 => Decision::new(
            id,
            Verdict::Overwrite(BinaryLabel::Positive.class()),
            Rule::OverwriteNegative,
        ),
        _ => Decision::keep(id),
    };
    Ok(decision)
}

/// Rejects good labels whose upper quantile is not good, and bad or neutral
/// labels whose lower quantile is good.
pub fn decide_quantile(dist: &PredictiveDistribution, label: usize, th: &QuantileThresholds) -> Result<Decision> {
    let id = &dist.example_id;
    if th.good_set.contains(&label) {
        let q = ordinal_quantile(dist, th.q1, &th.ordering)?;
        if !th.good_set.contains(&q) {
            return Ok(Decision::new(id, Verdict::Remove, Rule::QuantileGood));
        }
    } else if th.bad_set.contains(&label) {
        let q = ordinal_quantile(dist, th.q2, &th.ordering)?;
        if th.good_set.contains(&q) {
            return Ok(Decision::new(id, Verdict::Remove, Rule::QuantileBad));
        }
    } else {
        return Err(Error::InvalidArgument(format!(
            "example {id:?}: label {label} is in neither good_set nor bad_set"
        )));
    }
    Ok(Decision::keep(id))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyMode {
    FilterOnly,
    Overwrite,
}

impl FromStr for ApplyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filter_only" | "filter-only" => Ok(ApplyMode::FilterOnly),
            "overwrite" => Ok(ApplyMode::Overwrite),
            other => Err(Error::InvalidConfig(format!("unknown apply mode {other:?}"))),
        }
    }
}

/// `kept + removed == original`; `overwritten` counts within `kept`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApplyReport {
    pub original: usize,
    pub kept: usize,
    pub removed: usize,
    pub overwritten: usize,
}

pub fn apply_decisions(
    dataset: &Dataset,
    decisions: &[Decision],
    mode: ApplyMode,
) -> Result<(Dataset, ApplyReport)> {
    let mut by_id: HashMap<&str, &Decision> = HashMap::with_capacity(decisions.len());
    for d in decisions {
        if dataset.get(&d.example_id).is_none() {
            return Err(Error::UnknownId(d.example_id.clone()));
        }
        if by_id.insert(&d.example_id, d).is_some() {
            return Err(Error::DuplicateId(d.example_id.clone()));
        }
        if let Verdict::Overwrite(_) = d.verdict {
            if mode == ApplyMode::FilterOnly {
                return Err(Error::InvalidArgument(format!(
                    "overwrite decision for {:?} in filter-only mode",
                    d.example_id
                )));
            }
        }
    }

    let mut report = ApplyReport {
        original: dataset.len(),
        ..ApplyReport::default()
    };
    let mut cleaned = Vec::with_capacity(dataset.len());
    for example in dataset.examples() {
        match by_id.get(example.id.as_str()).map(|d| d.verdict) {
            Some(Verdict::Remove) => report.removed += 1,
            Some(Verdict::Overwrite(label)) => {
                if label == example.label {
                    return Err(Error::InvalidArgument(format!(
                        "overwrite of {:?} keeps label {label}",
                        example.id
                    )));
                }
                let mut e = example.clone();
                e.label = label;
                cleaned.push(e);
                report.kept += 1;
                report.overwritten += 1;
            }
            Some(Verdict::Keep) | None => {
                cleaned.push(example.clone());
                report.kept += 1;
            }
        }
    }
    debug_assert_eq!(report.kept + report.removed, report.original);
    Ok((dataset.with_examples(cleaned)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabeledExample;
    use crate::uncertainty::{summarize, ChannelStats};

    fn evidence(pos: (f64, f64), neg: (f64, f64)) -> EvidenceSummary {
        EvidenceSummary {
            example_id: "e".into(),
            positive: ChannelStats { mean: pos.0, std: pos.1 },
            negative: ChannelStats { mean: neg.0, std: neg.1 },
        }
    }

    fn binary_summary(mean_pos: f64, std_pos: f64) -> UncertaintySummary {
        UncertaintySummary {
            example_id: "e".into(),
            mean: vec![1.0 - mean_pos, mean_pos],
            std: vec![std_pos, std_pos],
            variation_ratio: 0.0,
            modal_class: usize::from(mean_pos > 0.5),
            per_pass_argmax: vec![],
        }
    }

    #[test]
    fn filter_rules() {
        let th = FilterThresholds::default();
        let d = decide_filter(&evidence((0.1, 0.0), (0.8, 0.15)), BinaryLabel::Positive, &th).unwrap();
        assert_eq!((d.verdict, d.rule), (Verdict::Remove, Rule::FilterPositive));
        let d = decide_filter(&evidence((0.1, 0.0), (0.75, 0.15)), BinaryLabel::Positive, &th).unwrap();
        assert_eq!(d.verdict, Verdict::Keep);
        let d = decide_filter(&evidence((0.9, 0.3), (0.0, 0.0)), BinaryLabel::Negative, &th).unwrap();
        assert_eq!(d.verdict, Verdict::Keep);
        let d = decide_filter(&evidence((0.9, 0.1), (0.0, 0.0)), BinaryLabel::Negative, &th).unwrap();
        assert_eq!((d.verdict, d.rule), (Verdict::Remove, Rule::FilterNegative));
        assert!(decide_filter(&evidence((f64::NAN, 0.1), (0.0, 0.0)), BinaryLabel::Negative, &th).is_err());
    }

    #[test]
    fn overwrite_rules() {
        let th = OverwriteThresholds::default();
        let d = decide_overwrite(&binary_summary(0.2, 0.1), BinaryLabel::Positive, &th).unwrap();
        assert_eq!((d.verdict, d.rule), (Verdict::Overwrite(0), Rule::OverwritePositive));
        let d = decide_overwrite(&binary_summary(0.8, 0.1), BinaryLabel::Negative, &th).unwrap();
        assert_eq!((d.verdict, d.rule), (Verdict::Overwrite(1), Rule::OverwriteNegative));
        let d = decide_overwrite(&binary_summary(0.3, 0.1), BinaryLabel::Positive, &th).unwrap();
        assert_eq!(d.verdict, Verdict::Keep);
        let three = summarize(&PredictiveDistribution::new("e", vec![vec![0.2, 0.3, 0.5]]));
        assert!(decide_overwrite(&three, BinaryLabel::Positive, &th).is_err());
    }

    fn votes(classes: &[usize]) -> PredictiveDistribution {
        PredictiveDistribution::new(
            "e",
            classes
                .iter()
                .map(|&c| {
                    let mut row = vec![0.1; 3];
                    row[c] = 0.8;
                    row
                })
                .collect(),
        )
    }

    #[test]
    fn quantile_rules() {
        let th = QuantileThresholds::default();
        let mut v = vec![1; 9];
        v.push(2);
        let d = decide_quantile(&votes(&v), 2, &th).unwrap();
        assert_eq!((d.verdict, d.rule), (Verdict::Remove, Rule::QuantileGood));
        let d = decide_quantile(&votes(&[2; 10]), 0, &th).unwrap();
        assert_eq!((d.verdict, d.rule), (Verdict::Remove, Rule::QuantileBad));
        let mut v = vec![2; 8];
        v.extend([1, 1]);
        assert_eq!(decide_quantile(&votes(&v), 2, &th).unwrap().verdict, Verdict::Keep);
        let bad = QuantileThresholds { good_set: BTreeSet::from([2]), bad_set: BTreeSet::from([0]), ..th };
        assert!(decide_quantile(&votes(&v), 1, &bad).is_err());
    }

    #[test]
    fn threshold_validation() {
        assert!(OverwriteThresholds { t1: 0.8, ..Default::default() }.validate().is_err());
        assert!(FilterThresholds { s1: 1.5, ..Default::default() }.validate().is_err());
        assert!(QuantileThresholds { q2: 0.95, ..Default::default() }.validate().is_err());
        assert!(QuantileThresholds::default().validate().is_ok());
        let cfg: ThresholdConfig = serde_json::from_str(r#"{"overwrite":{"t1":0.2,"s1":0.1,"t2":0.8,"s2":0.1}}"#).unwrap();
        assert_eq!(cfg.filter, FilterThresholds::default());
        assert_eq!(cfg.overwrite.t1, 0.2);
    }

    fn hundred() -> Dataset {
        let examples = (0..100)
            .map(|i| LabeledExample::with_features(format!("e{i}"), vec![i as f64], i % 2))
            .collect();
        Dataset::new(2, None, examples).unwrap()
    }

    #[test]
    fn apply_removals_and_overwrites() {
        let ds = hundred();
        let removes: Vec<Decision> = (0..7).map(|i| Decision::new(&format!("e{i}"), Verdict::Remove, Rule::FilterPositive)).collect();
        let (cleaned, report) = apply_decisions(&ds, &removes, ApplyMode::FilterOnly).unwrap();
        assert_eq!((cleaned.len(), report.kept, report.removed), (93, 93, 7));

        let flips: Vec<Decision> = (0..7)
            .map(|i| Decision::new(&format!("e{i}"), Verdict::Overwrite(1 - i % 2), Rule::OverwritePositive))
            .collect();
        let (cleaned, report) = apply_decisions(&ds, &flips, ApplyMode::Overwrite).unwrap();
        assert_eq!((cleaned.len(), report.kept, report.overwritten), (100, 100, 7));
        let changed = cleaned.examples().iter().zip(ds.examples()).filter(|(a, b)| a.label != b.label).count();
        assert_eq!(changed, 7);

        assert!(apply_decisions(&ds, &flips, ApplyMode::FilterOnly).is_err());
    }

    #[test]
    fn apply_errors() {
        let ds = hundred();
        let unknown = [Decision::keep("nope")];
        assert!(matches!(apply_decisions(&ds, &unknown, ApplyMode::Overwrite), Err(Error::UnknownId(_))));
        let dup = [Decision::keep("e1"), Decision::keep("e1")];
        assert!(matches!(apply_decisions(&ds, &dup, ApplyMode::Overwrite), Err(Error::DuplicateId(_))));
        let same = [Decision::new("e1", Verdict::Overwrite(1), Rule::OverwriteNegative)];
        assert!(apply_decisions(&ds, &same, ApplyMode::Overwrite).is_err());
    }

    #[test]
    fn decision_record_format() {
        let d = Decision::new("a", Verdict::Overwrite(0), Rule::OverwritePositive);
        let json = serde_json::to_string(&d).unwrap();
        assert_eq!(json, r#"{"example_id":"a","verdict":"overwrite","new_label":0,"rule":"overwrite_positive"}"#);
        assert_eq!(serde_json::from_str::<Decision>(&json).unwrap(), d);
        let keep = serde_json::to_string(&Decision::keep("b")).unwrap();
        assert_eq!(keep, r#"{"example_id":"b","verdict":"keep","rule":"none"}"#);
        assert!(serde_json::from_str::<Decision>(r#"{"example_id":"a","verdict":"overwrite","rule":"none"}"#).is_err());
    }
}
