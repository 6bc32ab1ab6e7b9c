//! Synthetic blobs, controlled label-noise injection, and detection scoring
//! against the injected ground truth.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabeledExample};
use crate::error::{Error, Result};
use crate::policy::{Decision, Verdict};
use crate::seed;

/// Isotropic Gaussian blobs. Example `i` belongs to class `i % class_count`,
/// so the first `n % class_count` classes get one extra example. Labels and
/// gold labels both equal the generating class.
pub fn make_blobs(
    n: usize,
    d: usize,
    class_count: usize,
    centers: &[Vec<f64>],
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if d == 0 || class_count == 0 {
        return Err(Error::InvalidArgument("blobs need d >= 1 and class_count >= 1".into()));
    }
    if centers.len() != class_count {
        return Err(Error::InvalidArgument(format!(
            "{} centers for {class_count} classes",
            centers.len()
        )));
    }
    if let Some(c) = centers.iter().find(|c| c.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, found: c.len() });
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidArgument(format!("spread {spread} must be non-negative")));
    }
    let width = n.to_string().len();
    let mut rng = seed::rng(seed);
    let examples = (0..n)
        .map(|i| {
            let class = i % class_count;
            let features = centers[class]
                .iter()
                .map(|c| {
                    let z: f64 = rng.sample(StandardNormal);
                    c + spread * z
                })
                .collect();
            let mut e = LabeledExample::with_features(format!("b{i:0width$}"), features, class);
            e.gold_label = Some(class);
            e
        })
        .collect();
    Dataset::new(class_count, None, examples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(NoiseKind::Symmetric),
            "asymmetric" => Ok(NoiseKind::Asymmetric),
            other => Err(Error::InvalidConfig(format!("unknown noise kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub rate: f64,
    pub kind: NoiseKind,
    /// Row `c` is the distribution of the corrupted label for class `c`.
    /// An all-zero row marks a class that is never corrupted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub seed: u64,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64, seed: u64) -> Self {
        NoiseSpec {
            rate,
            kind: NoiseKind::Symmetric,
            transition: None,
            seed,
        }
    }

    pub fn asymmetric(rate: f64, transition: Vec<Vec<f64>>, seed: u64) -> Self {
        NoiseSpec {
            rate,
            kind: NoiseKind::Asymmetric,
            transition: Some(transition),
            seed,
        }
    }

    pub fn validate(&self, class_count: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::InvalidArgument(format!("noise rate {} outside [0, 1)", self.rate)));
        }
        if self.kind == NoiseKind::Symmetric {
            return Ok(());
        }
        let matrix = self
            .transition
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("asymmetric noise needs a transition matrix".into()))?;
        if matrix.len() != class_count || matrix.iter().any(|r| r.len() != class_count) {
            return Err(Error::InvalidArgument(format!(
                "transition matrix must be {class_count}x{class_count}"
            )));
        }
        for (c, row) in matrix.iter().enumerate() {
            if row[c] != 0.0 {
                return Err(Error::InvalidArgument(format!("transition[{c}][{c}] must be zero")));
            }
            if row.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
                return Err(Error::InvalidArgument(format!("transition row {c} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if sum != 0.0 && (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "transition row {c} sums to {sum}, expected 1 (or 0 for an uncorrupted class)"
                )));
            }
        }
        Ok(())
    }
}

/// Ground truth of an injection run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseMask {
    pub corrupted_ids: BTreeSet<String>,
    pub original_label_of: BTreeMap<String, usize>,
}

impl NoiseMask {
    /// Mask of every example whose label differs from its gold label.
    pub fn from_gold(dataset: &Dataset) -> Result<Self> {
        let mut mask = NoiseMask::default();
        for e in dataset.examples() {
            let gold = e
                .gold_label
                .ok_or_else(|| Error::InvalidArgument(format!("example {:?} has no gold label", e.id)))?;
            if gold != e.label {
                mask.corrupted_ids.insert(e.id.clone());
                mask.original_label_of.insert(e.id.clone(), gold);
            }
        }
        Ok(mask)
    }

    pub fn len(&self) -> usize {
        self.corrupted_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corrupted_ids.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self).expect("mask serializes");
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed { line: e.line(), message: e.to_string() })
    }
}

/// Corrupts exactly `floor(rate * n)` labels chosen uniformly (by seed) among
/// the eligible examples. Symmetric noise picks uniformly among the other
/// classes; asymmetric noise draws from the transition row of the current
/// label, and only classes with a non-zero row are eligible.
pub fn inject_noise(dataset: &Dataset, spec: &NoiseSpec) -> Result<(Dataset, NoiseMask)> {
    let class_count = dataset.class_count();
    spec.validate(class_count)?;
    if !dataset.has_gold_labels() {
        return Err(Error::InvalidArgument("noise injection needs gold labels".into()));
    }
    let n = dataset.len();
    // 1e-9 keeps products like 0.3 * 1000 from flooring to 299
    let count = (spec.rate * n as f64 + 1e-9).floor() as usize;
    if count == 0 {
        return Ok((dataset.clone(), NoiseMask::default()));
    }
    if class_count < 2 {
        return Err(Error::InvalidArgument("label noise needs at least 2 classes".into()));
    }

    let samplers: Option<Vec<Option<WeightedIndex<f64>>>> = spec.transition.as_ref().map(|matrix| {
        matrix
            .iter()
            .map(|row| WeightedIndex::new(row).ok())
            .collect()
    });
    let samplers = match spec.kind {
        NoiseKind::Symmetric => None,
        NoiseKind::Asymmetric => samplers,
    };
    let eligible: Vec<usize> = dataset
        .examples()
        .iter()
        .enumerate()
        .filter(|(_, e)| samplers.as_ref().is_none_or(|s| s[e.label].is_some()))
        .map(|(i, _)| i)
        .collect();
    if count > eligible.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot corrupt {count} labels: only {} examples are eligible",
            eligible.len()
        )));
    }

    let mut rng = seed::rng(spec.seed);
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), count)
        .into_iter()
        .map(|j| eligible[j])
        .collect();
    chosen.sort_unstable();

    let mut examples = dataset.examples().to_vec();
    let mut mask = NoiseMask::default();
    for i in chosen {
        let e = &mut examples[i];
        let original = e.label;
        let corrupted = match &samplers {
            None => {
                let r = rng.random_range(0..class_count - 1);
                if r >= original {
                    r + 1
                } else {
                    r
                }
            }
            Some(s) => s[original].as_ref().expect("eligible rows are non-zero").sample(&mut rng),
        };
        debug_assert_ne!(corrupted, original);
        e.label = corrupted;
        mask.corrupted_ids.insert(e.id.clone());
        mask.original_label_of.insert(e.id.clone(), original);
    }
    Ok((dataset.with_examples(examples)?, mask))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub flagged: usize,
    pub corrupted: usize,
    pub true_positives: usize,
    /// 1 when nothing is flagged.
    pub precision: f64,
    /// 0 when nothing is corrupted.
    pub recall: f64,
    pub f1: f64,
    pub overwrites: usize,
    /// Fraction of overwrites restoring the original label; `None` without
    /// overwrites.
    pub overwrite_accuracy: Option<f64>,
}

/// Scores decisions against the injected corruption. Every corrupted id must
/// have a decision.
pub fn detection_scores(decisions: &[Decision], mask: &NoiseMask) -> Result<DetectionReport> {
    let mut by_id: HashMap<&str, Verdict> = HashMap::with_capacity(decisions.len());
    for d in decisions {
        if by_id.insert(&d.example_id, d.verdict).is_some() {
            return Err(Error::DuplicateId(d.example_id.clone()));
        }
    }
    if let Some(missing) = mask.corrupted_ids.iter().find(|id| !by_id.contains_key(id.as_str())) {
        return Err(Error::UnknownId(missing.clone()));
    }
    let mut flagged = 0;
    let mut true_positives = 0;
    let mut overwrites = 0;
    let mut restored = 0;
    for d in decisions {
        if !d.verdict.is_flagged() {
            continue;
        }
        flagged += 1;
        if mask.corrupted_ids.contains(&d.example_id) {
            true_positives += 1;
        }
        if let Verdict::Overwrite(label) = d.verdict {
            overwrites += 1;
            if mask.original_label_of.get(&d.example_id) == Some(&label) {
                restored += 1;
            }
        }
    }
    let corrupted = mask.len();
    let precision = if flagged == 0 { 1.0 } else { true_positives as f64 / flagged as f64 };
    let recall = if corrupted == 0 { 0.0 } else { true_positives as f64 / corrupted as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(DetectionReport {
        flagged,
        corrupted,
        true_positives,
        precision,
        recall,
        f1,
        overwrites,
        overwrite_accuracy: (overwrites > 0).then(|| restored as f64 / overwrites as f64),
    })
}

/// Noise block of a scenario; `seed` defaults to one derived from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioNoise {
    pub rate: f64,
    pub kind: NoiseKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Benchmark geometry plus held-out split sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n: usize,
    pub d: usize,
    pub class_count: usize,
    pub centers: Vec<Vec<f64>>,
    pub spread: f64,
    pub noise: ScenarioNoise,
    #[serde(default = "default_dev_size")]
    pub dev_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

fn default_dev_size() -> usize {
    200
}

fn default_test_size() -> usize {
    500
}

impl Default for ScenarioConfig {
    /// Two 2-D classes at (-2, 0) and (2, 0), spread 1, 30% symmetric noise.
    fn default() -> Self {
        ScenarioConfig {
            n: 2000,
            d: 2,
            class_count: 2,
            centers: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            spread: 1.0,
            noise: ScenarioNoise {
                rate: 0.3,
                kind: NoiseKind::Symmetric,
                transition: None,
                seed: None,
            },
            dev_size: default_dev_size(),
            test_size: default_test_size(),
        }
    }
}
