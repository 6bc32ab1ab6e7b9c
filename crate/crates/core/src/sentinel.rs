//! Sentinel distributions: out-of-fold cross-validation over the noisy data,
//! or an external model's prediction dump mapped onto the target label space.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset, ExampleView, PredictiveDistribution, PROB_TOLERANCE};
use crate::error::{Error, Result};
use crate::mlp::{Model, ModelSpec, TrainConfig};
use crate::seed;

pub const DEFAULT_FOLDS: usize = 5;

const SHUFFLE_STREAM: u64 = 0x5EED_F01D;
const INIT_STREAM: u64 = 1 << 32;
const MCD_STREAM: u64 = 2 << 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.fold_of.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Ids the fold-`fold` model was trained on.
    pub fn training_ids(&self, fold: usize) -> impl Iterator<Item = &str> + '_ {
        self.fold_of
            .iter()
            .filter(move |(_, &f)| f != fold)
            .map(|(id, _)| id.as_str())
    }
}

/// Out-of-fold MCD distributions, one per example in dataset order.
///
/// Examples are shuffled by `seed` and dealt round-robin into `k` folds. The
/// fold-`f` model starts from `mix(seed, 2^32 + f)`, trains with
/// `mix(train_config.seed, f)`, and example `i` of the held-out fold gets MCD
/// seed `mix(mix(seed, 2^33 + f), i)`.
pub fn build_cv_sentinel(
    dataset: &Dataset,
    k: usize,
    model_spec: &ModelSpec,
    train_config: &TrainConfig,
    passes: usize,
    seed: u64,
) -> Result<(Vec<PredictiveDistribution>, FoldAssignment)> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("fold count {k} below 2")));
    }
    if dataset.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{k} folds for {} examples",
            dataset.len()
        )));
    }
    model_spec.validate()?;
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::mix(seed, SHUFFLE_STREAM)));
    let mut fold_by_index = vec![0; n];
    for (position, &i) in order.iter().enumerate() {
        fold_by_index[i] = position % k;
    }

    let views: Vec<ExampleView<'_>> = dataset.views().collect();
    let mut dists: Vec<Option<PredictiveDistribution>> = vec![None; n];
    for fold in 0..k {
        let train: Vec<ExampleView<'_>> = views
            .iter()
            .zip(&fold_by_index)
            .filter(|(_, &f)| f != fold)
            .map(|(v, _)| *v)
            .collect();
        let config = TrainConfig {
            seed: seed::mix(train_config.seed, fold as u64),
            ..train_config.clone()
        };
        let model = Model::init(model_spec.clone(), seed::mix(seed, INIT_STREAM + fold as u64))?
            .train(&train, &config)?;
        let mcd_seed = seed::mix(seed, MCD_STREAM + fold as u64);
        for (i, view) in views.iter().enumerate().filter(|(i, _)| fold_by_index[*i] == fold) {
            let features = view.features().ok_or_else(|| {
                Error::InvalidArgument(format!("example {:?} has no features", view.id))
            })?;
            dists[i] = Some(model.mcd_predict(view.id, features, passes, seed::mix(mcd_seed, i as u64))?);
        }
    }

    let assignment = FoldAssignment {
        k,
        fold_of: views
            .iter()
            .zip(&fold_by_index)
            .map(|(v, &f)| (v.id.to_string(), f))
            .collect(),
    };
    Ok((dists.into_iter().map(|d| d.expect("every example is in one fold")).collect(), assignment))
}

/// Loads and validates an external prediction dump.
pub fn ingest_external_dump(
    path: impl AsRef<Path>,
    expected_passes: usize,
    expected_classes: usize,
) -> Result<Vec<PredictiveDistribution>> {
    let dists = dataset::load_distributions(path)?;
    check_dump(&dists, expected_passes, expected_classes)?;
    Ok(dists)
}

pub fn check_dump(
    dists: &[PredictiveDistribution],
    expected_passes: usize,
    expected_classes: usize,
) -> Result<()> {
    let mut seen = HashSet::new();
    for dist in dists {
        let id = &dist.example_id;
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
        if dist.pass_count() != expected_passes {
            return Err(Error::RecordMismatch {
                id: id.clone(),
                message: format!("{} passes, expected {expected_passes}", dist.pass_count()),
            });
        }
        if let Some(row) = dist.passes.iter().position(|r| r.len() != expected_classes) {
            return Err(Error::RecordMismatch {
                id: id.clone(),
                message: format!(
                    "row {row} has {} classes, expected {expected_classes}",
                    dist.passes[row].len()
                ),
            });
        }
        dataset::validate_distribution(dist).map_err(|e| Error::InRecord {
            id: id.clone(),
            source: Box::new(e),
        })?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    SupportsPositive,
    SupportsNegative,
    Abstain,
}

/// Assigns each sentinel class a role relative to the target's positive label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSpaceMapping {
    pub classes: Vec<String>,
    pub roles: Vec<Role>,
}

impl LabelSpaceMapping {
    pub fn new(classes: Vec<String>, roles: Vec<Role>) -> Result<Self> {
        let mapping = LabelSpaceMapping { classes, roles };
        mapping.validate()?;
        Ok(mapping)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() != self.roles.len() {
            return Err(Error::InvalidConfig(format!(
                "{} classes but {} roles",
                self.classes.len(),
                self.roles.len()
            )));
        }
        for needed in [Role::SupportsPositive, Role::SupportsNegative] {
            if !self.roles.contains(&needed) {
                return Err(Error::InvalidConfig(format!("mapping has no {needed:?} class")));
            }
        }
        Ok(())
    }

    /// Entailment sentinel over (entailment, neutral, contradiction).
    pub fn entailment() -> Self {
        LabelSpaceMapping {
            classes: vec!["entailment".into(), "neutral".into(), "contradiction".into()],
            roles: vec![Role::SupportsPositive, Role::Abstain, Role::SupportsNegative],
        }
    }

    /// A sentinel sharing the binary target space: class 0 negative, class 1
    /// positive.
    pub fn binary() -> Self {
        LabelSpaceMapping {
            classes: vec!["negative".into(), "positive".into()],
            roles: vec![Role::SupportsNegative, Role::SupportsPositive],
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mapping: LabelSpaceMapping = serde_json::from_str(&text)
            .map_err(|e| Error::Malformed { line: e.line(), message: e.to_string() })?;
        mapping.validate()?;
        Ok(mapping)
    }
}

/// Per-pass evidence mass `[supports_positive, supports_negative]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Evidence {
    pub example_id: String,
    pub passes: Vec<[f64; 2]>,
}

/// Sums sentinel class mass by role. Abstain mass is dropped and rows are
/// not renormalized.
pub fn map_to_evidence(dist: &PredictiveDistribution, mapping: &LabelSpaceMapping) -> Result<Evidence> {
    let width = mapping.roles.len();
    if let Some(row) = dist.passes.iter().find(|r| r.len() != width) {
        return Err(Error::DimensionMismatch {
            expected: width,
            found: row.len(),
        });
    }
    let passes = dist
        .passes
        .iter()
        .map(|row| {
            let mut mass = [0.0; 2];
            for (p, role) in row.iter().zip(&mapping.roles) {
                match role {
                    Role::SupportsPositive => mass[0] += p,
                    Role::SupportsNegative => mass[1] += p,
                    Role::Abstain => {}
                }
            }
            debug_assert!(mass[0] + mass[1] <= 1.0 + PROB_TOLERANCE);
            mass
        })
        .collect();
    Ok(Evidence {
        example_id: dist.example_id.clone(),
        passes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LabeledExample;

    fn spec() -> ModelSpec {
        ModelSpec {
            input_dim: 2,
            hidden_dims: vec![4],
            class_count: 2,
            dropout_rate: 0.1,
        }
    }

    fn data(n: usize) -> Dataset {
        let examples = (0..n)
            .map(|i| {
                let x = i as f64 / n as f64;
                LabeledExample::with_features(format!("e{i}"), vec![x, 1.0 - x], i % 2)
            })
            .collect();
        Dataset::new(2, None, examples).unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig { epochs: 2, ..TrainConfig::default() }
    }

    #[test]
    fn folds_are_balanced_and_out_of_fold() {
        let ds = data(100);
        let (dists, folds) = build_cv_sentinel(&ds, 5, &spec(), &quick(), 3, 1).unwrap();
        assert_eq!(folds.fold_sizes(), vec![20; 5]);
        assert_eq!(dists.len(), 100);
        for (example, dist) in ds.examples().iter().zip(&dists) {
            assert_eq!(example.id, dist.example_id);
            let f = folds.fold_of[&example.id];
            assert!(folds.training_ids(f).all(|id| id != example.id));
            assert_eq!(folds.training_ids(f).count(), 80);
        }
    }

    #[test]
    fn near_equal_split_of_three() {
        let (_, folds) = build_cv_sentinel(&data(3), 2, &spec(), &quick(), 2, 4).unwrap();
        let mut sizes = folds.fold_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![1, 2]);
    }

    #[test]
    fn cv_is_deterministic() {
        let ds = data(30);
        let a = build_cv_sentinel(&ds, 3, &spec(), &quick(), 4, 8).unwrap();
        let b = build_cv_sentinel(&ds, 3, &spec(), &quick(), 4, 8).unwrap();
        assert_eq!(a, b);
        let c = build_cv_sentinel(&ds, 3, &spec(), &quick(), 4, 9).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn cv_argument_errors() {
        assert!(build_cv_sentinel(&data(3), 4, &spec(), &quick(), 2, 0).is_err());
        assert!(build_cv_sentinel(&data(3), 1, &spec(), &quick(), 2, 0).is_err());
    }

    fn write_dump(lines: &[&str]) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    fn record(id: &str, rows: usize, row: &str) -> String {
        let rows = vec![row; rows].join(",");
        format!("{{\"example_id\":\"{id}\",\"passes\":[{rows}]}}")
    }

    #[test]
    fn ingest_valid_dump() {
        let f = write_dump(&[&record("a", 10, "[0.2,0.3,0.5]"), &record("b", 10, "[0.6,0.3,0.1]")]);
        let dists = ingest_external_dump(f.path(), 10, 3).unwrap();
        assert_eq!(dists.len(), 2);
    }

    #[test]
    fn ingest_pass_count_mismatch_names_id() {
        let f = write_dump(&[&record("a", 10, "[0.2,0.3,0.5]"), &record("short", 9, "[0.2,0.3,0.5]")]);
        let err = ingest_external_dump(f.path(), 10, 3).unwrap_err();
        assert!(matches!(&err, Error::RecordMismatch { id, .. } if id == "short"), "{err}");
    }

    #[test]
    fn ingest_row_sum_violation() {
        let f = write_dump(&[&record("a", 10, "[0.2,0.3,0.3]")]);
        match ingest_external_dump(f.path(), 10, 3).unwrap_err() {
            Error::InRecord { id, source } => {
                assert_eq!(id, "a");
                assert!(matches!(*source, Error::RowSum { row: 0, .. }));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn entailment_mapping_sums_mass() {
        let m = LabelSpaceMapping::entailment();
        let d = PredictiveDistribution::new("a", vec![vec![0.7, 0.2, 0.1], vec![0.0, 1.0, 0.0]]);
        let e = map_to_evidence(&d, &m).unwrap();
        assert_eq!(e.passes[0], [0.7, 0.1]);
        assert_eq!(e.passes[1], [0.0, 0.0]);
    }

    #[test]
    fn identity_mapping_on_binary() {
        let m = LabelSpaceMapping::new(
            vec!["pos".into(), "neg".into()],
            vec![Role::SupportsPositive, Role::SupportsNegative],
        )
        .unwrap();
        let rows = vec![vec![0.25, 0.75], vec![0.6, 0.4]];
        let e = map_to_evidence(&PredictiveDistribution::new("a", rows.clone()), &m).unwrap();
        let back: Vec<Vec<f64>> = e.passes.iter().map(|p| p.to_vec()).collect();
        assert_eq!(back, rows);
    }

    #[test]
    fn mapping_validation() {
        assert!(LabelSpaceMapping::new(vec!["a".into()], vec![Role::SupportsPositive]).is_err());
        assert!(LabelSpaceMapping::new(vec!["a".into(), "b".into()], vec![Role::Abstain]).is_err());
        let json = r#"{"classes": ["entailment","neutral","contradiction"], "roles": ["supports_positive","abstain","supports_negative"]}"#;
        let parsed: LabelSpaceMapping = serde_json::from_str(json).unwrap();
        assert_eq!(parsed, LabelSpaceMapping::entailment());
        let d = PredictiveDistribution::new("a", vec![vec![0.5, 0.5]]);
        assert!(matches!(map_to_evidence(&d, &parsed), Err(Error::DimensionMismatch { .. })));
    }
}
