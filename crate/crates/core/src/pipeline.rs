//! End-to-end workflow: sentinel, MCD uncertainty, decisions, cleaning,
//! retraining, and evaluation, plus the dev-set threshold sweep.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset, ExampleView, PredictiveDistribution, Schema};
use crate::error::{Error, Result, StageContext};
use crate::evalmetrics::{classification_metrics, ClassificationMetrics, ScoredPrediction};
use crate::mlp::{argmax, Model, ModelSpec, TrainConfig};
use crate::noisebench::{self, DetectionReport, NoiseKind, NoiseMask, NoiseSpec, ScenarioConfig};
use crate::policy::{
    self, ApplyMode, ApplyReport, BinaryLabel, Decision, FilterThresholds, OverwriteThresholds, Policy,
    PolicyKind, QuantileThresholds,
};
use crate::seed;
use crate::sentinel::{self, FoldAssignment, LabelSpaceMapping, DEFAULT_FOLDS};
use crate::uncertainty::{self, EvidenceSummary, SummaryRecord, UncertaintySummary};

const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_DEV_DATA: u64 = 2;
const STREAM_TEST_DATA: u64 = 3;
const STREAM_TRAIN_NOISE: u64 = 4;
const STREAM_DEV_NOISE: u64 = 5;
const STREAM_SENTINEL: u64 = 6;
const STREAM_TRAINING: u64 = 7;
const STREAM_TARGET_INIT: u64 = 8;

pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const CLEANED_FILE: &str = "cleaned.jsonl";
pub const SUMMARIES_FILE: &str = "summaries.jsonl";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const NOISY_FILE: &str = "noisy.jsonl";
pub const MASK_FILE: &str = "mask.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    pub hidden_dims: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            hidden_dims: vec![16],
            dropout_rate: 0.1,
        }
    }
}

/// Optimizer settings; the training seed is derived from the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSettings {
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub dataset: PathBuf,
    /// Dev split with gold labels, used by the sweep.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    /// Held-out clean split for evaluating retrained models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Benchmark(ScenarioConfig),
    Files(FileData),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvSentinel {
    #[serde(default = "default_folds")]
    pub folds: usize,
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSentinel {
    /// Distribution records covering the dataset (and dev split, if any).
    pub dump: PathBuf,
    /// Class-role mapping for the filter policy; binary when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mapping: Option<PathBuf>,
}

/// Exactly one of `cv` or `external`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SentinelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cv: Option<CvSentinel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external: Option<ExternalSentinel>,
}

impl Default for SentinelConfig {
    fn default() -> Self {
        SentinelConfig {
            cv: Some(CvSentinel { folds: DEFAULT_FOLDS }),
            external: None,
        }
    }
}

/// Policy kind plus at most the matching threshold section; a missing section
/// takes the default thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<FilterThresholds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overwrite: Option<OverwriteThresholds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantile: Option<QuantileThresholds>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::Overwrite,
            filter: None,
            overwrite: None,
            quantile: None,
        }
    }
}

impl PolicyConfig {
    pub fn policy(&self) -> Result<Policy> {
        let present: Vec<PolicyKind> = [
            self.filter.is_some().then_some(PolicyKind::Filter),
            self.overwrite.is_some().then_some(PolicyKind::Overwrite),
            self.quantile.is_some().then_some(PolicyKind::Quantile),
        ]
        .into_iter()
        .flatten()
        .collect();
        if let Some(other) = present.iter().find(|k| **k != self.kind) {
            return Err(Error::InvalidConfig(format!(
                "policy kind {} but a {other} threshold section is present",
                self.kind
            )));
        }
        let policy = match self.kind {
            PolicyKind::Filter => Policy::Filter(self.filter.unwrap_or_default()),
            PolicyKind::Overwrite => Policy::Overwrite(self.overwrite.unwrap_or_default()),
            PolicyKind::Quantile => Policy::Quantile(self.quantile.clone().unwrap_or_default()),
        };
        policy.validate()?;
        Ok(policy)
    }
}

fn tenths() -> Vec<f64> {
    vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.75, 0.8, 0.9]
}

fn std_grid() -> Vec<f64> {
    vec![0.05, 0.1, 0.15, 0.2, 0.3, 0.5]
}

/// Candidate values per threshold. Only the fields of the active policy are
/// swept; invalid combinations (e.g. overwrite `t1 >= t2`) are skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default = "tenths")]
    pub t1: Vec<f64>,
    #[serde(default = "std_grid")]
    pub s1: Vec<f64>,
    #[serde(default = "tenths")]
    pub t2: Vec<f64>,
    #[serde(default = "std_grid")]
    pub s2: Vec<f64>,
    #[serde(default = "upper_quantiles")]
    pub q1: Vec<f64>,
    #[serde(default = "lower_quantiles")]
    pub q2: Vec<f64>,
}

fn upper_quantiles() -> Vec<f64> {
    vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
}

fn lower_quantiles() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4]
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            t1: tenths(),
            s1: std_grid(),
            t2: tenths(),
            s2: std_grid(),
            q1: upper_quantiles(),
            q2: lower_quantiles(),
        }
    }
}

impl SweepGrid {
    /// Valid grid points for the policy kind of `base`, in lexicographic
    /// threshold order.
    pub fn points(&self, base: &Policy) -> Vec<Policy> {
        let mut out = Vec::new();
        match base {
            Policy::Filter(_) | Policy::Overwrite(_) => {
                for &t1 in &self.t1 {
                    for &s1 in &self.s1 {
                        for &t2 in &self.t2 {
                            for &s2 in &self.s2 {
                                out.push(match base {
                                    Policy::Filter(_) => Policy::Filter(FilterThresholds { t1, s1, t2, s2 }),
                                    _ => Policy::Overwrite(OverwriteThresholds { t1, s1, t2, s2 }),
                                });
                            }
                        }
                    }
                }
            }
            Policy::Quantile(q) => {
                for &q1 in &self.q1 {
                    for &q2 in &self.q2 {
                        out.push(Policy::Quantile(QuantileThresholds { q1, q2, ..q.clone() }));
                    }
                }
            }
        }
        out.retain(|p| p.validate().is_ok());
        out.sort_by(|a, b| lexicographic(&a.threshold_vector(), &b.threshold_vector()));
        out.dedup();
        out
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub train: TrainSettings,
    /// MCD forward passes `T`.
    #[serde(default = "default_passes")]
    pub passes: usize,
    #[serde(default)]
    pub sentinel: SentinelConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    /// When present, thresholds are chosen on the dev split instead of taken
    /// from `policy`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
}

fn default_passes() -> usize {
    10
}

impl PipelineConfig {
    pub fn benchmark(scenario: ScenarioConfig) -> Self {
        PipelineConfig {
            seed: 0,
            data: DataConfig::Benchmark(scenario),
            output_dir: None,
            model: ModelSettings::default(),
            train: TrainSettings::default(),
            passes: default_passes(),
            sentinel: SentinelConfig::default(),
            policy: PolicyConfig::default(),
            sweep: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: PipelineConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", e.line())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.sentinel.cv, &self.sentinel.external) {
            (Some(_), Some(_)) => {
                return Err(Error::InvalidConfig(
                    "sentinel must be either cv or external, not both".into(),
                ))
            }
            (None, None) => return Err(Error::InvalidConfig("no sentinel source configured".into())),
            (Some(cv), None) if cv.folds < 2 => {
                return Err(Error::InvalidConfig(format!("fold count {} below 2", cv.folds)))
            }
            _ => {}
        }
        if self.passes == 0 {
            return Err(Error::InvalidConfig("passes must be at least 1".into()));
        }
        self.policy.policy()?;
        self.train_config().validate()?;
        if !(0.0..1.0).contains(&self.model.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout {} outside [0, 1)",
                self.model.dropout_rate
            )));
        }
        if let Some(grid) = &self.sweep {
            if grid.points(&self.policy.policy()?).is_empty() {
                return Err(Error::InvalidConfig("sweep grid has no valid points".into()));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: seed::mix(self.seed, STREAM_TRAINING),
        }
    }

    pub fn model_spec(&self, input_dim: usize, class_count: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            hidden_dims: self.model.hidden_dims.clone(),
            class_count,
            dropout_rate: self.model.dropout_rate,
        }
    }
}

/// Command-line overrides; each set field replaces the config value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub passes: Option<usize>,
    pub dropout: Option<f64>,
    pub folds: Option<usize>,
    pub policy: Option<PolicyKind>,
    pub t1: Option<f64>,
    pub s1: Option<f64>,
    pub t2: Option<f64>,
    pub s2: Option<f64>,
    pub q1: Option<f64>,
    pub q2: Option<f64>,
    pub noise_rate: Option<f64>,
    pub noise_kind: Option<NoiseKind>,
    pub sentinel: Option<SentinelKind>,
    pub dump: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SentinelKind {
    Cv,
    External,
}

impl FromStr for SentinelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cv" => Ok(SentinelKind::Cv),
            "external" => Ok(SentinelKind::External),
            other => Err(Error::InvalidConfig(format!("unknown sentinel {other:?}"))),
        }
    }
}

impl Overrides {
    pub fn apply(&self, config: &mut PipelineConfig) -> Result<()> {
        if let Some(path) = &self.dataset {
            match &mut config.data {
                DataConfig::Files(files) => files.dataset = path.clone(),
                DataConfig::Benchmark(_) => {
                    config.data = DataConfig::Files(FileData {
                        dataset: path.clone(),
                        dev: None,
                        test: None,
                    })
                }
            }
        }
        if let Some(out) = &self.out {
            config.output_dir = Some(out.clone());
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(passes) = self.passes {
            config.passes = passes;
        }
        if let Some(dropout) = self.dropout {
            config.model.dropout_rate = dropout;
        }
        match (self.sentinel, &self.dump) {
            (Some(SentinelKind::Cv), Some(_)) => {
                return Err(Error::InvalidConfig("--dump requires --sentinel external".into()))
            }
            (Some(SentinelKind::Cv), None) => {
                let folds = config.sentinel.cv.as_ref().map_or(DEFAULT_FOLDS, |c| c.folds);
                config.sentinel = SentinelConfig {
                    cv: Some(CvSentinel { folds }),
                    external: None,
                };
            }
            (Some(SentinelKind::External), dump) | (None, dump @ Some(_)) => {
                let existing = config.sentinel.external.clone();
                let dump = dump
                    .clone()
                    .or_else(|| existing.as_ref().map(|e| e.dump.clone()))
                    .ok_or_else(|| Error::InvalidConfig("external sentinel needs --dump".into()))?;
                config.sentinel = SentinelConfig {
                    cv: None,
                    external: Some(ExternalSentinel {
                        dump,
                        mapping: existing.and_then(|e| e.mapping),
                    }),
                };
            }
            (None, None) => {}
        }
        if let Some(folds) = self.folds {
            match &mut config.sentinel.cv {
                Some(cv) => cv.folds = folds,
                None => return Err(Error::InvalidConfig("--folds applies to the cv sentinel".into())),
            }
        }
        if let Some(kind) = self.policy {
            if kind != config.policy.kind {
                config.policy = PolicyConfig { kind, ..PolicyConfig::default() };
            }
        }
        let binary = [("--t1", self.t1), ("--s1", self.s1), ("--t2", self.t2), ("--s2", self.s2)];
        let quantile = [("--q1", self.q1), ("--q2", self.q2)];
        match config.policy.kind {
            PolicyKind::Filter | PolicyKind::Overwrite => {
                if let Some((flag, _)) = quantile.iter().find(|(_, v)| v.is_some()) {
                    return Err(Error::InvalidConfig(format!("{flag} applies to the quantile policy")));
                }
                let mut values = match config.policy.policy()? {
                    Policy::Filter(t) => [t.t1, t.s1, t.t2, t.s2],
                    Policy::Overwrite(t) => [t.t1, t.s1, t.t2, t.s2],
                    Policy::Quantile(_) => unreachable!(),
                };
                for (slot, (_, v)) in values.iter_mut().zip(binary) {
                    if let Some(v) = v {
                        *slot = v;
                    }
                }
                let [t1, s1, t2, s2] = values;
                if config.policy.kind == PolicyKind::Filter {
                    config.policy.filter = Some(FilterThresholds { t1, s1, t2, s2 });
                } else {
                    config.policy.overwrite = Some(OverwriteThresholds { t1, s1, t2, s2 });
                }
            }
            PolicyKind::Quantile => {
                if let Some((flag, _)) = binary.iter().find(|(_, v)| v.is_some()) {
                    return Err(Error::InvalidConfig(format!("{flag} does not apply to the quantile policy")));
                }
                let mut q = config.policy.quantile.clone().unwrap_or_default();
                q.q1 = self.q1.unwrap_or(q.q1);
                q.q2 = self.q2.unwrap_or(q.q2);
                config.policy.quantile = Some(q);
            }
        }
        if self.noise_rate.is_some() || self.noise_kind.is_some() {
            let DataConfig::Benchmark(scenario) = &mut config.data else {
                return Err(Error::InvalidConfig("noise flags apply to benchmark runs".into()));
            };
            if let Some(rate) = self.noise_rate {
                scenario.noise.rate = rate;
            }
            if let Some(kind) = self.noise_kind {
                scenario.noise.kind = kind;
            }
        }
        config.validate()
    }
}

/// Everything a policy may need about one example's sentinel output.
#[derive(Clone, Debug)]
pub struct SentinelSignal {
    pub dist: PredictiveDistribution,
    pub summary: UncertaintySummary,
    pub evidence: Option<EvidenceSummary>,
}

impl SentinelSignal {
    pub fn new(dist: PredictiveDistribution, mapping: Option<&LabelSpaceMapping>) -> Result<Self> {
        let evidence = mapping
            .map(|m| sentinel::map_to_evidence(&dist, m).map(|e| uncertainty::summarize_evidence(&e)))
            .transpose()?;
        Ok(SentinelSignal {
            summary: uncertainty::summarize(&dist),
            dist,
            evidence,
        })
    }
}

/// Runs `policy` on one example.
pub fn decide(policy: &Policy, signal: &SentinelSignal, label: usize) -> Result<Decision> {
    match policy {
        Policy::Filter(th) => {
            let evidence = signal
                .evidence
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("filter policy needs evidence channels".into()))?;
            policy::decide_filter(evidence, BinaryLabel::from_class(label)?, th)
        }
        Policy::Overwrite(th) => policy::decide_overwrite(&signal.summary, BinaryLabel::from_class(label)?, th),
        Policy::Quantile(th) => policy::decide_quantile(&signal.dist, label, th),
    }
}

pub fn decide_all(policy: &Policy, views: &[ExampleView<'_>], signals: &[SentinelSignal]) -> Result<Vec<Decision>> {
    views
        .iter()
        .zip(signals)
        .map(|(v, s)| {
            debug_assert_eq!(v.id, s.dist.example_id);
            decide(policy, s, v.label)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: Policy,
    pub flagged: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub best: Policy,
    pub best_index: usize,
    pub table: Vec<SweepRow>,
}

/// Scores every grid point on the dev split (flag = label differs from
/// gold) and picks the highest detection F1; ties go to fewer flags, then to
/// the lexicographically smallest thresholds.
pub fn sweep_thresholds(points: &[Policy], dev: &Dataset, signals: &[SentinelSignal]) -> Result<SweepResult> {
    if points.is_empty() {
        return Err(Error::InvalidConfig("empty sweep grid".into()));
    }
    if signals.len() != dev.len() {
        return Err(Error::InvalidArgument(format!(
            "{} sentinel signals for {} dev examples",
            signals.len(),
            dev.len()
        )));
    }
    let mask = NoiseMask::from_gold(dev)?;
    let views: Vec<ExampleView<'_>> = dev.views().collect();
    let mut table = Vec::with_capacity(points.len());
    for policy in points {
        policy.validate()?;
        let decisions = decide_all(policy, &views, signals)?;
        let r = noisebench::detection_scores(&decisions, &mask)?;
        table.push(SweepRow {
            policy: policy.clone(),
            flagged: r.flagged,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
        });
    }
    let best_index = (0..table.len())
        .min_by(|&a, &b| {
            let (ra, rb) = (&table[a], &table[b]);
            rb.f1
                .total_cmp(&ra.f1)
                .then(ra.flagged.cmp(&rb.flagged))
                .then_with(|| lexicographic(&ra.policy.threshold_vector(), &rb.policy.threshold_vector()))
        })
        .expect("non-empty grid");
    Ok(SweepResult {
        best: table[best_index].policy.clone(),
        best_index,
        table,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelEval {
    pub examples: usize,
    pub accuracy: f64,
    /// Binary tasks only; scores are positive-class probabilities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationMetrics>,
}

/// Evaluates against gold labels where present, else the recorded labels.
pub fn evaluate_model(model: &Model, data: &Dataset) -> Result<ModelEval> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut correct = 0usize;
    let mut scored = Vec::with_capacity(data.len());
    for e in data.examples() {
        let features = e
            .features()
            .ok_or_else(|| Error::InvalidArgument(format!("example {:?} has no features", e.id)))?;
        let probs = model.predict(features)?;
        let truth = e.gold_label.unwrap_or(e.label);
        correct += usize::from(argmax(&probs) == truth);
        if probs.len() == 2 {
            scored.push(ScoredPrediction::new(e.id.clone(), probs[1].clamp(0.0, 1.0), truth == 1));
        }
    }
    let classification = if scored.len() == data.len() && scored.iter().any(|p| p.gold) {
        Some(classification_metrics(&scored, 0.5)?)
    } else {
        None
    };
    Ok(ModelEval {
        examples: data.len(),
        accuracy: correct as f64 / data.len() as f64,
        classification,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    Config,
    Sweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentinelReport {
    pub kind: String,
    pub passes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_sizes: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    /// Unix seconds; the only field that varies between identical runs.
    pub generated_at: u64,
    pub config: PipelineConfig,
    pub train_config: TrainConfig,
    pub policy: Policy,
    pub threshold_source: ThresholdSource,
    pub sentinel: SentinelReport,
    pub apply: ApplyReport,
    pub rule_histogram: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<ModelEval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cleaned: Option<ModelEval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepResult>,
}

/// In-memory results of a run, before anything is written.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub report: PipelineReport,
    pub decisions: Vec<Decision>,
    pub summaries: Vec<SummaryRecord>,
    pub cleaned: Dataset,
    pub folds: Option<FoldAssignment>,
    /// Benchmark mode only.
    pub noisy: Option<Dataset>,
    pub mask: Option<NoiseMask>,
}

struct Splits {
    train: Dataset,
    dev: Option<Dataset>,
    test: Option<Dataset>,
    mask: Option<NoiseMask>,
    generated: bool,
}

fn load_splits(config: &PipelineConfig) -> Result<Splits> {
    match &config.data {
        DataConfig::Benchmark(s) => {
            let blobs = |n, stream| make_scenario_blobs(s, n, seed::mix(config.seed, stream));
            let train = blobs(s.n, STREAM_TRAIN_DATA)?;
            let dev = blobs(s.dev_size, STREAM_DEV_DATA)?;
            let test = blobs(s.test_size, STREAM_TEST_DATA)?;
            let noise_seed = s.noise.seed.unwrap_or_else(|| seed::mix(config.seed, STREAM_TRAIN_NOISE));
            let spec = |seed| NoiseSpec {
                rate: s.noise.rate,
                kind: s.noise.kind,
                transition: s.noise.transition.clone(),
                seed,
            };
            let (train, mask) = noisebench::inject_noise(&train, &spec(noise_seed))?;
            let (dev, _) = noisebench::inject_noise(&dev, &spec(seed::mix(noise_seed, STREAM_DEV_NOISE)))?;
            Ok(Splits {
                train,
                dev: (!dev.is_empty()).then_some(dev),
                test: (!test.is_empty()).then_some(test),
                mask: Some(mask),
                generated: true,
            })
        }
        DataConfig::Files(files) => {
            let train = dataset::load_dataset(&files.dataset, Schema::Features)?;
            let dev = files.dev.as_ref().map(|p| dataset::load_dataset(p, Schema::Features)).transpose()?;
            let test = files.test.as_ref().map(|p| dataset::load_dataset(p, Schema::Features)).transpose()?;
            let mask = if train.has_gold_labels() && !train.is_empty() {
                Some(NoiseMask::from_gold(&train)?)
            } else {
                None
            };
            Ok(Splits {
                train,
                dev,
                test,
                mask,
                generated: false,
            })
        }
    }
}

fn make_scenario_blobs(s: &ScenarioConfig, n: usize, seed: u64) -> Result<Dataset> {
    noisebench::make_blobs(n, s.d, s.class_count, &s.centers, s.spread, seed)
}

/// Dev examples get a `dev/` id prefix while they share a sentinel with the
/// training split.
const DEV_PREFIX: &str = "dev/";

fn combined_for_sentinel(train: &Dataset, dev: Option<&Dataset>) -> Result<Dataset> {
    let mut examples = train.examples().to_vec();
    if let Some(dev) = dev {
        examples.extend(dev.examples().iter().map(|e| {
            let mut e = e.clone();
            e.id = format!("{DEV_PREFIX}{}", e.id);
            e
        }));
    }
    train.with_examples(examples)
}

/// Sentinel distributions for the train split and, if present, the dev split.
/// Train-side distributions, dev-side distributions, and the fold split when cross-validating.
type SentinelOutputs = (Vec<PredictiveDistribution>, Option<Vec<PredictiveDistribution>>, Option<FoldAssignment>);

fn sentinel_distributions(
    config: &PipelineConfig,
    train: &Dataset,
    dev: Option<&Dataset>,
    class_count: usize,
) -> Result<SentinelOutputs> {
    if let Some(cv) = &config.sentinel.cv {
        let combined = combined_for_sentinel(train, dev)?;
        let dim = combined
            .feature_dim()
            .ok_or_else(|| Error::InvalidArgument("cv sentinel needs feature data".into()))?;
        let spec = config.model_spec(dim, class_count);
        let (mut dists, folds) = sentinel::build_cv_sentinel(
            &combined,
            cv.folds,
            &spec,
            &config.train_config(),
            config.passes,
            seed::mix(config.seed, STREAM_SENTINEL),
        )?;
        let dev_dists = dev.map(|_| {
            let mut tail = dists.split_off(train.len());
            for d in &mut tail {
                d.example_id = d.example_id[DEV_PREFIX.len()..].to_string();
            }
            tail
        });
        return Ok((dists, dev_dists, Some(folds)));
    }

    let external = config.sentinel.external.as_ref().expect("validated sentinel");
    let train_dists = load_dump_for(config, train, &external.dump)?;
    let dev_dists = dev.map(|d| load_dump_for(config, d, &external.dump)).transpose()?;
    Ok((train_dists, dev_dists, None))
}

/// Evidence mapping for the filter policy: the configured file, else the
/// binary mapping.
pub fn mapping_for(config: &PipelineConfig, policy: &Policy) -> Result<Option<LabelSpaceMapping>> {
    if policy.kind() != PolicyKind::Filter {
        return Ok(None);
    }
    match config.sentinel.external.as_ref().and_then(|e| e.mapping.as_ref()) {
        Some(path) => LabelSpaceMapping::load(path).map(Some),
        None => Ok(Some(LabelSpaceMapping::binary())),
    }
}

pub fn signals_for(dists: Vec<PredictiveDistribution>, mapping: Option<&LabelSpaceMapping>) -> Result<Vec<SentinelSignal>> {
    dists.into_iter().map(|d| SentinelSignal::new(d, mapping)).collect()
}

/// Out-of-fold sentinel distributions for `data` under the config's cv
/// settings.
pub fn build_sentinel(config: &PipelineConfig, data: &Dataset) -> Result<(Vec<PredictiveDistribution>, FoldAssignment)> {
    let cv = config
        .sentinel
        .cv
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("building a sentinel needs the cv source".into()))?;
    let dim = data
        .feature_dim()
        .ok_or_else(|| Error::InvalidArgument("cv sentinel needs feature data".into()))?;
    sentinel::build_cv_sentinel(
        data,
        cv.folds,
        &config.model_spec(dim, data.class_count()),
        &config.train_config(),
        config.passes,
        seed::mix(config.seed, STREAM_SENTINEL),
    )
}

/// Sentinel records from `path`, checked against `T` and aligned with the
/// examples of `data`.
pub fn load_dump_for(config: &PipelineConfig, data: &Dataset, path: &Path) -> Result<Vec<PredictiveDistribution>> {
    let records = dataset::load_distributions(path)?;
    let classes = records.first().map_or(data.class_count(), PredictiveDistribution::class_count);
    sentinel::check_dump(&records, config.passes, classes)?;
    let mut by_id: HashMap<String, PredictiveDistribution> =
        records.into_iter().map(|d| (d.example_id.clone(), d)).collect();
    data.examples()
        .iter()
        .map(|e| {
            by_id.remove(&e.id).ok_or_else(|| Error::RecordMismatch {
                id: e.id.clone(),
                message: "no sentinel record in dump".into(),
            })
        })
        .collect()
}

/// Target model trained on `data`; every call with the same config starts
/// from the same initialization and shuffling.
pub fn train_target(config: &PipelineConfig, data: &Dataset) -> Result<Model> {
    let dim = data
        .feature_dim()
        .ok_or_else(|| Error::InvalidArgument("training needs feature data".into()))?;
    let views: Vec<ExampleView<'_>> = data.views().collect();
    Model::init(config.model_spec(dim, data.class_count()), seed::mix(config.seed, STREAM_TARGET_INIT))?
        .train(&views, &config.train_config())
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Runs the whole workflow in memory.
pub fn execute(config: &PipelineConfig) -> Result<PipelineRun> {
    config.validate()?;
    let splits = load_splits(config).stage("load data")?;
    let train = &splits.train;
    if train.is_empty() {
        return Err(Error::Empty("training dataset")).stage("load data");
    }
    let class_count = train.class_count();
    let base_policy = config.policy.policy()?;

    let (train_dists, dev_dists, folds) =
        sentinel_distributions(config, train, splits.dev.as_ref(), class_count).stage("sentinel")?;
    let mapping = mapping_for(config, &base_policy).stage("sentinel")?;
    let train_signals = signals_for(train_dists, mapping.as_ref()).stage("uncertainty")?;

    let (policy, threshold_source, sweep) = match &config.sweep {
        Some(grid) => {
            let dev = splits
                .dev
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("sweep needs a dev split".into()))
                .stage("sweep")?;
            let dev_signals = signals_for(dev_dists.expect("dev distributions"), mapping.as_ref()).stage("sweep")?;
            let result = sweep_thresholds(&grid.points(&base_policy), dev, &dev_signals).stage("sweep")?;
            (result.best.clone(), ThresholdSource::Sweep, Some(result))
        }
        None => (base_policy, ThresholdSource::Config, None),
    };

    let views: Vec<ExampleView<'_>> = train.views().collect();
    let decisions = decide_all(&policy, &views, &train_signals).stage("decide")?;
    let mode = match policy.kind() {
        PolicyKind::Overwrite => ApplyMode::Overwrite,
        PolicyKind::Filter | PolicyKind::Quantile => ApplyMode::FilterOnly,
    };
    let (cleaned, apply) = policy::apply_decisions(train, &decisions, mode).stage("apply")?;

    let train_config = config.train_config();
    let (baseline, cleaned_eval) = match &splits.test {
        Some(test) => {
            let noisy_model = train_target(config, train).stage("retrain")?;
            let cleaned_model = train_target(config, &cleaned).stage("retrain")?;
            (
                Some(evaluate_model(&noisy_model, test).stage("evaluate")?),
                Some(evaluate_model(&cleaned_model, test).stage("evaluate")?),
            )
        }
        None => (None, None),
    };

    let detection = splits
        .mask
        .as_ref()
        .map(|mask| noisebench::detection_scores(&decisions, mask))
        .transpose()
        .stage("detection")?;

    let mut rule_histogram = BTreeMap::new();
    for d in &decisions {
        *rule_histogram.entry(d.rule.as_str().to_string()).or_insert(0) += 1;
    }

    let report = PipelineReport {
        generated_at: now(),
        config: config.clone(),
        train_config,
        policy,
        threshold_source,
        sentinel: SentinelReport {
            kind: if config.sentinel.cv.is_some() { "cv".into() } else { "external".into() },
            passes: config.passes,
            fold_sizes: folds.as_ref().map(FoldAssignment::fold_sizes),
        },
        apply,
        rule_histogram,
        baseline,
        cleaned: cleaned_eval,
        detection,
        sweep,
    };
    Ok(PipelineRun {
        report,
        decisions,
        summaries: train_signals.iter().map(|s| SummaryRecord::from(&s.summary)).collect(),
        cleaned,
        folds,
        noisy: splits.generated.then(|| splits.train.clone()),
        mask: if splits.generated { splits.mask } else { None },
    })
}

/// Runs the workflow and writes its artifacts to `config.output_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport> {
    let run = execute(config)?;
    if let Some(dir) = &config.output_dir {
        write_run(&run, dir).stage("write outputs")?;
    }
    Ok(run.report)
}

pub fn write_run(run: &PipelineRun, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    dataset::save_jsonl(&run.decisions, dir.join(DECISIONS_FILE))?;
    dataset::save_dataset(&run.cleaned, dir.join(CLEANED_FILE))?;
    dataset::save_jsonl(&run.summaries, dir.join(SUMMARIES_FILE))?;
    if let (Some(noisy), Some(mask)) = (&run.noisy, &run.mask) {
        dataset::save_dataset(noisy, dir.join(NOISY_FILE))?;
        mask.save(dir.join(MASK_FILE))?;
    }
    for (format, name) in [(ReportFormat::Json, REPORT_JSON_FILE), (ReportFormat::Text, REPORT_TEXT_FILE)] {
        let path = dir.join(name);
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        emit_report(&run.report, format, std::io::BufWriter::new(file)).map_err(|e| match e {
            Error::Io { source, .. } => Error::io(&path, source),
            other => other,
        })?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Text,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "text" => Ok(ReportFormat::Text),
            other => Err(Error::InvalidConfig(format!("unknown format {other:?}"))),
        }
    }
}

pub fn emit_report<W: Write>(report: &PipelineReport, format: ReportFormat, mut out: W) -> Result<()> {
    let text = match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        ReportFormat::Text => render_text(report),
    };
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io("<report>", e))
}

fn thresholds_line(policy: &Policy) -> String {
    match policy {
        Policy::Filter(t) => format!("t1={} s1={} t2={} s2={}", t.t1, t.s1, t.t2, t.s2),
        Policy::Overwrite(t) => format!("t1={} s1={} t2={} s2={}", t.t1, t.s1, t.t2, t.s2),
        Policy::Quantile(t) => format!(
            "q1={} q2={} ordering={:?} good={:?} bad={:?}",
            t.q1, t.q2, t.ordering, t.good_set, t.bad_set
        ),
    }
}

fn render_text(r: &PipelineReport) -> String {
    let mut s = String::new();
    let source = match r.threshold_source {
        ThresholdSource::Config => "config",
        ThresholdSource::Sweep => "dev sweep",
    };
    let _ = writeln!(s, "ledo report (generated_at {})", r.generated_at);
    let _ = writeln!(s);
    let _ = writeln!(s, "policy: {} (thresholds from {source})", r.policy.kind());
    let _ = writeln!(s, "  {}", thresholds_line(&r.policy));
    let _ = write!(s, "sentinel: {}, T={}", r.sentinel.kind, r.sentinel.passes);
    if let Some(sizes) = &r.sentinel.fold_sizes {
        let _ = write!(s, ", fold sizes {sizes:?}");
    }
    let _ = writeln!(s);
    let t = &r.train_config;
    let _ = writeln!(
        s,
        "training: sgd lr={} epochs={} batch={} seed={}",
        t.learning_rate, t.epochs, t.batch_size, t.seed
    );
    let _ = writeln!(s);
    let a = &r.apply;
    let _ = writeln!(s, "examples: {}", a.original);
    let _ = writeln!(s, "  kept:        {}", a.kept);
    let _ = writeln!(s, "  removed:     {}", a.removed);
    let _ = writeln!(s, "  overwritten: {}", a.overwritten);
    let _ = writeln!(s, "rules fired:");
    for (rule, count) in &r.rule_histogram {
        let _ = writeln!(s, "  {rule:<20} {count}");
    }

    if let (Some(b), Some(c)) = (&r.baseline, &r.cleaned) {
        let _ = writeln!(s);
        let _ = writeln!(s, "target model on test split ({} examples):", b.examples);
        let _ = writeln!(s, "  {:<18} {:>10} {:>10}", "metric", "baseline", "cleaned");
        let _ = writeln!(s, "  {:<18} {:>10.4} {:>10.4}", "accuracy", b.accuracy, c.accuracy);
        if let (Some(bm), Some(cm)) = (&b.classification, &c.classification) {
            let _ = writeln!(s, "  {:<18} {:>10.4} {:>10.4}", "f1@0.5", bm.f1, cm.f1);
            let _ = writeln!(s, "  {:<18} {:>10.4} {:>10.4}", "pr_auc", bm.pr_auc, cm.pr_auc);
            let _ = writeln!(s, "  {:<18} {:>10.4} {:>10.4}", "average_precision", bm.average_precision, cm.average_precision);
        }
    }

    if let Some(d) = &r.detection {
        let _ = writeln!(s);
        let _ = writeln!(s, "detection vs ground truth:");
        let _ = writeln!(s, "  flagged {} / corrupted {} / correct {}", d.flagged, d.corrupted, d.true_positives);
        let _ = writeln!(s, "  precision {:.4}  recall {:.4}  f1 {:.4}", d.precision, d.recall, d.f1);
        match d.overwrite_accuracy {
            Some(acc) => {
                let _ = writeln!(s, "  overwrite accuracy {acc:.4} over {} overwrites", d.overwrites);
            }
            None => {
                let _ = writeln!(s, "  overwrite accuracy n/a (no overwrites)");
            }
        }
    }

    if let Some(sw) = &r.sweep {
        let _ = writeln!(s);
        let best = &sw.table[sw.best_index];
        let _ = writeln!(s, "sweep: {} grid points, best dev f1 {:.4} ({} flagged)", sw.table.len(), best.f1, best.flagged);
    }

    let _ = writeln!(s);
    let _ = writeln!(s, "config:");
    let _ = writeln!(s, "{}", serde_json::to_string_pretty(&r.config).expect("config serializes"));
    s
}
