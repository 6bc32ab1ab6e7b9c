//! Labeled datasets, predictive distributions, and their line-delimited JSON
//! formats.
//!
//! A dataset file starts with a header line
//! `{"class_count":C,"class_names":[...]}` followed by one example per line:
//! `{"id":..,"label":..,"features":[..]}` or `{"id":..,"label":..,"tokens":[..]}`,
//! with an optional `"gold_label"`. A distribution dump holds one
//! `{"example_id":..,"passes":[[..],..]}` record per line and has no header.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on probability row sums.
pub const PROB_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pos {
    Noun,
    Propn,
    Verb,
    Other,
}

impl Pos {
    pub fn is_nominal(self) -> bool {
        matches!(self, Pos::Noun | Pos::Propn)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggedToken {
    pub text: String,
    pub pos: Pos,
    /// Set on the first token of a compound noun.
    pub is_compound_head: bool,
    pub is_entity: bool,
}

impl TaggedToken {
    pub fn new(text: impl Into<String>, pos: Pos) -> Self {
        TaggedToken {
            text: text.into(),
            pos,
            is_compound_head: false,
            is_entity: false,
        }
    }

    pub fn compound_head(mut self) -> Self {
        self.is_compound_head = true;
        self
    }

    pub fn entity(mut self) -> Self {
        self.is_entity = true;
        self
    }
}

/// Checks the tag invariants of a token sequence.
pub fn validate_tokens(tokens: &[TaggedToken]) -> Result<()> {
    for (i, token) in tokens.iter().enumerate() {
        if token.is_compound_head && !token.pos.is_nominal() {
            return Err(Error::InvalidTokens(format!(
                "token {i} ({:?}) is a compound head but tagged {:?}",
                token.text, token.pos
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schema {
    Features,
    Tokens,
}

impl Schema {
    fn name(self) -> &'static str {
        match self {
            Schema::Features => "features",
            Schema::Tokens => "tokens",
        }
    }
}

impl fmt::Display for Schema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Features(Vec<f64>),
    Tokens(Vec<TaggedToken>),
}

impl Payload {
    pub fn schema(&self) -> Schema {
        match self {
            Payload::Features(_) => Schema::Features,
            Payload::Tokens(_) => Schema::Tokens,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub id: String,
    pub payload: Payload,
    pub label: usize,
    /// Ground truth for benchmarks. Never exposed through [`ExampleView`].
    pub gold_label: Option<usize>,
}

impl LabeledExample {
    pub fn with_features(id: impl Into<String>, features: Vec<f64>, label: usize) -> Self {
        LabeledExample {
            id: id.into(),
            payload: Payload::Features(features),
            label,
            gold_label: None,
        }
    }

    pub fn with_tokens(id: impl Into<String>, tokens: Vec<TaggedToken>, label: usize) -> Self {
        LabeledExample {
            id: id.into(),
            payload: Payload::Tokens(tokens),
            label,
            gold_label: None,
        }
    }

    pub fn features(&self) -> Option<&[f64]> {
        match &self.payload {
            Payload::Features(f) => Some(f),
            Payload::Tokens(_) => None,
        }
    }

    pub fn view(&self) -> ExampleView<'_> {
        ExampleView {
            id: &self.id,
            payload: &self.payload,
            label: self.label,
        }
    }
}

/// Read-only view of an example without its gold label. Training and
/// decision code only ever receives these.
#[derive(Clone, Copy, Debug)]
pub struct ExampleView<'a> {
    pub id: &'a str,
    pub payload: &'a Payload,
    pub label: usize,
}

impl<'a> ExampleView<'a> {
    pub fn features(&self) -> Option<&'a [f64]> {
        match self.payload {
            Payload::Features(f) => Some(f),
            Payload::Tokens(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    class_count: usize,
    class_names: Option<Vec<String>>,
    examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(
        class_count: usize,
        class_names: Option<Vec<String>>,
        examples: Vec<LabeledExample>,
    ) -> Result<Self> {
        if class_count < 1 {
            return Err(Error::InvalidArgument("class_count must be at least 1".into()));
        }
        if let Some(names) = &class_names {
            if names.len() != class_count {
                return Err(Error::InvalidArgument(format!(
                    "{} class names for {class_count} classes",
                    names.len()
                )));
            }
        }
        let mut seen = HashSet::with_capacity(examples.len());
        let schema = examples.first().map(|e| e.payload.schema());
        for (i, example) in examples.iter().enumerate() {
            check_example(example, class_count)?;
            if !seen.insert(example.id.as_str()) {
                return Err(Error::DuplicateId(example.id.clone()));
            }
            if Some(example.payload.schema()) != schema {
                return Err(Error::MixedSchema {
                    line: i + 2,
                    expected: schema.map_or("none", Schema::name),
                    found: example.payload.schema().name(),
                });
            }
        }
        Ok(Dataset {
            class_count,
            class_names,
            examples,
        })
    }

    pub fn empty(class_count: usize) -> Result<Self> {
        Dataset::new(class_count, None, Vec::new())
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// `None` for an empty dataset.
    pub fn schema(&self) -> Option<Schema> {
        self.examples.first().map(|e| e.payload.schema())
    }

    pub fn views(&self) -> impl ExactSizeIterator<Item = ExampleView<'_>> + '_ {
        self.examples.iter().map(LabeledExample::view)
    }

    pub fn get(&self, id: &str) -> Option<&LabeledExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Builds a dataset with the same class metadata and different examples.
    pub fn with_examples(&self, examples: Vec<LabeledExample>) -> Result<Self> {
        Dataset::new(self.class_count, self.class_names.clone(), examples)
    }

    pub fn into_examples(self) -> Vec<LabeledExample> {
        self.examples
    }

    /// Feature dimension of a feature dataset.
    pub fn feature_dim(&self) -> Option<usize> {
        self.examples.first().and_then(|e| e.features()).map(<[f64]>::len)
    }

    pub fn has_gold_labels(&self) -> bool {
        self.examples.iter().all(|e| e.gold_label.is_some())
    }
}

fn check_example(example: &LabeledExample, class_count: usize) -> Result<()> {
    for label in std::iter::once(example.label).chain(example.gold_label) {
        if label >= class_count {
            return Err(Error::LabelOutOfRange {
                id: example.id.clone(),
                label,
                class_count,
            });
        }
    }
    if let Payload::Tokens(tokens) = &example.payload {
        validate_tokens(tokens).map_err(|e| Error::RecordMismatch {
            id: example.id.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    class_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    id: String,
    label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<TaggedToken>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_label: Option<usize>,
}

/// Non-blank lines with their 1-based line numbers.
fn numbered_lines<R: BufRead>(reader: R) -> impl Iterator<Item = (usize, std::io::Result<String>)> {
    reader
        .lines()
        .enumerate()
        .map(|(i, line)| (i + 1, line))
        .filter(|(_, line)| line.as_ref().map_or(true, |l| !l.trim().is_empty()))
}

fn malformed(line: usize, message: impl fmt::Display) -> Error {
    Error::Malformed {
        line,
        message: message.to_string(),
    }
}

pub fn read_dataset<R: BufRead>(reader: R, expected: Schema) -> Result<Dataset> {
    let mut lines = numbered_lines(reader);
    let io_err = |e| Error::io("<dataset>", e);
    let (_, header) = lines.next().ok_or_else(|| malformed(1, "missing header line"))?;
    let header: Header =
        serde_json::from_str(&header.map_err(io_err)?).map_err(|e| malformed(1, e))?;
    if let Some(names) = &header.class_names {
        if names.len() != header.class_count {
            return Err(malformed(1, "class_names length differs from class_count"));
        }
    }

    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, line) in lines {
        let record: ExampleRecord =
            serde_json::from_str(&line.map_err(io_err)?).map_err(|e| malformed(line_no, e))?;
        let payload = match (record.features, record.tokens) {
            (Some(f), None) => Payload::Features(f),
            (None, Some(t)) => Payload::Tokens(t),
            (Some(_), Some(_)) => {
                return Err(malformed(line_no, "record has both features and tokens"))
            }
            (None, None) => return Err(malformed(line_no, "record has neither features nor tokens")),
        };
        if payload.schema() != expected {
            return Err(Error::MixedSchema {
                line: line_no,
                expected: expected.name(),
                found: payload.schema().name(),
            });
        }
        if let Payload::Features(f) = &payload {
            if let Some(first) = examples.first().and_then(LabeledExample::features) {
                if first.len() != f.len() {
                    return Err(malformed(
                        line_no,
                        format!("feature dimension {} differs from {}", f.len(), first.len()),
                    ));
                }
            }
        }
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId(record.id));
        }
        let example = LabeledExample {
            id: record.id,
            payload,
            label: record.label,
            gold_label: record.gold_label,
        };
        check_example(&example, header.class_count)?;
        examples.push(example);
    }
    Dataset::new(header.class_count, header.class_names, examples)
}

pub fn load_dataset(path: impl AsRef<Path>, expected: Schema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), expected).map_err(|e| relocate_io(e, path))
}

fn relocate_io(err: Error, path: &Path) -> Error {
    match err {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

pub fn write_dataset<W: Write>(dataset: &Dataset, mut writer: W) -> std::io::Result<()> {
    let header = Header {
        class_count: dataset.class_count,
        class_names: dataset.class_names.clone(),
    };
    serde_json::to_writer(&mut writer, &header)?;
    writer.write_all(b"\n")?;
    for example in &dataset.examples {
        let (features, tokens) = match &example.payload {
            Payload::Features(f) => (Some(f.clone()), None),
            Payload::Tokens(t) => (None, Some(t.clone())),
        };
        let record = ExampleRecord {
            id: example.id.clone(),
            label: example.label,
            features,
            tokens,
            gold_label: example.gold_label,
        };
        serde_json::to_writer(&mut writer, &record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(dataset, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// `T` stochastic class-probability vectors for one example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictiveDistribution {
    pub example_id: String,
    pub passes: Vec<Vec<f64>>,
}

impl PredictiveDistribution {
    pub fn new(example_id: impl Into<String>, passes: Vec<Vec<f64>>) -> Self {
        PredictiveDistribution {
            example_id: example_id.into(),
            passes,
        }
    }

    pub fn pass_count(&self) -> usize {
        self.passes.len()
    }

    pub fn class_count(&self) -> usize {
        self.passes.first().map_or(0, Vec::len)
    }
}

/// Checks shape (`T >= 1`, `C >= 2`, rectangular), entry range, and row sums.
pub fn validate_distribution(dist: &PredictiveDistribution) -> Result<()> {
    let classes = dist.class_count();
    if dist.passes.is_empty() {
        return Err(Error::DistributionShape(format!(
            "{:?} has no passes",
            dist.example_id
        )));
    }
    if classes < 2 {
        return Err(Error::DistributionShape(format!(
            "{:?} has {classes} classes, need at least 2",
            dist.example_id
        )));
    }
    for (row, pass) in dist.passes.iter().enumerate() {
        if pass.len() != classes {
            return Err(Error::DistributionShape(format!(
                "{:?} row {row} has width {}, expected {classes}",
                dist.example_id,
                pass.len()
            )));
        }
        let sum: f64 = pass.iter().sum();
        // written negated so a NaN sum is rejected
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !((sum - 1.0).abs() <= PROB_TOLERANCE) {
            return Err(Error::RowSum { row, sum });
        }
        if let Some((column, &value)) = pass
            .iter()
            .enumerate()
            .find(|(_, p)| !(0.0..=1.0).contains(*p))
        {
            return Err(Error::ProbabilityRange { row, column, value });
        }
    }
    Ok(())
}

/// Reads distribution records without validating them.
pub fn read_distributions<R: BufRead>(reader: R) -> Result<Vec<PredictiveDistribution>> {
    let mut out = Vec::new();
    for (line_no, line) in numbered_lines(reader) {
        let line = line.map_err(|e| Error::io("<distributions>", e))?;
        out.push(serde_json::from_str(&line).map_err(|e| malformed(line_no, e))?);
    }
    Ok(out)
}

pub fn load_distributions(path: impl AsRef<Path>) -> Result<Vec<PredictiveDistribution>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_distributions(BufReader::new(file)).map_err(|e| relocate_io(e, path))
}

pub fn write_distributions<W: Write>(
    dists: &[PredictiveDistribution],
    mut writer: W,
) -> std::io::Result<()> {
    for dist in dists {
        serde_json::to_writer(&mut writer, dist)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_distributions(dists: &[PredictiveDistribution], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_distributions(dists, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Writes any serializable records as JSON lines.
pub fn save_jsonl<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        for r in records {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    };
    write(&mut writer).map_err(|e| Error::io(path, e))
}

pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (line_no, line) in numbered_lines(BufReader::new(file)) {
        let line = line.map_err(|e| Error::io(path, e))?;
        out.push(serde_json::from_str(&line).map_err(|e| malformed(line_no, e))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Dataset> {
        read_dataset(text.as_bytes(), Schema::Features)
    }

    #[test]
    fn loads_two_feature_records() {
        let ds = parse(
            "{\"class_count\":2}\n\
             {\"id\":\"a\",\"label\":0,\"features\":[1.0,2.0]}\n\
             {\"id\":\"b\",\"label\":1,\"features\":[0.5,-1.0]}\n",
        )
        .unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.class_count(), 2);
        assert_eq!(ds.examples()[1].features(), Some(&[0.5, -1.0][..]));
    }

    #[test]
    fn duplicate_id_is_named() {
        let err = parse(
            "{\"class_count\":2}\n\
             {\"id\":\"x1\",\"label\":0,\"features\":[1.0]}\n\
             {\"id\":\"x1\",\"label\":1,\"features\":[2.0]}\n",
        )
        .unwrap_err();
        assert!(matches!(&err, Error::DuplicateId(id) if id == "x1"), "{err}");
        assert!(err.to_string().contains("x1"));
    }

    #[test]
    fn label_out_of_range() {
        let err = parse("{\"class_count\":3}\n{\"id\":\"a\",\"label\":5,\"features\":[1.0]}\n")
            .unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 5, class_count: 3, .. }));
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse("{\"class_count\":2}\n{\"id\":\"a\",\"label\":0,\"features\":[1.0]}\n{oops\n")
            .unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 3, .. }), "{err}");
    }

    #[test]
    fn mixed_schema_rejected() {
        let err = parse(
            "{\"class_count\":2}\n\
             {\"id\":\"a\",\"label\":0,\"features\":[1.0]}\n\
             {\"id\":\"b\",\"label\":0,\"tokens\":[{\"text\":\"x\",\"pos\":\"noun\",\"is_compound_head\":false,\"is_entity\":false}]}\n",
        )
        .unwrap_err();
        assert!(matches!(err, Error::MixedSchema { line: 3, .. }), "{err}");
    }

    #[test]
    fn unknown_pos_tag_rejected() {
        let err = read_dataset(
            "{\"class_count\":2}\n{\"id\":\"a\",\"label\":0,\"tokens\":[{\"text\":\"x\",\"pos\":\"adj\",\"is_compound_head\":false,\"is_entity\":false}]}\n"
                .as_bytes(),
            Schema::Tokens,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 2, .. }));
    }

    #[test]
    fn compound_head_must_be_nominal() {
        let tokens = vec![TaggedToken::new("run", Pos::Verb).compound_head()];
        assert!(validate_tokens(&tokens).is_err());
        let err = Dataset::new(2, None, vec![LabeledExample::with_tokens("a", tokens, 0)]);
        assert!(err.is_err());
    }

    #[test]
    fn round_trip_preserves_gold_and_tokens() {
        let mut a = LabeledExample::with_features("a", vec![0.1, 1e-300, -3.25], 1);
        a.gold_label = Some(0);
        let ds = Dataset::new(2, Some(vec!["neg".into(), "pos".into()]), vec![a]).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(&buf[..], Schema::Features).unwrap(), ds);

        let tokens = vec![
            TaggedToken::new("strawberry", Pos::Noun).compound_head(),
            TaggedToken::new("Seattle", Pos::Propn).entity(),
        ];
        let ds = Dataset::new(2, None, vec![LabeledExample::with_tokens("t", tokens, 0)]).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(read_dataset(&buf[..], Schema::Tokens).unwrap(), ds);
    }

    #[test]
    fn empty_dataset_round_trips() {
        let ds = Dataset::empty(3).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "{\"class_count\":3}\n");
        let back = read_dataset(&buf[..], Schema::Tokens).unwrap();
        assert!(back.is_empty());
        assert_eq!(back, ds);
    }

    #[test]
    fn distribution_validation() {
        let ok = PredictiveDistribution::new("a", vec![vec![0.9, 0.1], vec![0.3, 0.7]]);
        validate_distribution(&ok).unwrap();

        let bad = PredictiveDistribution::new("a", vec![vec![0.9, 0.2]]);
        match validate_distribution(&bad).unwrap_err() {
            Error::RowSum { row, sum } => {
                assert_eq!(row, 0);
                assert!((sum - 1.1).abs() < 1e-12);
            }
            other => panic!("unexpected {other}"),
        }

        let boundary = PredictiveDistribution::new("a", vec![vec![1.0, 0.0]]);
        validate_distribution(&boundary).unwrap();
    }

    #[test]
    fn distribution_shape_and_range_errors() {
        let neg = PredictiveDistribution::new("a", vec![vec![0.5, 0.5], vec![1.5, -0.5]]);
        assert!(matches!(
            validate_distribution(&neg),
            Err(Error::ProbabilityRange { row: 1, column: 0, .. })
        ));
        let ragged = PredictiveDistribution::new("a", vec![vec![0.5, 0.5], vec![1.0]]);
        assert!(matches!(validate_distribution(&ragged), Err(Error::DistributionShape(_))));
        let narrow = PredictiveDistribution::new("a", vec![vec![1.0]]);
        assert!(validate_distribution(&narrow).is_err());
        let empty = PredictiveDistribution::new("a", vec![]);
        assert!(validate_distribution(&empty).is_err());
        let nan = PredictiveDistribution::new("a", vec![vec![f64::NAN, 1.0]]);
        assert!(matches!(validate_distribution(&nan), Err(Error::RowSum { row: 0, .. })));
    }
}
