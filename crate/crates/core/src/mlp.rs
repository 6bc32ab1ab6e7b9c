//! Feed-forward ReLU classifier with inverted dropout on hidden activations.
//!
//! Dropout masks scale surviving activations by `1 / (1 - p)` both in
//! training and in Monte Carlo Dropout inference, so [`Model::predict`] runs
//! mask-free.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ExampleView, PredictiveDistribution};
use crate::error::{Error, Result};
use crate::seed;

pub const CHECKPOINT_FORMAT: &str = "ledo-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub class_count: usize,
    /// Shared by training and MCD inference.
    pub dropout_rate: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.class_count == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidSpec("all layer dimensions must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidSpec(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of each layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.class_count);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// A dense layer; `weights` is row-major `fan_out x fan_in`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.fan_in).zip(&self.bias).map(|(row, b)| {
            b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>()
        }));
    }
}

/// Per-layer gradients, shaped like the model's layers.
pub type Gradients = Vec<Layer>;

/// Multiplicative dropout masks, one vector per hidden layer. Entries are
/// `0` or `1 / (1 - p)`.
pub type Masks = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
}

/// Activations kept for backprop: `inputs[i]` feeds layer `i`.
struct Trace {
    inputs: Vec<Vec<f64>>,
    /// Pre-activation values of each hidden layer.
    pre: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

impl Model {
    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// drawn layer by layer (weights row-major, then biases) from one
    /// `ChaCha8Rng` seeded with `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(seed);
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut layer = Layer::zeros(fan_in, fan_out);
                for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                    *w = rng.random_range(-bound..=bound);
                }
                layer
            })
            .collect();
        Ok(Model { spec, layers })
    }

    /// Builds a model from explicit layers, checking the shape chain.
    pub fn from_layers(spec: ModelSpec, layers: Vec<Layer>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::InvalidSpec(format!(
                "{} layers for a spec with {}",
                layers.len(),
                shapes.len()
            )));
        }
        for (i, ((fan_in, fan_out), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.fan_in != *fan_in
                || layer.fan_out != *fan_out
                || layer.weights.len() != fan_in * fan_out
                || layer.bias.len() != *fan_out
            {
                return Err(Error::InvalidSpec(format!("layer {i} does not chain")));
            }
        }
        Ok(Model { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.spec.input_dim,
                found: features.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, features: &[f64], masks: Option<&[Vec<f64>]>) -> Trace {
        let hidden = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(hidden);
        let mut current = features.to_vec();
        let mut z = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&current, &mut z);
            inputs.push(std::mem::take(&mut current));
            if i < hidden {
                pre.push(z.clone());
                current = z.iter().map(|v| v.max(0.0)).collect();
                if let Some(masks) = masks {
                    for (a, m) in current.iter_mut().zip(&masks[i]) {
                        *a *= m;
                    }
                }
            }
        }
        Trace {
            inputs,
            pre,
            probs: softmax(&z),
        }
    }

    /// Deterministic forward pass with dropout disabled.
    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_input(features)?;
        Ok(self.forward(features, None).probs)
    }

    /// Forward pass with explicit dropout masks.
    pub fn predict_masked(&self, features: &[f64], masks: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_input(features)?;
        self.check_masks(masks)?;
        Ok(self.forward(features, Some(masks)).probs)
    }

    fn check_masks(&self, masks: &[Vec<f64>]) -> Result<()> {
        let widths = &self.spec.hidden_dims;
        if masks.len() != widths.len() || masks.iter().zip(widths).any(|(m, w)| m.len() != *w) {
            return Err(Error::InvalidArgument("mask shapes do not match hidden layers".into()));
        }
        Ok(())
    }

    /// Draws one set of inverted-dropout masks.
    pub fn sample_masks<R: Rng>(&self, rng: &mut R) -> Masks {
        let p = self.spec.dropout_rate;
        let scale = 1.0 / (1.0 - p);
        self.spec
            .hidden_dims
            .iter()
            .map(|&w| {
                (0..w)
                    .map(|_| {
                        if p > 0.0 && rng.random::<f64>() < p {
                            0.0
                        } else {
                            scale
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Monte Carlo Dropout inference: `passes` forward passes, pass `t` using
    /// masks drawn from `seed::mix(seed, t)`.
    pub fn mcd_predict(
        &self,
        example_id: &str,
        features: &[f64],
        passes: usize,
        seed: u64,
    ) -> Result<PredictiveDistribution> {
        self.check_input(features)?;
        if passes == 0 {
            return Err(Error::InvalidArgument("MCD needs at least one pass".into()));
        }
        let rows = (0..passes)
            .map(|t| {
                let mut rng = seed::rng(seed::mix(seed, t as u64));
                let masks = self.sample_masks(&mut rng);
                self.forward(features, Some(&masks)).probs
            })
            .collect();
        Ok(PredictiveDistribution::new(example_id, rows))
    }

    /// Mean cross-entropy over the batch and its gradient with respect to
    /// every weight and bias. `masks`, when given, holds one mask set per
    /// example.
    pub fn loss_and_gradients(
        &self,
        inputs: &[&[f64]],
        labels: &[usize],
        masks: Option<&[Masks]>,
    ) -> Result<(f64, Gradients)> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::InvalidArgument("batch inputs and labels must be non-empty and aligned".into()));
        }
        if let Some(m) = masks {
            if m.len() != inputs.len() {
                return Err(Error::InvalidArgument("one mask set per example required".into()));
            }
            for set in m {
                self.check_masks(set)?;
            }
        }
        let mut grads: Gradients = self.layers.iter().map(|l| Layer::zeros(l.fan_in, l.fan_out)).collect();
        let scale = 1.0 / inputs.len() as f64;
        let mut loss = 0.0;
        for (i, (x, &y)) in inputs.iter().zip(labels).enumerate() {
            self.check_input(x)?;
            if y >= self.spec.class_count {
                return Err(Error::InvalidArgument(format!("label {y} out of range")));
            }
            let m = masks.map(|m| m[i].as_slice());
            loss -= self.accumulate(x, y, m, scale, &mut grads);
        }
        Ok((loss * scale, grads))
    }

    /// Backprop for one example; adds `scale * dL/dθ` into `grads` and
    /// returns `ln p(y)`.
    fn accumulate(&self, x: &[f64], y: usize, masks: Option<&[Vec<f64>]>, scale: f64, grads: &mut [Layer]) -> f64 {
        let trace = self.forward(x, masks);
        let log_p = trace.probs[y].max(f64::MIN_POSITIVE).ln();
        let mut delta: Vec<f64> = trace.probs.clone();
        delta[y] -= 1.0;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &trace.inputs[i];
            let g = &mut grads[i];
            for (o, d) in delta.iter().enumerate() {
                let d = d * scale;
                g.bias[o] += d;
                for (gw, a) in g.weights[o * layer.fan_in..(o + 1) * layer.fan_in].iter_mut().zip(input) {
                    *gw += d * a;
                }
            }
            if i == 0 {
                break;
            }
            // delta for the previous hidden layer: through weights, mask, ReLU
            let mut prev = vec![0.0; layer.fan_in];
            for (o, d) in delta.iter().enumerate() {
                for (p, w) in prev.iter_mut().zip(&layer.weights[o * layer.fan_in..(o + 1) * layer.fan_in]) {
                    *p += d * w;
                }
            }
            let pre = &trace.pre[i - 1];
            for (j, p) in prev.iter_mut().enumerate() {
                let mask = masks.map_or(1.0, |m| m[i - 1][j]);
                if pre[j] <= 0.0 {
                    *p = 0.0;
                } else {
                    *p *= mask;
                }
            }
            delta = prev;
        }
        log_p
    }

    fn apply_gradients(&mut self, grads: &[Layer], learning_rate: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= learning_rate * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= learning_rate * gb;
            }
        }
    }

    /// Mini-batch SGD on mean cross-entropy with dropout active. Shuffling
    /// and masks come from one stream seeded by `config.seed`.
    pub fn train(&self, examples: &[ExampleView<'_>], config: &TrainConfig) -> Result<Model> {
        config.validate()?;
        if config.epochs == 0 {
            return Ok(self.clone());
        }
        if examples.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let mut inputs = Vec::with_capacity(examples.len());
        for e in examples {
            let f = e.features().ok_or_else(|| {
                Error::InvalidArgument(format!("example {:?} has no features", e.id))
            })?;
            self.check_input(f)?;
            if e.label >= self.spec.class_count {
                return Err(Error::LabelOutOfRange {
                    id: e.id.to_string(),
                    label: e.label,
                    class_count: self.spec.class_count,
                });
            }
            inputs.push(f);
        }

        let mut model = self.clone();
        let mut rng = seed::rng(config.seed);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut grads: Gradients = model.layers.iter().map(|l| Layer::zeros(l.fan_in, l.fan_out)).collect();
        let dropout = model.spec.dropout_rate > 0.0;
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(config.batch_size) {
                for g in grads.iter_mut() {
                    g.weights.fill(0.0);
                    g.bias.fill(0.0);
                }
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    let masks = dropout.then(|| model.sample_masks(&mut rng));
                    model.accumulate(inputs[i], examples[i].label, masks.as_deref(), scale, &mut grads);
                }
                model.apply_gradients(&grads, config.learning_rate);
            }
        }
        Ok(model)
    }

    pub fn accuracy(&self, examples: &[ExampleView<'_>]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let mut correct = 0usize;
        for e in examples {
            let f = e.features().ok_or_else(|| {
                Error::InvalidArgument(format!("example {:?} has no features", e.id))
            })?;
            if argmax(&self.predict(f)?) == e.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let checkpoint = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        serde_json::to_writer(&mut w, &checkpoint)
            .map_err(std::io::Error::from)
            .and_then(|_| w.write_all(b"\n"))
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let checkpoint: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Malformed { line: e.line(), message: e.to_string() })?;
        if checkpoint.format != CHECKPOINT_FORMAT || checkpoint.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint {} v{}",
                checkpoint.format, checkpoint.version
            )));
        }
        let Model { spec, layers } = checkpoint.model;
        Model::from_layers(spec, layers)
    }
}

/// On-disk model: `{"format":"ledo-mlp","version":1,"model":{"spec":..,"layers":[..]}}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Model,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, LabeledExample};

    fn spec(hidden: Vec<usize>, dropout: f64) -> ModelSpec {
        ModelSpec {
            input_dim: 2,
            hidden_dims: hidden,
            class_count: 2,
            dropout_rate: dropout,
        }
    }

    #[test]
    fn init_is_seeded_and_shaped() {
        let a = Model::init(spec(vec![8], 0.1), 3).unwrap();
        let b = Model::init(spec(vec![8], 0.1), 3).unwrap();
        let c = Model::init(spec(vec![8], 0.1), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.layers()[0].weights, c.layers()[0].weights);
        assert_eq!((a.layers()[0].fan_out, a.layers()[0].fan_in), (8, 2));
        assert_eq!((a.layers()[1].fan_out, a.layers()[1].fan_in), (2, 8));
        let bound = 1.0 / 2f64.sqrt();
        assert!(a.layers()[0].weights.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn spec_validation() {
        assert!(Model::init(spec(vec![0], 0.1), 0).is_err());
        assert!(Model::init(spec(vec![4], 1.0), 0).is_err());
        assert!(Model::init(spec(vec![4], -0.1), 0).is_err());
        assert!(Model::init(spec(vec![], 0.0), 0).is_ok());
    }

    #[test]
    fn predict_is_softmax() {
        let m = Model::init(spec(vec![5, 3], 0.2), 1).unwrap();
        let p = m.predict(&[0.3, -1.2]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(p, m.predict(&[0.3, -1.2]).unwrap());
        assert!(matches!(m.predict(&[1.0]), Err(Error::DimensionMismatch { expected: 2, found: 1 })));
    }

    #[test]
    fn zero_weights_give_uniform() {
        let mut m = Model::init(ModelSpec { class_count: 4, ..spec(vec![3], 0.1) }, 1).unwrap();
        for l in m.layers_mut() {
            l.weights.fill(0.0);
            l.bias.fill(0.0);
        }
        assert_eq!(m.predict(&[5.0, -2.0]).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn mcd_without_dropout_repeats_predict() {
        let m = Model::init(spec(vec![6], 0.0), 9).unwrap();
        let x = [0.7, 0.1];
        let dist = m.mcd_predict("x", &x, 5, 11).unwrap();
        let p = m.predict(&x).unwrap();
        assert!(dist.passes.iter().all(|row| *row == p));
    }

    #[test]
    fn mcd_default_settings_vary_and_repeat() {
        let m = Model::init(spec(vec![32], 0.1), 9).unwrap();
        let a = m.mcd_predict("x", &[0.7, 0.1], 10, 5).unwrap();
        let b = m.mcd_predict("x", &[0.7, 0.1], 10, 5).unwrap();
        assert_eq!(a, b);
        let distinct: std::collections::HashSet<Vec<u64>> = a
            .passes
            .iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert!(distinct.len() > 5, "only {} distinct rows", distinct.len());
        crate::dataset::validate_distribution(&a).unwrap();
    }

    #[test]
    fn mcd_mean_tracks_predict() {
        let m = Model::init(spec(vec![16], 0.1), 21).unwrap();
        let x = [0.4, -0.9];
        let dist = m.mcd_predict("x", &x, 2000, 3).unwrap();
        let p = m.predict(&x).unwrap();
        for c in 0..2 {
            let mean = dist.passes.iter().map(|r| r[c]).sum::<f64>() / 2000.0;
            assert!((mean - p[c]).abs() < 0.05, "class {c}: {mean} vs {}", p[c]);
        }
    }

    fn blobs() -> Dataset {
        let mut rng = seed::rng(77);
        let examples = (0..200)
            .map(|i| {
                let label = i % 2;
                let cx = if label == 0 { -3.0 } else { 3.0 };
                let x = vec![cx + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                LabeledExample::with_features(format!("e{i}"), x, label)
            })
            .collect();
        Dataset::new(2, None, examples).unwrap()
    }

    #[test]
    fn training_separates_blobs() {
        let data = blobs();
        let views: Vec<_> = data.views().collect();
        let m = Model::init(spec(vec![8], 0.1), 0).unwrap();
        let config = TrainConfig { epochs: 50, ..TrainConfig::default() };
        let trained = m.train(&views, &config).unwrap();
        assert!(trained.accuracy(&views).unwrap() >= 0.95);
        assert_eq!(trained, m.train(&views, &config).unwrap());
    }

    #[test]
    fn zero_epochs_is_identity() {
        let m = Model::init(spec(vec![4], 0.1), 0).unwrap();
        let config = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert_eq!(m.train(&[], &config).unwrap(), m);
    }

    #[test]
    fn training_errors() {
        let m = Model::init(spec(vec![4], 0.1), 0).unwrap();
        assert!(matches!(m.train(&[], &TrainConfig::default()), Err(Error::Empty(_))));
        let data = Dataset::new(2, None, vec![LabeledExample::with_features("a", vec![1.0], 0)]).unwrap();
        let views: Vec<_> = data.views().collect();
        assert!(matches!(
            m.train(&views, &TrainConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let m = Model::init(spec(vec![7, 3], 0.1), 12).unwrap();
        m.save(&path).unwrap();
        assert_eq!(Model::load(&path).unwrap(), m);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }
}
