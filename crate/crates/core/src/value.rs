//! Value tables and where they come from: files, toy models evaluated on
//! masked inputs, and planted-interaction generators.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interaction::InteractionKind;
use crate::json;
use crate::lattice::{check_variable_count, LatticeArray, SubsetMask, MAX_VARIABLES};

/// Current version of the table and masking-spec documents.
pub const FORMAT_VERSION: u32 = 1;

/// Probabilities are clamped to `[ε, 1 − ε]` before taking log-odds.
pub const PROBABILITY_EPSILON: f64 = 1e-7;

pub const META_CLASS: &str = "class";
pub const META_LAYER: &str = "layer";
pub const META_MASKING_DIGEST: &str = "masking_spec_digest";
pub const META_MODEL: &str = "model";
pub const META_SAMPLE: &str = "sample";

/// `log(p̂ / (1 − p̂))` with `p̂ = clamp(p, ε, 1 − ε)`.
pub fn logodds(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    let p = p.clamp(PROBABILITY_EPSILON, 1.0 - PROBABILITY_EPSILON);
    Ok(p.ln() - (-p).ln_1p())
}

/// Largest magnitude [`logodds`] can return.
pub fn logodds_limit() -> f64 {
    logodds(1.0 - PROBABILITY_EPSILON).expect("constant is a probability")
}

/// How class scores become a probability for the target class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Softmax,
    /// One-vs-rest sigmoid of the class logit.
    Sigmoid,
}

/// Log-odds of class `y` given raw logits, computed from the logit margin so
/// that no precision is lost through the probability. Single-logit models
/// always use the sigmoid, with class 1 the positive one.
pub fn logodds_from_logits(logits: &[f64], y: usize, link: Link) -> Result<f64> {
    let raw = match logits.len() {
        0 => return Err(Error::Domain("empty logit vector".into())),
        1 => match y {
            0 => -logits[0],
            1 => logits[0],
            _ => return Err(Error::Domain(format!("class {y} invalid for a single-logit model"))),
        },
        c if y >= c => return Err(Error::Domain(format!("class {y} out of range for {c} classes"))),
        _ => match link {
            Link::Sigmoid => logits[y],
            Link::Softmax => {
                let rest_max = logits
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != y)
                    .map(|(_, &z)| z)
                    .fold(f64::NEG_INFINITY, f64::max);
                let rest: f64 = logits
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != y)
                    .map(|(_, &z)| (z - rest_max).exp())
                    .sum();
                logits[y] - rest_max - rest.ln()
            }
        },
    };
    if raw.is_nan() {
        return Err(Error::Domain("logits produced NaN".into()));
    }
    let limit = logodds_limit();
    Ok(raw.clamp(-limit, limit))
}

/// The `2^n` outputs of one value function, plus provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    pub values: LatticeArray,
    pub label: String,
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TableDocument {
    format_version: u32,
    n: usize,
    #[serde(default)]
    label: String,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    values: Vec<f64>,
}

impl ValueTable {
    pub fn new(values: LatticeArray) -> Self {
        Self {
            values,
            label: String::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn n(&self) -> usize {
        self.values.n()
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_string(&TableDocument {
            format_version: FORMAT_VERSION,
            n: self.n(),
            label: self.label.clone(),
            metadata: self.metadata.clone(),
            values: self.values.as_slice().to_vec(),
        })
    }

    /// Parses a table document; `path` only labels errors.
    pub fn from_json(path: &Path, text: &str) -> Result<Self> {
        let doc: TableDocument = json::from_str(path, text)?;
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            message,
        };
        if doc.format_version != FORMAT_VERSION {
            return Err(schema(format!(
                "unsupported format_version {} (supported: {FORMAT_VERSION})",
                doc.format_version
            )));
        }
        if doc.n == 0 || doc.n > MAX_VARIABLES {
            return Err(schema(format!("n = {} outside 1..={MAX_VARIABLES}", doc.n)));
        }
        let expected = 1usize << doc.n;
        if doc.values.len() != expected {
            return Err(schema(format!(
                "expected {expected} values for n = {}, found {}",
                doc.n,
                doc.values.len()
            )));
        }
        let values = LatticeArray::new(doc.n, doc.values).map_err(|e| schema(e.to_string()))?;
        Ok(Self {
            values,
            label: doc.label,
            metadata: doc.metadata,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(path, &text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Rectangle of a grid input owned by one variable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    /// Raw input dimensions this variable owns.
    pub dims: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch: Option<Patch>,
}

/// Which raw dimensions each variable owns, and the values they take when
/// masked. Dimensions owned by no variable are never masked.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskingSpec {
    variables: Vec<Variable>,
    baseline: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SpecDocument {
    format_version: u32,
    n: usize,
    variables: Vec<Variable>,
    baseline: Vec<f64>,
}

impl MaskingSpec {
    pub fn new(variables: Vec<Variable>, baseline: Vec<f64>) -> Result<Self> {
        check_variable_count(variables.len())?;
        if let Some(i) = baseline.iter().position(|b| !b.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        let mut owner = vec![None; baseline.len()];
        for (i, var) in variables.iter().enumerate() {
            if var.dims.is_empty() {
                return Err(Error::Domain(format!("variable {i} ({}) owns no dimensions", var.name)));
            }
            for &d in &var.dims {
                match owner.get(d) {
                    None => {
                        return Err(Error::Dimension {
                            expected: baseline.len(),
                            found: d + 1,
                        })
                    }
                    Some(Some(j)) => {
                        return Err(Error::Domain(format!("dimension {d} owned by variables {j} and {i}")));
                    }
                    Some(None) => owner[d] = Some(i),
                }
            }
        }
        Ok(Self { variables, baseline })
    }

    /// One variable per raw dimension.
    pub fn per_dimension(baseline: Vec<f64>) -> Result<Self> {
        let variables = (0..baseline.len())
            .map(|d| Variable {
                name: format!("x{d}"),
                dims: vec![d],
                patch: None,
            })
            .collect();
        Self::new(variables, baseline)
    }

    /// Tiles a row-major `height × width` grid into patches; edge patches are
    /// cut short when the sizes do not divide.
    pub fn grid(height: usize, width: usize, patch_height: usize, patch_width: usize, baseline: Vec<f64>) -> Result<Self> {
        if patch_height == 0 || patch_width == 0 {
            return Err(Error::Domain("patch sides must be positive".into()));
        }
        if baseline.len() != height * width {
            return Err(Error::Dimension {
                expected: height * width,
                found: baseline.len(),
            });
        }
        let mut variables = Vec::new();
        for row in (0..height).step_by(patch_height) {
            for col in (0..width).step_by(patch_width) {
                let h = patch_height.min(height - row);
                let w = patch_width.min(width - col);
                let dims = (row..row + h)
                    .flat_map(|r| (col..col + w).map(move |c| r * width + c))
                    .collect();
                variables.push(Variable {
                    name: format!("patch_{row}_{col}"),
                    dims,
                    patch: Some(Patch {
                        row,
                        col,
                        height: h,
                        width: w,
                    }),
                });
            }
        }
        Self::new(variables, baseline)
    }

    /// Keeps only the listed variables, in the given order.
    pub fn select(&self, chosen: &[usize]) -> Result<Self> {
        let mut variables = Vec::with_capacity(chosen.len());
        for &i in chosen {
            let var = self.variables.get(i).ok_or(Error::Dimension {
                expected: self.variables.len(),
                found: i + 1,
            })?;
            variables.push(var.clone());
        }
        Self::new(variables, self.baseline.clone())
    }

    pub fn n(&self) -> usize {
        self.variables.len()
    }

    pub fn input_dim(&self) -> usize {
        self.baseline.len()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn baseline(&self) -> &[f64] {
        &self.baseline
    }

    fn document(&self) -> SpecDocument {
        SpecDocument {
            format_version: FORMAT_VERSION,
            n: self.n(),
            variables: self.variables.clone(),
            baseline: self.baseline.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_string(&self.document())
    }

    /// SHA-256 of the canonical document, hex encoded.
    pub fn digest(&self) -> String {
        json::digest(&self.document()).expect("masking specs always serialize")
    }

    pub fn from_json(path: &Path, text: &str) -> Result<Self> {
        let doc: SpecDocument = json::from_str(path, text)?;
        let schema = |message: String| Error::Schema {
            path: path.to_path_buf(),
            message,
        };
        if doc.format_version != FORMAT_VERSION {
            return Err(schema(format!(
                "unsupported format_version {} (supported: {FORMAT_VERSION})",
                doc.format_version
            )));
        }
        if doc.n != doc.variables.len() {
            return Err(schema(format!("n = {} but {} variables listed", doc.n, doc.variables.len())));
        }
        Self::new(doc.variables, doc.baseline).map_err(|e| schema(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(path, &text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Keeps the dimensions of variables in `t` and replaces those of the other
/// variables by the baseline.
pub fn mask_input(x: &[f64], t: SubsetMask, spec: &MaskingSpec) -> Result<Vec<f64>> {
    if x.len() != spec.input_dim() {
        return Err(Error::Dimension {
            expected: spec.input_dim(),
            found: x.len(),
        });
    }
    if t.n() != spec.n() {
        return Err(Error::Dimension {
            expected: spec.n(),
            found: t.n(),
        });
    }
    let mut out = x.to_vec();
    for (i, var) in spec.variables.iter().enumerate() {
        if !t.contains(i) {
            for &d in &var.dims {
                out[d] = spec.baseline[d];
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    Linear,
}

/// Fully connected layer, `weights[out][in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn input_dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn output_dim(&self) -> usize {
        self.bias.len()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }
}

/// Small rectifier network producing class logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModel")]
pub struct ToyModel {
    kind: ModelKind,
    layers: Vec<DenseLayer>,
}

#[derive(Deserialize)]
struct RawModel {
    kind: ModelKind,
    layers: Vec<DenseLayer>,
}

impl TryFrom<RawModel> for ToyModel {
    type Error = Error;

    fn try_from(raw: RawModel) -> Result<Self> {
        ToyModel::new(raw.kind, raw.layers)
    }
}

/// Minibatch SGD settings for [`ToyModel::train`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Inputs with class labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl ToyModel {
    pub fn new(kind: ModelKind, layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Domain("a model needs at least one layer".into()));
        }
        if kind == ModelKind::Linear && layers.len() != 1 {
            return Err(Error::Domain(format!("linear model has {} layers", layers.len())));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.output_dim() == 0 || layer.weights.len() != layer.output_dim() {
                return Err(Error::Dimension {
                    expected: layer.output_dim(),
                    found: layer.weights.len(),
                });
            }
            let fan_in = layer.input_dim();
            if fan_in == 0 || layer.weights.iter().any(|row| row.len() != fan_in) {
                return Err(Error::Domain(format!("layer {l} has ragged or empty weight rows")));
            }
            if l > 0 && fan_in != layers[l - 1].output_dim() {
                return Err(Error::Dimension {
                    expected: layers[l - 1].output_dim(),
                    found: fan_in,
                });
            }
            let finite = layer.bias.iter().chain(layer.weights.iter().flatten()).all(|w| w.is_finite());
            if !finite {
                return Err(Error::Domain(format!("layer {l} has non-finite parameters")));
            }
        }
        Ok(Self { kind, layers })
    }

    /// He-initialized rectifier network with the given layer widths, input
    /// first and class count last.
    pub fn mlp(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Domain("need at least input and output widths, all positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive spread");
                DenseLayer {
                    weights: (0..w[1]).map(|_| (0..w[0]).map(|_| normal.sample(&mut rng)).collect()).collect(),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        let kind = if widths.len() == 2 { ModelKind::Linear } else { ModelKind::Mlp };
        Self::new(kind, layers)
    }

    pub fn linear(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        Self::new(ModelKind::Linear, vec![DenseLayer { weights, bias }])
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    /// Output of every layer: rectified hidden activations, then the logits.
    pub fn activations(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        let last = self.layers.len() - 1;
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let input = if l == 0 { x } else { &outputs[l - 1] };
            let mut out = layer.apply(input);
            if l < last {
                out.iter_mut().for_each(|a| *a = a.max(0.0));
            }
            outputs.push(out);
        }
        Ok(outputs)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.activations(x)?.pop().expect("non-empty"))
    }

    /// Final layer as a standalone linear head on the last hidden features.
    pub fn head(&self) -> &DenseLayer {
        self.layers.last().expect("non-empty")
    }

    /// SHA-256 of the canonical parameter document.
    pub fn digest(&self) -> String {
        json::digest(self).expect("models always serialize")
    }

    /// Softmax cross-entropy training; returns the mean loss of each epoch.
    pub fn train(&mut self, data: &Dataset, config: &TrainConfig) -> Result<Vec<f64>> {
        if data.inputs.is_empty() || data.inputs.len() != data.labels.len() {
            return Err(Error::Training(format!(
                "{} inputs with {} labels",
                data.inputs.len(),
                data.labels.len()
            )));
        }
        let classes = self.class_count();
        if classes < 2 {
            return Err(Error::Training("softmax training needs at least two logits".into()));
        }
        if let Some(&bad) = data.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Training(format!("label {bad} out of range for {classes} classes")));
        }
        if let Some(x) = data.inputs.iter().find(|x| x.len() != self.input_dim()) {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        if config.batch_size == 0 || !(config.learning_rate > 0.0) {
            return Err(Error::Config("batch_size and learning_rate must be positive".into()));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..data.inputs.len()).collect();
        let mut grads: Vec<DenseLayer> = self
            .layers
            .iter()
            .map(|l| DenseLayer {
                weights: vec![vec![0.0; l.input_dim()]; l.output_dim()],
                bias: vec![0.0; l.output_dim()],
            })
            .collect();
        let mut history = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(config.batch_size) {
                for g in grads.iter_mut() {
                    g.weights.iter_mut().flatten().for_each(|w| *w = 0.0);
                    g.bias.iter_mut().for_each(|b| *b = 0.0);
                }
                for &i in batch {
                    total += self.backprop(&data.inputs[i], data.labels[i], &mut grads);
                }
                let scale = config.learning_rate / batch.len() as f64;
                for (layer, g) in self.layers.iter_mut().zip(&grads) {
                    for (row, grow) in layer.weights.iter_mut().zip(&g.weights) {
                        for (w, gw) in row.iter_mut().zip(grow) {
                            *w -= scale * gw;
                        }
                    }
                    for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                        *b -= scale * gb;
                    }
                }
            }
            let mean = total / data.inputs.len() as f64;
            if !mean.is_finite() {
                return Err(Error::Training(format!("loss became non-finite in epoch {epoch}")));
            }
            history.push(mean);
        }
        Ok(history)
    }

    /// Adds the gradient of one sample's loss to `grads`; returns the loss.
    fn backprop(&self, x: &[f64], y: usize, grads: &mut [DenseLayer]) -> f64 {
        let acts = self.activations(x).expect("dimensions checked by caller");
        let logits = acts.last().expect("non-empty");
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = logits.iter().map(|z| (z - top).exp()).sum();
        let loss = norm.ln() + top - logits[y];
        let mut delta: Vec<f64> = logits.iter().map(|z| (z - top).exp() / norm).collect();
        delta[y] -= 1.0;
        for l in (0..self.layers.len()).rev() {
            let input = if l == 0 { x } else { &acts[l - 1] };
            for (o, d) in delta.iter().enumerate() {
                grads[l].bias[o] += d;
                for (g, a) in grads[l].weights[o].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let mut back = vec![0.0; input.len()];
                for (o, d) in delta.iter().enumerate() {
                    for (b, w) in back.iter_mut().zip(&self.layers[l].weights[o]) {
                        *b += d * w;
                    }
                }
                // rectifier derivative at the previous layer's output
                for (b, a) in back.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
        loss
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let mut hits = 0usize;
        for (x, &y) in data.inputs.iter().zip(&data.labels) {
            let logits = self.logits(x)?;
            let best = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("non-empty");
            hits += usize::from(best == y);
        }
        Ok(hits as f64 / data.inputs.len().max(1) as f64)
    }

    pub fn read(path: &Path) -> Result<Self> {
        json::read(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        json::write(path, self)
    }
}

/// Evaluates `model` on all `2^n` masked variants of `x` and records the
/// log-odds of class `y`.
pub fn table_from_model(model: &ToyModel, x: &[f64], y: usize, spec: &MaskingSpec, link: Link) -> Result<ValueTable> {
    if model.input_dim() != spec.input_dim() {
        return Err(Error::Dimension {
            expected: spec.input_dim(),
            found: model.input_dim(),
        });
    }
    let n = spec.n();
    let values = (0..1usize << n)
        .into_par_iter()
        .map(|t| {
            let masked = mask_input(x, SubsetMask::new(t as u32, n)?, spec)?;
            logodds_from_logits(&model.logits(&masked)?, y, link)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ValueTable::new(LatticeArray::new(n, values)?)
        .with_meta(META_CLASS, y)
        .with_meta(META_MASKING_DIGEST, spec.digest())
        .with_meta(META_MODEL, model.digest()))
}

/// One planted AND or OR term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTerm {
    pub mask: usize,
    pub kind: InteractionKind,
    pub coefficient: f64,
}

impl PlantedTerm {
    pub fn and(mask: usize, coefficient: f64) -> Self {
        Self {
            mask,
            kind: InteractionKind::And,
            coefficient,
        }
    }

    pub fn or(mask: usize, coefficient: f64) -> Self {
        Self {
            mask,
            kind: InteractionKind::Or,
            coefficient,
        }
    }

    /// Whether the term fires when the variables in `t` are present.
    pub fn active(&self, t: usize) -> bool {
        match self.kind {
            InteractionKind::And => self.mask & !t == 0,
            InteractionKind::Or => self.mask & t != 0,
        }
    }
}

fn check_terms(n: usize, terms: &[PlantedTerm]) -> Result<()> {
    check_variable_count(n)?;
    for term in terms {
        if term.mask == 0 || term.mask >= 1 << n {
            return Err(Error::Domain(format!("planted mask {} invalid for n = {n}", term.mask)));
        }
        if !term.coefficient.is_finite() {
            return Err(Error::Domain("planted coefficient is not finite".into()));
        }
    }
    Ok(())
}

/// `v(T) = Σ c·1[term fires at T] + uniform(−noise, noise)`, seeded.
pub fn planted_table(n: usize, terms: &[PlantedTerm], noise: f64, seed: u64) -> Result<ValueTable> {
    check_terms(n, terms)?;
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Domain(format!("noise amplitude {noise} must be finite and >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = LatticeArray::from_fn(n, |t| {
        let clean: f64 = terms.iter().filter(|term| term.active(t)).map(|term| term.coefficient).sum();
        if noise > 0.0 {
            clean + rng.random_range(-noise..=noise)
        } else {
            clean
        }
    })?;
    Ok(ValueTable::new(values).with_label("planted"))
}

/// Random planted terms: `k` distinct masks of order at least 2, kind drawn
/// evenly, magnitude uniform in `[1, 2)` with a random sign.
pub fn random_terms(n: usize, k: usize, seed: u64) -> Result<Vec<PlantedTerm>> {
    check_variable_count(n)?;
    let available = (1usize << n) - 1 - n;
    if k > available {
        return Err(Error::Domain(format!("only {available} masks of order >= 2 exist for n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut terms: Vec<PlantedTerm> = Vec::with_capacity(k);
    while terms.len() < k {
        let mask = rng.random_range(1..1usize << n);
        if mask.count_ones() < 2 || terms.iter().any(|t| t.mask == mask) {
            continue;
        }
        let magnitude = rng.random_range(1.0..2.0);
        let coefficient = if rng.random_bool(0.5) { magnitude } else { -magnitude };
        terms.push(if rng.random_bool(0.5) {
            PlantedTerm::and(mask, coefficient)
        } else {
            PlantedTerm::or(mask, coefficient)
        });
    }
    Ok(terms)
}

/// Two-class data driven by planted interactions: each input has one
/// dimension per variable, present (1) with probability ½ and jittered by
/// Gaussian noise of spread `jitter`; the label is whether the planted score
/// of the clean presence pattern lies above its median over the sample,
/// with ties at the median placed on the side that balances the classes.
pub fn planted_dataset(n: usize, terms: &[PlantedTerm], samples: usize, jitter: f64, seed: u64) -> Result<Dataset> {
    check_terms(n, terms)?;
    if samples == 0 || !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::Domain("need samples > 0 and finite jitter >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, jitter.max(f64::MIN_POSITIVE)).expect("positive spread");
    let mut inputs = Vec::with_capacity(samples);
    let mut scores = Vec::with_capacity(samples);
    for _ in 0..samples {
        let present: usize = (0..n).filter(|_| rng.random_bool(0.5)).map(|i| 1 << i).sum();
        let x = (0..n)
            .map(|i| {
                let base = if present & (1 << i) != 0 { 1.0 } else { 0.0 };
                if jitter > 0.0 {
                    base + normal.sample(&mut rng)
                } else {
                    base
                }
            })
            .collect();
        inputs.push(x);
        scores.push(terms.iter().filter(|t| t.active(present)).map(|t| t.coefficient).sum::<f64>());
    }
    let mut sorted = scores.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[samples / 2];
    let at_or_above = scores.iter().filter(|&&s| s >= median).count();
    let above = scores.iter().filter(|&&s| s > median).count();
    // ties at the median go to whichever side leaves the classes more even
    let inclusive = above == 0 || at_or_above.abs_diff(samples / 2) <= above.abs_diff(samples / 2);
    let labels: Vec<usize> = scores
        .iter()
        .map(|&s| usize::from(if inclusive { s >= median } else { s > median }))
        .collect();
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Domain("planted terms give every sample the same score".into()));
    }
    Ok(Dataset { inputs, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::{optimize, OptimizerConfig};
    use crate::interaction::and_interactions;
    use proptest::prelude::*;

    #[test]
    fn logodds_examples() {
        assert_eq!(logodds(0.5).unwrap(), 0.0);
        assert!((logodds(0.9).unwrap() - 9f64.ln()).abs() < 1e-12);
        assert!((logodds(0.9).unwrap() - 2.19722).abs() < 1e-5);
        assert_eq!(logodds(1.0).unwrap(), logodds(1.0 - 1e-7).unwrap());
        assert!(logodds(1.0).unwrap().is_finite());
        assert!(logodds(0.0).unwrap().is_finite());
        assert!(matches!(logodds(1.5), Err(Error::Domain(_))));
        assert!(matches!(logodds(-0.1), Err(Error::Domain(_))));
        assert!(logodds(f64::NAN).is_err());
    }

    #[test]
    fn two_class_softmax_gives_the_logit_margin() {
        let v = logodds_from_logits(&[0.3, 2.05], 1, Link::Softmax).unwrap();
        assert!((v - 1.75).abs() < 1e-12);
        let v = logodds_from_logits(&[0.3, 2.05], 0, Link::Softmax).unwrap();
        assert!((v + 1.75).abs() < 1e-12);
        assert_eq!(logodds_from_logits(&[1.25], 1, Link::Softmax).unwrap(), 1.25);
        assert_eq!(logodds_from_logits(&[1.25], 0, Link::Sigmoid).unwrap(), -1.25);
        assert_eq!(logodds_from_logits(&[100.0, -100.0], 0, Link::Softmax).unwrap(), logodds_limit());
        assert!(logodds_from_logits(&[1.0, 2.0], 2, Link::Softmax).is_err());
        assert!(logodds_from_logits(&[1.0], 2, Link::Softmax).is_err());
    }

    #[test]
    fn softmax_logodds_matches_probability_route() {
        let logits = [0.2, -1.0, 1.7, 0.4];
        let norm: f64 = logits.iter().map(|z: &f64| z.exp()).sum();
        for y in 0..4 {
            let p = logits[y].exp() / norm;
            let direct = logodds_from_logits(&logits, y, Link::Softmax).unwrap();
            assert!((direct - logodds(p).unwrap()).abs() < 1e-12);
        }
        let sig = logodds_from_logits(&logits, 2, Link::Sigmoid).unwrap();
        assert_eq!(sig, 1.7);
    }

    #[test]
    fn mask_input_examples() {
        let spec = MaskingSpec::per_dimension(vec![0.0, 0.0]).unwrap();
        let x = [1.0, 2.0];
        assert_eq!(mask_input(&x, SubsetMask::full(2).unwrap(), &spec).unwrap(), vec![1.0, 2.0]);
        assert_eq!(mask_input(&x, SubsetMask::empty(2).unwrap(), &spec).unwrap(), vec![0.0, 0.0]);
        assert_eq!(mask_input(&x, SubsetMask::new(0b01, 2).unwrap(), &spec).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(
            mask_input(&[1.0], SubsetMask::full(2).unwrap(), &spec),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn masking_each_variable_touches_only_its_dimensions() {
        let baseline: Vec<f64> = (0..36).map(|d| -(d as f64)).collect();
        let spec = MaskingSpec::grid(6, 6, 2, 3, baseline).unwrap();
        assert_eq!(spec.n(), 6);
        let x: Vec<f64> = (0..36).map(|d| 100.0 + d as f64).collect();
        let full = spec.n();
        for i in 0..full {
            let dims = &spec.variables()[i].dims;
            for t in 0..1u32 << full {
                let masked = mask_input(&x, SubsetMask::new(t, full).unwrap(), &spec).unwrap();
                for &d in dims {
                    let expect = if t & (1 << i) != 0 { x[d] } else { spec.baseline()[d] };
                    assert_eq!(masked[d], expect);
                }
            }
        }
    }

    #[test]
    fn masking_spec_validation() {
        let var = |dims: Vec<usize>| Variable {
            name: "v".into(),
            dims,
            patch: None,
        };
        assert!(MaskingSpec::new(vec![var(vec![0]), var(vec![0])], vec![0.0; 2]).is_err());
        assert!(MaskingSpec::new(vec![var(vec![])], vec![0.0; 2]).is_err());
        assert!(matches!(
            MaskingSpec::new(vec![var(vec![5])], vec![0.0; 2]),
            Err(Error::Dimension { .. })
        ));
        assert!(MaskingSpec::new(vec![var(vec![1])], vec![0.0, f64::NAN]).is_err());
        let spec = MaskingSpec::new(vec![var(vec![1])], vec![0.0; 3]).unwrap();
        let x = [7.0, 8.0, 9.0];
        assert_eq!(mask_input(&x, SubsetMask::empty(1).unwrap(), &spec).unwrap(), vec![7.0, 0.0, 9.0]);
    }

    #[test]
    fn grid_select_and_digest() {
        let spec = MaskingSpec::grid(4, 5, 2, 2, vec![0.5; 20]).unwrap();
        assert_eq!(spec.n(), 6);
        assert_eq!(spec.variables()[2].dims, vec![4, 9]);
        let picked = spec.select(&[5, 0]).unwrap();
        assert_eq!(picked.n(), 2);
        assert_eq!(picked.variables()[0].name, "patch_2_4");
        assert_ne!(picked.digest(), spec.digest());
        assert_eq!(spec.digest(), spec.clone().digest());
        assert_eq!(spec.digest().len(), 64);
    }

    #[test]
    fn masking_spec_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        let spec = MaskingSpec::grid(3, 3, 2, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]).unwrap();
        spec.write(&path).unwrap();
        let back = MaskingSpec::read(&path).unwrap();
        assert_eq!(back, spec);
        assert_eq!(back.digest(), spec.digest());
    }

    #[test]
    fn masking_spec_schema_errors() {
        let text = r#"{"format_version": 1, "n": 2, "variables": [{"name": "a", "dims": [0]}], "baseline": [0.0]}"#;
        assert!(matches!(MaskingSpec::from_json(Path::new("s"), text), Err(Error::Schema { .. })));
    }

    fn sample_table() -> ValueTable {
        let values = LatticeArray::from_fn(3, |t| 0.1 * t as f64 - 1.0 / 3.0).unwrap();
        ValueTable::new(values)
            .with_label("sample 7 / layer fc2")
            .with_meta(META_CLASS, 3)
            .with_meta("custom_key", "kept as is")
    }

    #[test]
    fn table_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let table = sample_table();
        table.write(&path).unwrap();
        let back = ValueTable::read(&path).unwrap();
        assert_eq!(back, table);
        for (a, b) in back.values.iter().zip(table.values.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn table_document_layout() {
        let text = sample_table().to_json().unwrap();
        let doc: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(doc["format_version"], 1);
        assert_eq!(doc["n"], 3);
        assert_eq!(doc["metadata"]["custom_key"], "kept as is");
        assert_eq!(doc["values"].as_array().unwrap().len(), 8);
    }

    #[test]
    fn unknown_metadata_is_preserved() {
        let text = r#"{"format_version": 1, "n": 1, "label": "x",
            "metadata": {"zz_future": "42", "model": "m"}, "values": [0.5, 1.5]}"#;
        let table = ValueTable::from_json(Path::new("t"), text).unwrap();
        assert_eq!(table.metadata["zz_future"], "42");
        let again = ValueTable::from_json(Path::new("t"), &table.to_json().unwrap()).unwrap();
        assert_eq!(again.metadata, table.metadata);
    }

    #[test]
    fn short_table_is_a_schema_error_with_counts() {
        let text = r#"{"format_version": 1, "n": 3, "values": [0, 1, 2, 3, 4, 5, 6]}"#;
        match ValueTable::from_json(Path::new("t.json"), text) {
            Err(Error::Schema { message, .. }) => {
                assert!(message.contains('8') && message.contains('7'), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_table_is_a_parse_error() {
        let text = "{\"format_version\": 1,\n \"n\": 1,\n \"values\": [0.5, oops]}";
        match ValueTable::from_json(Path::new("t.json"), text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = r#"{"format_version": 1, "values": [0.5, 1]}"#;
        assert!(matches!(ValueTable::from_json(Path::new("t"), text), Err(Error::Parse { .. })));
        let text = r#"{"format_version": 9, "n": 1, "values": [0.5, 1]}"#;
        assert!(matches!(ValueTable::from_json(Path::new("t"), text), Err(Error::Schema { .. })));
    }

    #[test]
    fn missing_table_is_input_not_found() {
        let err = ValueTable::read(Path::new("/nonexistent/table.json")).unwrap_err();
        assert_eq!(err.kind(), "input-not-found");
    }

    #[test]
    fn linear_model_table_is_first_order() {
        let w = vec![0.7, -1.3, 0.4, 2.0];
        let model = ToyModel::linear(vec![w.clone()], vec![0.0]).unwrap();
        let spec = MaskingSpec::per_dimension(vec![0.0; 4]).unwrap();
        let x = [1.0, 0.5, -2.0, 0.25];
        let table = table_from_model(&model, &x, 1, &spec, Link::Softmax).unwrap();
        let effects = and_interactions(&table.values);
        for t in 0..16usize {
            let expect: f64 = (0..4).filter(|i| t & (1 << i) != 0).map(|i| w[i] * x[i]).sum();
            assert!((table.values[t] - table.values[0] - expect).abs() < 1e-12);
            if t.count_ones() >= 2 {
                assert!(effects[t].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_model_gives_constant_table() {
        let model = ToyModel::linear(vec![vec![0.0; 3]; 4], vec![0.0; 4]).unwrap();
        let spec = MaskingSpec::per_dimension(vec![0.3; 3]).unwrap();
        let table = table_from_model(&model, &[1.0, 2.0, 3.0], 2, &spec, Link::Softmax).unwrap();
        let expect = logodds(0.25).unwrap();
        assert!(table.values.iter().all(|v| (v - expect).abs() < 1e-12));
        let effects = and_interactions(&table.values);
        assert!(effects.iter().skip(1).all(|e| e.abs() < 1e-12));
    }

    #[test]
    fn model_table_full_entry_and_determinism() {
        let model = ToyModel::mlp(&[5, 8, 6, 3], 9).unwrap();
        let spec = MaskingSpec::per_dimension(vec![0.1; 5]).unwrap();
        let x = [0.4, -0.2, 1.1, 0.0, 0.8];
        let a = table_from_model(&model, &x, 2, &spec, Link::Softmax).unwrap();
        let b = table_from_model(&model, &x, 2, &spec, Link::Softmax).unwrap();
        assert_eq!(a.values.len(), 32);
        let direct = logodds_from_logits(&model.logits(&x).unwrap(), 2, Link::Softmax).unwrap();
        assert_eq!(a.values.at_full(), direct);
        for (p, q) in a.values.iter().zip(b.values.iter()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
        assert_eq!(a.metadata[META_MASKING_DIGEST], spec.digest());
        let wrong = MaskingSpec::per_dimension(vec![0.0; 4]).unwrap();
        assert!(table_from_model(&model, &x[..4], 0, &wrong, Link::Softmax).is_err());
    }

    #[test]
    fn model_shape_validation_and_round_trip() {
        let layer = |o: usize, i: usize| DenseLayer {
            weights: vec![vec![0.1; i]; o],
            bias: vec![0.0; o],
        };
        assert!(ToyModel::new(ModelKind::Mlp, vec![layer(4, 3), layer(2, 5)]).is_err());
        assert!(ToyModel::new(ModelKind::Linear, vec![layer(4, 3), layer(2, 4)]).is_err());
        assert!(ToyModel::new(ModelKind::Mlp, vec![]).is_err());
        let model = ToyModel::new(ModelKind::Mlp, vec![layer(4, 3), layer(2, 4)]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.write(&path).unwrap();
        assert_eq!(ToyModel::read(&path).unwrap(), model);
        std::fs::write(&path, r#"{"kind": "mlp", "layers": []}"#).unwrap();
        assert!(ToyModel::read(&path).is_err());
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let model = ToyModel::mlp(&[3, 4, 3], 5).unwrap();
        let x = [0.3, -0.7, 1.2];
        let y = 1;
        let loss = |m: &ToyModel| {
            let z = m.logits(&x).unwrap();
            let norm: f64 = z.iter().map(|v| v.exp()).sum();
            norm.ln() - z[y]
        };
        let mut grads: Vec<DenseLayer> = model
            .layers()
            .iter()
            .map(|l| DenseLayer {
                weights: vec![vec![0.0; l.input_dim()]; l.output_dim()],
                bias: vec![0.0; l.output_dim()],
            })
            .collect();
        let value = model.backprop(&x, y, &mut grads);
        assert!((value - loss(&model)).abs() < 1e-12);
        let h = 1e-6;
        for l in 0..2 {
            for o in 0..model.layers()[l].output_dim() {
                for i in 0..model.layers()[l].input_dim() {
                    let mut plus = model.clone();
                    plus.layers[l].weights[o][i] += h;
                    let mut minus = model.clone();
                    minus.layers[l].weights[o][i] -= h;
                    let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                    assert!((numeric - grads[l].weights[o][i]).abs() < 1e-6);
                }
                let mut plus = model.clone();
                plus.layers[l].bias[o] += h;
                let mut minus = model.clone();
                minus.layers[l].bias[o] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!((numeric - grads[l].bias[o]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn training_learns_planted_task() {
        let terms = [PlantedTerm::and(0b0011, 1.5), PlantedTerm::or(0b1100, -1.0)];
        let data = planted_dataset(4, &terms, 400, 0.05, 3).unwrap();
        let mut model = ToyModel::mlp(&[4, 16, 2], 1).unwrap();
        let before = model.accuracy(&data).unwrap();
        let losses = model.train(&data, &TrainConfig::default()).unwrap();
        assert_eq!(losses.len(), 200);
        assert!(losses.last().unwrap() < &losses[0]);
        let after = model.accuracy(&data).unwrap();
        assert!(after >= 0.95 && after > before, "{before} -> {after}");
    }

    #[test]
    fn planted_labels_split_ties_towards_balance() {
        // the OR term is on for 3/4 of inputs, so the median is tied
        let terms = [PlantedTerm::and(0b00011, 1.5), PlantedTerm::or(0b01100, -1.0)];
        let data = planted_dataset(5, &terms, 600, 0.05, 3).unwrap();
        let positives = data.labels.iter().filter(|&&l| l == 1).count();
        assert!((100..=500).contains(&positives), "{positives}");
        assert!(planted_dataset(3, &[], 50, 0.0, 0).is_err());
    }

    #[test]
    fn training_rejects_bad_labels() {
        let mut model = ToyModel::mlp(&[2, 2], 0).unwrap();
        let data = Dataset {
            inputs: vec![vec![0.0, 1.0]],
            labels: vec![4],
        };
        assert!(matches!(model.train(&data, &TrainConfig::default()), Err(Error::Training(_))));
    }

    #[test]
    fn planted_table_examples() {
        let and = planted_table(3, &[PlantedTerm::and(0b011, 1.0)], 0.0, 0).unwrap();
        let effects = and_interactions(&and.values);
        for s in 0..8 {
            assert_eq!(effects[s], if s == 0b011 { 1.0 } else { 0.0 });
        }
        let empty = planted_table(4, &[], 0.0, 0).unwrap();
        assert!(empty.values.iter().all(|&v| v == 0.0));
        assert!(planted_table(3, &[PlantedTerm::and(0, 1.0)], 0.0, 0).is_err());
        assert!(planted_table(3, &[PlantedTerm::and(8, 1.0)], 0.0, 0).is_err());
        assert!(planted_table(3, &[], -1.0, 0).is_err());
    }

    #[test]
    fn planted_or_term_is_recovered_by_optimization() {
        let table = planted_table(3, &[PlantedTerm::or(0b011, 1.0)], 0.0, 0).unwrap();
        let res = optimize(&table.values, 0.0, &OptimizerConfig::default()).unwrap();
        for s in 1..8 {
            let expect = if s == 0b011 { 1.0 } else { 0.0 };
            assert!((res.spectrum.or_effects()[s] - expect).abs() < 1e-9);
            assert!(res.spectrum.and_effects()[s].abs() < 1e-9);
        }
    }

    #[test]
    fn planted_noise_is_seeded_and_bounded() {
        let terms = random_terms(6, 4, 2).unwrap();
        let a = planted_table(6, &terms, 1e-3, 5).unwrap();
        let b = planted_table(6, &terms, 1e-3, 5).unwrap();
        let clean = planted_table(6, &terms, 0.0, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.values.max_abs_diff(&clean.values) <= 1e-3);
        assert!(a.values.max_abs_diff(&clean.values) > 0.0);
    }

    #[test]
    fn random_terms_are_distinct_and_high_order() {
        let terms = random_terms(5, 8, 1).unwrap();
        assert_eq!(terms.len(), 8);
        for (i, t) in terms.iter().enumerate() {
            assert!(t.mask.count_ones() >= 2 && t.mask < 32);
            assert!((1.0..2.0).contains(&t.coefficient.abs()));
            assert!(terms[..i].iter().all(|u| u.mask != t.mask));
        }
        assert!(random_terms(3, 5, 0).is_err());
    }

    proptest! {
        #[test]
        fn logodds_is_odd_and_increasing(p in 1e-7f64..0.5, q in 1e-7f64..0.5) {
            let a = logodds(p).unwrap();
            prop_assert!((a + logodds(1.0 - p).unwrap()).abs() < 1e-8);
            if p < q {
                prop_assert!(a < logodds(q).unwrap());
            }
        }

        #[test]
        fn planted_noiseless_values_are_analytic(n in 1usize..=8, seed in 0u64..500) {
            let k = seed as usize % 4;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let terms: Vec<PlantedTerm> = (0..k)
                .map(|_| {
                    let mask = rng.random_range(1..1usize << n);
                    if rng.random_bool(0.5) { PlantedTerm::and(mask, 1.0) } else { PlantedTerm::or(mask, 1.0) }
                })
                .collect();
            let table = planted_table(n, &terms, 0.0, seed).unwrap();
            for t in 0..1usize << n {
                let expect = terms
                    .iter()
                    .filter(|term| match term.kind {
                        InteractionKind::And => term.mask & t == term.mask,
                        InteractionKind::Or => term.mask & t != 0,
                    })
                    .count() as f64;
                prop_assert_eq!(table.values[t], expect);
            }
        }
    }
}
