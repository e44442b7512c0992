//! Linear probes on intermediate-layer features and the value tables they
//! induce.
//!
//! Feature dumps are plain text. The first line is
//! `layer=<id>,d=<dim>,classes=<C>`; every following line is
//! `sample_id,mask,label,f_1,...,f_d` where `mask` is the decimal bitmask of
//! present variables or `FULL` for the unmasked input.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json;
use crate::lattice::{check_variable_count, LatticeArray, SubsetMask};
use crate::value::{
    logodds_from_logits, mask_input, Dataset, Link, MaskingSpec, ToyModel, ValueTable, META_CLASS, META_LAYER,
    META_MASKING_DIGEST, META_SAMPLE,
};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRow {
    pub sample: String,
    /// `None` for the unmasked input.
    pub mask: Option<usize>,
    pub label: usize,
    pub features: Vec<f64>,
}

/// Features of one layer for a set of (sample, mask) inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDump {
    layer: String,
    dim: usize,
    classes: usize,
    rows: Vec<FeatureRow>,
}

impl FeatureDump {
    pub fn new(layer: impl Into<String>, dim: usize, classes: usize) -> Result<Self> {
        let layer = layer.into();
        if dim == 0 || classes == 0 {
            return Err(Error::Domain("feature dimension and class count must be positive".into()));
        }
        if layer.contains([',', '\n', '\r']) {
            return Err(Error::Domain(format!("layer id {layer:?} contains a separator")));
        }
        Ok(Self {
            layer,
            dim,
            classes,
            rows: Vec::new(),
        })
    }

    pub fn push(&mut self, row: FeatureRow) -> Result<()> {
        if row.features.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                found: row.features.len(),
            });
        }
        if row.label >= self.classes {
            return Err(Error::Domain(format!(
                "label {} out of range for {} classes",
                row.label, self.classes
            )));
        }
        if let Some(i) = row.features.iter().position(|f| !f.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        if row.sample.is_empty() || row.sample.contains([',', '\n', '\r']) {
            return Err(Error::Domain(format!("sample id {:?} is empty or contains a separator", row.sample)));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn layer(&self) -> &str {
        &self.layer
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    /// Rows of one sample, in file order.
    pub fn sample(&self, id: &str) -> Self {
        Self {
            rows: self.rows.iter().filter(|r| r.sample == id).cloned().collect(),
            ..self.without_rows()
        }
    }

    /// Distinct sample ids in order of first appearance.
    pub fn sample_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.sample.as_str()))
            .map(|r| r.sample.clone())
            .collect()
    }

    fn without_rows(&self) -> Self {
        Self {
            layer: self.layer.clone(),
            dim: self.dim,
            classes: self.classes,
            rows: Vec::new(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("layer={},d={},classes={}\n", self.layer, self.dim, self.classes);
        for row in &self.rows {
            match row.mask {
                Some(m) => write!(out, "{},{},{}", row.sample, m, row.label),
                None => write!(out, "{},FULL,{}", row.sample, row.label),
            }
            .expect("writing to a string");
            for f in &row.features {
                write!(out, ",{f:.16e}").expect("writing to a string");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(path: &Path, text: &str) -> Result<Self> {
        let parse = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let (header, body) = text.split_once('\n').unwrap_or((text, ""));
        let mut fields = BTreeMap::new();
        for part in header.trim_end_matches('\r').split(',') {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| parse(1, format!("header field {part:?} is not key=value")))?;
            fields.insert(key.trim(), value.trim());
        }
        let field = |key: &str| fields.get(key).copied().ok_or_else(|| parse(1, format!("header lacks {key}")));
        let number = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|e| parse(1, format!("header field {key}: {e}")))
        };
        let mut dump = Self::new(field("layer")?, number("d")?, number("classes")?).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;

        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line() as usize + 1);
                parse(line, e.to_string())
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize + 1);
            if record.len() != dump.dim + 3 {
                return Err(parse(
                    line,
                    format!("expected {} fields, found {}", dump.dim + 3, record.len()),
                ));
            }
            let mask = match &record[1] {
                "FULL" => None,
                m => Some(m.parse().map_err(|e| parse(line, format!("mask {m:?}: {e}")))?),
            };
            let label = record[2]
                .parse()
                .map_err(|e| parse(line, format!("label {:?}: {e}", &record[2])))?;
            let features = record
                .iter()
                .skip(3)
                .map(|f| f.parse::<f64>().map_err(|e| parse(line, format!("feature {f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            dump.push(FeatureRow {
                sample: record[0].to_string(),
                mask,
                label,
                features,
            })
            .map_err(|e| Error::Schema {
                path: path.to_path_buf(),
                message: format!("line {line}: {e}"),
            })?;
        }
        Ok(dump)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(path, &text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Linear classifier `z = wᵀf + b` with `w` stored as `d` rows of `C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProbe")]
pub struct ProbeModel {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Deserialize)]
struct RawProbe {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl TryFrom<RawProbe> for ProbeModel {
    type Error = Error;

    fn try_from(raw: RawProbe) -> Result<Self> {
        ProbeModel::new(raw.weights, raw.bias)
    }
}

impl ProbeModel {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let classes = bias.len();
        if classes == 0 || weights.is_empty() {
            return Err(Error::Domain("probe needs at least one feature and one class".into()));
        }
        if let Some(row) = weights.iter().find(|row| row.len() != classes) {
            return Err(Error::Dimension {
                expected: classes,
                found: row.len(),
            });
        }
        if let Some(i) = weights.iter().flatten().chain(&bias).position(|w| !w.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(dim: usize, classes: usize) -> Result<Self> {
        Self::new(vec![vec![0.0; classes]; dim], vec![0.0; classes])
    }

    /// The probe that reproduces a dense layer's outputs.
    pub fn from_head(weights_out_in: &[Vec<f64>], bias: &[f64]) -> Result<Self> {
        let dim = weights_out_in.first().map_or(0, Vec::len);
        let weights = (0..dim).map(|j| weights_out_in.iter().map(|row| row[j]).collect()).collect();
        Self::new(weights, bias.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn logits(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim() {
            return Err(Error::Dimension {
                expected: self.dim(),
                found: features.len(),
            });
        }
        let mut z = self.bias.clone();
        for (f, row) in features.iter().zip(&self.weights) {
            for (zc, w) in z.iter_mut().zip(row) {
                *zc += f * w;
            }
        }
        Ok(z)
    }

    pub fn accuracy(&self, dump: &FeatureDump) -> Result<f64> {
        let mut hits = 0usize;
        for row in &dump.rows {
            let z = self.logits(&row.features)?;
            let best = (0..z.len()).max_by(|&a, &b| z[a].total_cmp(&z[b])).expect("non-empty");
            hits += usize::from(best == row.label);
        }
        Ok(hits as f64 / dump.rows.len().max(1) as f64)
    }

    pub fn read(path: &Path) -> Result<Self> {
        json::read(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        json::write(path, self)
    }
}

/// Full-batch gradient descent on softmax cross-entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Also train on masked rows, not only `FULL` ones.
    pub include_masked: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 500,
            include_masked: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeFit {
    pub probe: ProbeModel,
    /// Mean loss before training, then after each epoch.
    pub losses: Vec<f64>,
    /// Step size in use at the end; smaller than configured when steps had
    /// to be shortened to keep the loss from rising.
    pub final_learning_rate: f64,
}

/// Mean cross-entropy and its gradient with respect to (w, b).
fn loss_and_gradient(probe: &ProbeModel, rows: &[&FeatureRow]) -> (f64, Vec<Vec<f64>>, Vec<f64>) {
    let classes = probe.classes();
    let mut grad_w = vec![vec![0.0; classes]; probe.dim()];
    let mut grad_b = vec![0.0; classes];
    let mut total = 0.0;
    for row in rows {
        let z = probe.logits(&row.features).expect("dimensions validated");
        let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = z.iter().map(|v| (v - top).exp()).sum();
        total += norm.ln() + top - z[row.label];
        for c in 0..classes {
            let d = (z[c] - top).exp() / norm - f64::from(u8::from(c == row.label));
            grad_b[c] += d;
            for (g, f) in grad_w.iter_mut().zip(&row.features) {
                g[c] += d * f;
            }
        }
    }
    let m = rows.len() as f64;
    grad_w.iter_mut().flatten().for_each(|g| *g /= m);
    grad_b.iter_mut().for_each(|g| *g /= m);
    (total / m, grad_w, grad_b)
}

fn mean_loss(probe: &ProbeModel, rows: &[&FeatureRow]) -> f64 {
    let total: f64 = rows
        .iter()
        .map(|row| {
            let z = probe.logits(&row.features).expect("dimensions validated");
            let top = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let norm: f64 = z.iter().map(|v| (v - top).exp()).sum();
            norm.ln() + top - z[row.label]
        })
        .sum();
    total / rows.len() as f64
}

const MAX_STEP_HALVINGS: usize = 40;

/// Trains a probe from zero initialization. A step that would raise the loss
/// (or make it non-finite) is retried at half the rate, and the shorter rate
/// is kept for the remaining epochs; if no shortened step helps, training
/// stops at the last iterate.
pub fn train_probe(train: &FeatureDump, config: &ProbeConfig) -> Result<ProbeFit> {
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::Config(format!("learning rate {} must be positive", config.learning_rate)));
    }
    let rows: Vec<&FeatureRow> = train
        .rows
        .iter()
        .filter(|r| config.include_masked || r.mask.is_none())
        .collect();
    let present: BTreeSet<usize> = rows.iter().map(|r| r.label).collect();
    if present.len() < 2 {
        return Err(Error::Training(format!(
            "need at least two classes among {} training rows, found {}",
            rows.len(),
            present.len()
        )));
    }
    let mut probe = ProbeModel::zeros(train.dim, train.classes)?;
    let mut rate = config.learning_rate;
    let mut loss = mean_loss(&probe, &rows);
    let mut losses = Vec::with_capacity(config.epochs + 1);
    losses.push(loss);
    'epochs: for _ in 0..config.epochs {
        let (_, grad_w, grad_b) = loss_and_gradient(&probe, &rows);
        for _ in 0..MAX_STEP_HALVINGS {
            let mut next = probe.clone();
            for (row, grow) in next.weights.iter_mut().zip(&grad_w) {
                for (w, g) in row.iter_mut().zip(grow) {
                    *w -= rate * g;
                }
            }
            for (b, g) in next.bias.iter_mut().zip(&grad_b) {
                *b -= rate * g;
            }
            let next_loss = mean_loss(&next, &rows);
            if next_loss <= loss {
                probe = next;
                loss = next_loss;
                losses.push(loss);
                continue 'epochs;
            }
            rate /= 2.0;
        }
        break;
    }
    Ok(ProbeFit {
        probe,
        losses,
        final_learning_rate: rate,
    })
}

/// Value table of one sample: `v[T]` is the log-odds of class `y` from the
/// probe applied to the features of the input with only `T` present.
/// `FULL` rows are ignored; the masked rows must cover every subset of `n`
/// variables exactly once.
pub fn probe_table(probe: &ProbeModel, dump: &FeatureDump, n: usize, y: usize, link: Link) -> Result<ValueTable> {
    check_variable_count(n)?;
    if dump.dim != probe.dim() {
        return Err(Error::Dimension {
            expected: probe.dim(),
            found: dump.dim,
        });
    }
    let size = 1usize << n;
    let mut slots: Vec<Option<&FeatureRow>> = vec![None; size];
    let mut sample: Option<&str> = None;
    for row in dump.rows.iter().filter(|r| r.mask.is_some()) {
        match sample {
            None => sample = Some(&row.sample),
            Some(s) if s != row.sample => {
                return Err(Error::Domain(format!("rows from samples {s} and {} mixed", row.sample)));
            }
            _ => {}
        }
        let mask = row.mask.expect("filtered");
        let slot = slots.get_mut(mask).ok_or_else(|| {
            Error::Domain(format!("mask {mask} out of range for n = {n}"))
        })?;
        if slot.is_some() {
            return Err(Error::Domain(format!("mask {mask} appears twice")));
        }
        *slot = Some(row);
    }
    let missing: Vec<usize> = (0..size).filter(|&t| slots[t].is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Incomplete { missing });
    }
    let values = slots
        .iter()
        .map(|row| logodds_from_logits(&probe.logits(&row.expect("complete").features)?, y, link))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ValueTable::new(LatticeArray::new(n, values)?)
        .with_label(format!("{} / {}", sample.unwrap_or(""), dump.layer))
        .with_meta(META_LAYER, &dump.layer)
        .with_meta(META_SAMPLE, sample.unwrap_or(""))
        .with_meta(META_CLASS, y))
}

/// Layer ids used for a toy model's dumps: `layer1` … `layerL`, the last
/// being the logits.
pub fn layer_id(index: usize) -> String {
    format!("layer{}", index + 1)
}

/// Unmasked features of `data` at every layer of `model`, one dump per layer.
pub fn full_dumps(model: &ToyModel, data: &Dataset, prefix: &str) -> Result<Vec<FeatureDump>> {
    let classes = model.class_count();
    let mut dumps = model
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| FeatureDump::new(layer_id(l), layer.output_dim(), classes))
        .collect::<Result<Vec<_>>>()?;
    for (i, (x, &label)) in data.inputs.iter().zip(&data.labels).enumerate() {
        for (dump, features) in dumps.iter_mut().zip(model.activations(x)?) {
            dump.push(FeatureRow {
                sample: format!("{prefix}{i}"),
                mask: None,
                label,
                features,
            })?;
        }
    }
    Ok(dumps)
}

/// Features of all `2^n` masked variants of one input at every layer.
pub fn masked_dumps(model: &ToyModel, x: &[f64], label: usize, sample: &str, spec: &MaskingSpec) -> Result<Vec<FeatureDump>> {
    let classes = model.class_count();
    let mut dumps = model
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| FeatureDump::new(layer_id(l), layer.output_dim(), classes))
        .collect::<Result<Vec<_>>>()?;
    let n = spec.n();
    for t in 0..1usize << n {
        let masked = mask_input(x, SubsetMask::new(t as u32, n)?, spec)?;
        for (dump, features) in dumps.iter_mut().zip(model.activations(&masked)?) {
            dump.push(FeatureRow {
                sample: sample.to_string(),
                mask: Some(t),
                label,
                features,
            })?;
        }
    }
    Ok(dumps)
}

/// [`probe_table`] plus the masking digest, for tables built from a known
/// masking spec.
pub fn probe_table_with_spec(
    probe: &ProbeModel,
    dump: &FeatureDump,
    spec: &MaskingSpec,
    y: usize,
    link: Link,
) -> Result<ValueTable> {
    Ok(probe_table(probe, dump, spec.n(), y, link)?.with_meta(META_MASKING_DIGEST, spec.digest()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::{logodds, table_from_model};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn blobs(m: usize, seed: u64) -> FeatureDump {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dump = FeatureDump::new("blobs", 2, 2).unwrap();
        for i in 0..m {
            let label = i % 2;
            let centre = if label == 0 { -2.0 } else { 2.0 };
            dump.push(FeatureRow {
                sample: format!("s{i}"),
                mask: None,
                label,
                features: vec![centre + rng.random_range(-1.0..1.0), centre + rng.random_range(-1.0..1.0)],
            })
            .unwrap();
        }
        dump
    }

    #[test]
    fn separable_blobs_are_learned() {
        let dump = blobs(200, 1);
        let fit = train_probe(&dump, &ProbeConfig::default()).unwrap();
        assert_eq!(fit.losses.len(), 501);
        assert!(fit.probe.accuracy(&dump).unwrap() >= 0.99);
    }

    #[test]
    fn random_labels_give_chance_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut dump = FeatureDump::new("noise", 2, 2).unwrap();
        for i in 0..1000 {
            dump.push(FeatureRow {
                sample: format!("s{i}"),
                mask: None,
                label: rng.random_range(0..2),
                features: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            })
            .unwrap();
        }
        let fit = train_probe(&dump, &ProbeConfig::default()).unwrap();
        let acc = fit.probe.accuracy(&dump).unwrap();
        assert!((acc - 0.5).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn duplicated_rows_leave_the_probe_unchanged() {
        let dump = blobs(60, 2);
        let mut doubled = dump.clone();
        for row in dump.rows() {
            doubled.push(row.clone()).unwrap();
        }
        let a = train_probe(&dump, &ProbeConfig::default()).unwrap().probe;
        let b = train_probe(&doubled, &ProbeConfig::default()).unwrap().probe;
        for row in dump.rows() {
            let za = a.logits(&row.features).unwrap();
            let zb = b.logits(&row.features).unwrap();
            for (p, q) in za.iter().zip(&zb) {
                assert!((p - q).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_class_is_a_training_error() {
        let mut dump = FeatureDump::new("l", 1, 3).unwrap();
        for i in 0..5 {
            dump.push(FeatureRow {
                sample: format!("s{i}"),
                mask: None,
                label: 1,
                features: vec![i as f64],
            })
            .unwrap();
        }
        assert!(matches!(train_probe(&dump, &ProbeConfig::default()), Err(Error::Training(_))));
    }

    #[test]
    fn masked_rows_are_excluded_unless_requested() {
        let mut dump = blobs(20, 3);
        dump.push(FeatureRow {
            sample: "m".into(),
            mask: Some(1),
            label: 0,
            features: vec![50.0, 50.0],
        })
        .unwrap();
        let plain = train_probe(&dump, &ProbeConfig::default()).unwrap().probe;
        assert_eq!(plain, train_probe(&blobs(20, 3), &ProbeConfig::default()).unwrap().probe);
        let config = ProbeConfig {
            include_masked: true,
            ..ProbeConfig::default()
        };
        assert_ne!(train_probe(&dump, &config).unwrap().probe, plain);
    }

    #[test]
    fn large_features_still_descend() {
        let mut dump = blobs(50, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for row in dump.rows.iter_mut() {
            row.label = rng.random_range(0..2);
            row.features.iter_mut().for_each(|f| *f *= 300.0);
        }
        let fit = train_probe(&dump, &ProbeConfig::default()).unwrap();
        assert!(fit.final_learning_rate < 0.01);
        assert!(fit.losses.windows(2).all(|w| w[1] <= w[0]));
        assert!(fit.losses.last().unwrap() < &fit.losses[0]);
    }

    fn table_dump(n: usize, dim: usize, seed: u64) -> FeatureDump {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dump = FeatureDump::new("l2", dim, 2).unwrap();
        for t in 0..1usize << n {
            dump.push(FeatureRow {
                sample: "s0".into(),
                mask: Some(t),
                label: 1,
                features: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            })
            .unwrap();
        }
        dump
    }

    #[test]
    fn zero_probe_gives_uniform_logodds() {
        let probe = ProbeModel::zeros(3, 4).unwrap();
        let mut dump = FeatureDump::new("l", 3, 4).unwrap();
        for t in 0..8 {
            dump.push(FeatureRow {
                sample: "a".into(),
                mask: Some(t),
                label: 0,
                features: vec![t as f64, 1.0, -2.0],
            })
            .unwrap();
        }
        let table = probe_table(&probe, &dump, 3, 2, Link::Softmax).unwrap();
        let expect = logodds(0.25).unwrap();
        assert!(table.values.iter().all(|v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn missing_masks_are_listed() {
        let mut dump = table_dump(3, 2, 0);
        dump.rows.retain(|r| r.mask != Some(2) && r.mask != Some(5));
        let probe = ProbeModel::zeros(2, 2).unwrap();
        match probe_table(&probe, &dump, 3, 0, Link::Softmax) {
            Err(Error::Incomplete { missing }) => assert_eq!(missing, vec![2, 5]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_and_mixed_rows_are_rejected() {
        let probe = ProbeModel::zeros(2, 2).unwrap();
        let mut dump = table_dump(2, 2, 0);
        let first = dump.rows[0].clone();
        dump.push(first).unwrap();
        assert!(probe_table(&probe, &dump, 2, 0, Link::Softmax).is_err());
        let mut dump = table_dump(2, 2, 0);
        dump.rows[1].sample = "other".into();
        assert!(probe_table(&probe, &dump, 2, 0, Link::Softmax).is_err());
    }

    #[test]
    fn probe_matching_the_head_reproduces_the_model_table() {
        let model = ToyModel::mlp(&[6, 10, 8, 3], 4).unwrap();
        let spec = MaskingSpec::per_dimension(vec![0.0; 6]).unwrap();
        let x = [0.5, -1.0, 0.25, 2.0, 1.5, -0.5];
        let direct = table_from_model(&model, &x, 1, &spec, Link::Softmax).unwrap();
        let dumps = masked_dumps(&model, &x, 1, "x", &spec).unwrap();
        let head = model.head();
        let probe = ProbeModel::from_head(&head.weights, &head.bias).unwrap();
        let hidden = &dumps[dumps.len() - 2];
        let via_probe = probe_table(&probe, hidden, 6, 1, Link::Softmax).unwrap();
        assert!(via_probe.values.max_abs_diff(&direct.values) < 1e-6);
        assert_eq!(via_probe.metadata[META_LAYER], "layer2");
    }

    #[test]
    fn dump_text_round_trip() {
        let mut dump = table_dump(2, 3, 5);
        dump.push(FeatureRow {
            sample: "s0".into(),
            mask: None,
            label: 0,
            features: vec![0.1, 1.0 / 3.0, -7e-12],
        })
        .unwrap();
        let text = dump.to_text();
        assert!(text.starts_with("layer=l2,d=3,classes=2\n"));
        assert!(text.contains("s0,FULL,0,"));
        let back = FeatureDump::from_text(Path::new("d"), &text).unwrap();
        assert_eq!(back, dump);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        dump.write(&path).unwrap();
        assert_eq!(FeatureDump::read(&path).unwrap(), dump);
    }

    #[test]
    fn dump_parse_errors_carry_lines() {
        let text = "layer=a,d=2,classes=2\ns,FULL,0,1.0,2.0\ns,3,0,1.0\n";
        match FeatureDump::from_text(Path::new("d"), text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let text = "layer=a,d=2,classes=2\ns,FULL,0,1.0,x\n";
        assert!(matches!(FeatureDump::from_text(Path::new("d"), text), Err(Error::Parse { line: 2, .. })));
        let text = "layer=a,d=2\n";
        assert!(matches!(FeatureDump::from_text(Path::new("d"), text), Err(Error::Parse { line: 1, .. })));
        let text = "layer=a,d=1,classes=2\ns,FULL,7,1.0\n";
        assert!(matches!(FeatureDump::from_text(Path::new("d"), text), Err(Error::Schema { .. })));
    }

    #[test]
    fn probe_file_round_trip() {
        let probe = ProbeModel::new(vec![vec![0.1, -0.2], vec![1.0 / 3.0, 4.0]], vec![0.5, -0.5]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        probe.write(&path).unwrap();
        assert_eq!(ProbeModel::read(&path).unwrap(), probe);
        std::fs::write(&path, r#"{"weights": [[1.0]], "bias": [0.0, 1.0]}"#).unwrap();
        assert!(ProbeModel::read(&path).is_err());
    }

    #[test]
    fn full_dumps_cover_every_layer() {
        let model = ToyModel::mlp(&[3, 5, 4, 2], 0).unwrap();
        let data = Dataset {
            inputs: vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 0.0]],
            labels: vec![0, 1],
        };
        let dumps = full_dumps(&model, &data, "t").unwrap();
        assert_eq!(dumps.iter().map(FeatureDump::dim).collect::<Vec<_>>(), vec![5, 4, 2]);
        assert_eq!(dumps[2].rows()[1].features, model.logits(&data.inputs[1]).unwrap());
        assert_eq!(dumps[0].sample_ids(), vec!["t0", "t1"]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn two_class_table_is_the_logit_margin(seed in 0u64..1000, n in 1usize..=5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probe = ProbeModel::new(
                (0..3).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect(),
                vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            ).unwrap();
            let dump = table_dump(n, 3, seed);
            let table = probe_table(&probe, &dump, n, 1, Link::Softmax).unwrap();
            for row in dump.rows() {
                let z = probe.logits(&row.features).unwrap();
                prop_assert!((table.values[row.mask.unwrap()] - (z[1] - z[0])).abs() < 1e-10);
            }
        }

        #[test]
        fn row_order_does_not_matter(seed in 0u64..1000) {
            let probe = ProbeModel::new(vec![vec![0.3, -1.0], vec![2.0, 0.5]], vec![0.1, 0.0]).unwrap();
            let dump = table_dump(4, 2, seed);
            let mut shuffled = dump.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            use rand::seq::SliceRandom;
            shuffled.rows.shuffle(&mut rng);
            let a = probe_table(&probe, &dump, 4, 0, Link::Softmax).unwrap();
            let b = probe_table(&probe, &shuffled, 4, 0, Link::Softmax).unwrap();
            prop_assert_eq!(a.values, b.values);
        }

        #[test]
        fn default_schedule_never_raises_the_loss(seed in 0u64..1000, scale in 0.1f64..50.0) {
            let mut dump = blobs(40, seed);
            for row in dump.rows.iter_mut() {
                row.features.iter_mut().for_each(|f| *f *= scale);
            }
            let fit = train_probe(&dump, &ProbeConfig { epochs: 60, ..ProbeConfig::default() }).unwrap();
            prop_assert!(fit.losses.windows(2).all(|w| w[1] <= w[0]));
        }
    }
}
