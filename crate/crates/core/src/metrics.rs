//! Salient interactions and how they move between layers, across models and
//! under input noise.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::{kappa_for_ratio, optimize, DecompositionResult, OptimizerConfig, DEFAULT_KAPPA_RATIO};
use crate::error::{Error, Result};
use crate::interaction::{merge_first_order, InteractionKind, InteractionSpectrum};
use crate::lattice::{order_of, SubsetMask};
use crate::value::{MaskingSpec, ValueTable, META_MASKING_DIGEST};

pub const DEFAULT_TAU_RATIO: f64 = 0.05;
pub const DEFAULT_SIGMA: f64 = 0.02;
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Salient masks of one spectrum, bucketed by order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SalientIndex {
    pub layer: String,
    pub n: usize,
    pub tau: f64,
    /// `and_sets[m]` holds the salient AND masks of order `m`; index 0 is
    /// always empty.
    pub and_sets: Vec<BTreeSet<usize>>,
    pub or_sets: Vec<BTreeSet<usize>>,
}

impl SalientIndex {
    pub fn set(&self, kind: InteractionKind, order: usize) -> &BTreeSet<usize> {
        match kind {
            InteractionKind::And => &self.and_sets[order],
            InteractionKind::Or => &self.or_sets[order],
        }
    }

    pub fn contains(&self, kind: InteractionKind, mask: usize) -> bool {
        self.set(kind, order_of(mask)).contains(&mask)
    }

    pub fn len(&self) -> usize {
        self.and_sets.iter().chain(&self.or_sets).map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn orders(&self) -> std::ops::RangeInclusive<usize> {
        1..=self.n
    }
}

/// Keeps interactions with `|I(S)| > tau` for `S ≠ ∅`.
pub fn select_salient_at(spectrum: &InteractionSpectrum, tau: f64, layer: &str) -> Result<SalientIndex> {
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("threshold must be >= 0, got {tau}")));
    }
    let n = spectrum.n();
    let mut and_sets = vec![BTreeSet::new(); n + 1];
    let mut or_sets = vec![BTreeSet::new(); n + 1];
    for (mask, kind, effect) in spectrum.entries() {
        if effect.abs() > tau {
            let sets = match kind {
                InteractionKind::And => &mut and_sets,
                InteractionKind::Or => &mut or_sets,
            };
            sets[order_of(mask)].insert(mask);
        }
    }
    Ok(SalientIndex {
        layer: layer.to_string(),
        n,
        tau,
        and_sets,
        or_sets,
    })
}

/// Threshold `tau_ratio · max_S |I(S)|` over both families of `spectrum`.
pub fn select_salient(spectrum: &InteractionSpectrum, tau_ratio: f64, layer: &str) -> Result<SalientIndex> {
    check_ratio(tau_ratio)?;
    select_salient_at(spectrum, tau_ratio * spectrum.max_abs_effect(), layer)
}

/// Threshold shared by a whole collection of spectra.
pub fn global_tau<'a>(spectra: impl IntoIterator<Item = &'a InteractionSpectrum>, tau_ratio: f64) -> Result<f64> {
    check_ratio(tau_ratio)?;
    Ok(tau_ratio * spectra.into_iter().map(InteractionSpectrum::max_abs_effect).fold(0.0, f64::max))
}

fn check_ratio(tau_ratio: f64) -> Result<()> {
    if tau_ratio > 0.0 && tau_ratio.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("tau ratio must be positive, got {tau_ratio}")))
    }
}

/// Divides every effect by `scale`.
pub fn normalize(spectrum: &InteractionSpectrum, scale: f64) -> Result<InteractionSpectrum> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Domain(format!("normalization scale must be positive, got {scale}")));
    }
    Ok(spectrum.scaled(1.0 / scale))
}

/// Mean of `|v(N) − v(∅)|` over a set of tables.
pub fn normalization_scale<'a>(tables: impl IntoIterator<Item = &'a ValueTable>) -> Result<f64> {
    let (sum, count) = tables
        .into_iter()
        .fold((0.0, 0usize), |(s, c), t| (s + (t.values.at_full() - t.values.at_empty()).abs(), c + 1));
    if count == 0 {
        return Err(Error::Domain("no tables to normalize over".into()));
    }
    Ok(sum / count as f64)
}

/// `Σ_{S∈Ω(m)} |I(S)|` for one family, indexed by order.
pub fn order_strength(index: &SalientIndex, spectrum: &InteractionSpectrum, kind: InteractionKind) -> Vec<f64> {
    (0..=index.n)
        .map(|m| index.set(kind, m).iter().map(|&s| spectrum.effect(kind, s).abs()).sum())
        .collect()
}

/// Part of two effects that agrees in sign: `sign(a)·min(|a|, |b|)` when
/// `a·b > 0`, else 0.
pub fn shared_effect(a: f64, b: f64) -> f64 {
    if a * b > 0.0 {
        a.signum() * a.abs().min(b.abs())
    } else {
        0.0
    }
}

/// A spectrum with its salient index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer: String,
    pub spectrum: InteractionSpectrum,
    pub index: SalientIndex,
}

impl LayerEntry {
    /// Effect restricted to salient masks: zero outside the index.
    fn restricted(&self, kind: InteractionKind, mask: usize) -> f64 {
        if self.index.contains(kind, mask) {
            self.spectrum.effect(kind, mask)
        } else {
            0.0
        }
    }
}

/// Strength bookkeeping of one (order, family) between a layer and the
/// final layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub order: usize,
    pub family: InteractionKind,
    pub all_layer: f64,
    pub all_final: f64,
    pub overlap: f64,
    pub forget: f64,
    pub new: f64,
}

impl TrackRow {
    pub fn completeness(&self) -> Option<f64> {
        ratio(self.overlap, self.all_final)
    }

    pub fn redundancy(&self) -> Option<f64> {
        ratio(self.forget, self.all_layer)
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den != 0.0).then(|| num / den)
}

/// Overlap, forgotten and new strength per order and family. Effects outside
/// each side's salient set count as zero, so that overlap + forget and
/// overlap + new reproduce the two totals.
pub fn track(layer: &LayerEntry, last: &LayerEntry) -> Result<Vec<TrackRow>> {
    let n = layer.spectrum.n();
    if last.spectrum.n() != n || layer.index.n != n || last.index.n != n {
        return Err(Error::Dimension {
            expected: n,
            found: last.spectrum.n(),
        });
    }
    let mut rows = Vec::with_capacity(2 * n);
    for family in InteractionKind::BOTH {
        for order in 1..=n {
            let mut row = TrackRow {
                order,
                family,
                all_layer: 0.0,
                all_final: 0.0,
                overlap: 0.0,
                forget: 0.0,
                new: 0.0,
            };
            let here = layer.index.set(family, order);
            let there = last.index.set(family, order);
            for &s in here.union(there) {
                let a = layer.restricted(family, s);
                let b = last.restricted(family, s);
                let shared = shared_effect(a, b);
                if here.contains(&s) {
                    row.all_layer += a.abs();
                    row.forget += (a - shared).abs();
                }
                if there.contains(&s) {
                    row.all_final += b.abs();
                    row.new += (b - shared).abs();
                }
                if here.contains(&s) && there.contains(&s) {
                    row.overlap += shared.abs();
                }
            }
            rows.push(row);
        }
    }
    Ok(rows)
}

/// `|A ∩ B| / |A ∪ B|`, absent when both are empty.
pub fn iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> Option<f64> {
    let union = a.union(b).count();
    (union > 0).then(|| a.intersection(b).count() as f64 / union as f64)
}

/// IoU of the salient sets of every order for one family.
pub fn iou_by_order(a: &SalientIndex, b: &SalientIndex, kind: InteractionKind) -> Result<Vec<Option<f64>>> {
    if a.n != b.n {
        return Err(Error::Dimension {
            expected: a.n,
            found: b.n,
        });
    }
    Ok((1..=a.n).map(|m| iou(a.set(kind, m), b.set(kind, m))).collect())
}

/// Refuses to compare tables built with different masking specs.
pub fn check_comparable(a: &ValueTable, b: &ValueTable) -> Result<()> {
    if a.n() != b.n() {
        return Err(Error::Dimension {
            expected: a.n(),
            found: b.n(),
        });
    }
    match (a.metadata.get(META_MASKING_DIGEST), b.metadata.get(META_MASKING_DIGEST)) {
        (Some(x), Some(y)) if x != y => Err(Error::Comparability {
            left: x.clone(),
            right: y.clone(),
        }),
        _ => Ok(()),
    }
}

/// Mean over the salient masks of one order of `|E I(S)| / sqrt(Var I(S))`
/// across an ensemble of spectra from perturbed inputs. Variances are
/// floored at [`VARIANCE_FLOOR`]. Absent when the order has no salient mask.
pub fn stability(
    ensemble: &[InteractionSpectrum],
    index: &SalientIndex,
    kind: InteractionKind,
    order: usize,
) -> Result<Option<f64>> {
    if ensemble.len() < 2 {
        return Err(Error::Ensemble(format!(
            "stability needs at least 2 perturbed spectra, got {}",
            ensemble.len()
        )));
    }
    if let Some(bad) = ensemble.iter().find(|s| s.n() != index.n) {
        return Err(Error::Dimension {
            expected: index.n,
            found: bad.n(),
        });
    }
    if order > index.n {
        return Err(Error::Domain(format!("order {order} exceeds n = {}", index.n)));
    }
    let set = index.set(kind, order);
    if set.is_empty() {
        return Ok(None);
    }
    let k = ensemble.len() as f64;
    let total: f64 = set
        .iter()
        .map(|&s| {
            let mean = ensemble.iter().map(|sp| sp.effect(kind, s)).sum::<f64>() / k;
            let var = ensemble.iter().map(|sp| (sp.effect(kind, s) - mean).powi(2)).sum::<f64>() / (k - 1.0);
            mean.abs() / var.max(VARIANCE_FLOOR).sqrt()
        })
        .sum();
    Ok(Some(total / set.len() as f64))
}

/// `k` copies of `x` with independent Gaussian noise of spread `sigma` on
/// every dimension.
pub fn gaussian_perturbations(x: &[f64], sigma: f64, k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let normal = Normal::new(0.0, sigma).expect("positive spread");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k)
        .map(|_| x.iter().map(|xi| xi + normal.sample(&mut rng)).collect())
        .collect())
}

/// `‖x^S − x^S_ε‖ / ‖x^S‖` over the dimensions owned by the variables in `s`.
pub fn noise_ratio(x: &[f64], x_noisy: &[f64], s: SubsetMask, spec: &MaskingSpec) -> Result<f64> {
    for len in [x.len(), x_noisy.len()] {
        if len != spec.input_dim() {
            return Err(Error::Dimension {
                expected: spec.input_dim(),
                found: len,
            });
        }
    }
    if s.n() != spec.n() {
        return Err(Error::Dimension {
            expected: spec.n(),
            found: s.n(),
        });
    }
    let (mut signal, mut noise) = (0.0, 0.0);
    for i in s.variables() {
        for &d in &spec.variables()[i].dims {
            signal += x[d] * x[d];
            noise += (x[d] - x_noisy[d]).powi(2);
        }
    }
    if signal == 0.0 {
        return Err(Error::Domain("selected dimensions carry no signal".into()));
    }
    Ok((noise / signal).sqrt())
}

/// Mean of the defined values; absent when none is defined.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, count) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// Where the salience threshold's maximum is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauScope {
    /// Per spectrum: one sample at one layer.
    #[default]
    Layer,
    /// Over every sample and layer being analysed.
    Global,
}

impl std::str::FromStr for TauScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(TauScope::Layer),
            "global" => Ok(TauScope::Global),
            other => Err(Error::Config(format!("unknown tau scope `{other}`"))),
        }
    }
}

/// Settings shared by every analysis that turns tables into salient sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisOptions {
    pub tau_ratio: f64,
    pub tau_scope: TauScope,
    pub kappa_ratio: f64,
    /// Fold singleton OR effects into AND before thresholding.
    pub merge_first_order: bool,
    /// Learn a residual for final-layer tables too.
    pub delta_on_final: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            tau_ratio: DEFAULT_TAU_RATIO,
            tau_scope: TauScope::Layer,
            kappa_ratio: DEFAULT_KAPPA_RATIO,
            merge_first_order: true,
            delta_on_final: false,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Sparsest decomposition of one table; probe layers get a residual bound
/// of `kappa_ratio · |v(N) − v(∅)|`, final layers none unless requested.
/// The returned spectrum is merged when the options say so.
pub fn decompose_table(table: &ValueTable, is_final: bool, options: &AnalysisOptions) -> Result<DecompositionResult> {
    let kappa = if is_final && !options.delta_on_final {
        0.0
    } else {
        kappa_for_ratio(&table.values, options.kappa_ratio)
    };
    let mut result = optimize(&table.values, kappa, &options.optimizer)?;
    if options.merge_first_order {
        result.spectrum = merge_first_order(&result.spectrum);
    }
    Ok(result)
}

/// One layer's tables, one per sample; samples align by position.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTables {
    pub layer: String,
    pub tables: Vec<ValueTable>,
}

/// Layers of one sample, the final layer last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    entries: Vec<LayerEntry>,
}

impl LayerTrace {
    pub fn new(entries: Vec<LayerEntry>) -> Result<Self> {
        let Some(last) = entries.last() else {
            return Err(Error::Config("a trace needs a final layer".into()));
        };
        let n = last.spectrum.n();
        let mut ids = BTreeSet::new();
        for entry in &entries {
            if !ids.insert(entry.layer.as_str()) {
                return Err(Error::Config(format!("layer id `{}` repeated", entry.layer)));
            }
            if entry.spectrum.n() != n {
                return Err(Error::Dimension {
                    expected: n,
                    found: entry.spectrum.n(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[LayerEntry] {
        &self.entries
    }

    pub fn final_entry(&self) -> &LayerEntry {
        self.entries.last().expect("non-empty by construction")
    }

    /// Every layer tracked against the final one.
    pub fn track_all(&self) -> Result<Vec<(String, Vec<TrackRow>)>> {
        let last = self.final_entry();
        self.entries
            .iter()
            .map(|e| Ok((e.layer.clone(), track(e, last)?)))
            .collect()
    }
}

/// Decomposes, merges, normalizes and thresholds every table, returning one
/// trace per sample. The last layer is the final layer. Spectra are divided
/// by the layer's mean `|v(N) − v(∅)|` over the provided samples.
pub fn build_traces(layers: &[LayerTables], options: &AnalysisOptions) -> Result<Vec<LayerTrace>> {
    let Some(last) = layers.last() else {
        return Err(Error::Config("no layers given; the final layer is required".into()));
    };
    let samples = last.tables.len();
    if samples == 0 {
        return Err(Error::Config("no samples given".into()));
    }
    for layer in layers {
        if layer.tables.len() != samples {
            return Err(Error::Config(format!(
                "layer `{}` has {} tables but the final layer has {samples}",
                layer.layer,
                layer.tables.len()
            )));
        }
    }
    let final_index = layers.len() - 1;
    let jobs: Vec<(usize, usize)> = (0..layers.len())
        .flat_map(|l| (0..samples).map(move |s| (l, s)))
        .collect();
    let spectra = jobs
        .par_iter()
        .map(|&(l, s)| {
            let table = &layers[l].tables[s];
            let result = decompose_table(table, l == final_index, options)?;
            Ok(result.spectrum)
        })
        .collect::<Result<Vec<InteractionSpectrum>>>()?;

    let mut normalized = Vec::with_capacity(spectra.len());
    for (l, layer) in layers.iter().enumerate() {
        let scale = normalization_scale(&layer.tables)?;
        if scale == 0.0 {
            return Err(Error::Domain(format!(
                "layer `{}` has v(N) = v(∅) on every sample; cannot normalize",
                layer.layer
            )));
        }
        for s in 0..samples {
            normalized.push(normalize(&spectra[l * samples + s], scale)?);
        }
    }
    let shared_tau = match options.tau_scope {
        TauScope::Global => Some(global_tau(&normalized, options.tau_ratio)?),
        TauScope::Layer => {
            check_ratio(options.tau_ratio)?;
            None
        }
    };

    let mut traces = Vec::with_capacity(samples);
    for s in 0..samples {
        let entries = layers
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                let spectrum = normalized[l * samples + s].clone();
                let index = match shared_tau {
                    Some(tau) => select_salient_at(&spectrum, tau, &layer.layer)?,
                    None => select_salient(&spectrum, options.tau_ratio, &layer.layer)?,
                };
                Ok(LayerEntry {
                    layer: layer.layer.clone(),
                    spectrum,
                    index,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        traces.push(LayerTrace::new(entries)?);
    }
    Ok(traces)
}

/// One value of a report; `None` is written as `ABSENT`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub layer: String,
    pub order: usize,
    pub family: InteractionKind,
    pub metric: String,
    pub value: Option<f64>,
}

pub const ABSENT: &str = "ABSENT";

/// Machine table `layer,order,family,metric,value`.
pub fn records_to_csv(records: &[MetricRecord]) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Config(format!("csv output failed: {e}"));
    writer.write_record(["layer", "order", "family", "metric", "value"]).map_err(io)?;
    for r in records {
        let value = r.value.map_or_else(|| ABSENT.to_string(), |v| format!("{v:.16e}"));
        writer
            .write_record([&r.layer, &r.order.to_string(), r.family.as_str(), &r.metric, &value])
            .map_err(io)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Config(format!("csv output failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv writes UTF-8"))
}

/// Plot-ready layout: per layer and family, one series per metric indexed
/// by order (`null` where absent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub report: String,
    pub parameters: BTreeMap<String, f64>,
    pub layers: Vec<LayerPanel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPanel {
    pub layer: String,
    pub and: FamilyPanel,
    pub or: FamilyPanel,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FamilyPanel {
    pub orders: Vec<usize>,
    pub series: BTreeMap<String, Vec<Option<f64>>>,
}

impl ReportDocument {
    pub fn from_records(report: &str, parameters: BTreeMap<String, f64>, records: &[MetricRecord]) -> Self {
        let mut layers: Vec<LayerPanel> = Vec::new();
        for r in records {
            let pos = match layers.iter().position(|p| p.layer == r.layer) {
                Some(p) => p,
                None => {
                    layers.push(LayerPanel {
                        layer: r.layer.clone(),
                        and: FamilyPanel::default(),
                        or: FamilyPanel::default(),
                    });
                    layers.len() - 1
                }
            };
            let panel = match r.family {
                InteractionKind::And => &mut layers[pos].and,
                InteractionKind::Or => &mut layers[pos].or,
            };
            let slot = match panel.orders.iter().position(|&o| o == r.order) {
                Some(i) => i,
                None => {
                    panel.orders.push(r.order);
                    panel.series.values_mut().for_each(|s| s.push(None));
                    panel.orders.len() - 1
                }
            };
            let width = panel.orders.len();
            let series = panel.series.entry(r.metric.clone()).or_insert_with(|| vec![None; width]);
            series[slot] = r.value;
        }
        Self {
            report: report.to_string(),
            parameters,
            layers,
        }
    }
}

/// Layer-by-layer tracking averaged over samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderReport {
    pub samples: usize,
    pub rows: Vec<(String, TrackRow)>,
}

impl OrderReport {
    /// Means of every total over the traces; completeness and redundancy
    /// are then ratios of those means.
    pub fn from_traces(traces: &[LayerTrace]) -> Result<Self> {
        let Some(first) = traces.first() else {
            return Err(Error::Config("no traces to report".into()));
        };
        let mut rows = first.track_all()?;
        for trace in &traces[1..] {
            let other = trace.track_all()?;
            if other.len() != rows.len() || other.iter().zip(&rows).any(|(a, b)| a.0 != b.0) {
                return Err(Error::Config("traces do not share the same layers".into()));
            }
            for ((_, acc), (_, add)) in rows.iter_mut().zip(&other) {
                for (a, b) in acc.iter_mut().zip(add) {
                    a.all_layer += b.all_layer;
                    a.all_final += b.all_final;
                    a.overlap += b.overlap;
                    a.forget += b.forget;
                    a.new += b.new;
                }
            }
        }
        let k = traces.len() as f64;
        let rows = rows
            .into_iter()
            .flat_map(|(layer, list)| {
                list.into_iter().map(move |mut r| {
                    r.all_layer /= k;
                    r.all_final /= k;
                    r.overlap /= k;
                    r.forget /= k;
                    r.new /= k;
                    (layer.clone(), r)
                })
            })
            .collect();
        Ok(Self {
            samples: traces.len(),
            rows,
        })
    }

    pub fn records(&self) -> Vec<MetricRecord> {
        let mut out = Vec::with_capacity(self.rows.len() * 7);
        for (layer, r) in &self.rows {
            let values = [
                ("all_layer", Some(r.all_layer)),
                ("all_final", Some(r.all_final)),
                ("overlap", Some(r.overlap)),
                ("forget", Some(r.forget)),
                ("new", Some(r.new)),
                ("completeness", r.completeness()),
                ("redundancy", r.redundancy()),
            ];
            for (metric, value) in values {
                out.push(MetricRecord {
                    layer: layer.clone(),
                    order: r.order,
                    family: r.family,
                    metric: metric.to_string(),
                    value,
                });
            }
        }
        out
    }

    pub fn document(&self) -> ReportDocument {
        let params = BTreeMap::from([("samples".to_string(), self.samples as f64)]);
        ReportDocument::from_records("order", params, &self.records())
    }
}

/// Stability per layer, order and family, averaged over samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub sigma: f64,
    pub ensemble_size: usize,
    pub records: Vec<MetricRecord>,
}

impl StabilityReport {
    /// `per_sample[i]` holds, for sample `i`, each layer's clean index and
    /// the spectra of its perturbed copies.
    pub fn new(
        sigma: f64,
        ensemble_size: usize,
        per_sample: &[Vec<(SalientIndex, Vec<InteractionSpectrum>)>],
    ) -> Result<Self> {
        let Some(first) = per_sample.first() else {
            return Err(Error::Config("no samples for stability".into()));
        };
        let mut records = Vec::new();
        for (l, (index, _)) in first.iter().enumerate() {
            for family in InteractionKind::BOTH {
                for order in index.orders() {
                    let values = per_sample
                        .iter()
                        .map(|layers| {
                            let (idx, ensemble) = layers
                                .get(l)
                                .ok_or_else(|| Error::Config("samples cover different layers".into()))?;
                            stability(ensemble, idx, family, order)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    records.push(MetricRecord {
                        layer: index.layer.clone(),
                        order,
                        family,
                        metric: "stability".into(),
                        value: mean_defined(values),
                    });
                }
            }
        }
        Ok(Self {
            sigma,
            ensemble_size,
            records,
        })
    }

    pub fn document(&self) -> ReportDocument {
        let params = BTreeMap::from([
            ("sigma".to_string(), self.sigma),
            ("ensemble_size".to_string(), self.ensemble_size as f64),
        ]);
        ReportDocument::from_records("stability", params, &self.records)
    }
}

/// Mean IoU per order and family over paired salient indices.
pub fn iou_records(layer: &str, pairs: &[(SalientIndex, SalientIndex)]) -> Result<Vec<MetricRecord>> {
    let Some((first, _)) = pairs.first() else {
        return Err(Error::Config("no index pairs for IoU".into()));
    };
    let mut records = Vec::new();
    for family in InteractionKind::BOTH {
        let per_pair = pairs
            .iter()
            .map(|(a, b)| iou_by_order(a, b, family))
            .collect::<Result<Vec<_>>>()?;
        for order in 1..=first.n {
            records.push(MetricRecord {
                layer: layer.to_string(),
                order,
                family,
                metric: "iou".into(),
                value: mean_defined(per_pair.iter().map(|v| v[order - 1])),
            });
        }
    }
    Ok(records)
}
