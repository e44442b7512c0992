use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use interlayer::decomposition::{kappa_for_ratio, optimize, DecompositionResult};
use interlayer::error::Error;
use interlayer::interaction::{
    merge_first_order, shapley_direct, shapley_values, sparse_match, InteractionKind, InteractionSpectrum,
    SHAPLEY_DIRECT_MAX_VARIABLES,
};
use interlayer::lattice::{order_of, LatticeArray};
use interlayer::metrics::{
    build_traces, check_comparable, decompose_table, gaussian_perturbations, global_tau, iou, iou_records,
    records_to_csv, select_salient, select_salient_at, AnalysisOptions, LayerTables, OrderReport, ReportDocument,
    SalientIndex, StabilityReport, TauScope,
};
use interlayer::probe::{full_dumps, layer_id, masked_dumps, probe_table as table_via_probe, train_probe, FeatureDump};
use interlayer::probe::{ProbeConfig, ProbeModel};
use interlayer::value::{
    planted_dataset, planted_table, random_terms, table_from_model, Dataset, MaskingSpec, PlantedTerm, ToyModel,
    TrainConfig, ValueTable, META_MASKING_DIGEST,
};

use crate::output::{CliError, Run, MANIFEST};
use crate::{
    ExtractArgs, Globals, IouArgs, KappaSweepArgs, ProbeTableArgs, ProbeTrainArgs, StabilityArgs, SynthCommand,
    SynthDumpsArgs, SynthModelArgs, SynthTableArgs, TableArgs, TermArgs, TrackArgs,
};

type CliResult = Result<(), CliError>;

const RECONSTRUCTION_TOLERANCE: f64 = 1e-8;
const TRACK_TOLERANCE: f64 = 1e-10;

fn read_table(run: &mut Run, path: &Path) -> Result<ValueTable, Error> {
    run.input(path)?;
    ValueTable::read(path)
}

/// `*.json` tables in a directory, sorted by file name; the manifest is
/// skipped.
fn list_tables(dir: &Path) -> Result<Vec<(String, PathBuf)>, Error> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if path.is_file() && name.ends_with(".json") && name != MANIFEST {
            found.push((name, path));
        }
    }
    found.sort();
    Ok(found)
}

fn check_reconstruction(table: &ValueTable, result: &DecompositionResult) -> CliResult {
    let rebuilt = result.spectrum.reconstruct_all();
    let scale = table.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let worst = rebuilt
        .iter()
        .zip(table.values.iter().zip(result.params.delta.iter()))
        .map(|(r, (v, d))| (r - (v - d)).abs())
        .fold(0.0, f64::max);
    if worst > RECONSTRUCTION_TOLERANCE * scale {
        return Err(CliError::Identity(format!(
            "reconstruction misses v − δ by {worst:e} (allowed {:e})",
            RECONSTRUCTION_TOLERANCE * scale
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct CurvePoint {
    rank: usize,
    family: InteractionKind,
    mask: usize,
    order: usize,
    effect: f64,
    salient: bool,
}

/// Every non-empty interaction sorted by decreasing magnitude.
fn sparsity_curve(spectrum: &InteractionSpectrum, tau: f64) -> Vec<CurvePoint> {
    let mut entries: Vec<_> = spectrum.entries().collect();
    entries.sort_by(|a, b| b.2.abs().total_cmp(&a.2.abs()).then(a.1.cmp(&b.1)).then(a.0.cmp(&b.0)));
    entries
        .into_iter()
        .enumerate()
        .map(|(rank, (mask, family, effect))| CurvePoint {
            rank: rank + 1,
            family,
            mask,
            order: order_of(mask),
            effect,
            salient: effect.abs() > tau,
        })
        .collect()
}

fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("rank,family,mask,order,effect,salient\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{},{:.16e},{}\n",
            p.rank, p.family, p.mask, p.order, p.effect, p.salient
        ));
    }
    out
}

#[derive(Serialize)]
struct DecompositionSummary {
    n: usize,
    kappa: f64,
    initial_loss: f64,
    final_loss: f64,
    iterations: usize,
    converged: bool,
    max_abs_delta: f64,
}

fn summary(table: &ValueTable, result: &DecompositionResult) -> DecompositionSummary {
    DecompositionSummary {
        n: table.n(),
        kappa: result.params.kappa,
        initial_loss: result.loss_history[0],
        final_loss: result.final_loss(),
        iterations: result.iterations,
        converged: result.converged,
        max_abs_delta: result.params.max_abs_delta(),
    }
}

pub fn extract(g: &Globals, a: &ExtractArgs, name: &str, config: &Value) -> CliResult {
    let mut run = Run::start(&a.out.out_dir, name, config)?;
    let table = match (&a.table, &a.model, &a.spec, &a.data) {
        (Some(path), _, _, _) => read_table(&mut run, path)?,
        (None, Some(model), Some(spec), Some(data)) => {
            for p in [model, spec, data] {
                run.input(p)?;
            }
            let model = ToyModel::read(model)?;
            let spec = MaskingSpec::read(spec)?;
            let data: Dataset = interlayer::json::read(data)?;
            let (x, label) = sample(&data, a.sample)?;
            let table = table_from_model(&model, x, a.class.unwrap_or(label), &spec, a.link.into())?
                .with_label(format!("sample{}", a.sample));
            run.text("table.json", &table.to_json()?)?;
            table
        }
        _ => return Err(Error::Config("give --table or all of --model, --spec and --data".into()).into()),
    };
    let options = g.options();
    let result = decompose_table(&table, !a.probe_layer, &options)?;
    let index = select_salient(&result.spectrum, options.tau_ratio, &table.label)?;
    let sparse = sparse_match(&result.spectrum, index.tau)?;
    run.json("spectrum.json", &result.spectrum)?;
    run.json("salient.json", &index)?;
    run.text("sparsity.csv", &curve_csv(&sparsity_curve(&result.spectrum, index.tau)))?;
    run.json(
        "summary.json",
        &serde_json::json!({
            "decomposition": summary(&table, &result),
            "tau": index.tau,
            "salient_count": index.len(),
            "sparse_max_error": sparse.max_error,
            "sparse_mean_error": sparse.mean_error,
        }),
    )?;
    run.finish()?;
    check_reconstruction(&table, &result)
}

fn sample(data: &Dataset, i: usize) -> Result<(&[f64], usize), Error> {
    match (data.inputs.get(i), data.labels.get(i)) {
        (Some(x), Some(&y)) => Ok((x, y)),
        _ => Err(Error::Domain(format!("sample {i} not in a dataset of {} rows", data.inputs.len()))),
    }
}

pub fn decompose(g: &Globals, a: &TableArgs, name: &str, config: &Value) -> CliResult {
    let mut run = Run::start(&a.out.out_dir, name, config)?;
    let table = read_table(&mut run, &a.table)?;
    let result = decompose_table(&table, !a.probe_layer, &g.options())?;
    run.json("decomposition.json", &result)?;
    run.json("summary.json", &summary(&table, &result))?;
    run.finish()?;
    check_reconstruction(&table, &result)
}

pub fn sparsity(g: &Globals, a: &TableArgs, name: &str, config: &Value) -> CliResult {
    let mut run = Run::start(&a.out.out_dir, name, config)?;
    let table = read_table(&mut run, &a.table)?;
    let result = decompose_table(&table, !a.probe_layer, &g.options())?;
    let index = select_salient(&result.spectrum, g.tau_ratio, &table.label)?;
    let sparse = sparse_match(&result.spectrum, index.tau)?;
    run.text("sparsity.csv", &curve_csv(&sparsity_curve(&result.spectrum, index.tau)))?;
    run.json("sparse_match.json", &sparse)?;
    run.finish()?;
    check_reconstruction(&table, &result)
}

pub fn shapley(g: &Globals, a: &TableArgs, name: &str, config: &Value) -> CliResult {
    let mut run = Run::start(&a.out.out_dir, name, config)?;
    let table = read_table(&mut run, &a.table)?;
    let result = decompose_table(&table, !a.probe_layer, &g.options())?;
    let phi = shapley_values(&result.spectrum);
    let denoised = LatticeArray::new(
        table.n(),
        table.values.iter().zip(result.params.delta.iter()).map(|(v, d)| v - d).collect(),
    )?;
    let direct = (table.n() <= SHAPLEY_DIRECT_MAX_VARIABLES)
        .then(|| shapley_direct(&denoised))
        .transpose()?;
    let gap = direct
        .as_ref()
        .map(|d| d.iter().zip(&phi).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    let efficiency_gap = (phi.iter().sum::<f64>() - (denoised.at_full() - denoised.at_empty())).abs();
    run.json(
        "shapley.json",
        &serde_json::json!({
            "from_interactions": phi,
            "direct": direct,
            "max_abs_difference": gap,
            "efficiency_gap": efficiency_gap,
        }),
    )?;
    run.finish()?;
    check_reconstruction(&table, &result)?;
    let scale = table.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if gap.unwrap_or(0.0) > RECONSTRUCTION_TOLERANCE * scale || efficiency_gap > RECONSTRUCTION_TOLERANCE * scale {
        return Err(CliError::Identity(format!(
            "Shapley allocation disagrees with enumeration (gap {gap:?}, efficiency {efficiency_gap:e})"
        )));
    }
    Ok(())
}

pub fn kappa_sweep(g: &Globals, a: &KappaSweepArgs, name: &str, config: &Value) -> CliResult {
    if a.ratios.is_empty() || a.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::Config("kappa ratios must be positive".into()).into());
    }
    let mut run = Run::start(&a.out.out_dir, name, config)?;
    let table = read_table(&mut run, &a.table)?;
    let options = g.options();
    let runs = a
        .ratios
        .par_iter()
        .map(|&ratio| {
            let kappa = kappa_for_ratio(&table.values, ratio);
            let mut result = optimize(&table.values, kappa, &options.optimizer)?;
            if options.merge_first_order {
                result.spectrum = merge_first_order(&result.spectrum);
            }
            let index = select_salient(&result.spectrum, options.tau_ratio, &table.label)?;
            Ok((kappa, result, index))
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let sets: Vec<BTreeSet<(InteractionKind, usize)>> = runs.iter().map(|(_, _, idx)| flat_set(idx)).collect();
    let as_ids = |s: &BTreeSet<(InteractionKind, usize)>| -> BTreeSet<usize> {
        s.iter().map(|&(k, m)| (m << 1) | usize::from(k == InteractionKind::Or)).collect()
    };
    let matrix: Vec<Vec<Option<f64>>> = sets
        .iter()
        .map(|x| sets.iter().map(|y| iou(&as_ids(x), &as_ids(y))).collect())
        .collect();
    let mut csv = String::from("ratio_a,ratio_b,iou\n");
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let value = v.map_or_else(|| "ABSENT".to_string(), |v| format!("{v:.16e}"));
            csv.push_str(&format!("{},{},{value}\n", a.ratios[i], a.ratios[j]));
        }
    }
    let per_ratio: Vec<Value> = runs
        .iter()
        .zip(&a.ratios)
        .map(|((kappa, result, idx), ratio)| {
            let salient: Vec<Value> = flat_set(idx)
                .into_iter()
                .map(|(kind, mask)| {
                    serde_json::json!({ "family": kind, "mask": mask, "effect": result.spectrum.effect(kind, mask) })
                })
                .collect();
            serde_json::json!({
                "ratio": ratio,
                "kappa": kappa,
                "final_loss": result.final_loss(),
                "tau": idx.tau,
                "salient": salient,
            })
        })
        .collect();
    run.json("kappa_sweep.json", &serde_json::json!({ "runs": per_ratio, "iou": matrix }))?;
    run.text("kappa_sweep.csv", &csv)?;
    run.finish()?;
    for (_, result, _) in &runs {
        check_reconstruction(&table, result)?;
    }
    Ok(())
}

fn flat_set(index: &SalientIndex) -> BTreeSet<(InteractionKind, usize)> {
    InteractionKind::BOTH
        .into_iter()
        .flat_map(|kind| index.orders().flat_map(move |m| index.set(kind, m).iter().map(move |&s| (kind, s))))
        .collect()
}

pub fn track(g: &Globals, a: &TrackArgs, name: &str, config: &Value) -> CliResult {
    let final_dir = a.trace.join(&a.final_layer);
    if !final_dir.is_dir() {
        return Err(Error::Config(format!("final layer directory {} not found", final_dir.display())).into());
    }
    let mut run = Run::start(&a.out.out_dir, name, config)?;
    let mut order: Vec<String> = if a.layers.is_empty() {
        let entries = std::fs::read_dir(&a.trace).map_err(|e| Error::io(&a.trace, e))?;
        let mut names = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&a.trace, e))?.path();
            if path.is_dir() {
                names.push(path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string());
            }
        }
        names.sort();
        names
    } else {
        a.layers.clone()
    };
    order.retain(|l| l != &a.final_layer);
    order.push(a.final_layer.clone());

    let samples = list_tables(&final_dir)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("no tables in {}", final_dir.display())).into());
    }
    let mut layers = Vec::with_capacity(order.len());
    for layer in &order {
        let dir = a.trace.join(layer);
        let mut tables = Vec::with_capacity(samples.len());
        for (file, _) in &samples {
            let path = dir.join(file);
            if !path.is_file() {
                return Err(Error::Config(format!("layer `{layer}` lacks sample {file}")).into());
            }
            tables.push(read_table(&mut run, &path)?);
        }
        layers.push(LayerTables {
            layer: layer.clone(),
            tables,
        });
    }
    for s in 0..samples.len() {
        for layer in &layers {
            check_comparable(&layer.tables[s], &layers[layers.len() - 1].tables[s])?;
        }
    }
    let traces = build_traces(&layers, &g.options())?;
    let mut worst = 0.0f64;
    for trace in &traces {
        for (_, rows) in trace.track_all()? {
            for r in rows {
                let scale_l = r.all_layer.max(1.0);
                let scale_f = r.all_final.max(1.0);
                worst = worst
                    .max((r.overlap + r.forget - r.all_layer).abs() / scale_l)
                    .max((r.overlap + r.new - r.all_final).abs() / scale_f);
            }
        }
    }
    let report = OrderReport::from_traces(&traces)?;
    run.text("order_report.csv", &records_to_csv(&report.records())?)?;
    run.json("order_report.json", &report.document())?;
    run.json(
        "identity_check.json",
        &serde_json::json!({ "traces": traces.len(), "max_relative_violation": worst, "tolerance": TRACK_TOLERANCE }),
    )?;
    run.finish()?;
    if worst > TRACK_TOLERANCE {
        return Err(CliError::Identity(format!(
            "overlap/forget/new totals off by {worst:e} (relative)"
        )));
    }
    Ok(())
}

/// Spectra and salient indices for a list of tables under the analysis
/// options; a global threshold is shared by all of them.
fn analyse(tables: &[ValueTable], is_final: bool, layer: &str, options: &AnalysisOptions) -> Result<Vec<SalientIndex>, Error> {
    let spectra = tables
        .par_iter()
        .map(|t| Ok(decompose_table(t, is_final, options)?.spectrum))
        .collect::<Result<Vec<_>, Error>>()?;
    let shared = match options.tau_scope {
        TauScope::Global => Some(global_tau(&spectra, options.tau_ratio)?),
        TauScope::Layer => None,
    };
    spectra
        .iter()
        .map(|s| match shared {
            Some(tau) => select_salient_at(s, tau, layer),
            None => select_salient(s, options.tau_ratio, layer),
        })
        .collect()
}

pub fn iou_cmd(g: &Globals, a: &IouArgs, name: &str, config: &Value) -> CliResult {
    let mut run = Run::start(&a.out.out_dir, name, config)?;
    let left = list_tables(&a.a)?;
    let right = list_tables(&a.b)?;
    let left_names: BTreeSet<_> = left.iter().map(|(n, _)| n.clone()).collect();
    let right_names: BTreeSet<_> = right.iter().map(|(n, _)| n.clone()).collect();
    if left_names != right_names || left.is_empty() {
        let unmatched: Vec<_> = left_names.symmetric_difference(&right_names).cloned().collect();
        return Err(Error::Config(format!("sample files do not match: {unmatched:?}")).into());
    }
    let mut ta = Vec::with_capacity(left.len());
    let mut tb = Vec::with_capacity(right.len());
    for ((_, pa), (_, pb)) in left.iter().zip(&right) {
        let x = read_table(&mut run, pa)?;
        let y = read_table(&mut run, pb)?;
        check_comparable(&x, &y)?;
        ta.push(x);
        tb.push(y);
    }
    let options = g.options();
    let ia = analyse(&ta, !a.probe_layer, "a", &options)?;
    let ib = analyse(&tb, !a.probe_layer, "b", &options)?;
    let pairs: Vec<_> = ia.into_iter().zip(ib).collect();
    let records = iou_records("a_vs_b", &pairs)?;
    run.text("iou.csv", &records_to_csv(&records)?)?;
    let params = [("samples".to_string(), pairs.len() as f64)].into_iter().collect();
    run.json("iou.json", &ReportDocument::from_records("iou", params, &records))?;
    run.finish()?;
    Ok(())
}

pub fn stability(g: &Globals, a: &StabilityArgs, name: &str, config: &Value) -> CliResult {
    let mut run = Run::start(&a.out.out_dir, name, config)?;
    let options = g.options();
    let is_final = !a.probe_layer;
    let layer = if a.probe_layer { "probe" } else { "final" };

    // (clean table, perturbed tables) per sample
    let mut groups: Vec<(ValueTable, Vec<ValueTable>)> = Vec::new();
    if let (Some(clean), Some(perturbed)) = (&a.clean, &a.perturbed) {
        for (file, path) in list_tables(clean)? {
            let table = read_table(&mut run, &path)?;
            let stem = file.trim_end_matches(".json");
            let dir = perturbed.join(stem);
            let noisy = list_tables(&dir)?
                .into_iter()
                .map(|(_, p)| read_table(&mut run, &p))
                .collect::<Result<Vec<_>, Error>>()?;
            groups.push((table, noisy));
        }
    } else if let (Some(model), Some(spec), Some(data)) = (&a.model, &a.spec, &a.data) {
        for p in [model, spec, data] {
            run.input(p)?;
        }
        let model = ToyModel::read(model)?;
        let spec = MaskingSpec::read(spec)?;
        let data: Dataset = interlayer::json::read(data)?;
        for i in 0..a.samples.min(data.inputs.len()) {
            let (x, y) = sample(&data, i)?;
            let clean = table_from_model(&model, x, y, &spec, a.link.into())?;
            let noisy = gaussian_perturbations(x, g.sigma, a.k, g.seed.wrapping_add(i as u64))?
                .par_iter()
                .map(|xn| table_from_model(&model, xn, y, &spec, a.link.into()))
                .collect::<Result<Vec<_>, Error>>()?;
            groups.push((clean, noisy));
        }
    } else {
        return Err(Error::Config("give --clean with --perturbed, or --model with --spec and --data".into()).into());
    }
    if groups.is_empty() {
        return Err(Error::Config("no samples for stability".into()).into());
    }
    let k = groups[0].1.len();
    if let Some((clean, noisy)) = groups.iter().find(|(_, noisy)| noisy.len() < 2) {
        return Err(Error::Config(format!(
            "sample `{}` has {} perturbed tables; at least 2 are needed",
            clean.label,
            noisy.len()
        ))
        .into());
    }
    let mut per_sample = Vec::with_capacity(groups.len());
    for (clean, noisy) in &groups {
        check_comparable(clean, &noisy[0])?;
        let result = decompose_table(clean, is_final, &options)?;
        let index = select_salient(&result.spectrum, options.tau_ratio, layer)?;
        let ensemble = noisy
            .par_iter()
            .map(|t| Ok(decompose_table(t, is_final, &options)?.spectrum))
            .collect::<Result<Vec<_>, Error>>()?;
        per_sample.push(vec![(index, ensemble)]);
    }
    let report = StabilityReport::new(g.sigma, k, &per_sample)?;
    run.text("stability.csv", &records_to_csv(&report.records)?)?;
    run.json("stability.json", &report.document())?;
    run.finish()?;
    Ok(())
}

pub fn probe_train(a: &ProbeTrainArgs, name: &str, config: &Value) -> CliResult {
    let mut run = Run::start(&a.out.out_dir, name, config)?;
    run.input(&a.dump)?;
    let dump = FeatureDump::read(&a.dump)?;
    let fit = train_probe(
        &dump,
        &ProbeConfig {
            learning_rate: a.learning_rate,
            epochs: a.epochs,
            include_masked: a.include_masked,
        },
    )?;
    let mut losses = String::from("epoch,loss\n");
    for (i, l) in fit.losses.iter().enumerate() {
        losses.push_str(&format!("{i},{l:.16e}\n"));
    }
    run.json("probe.json", &fit.probe)?;
    run.text("losses.csv", &losses)?;
    run.json(
        "summary.json",
        &serde_json::json!({
            "layer": dump.layer(),
            "training_accuracy": fit.probe.accuracy(&dump)?,
            "final_loss": fit.losses.last(),
            "final_learning_rate": fit.final_learning_rate,
        }),
    )?;
    run.finish()?;
    Ok(())
}

pub fn probe_table(a: &ProbeTableArgs, name: &str, config: &Value) -> CliResult {
    let mut run = Run::start(&a.out.out_dir, name, config)?;
    run.input(&a.probe)?;
    run.input(&a.dump)?;
    let probe = ProbeModel::read(&a.probe)?;
    let dump = FeatureDump::read(&a.dump)?;
    let spec = match &a.spec {
        Some(p) => {
            run.input(p)?;
            Some(MaskingSpec::read(p)?)
        }
        None => None,
    };
    let n = match (&spec, a.n) {
        (Some(s), Some(n)) if s.n() != n => {
            return Err(Error::Config(format!("--n {n} disagrees with the spec's {}", s.n())).into());
        }
        (Some(s), _) => s.n(),
        (None, Some(n)) => n,
        (None, None) => return Err(Error::Config("give --spec or --n".into()).into()),
    };
    let masked: Vec<String> = {
        let mut seen = BTreeSet::new();
        dump.rows()
            .iter()
            .filter(|r| r.mask.is_some() && seen.insert(r.sample.clone()))
            .map(|r| r.sample.clone())
            .collect()
    };
    if masked.is_empty() {
        return Err(Error::Config("dump has no masked rows".into()).into());
    }
    for id in masked {
        let rows = dump.sample(&id);
        let y = a.class.unwrap_or(rows.rows()[0].label);
        let mut table = table_via_probe(&probe, &rows, n, y, a.link.into())?;
        if let Some(s) = &spec {
            table = table.with_meta(META_MASKING_DIGEST, s.digest());
        }
        run.text(&format!("{id}.json"), &table.to_json()?)?;
    }
    run.finish()?;
    Ok(())
}

fn parse_terms(args: &TermArgs, seed: u64) -> Result<Vec<PlantedTerm>, Error> {
    if let Some(k) = args.random_terms {
        return random_terms(args.n, k, seed);
    }
    args.terms
        .iter()
        .map(|t| {
            let parts: Vec<&str> = t.split(':').collect();
            let bad = || Error::Config(format!("term `{t}` is not KIND:MASK:COEF"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let kind: InteractionKind = parts[0].parse()?;
            let mask = parts[1].parse().map_err(|_| bad())?;
            let coefficient = parts[2].parse().map_err(|_| bad())?;
            Ok(PlantedTerm {
                mask,
                kind,
                coefficient,
            })
        })
        .collect()
}

pub fn synth(g: &Globals, s: &SynthCommand, name: &str, config: &Value) -> CliResult {
    match s {
        SynthCommand::Table(a) => synth_table(g, a, name, config),
        SynthCommand::Model(a) => synth_model(g, a, name, config),
        SynthCommand::Dumps(a) => synth_dumps(a, name, config),
    }
}

fn synth_table(g: &Globals, a: &SynthTableArgs, name: &str, config: &Value) -> CliResult {
    let mut run = Run::start(&a.out.out_dir, name, config)?;
    let terms = parse_terms(&a.terms, g.seed)?;
    let table = planted_table(a.terms.n, &terms, a.noise, g.seed)?;
    run.text("table.json", &table.to_json()?)?;
    run.json("terms.json", &terms)?;
    run.finish()?;
    Ok(())
}

fn synth_model(g: &Globals, a: &SynthModelArgs, name: &str, config: &Value) -> CliResult {
    let mut run = Run::start(&a.out.out_dir, name, config)?;
    let n = a.terms.n;
    let terms = parse_terms(&a.terms, g.seed)?;
    let data = planted_dataset(n, &terms, a.samples, a.jitter, g.seed)?;
    let mut widths = vec![n];
    widths.extend(&a.hidden);
    widths.push(2);
    let mut model = ToyModel::mlp(&widths, g.seed)?;
    let losses = model.train(
        &data,
        &TrainConfig {
            epochs: a.epochs,
            learning_rate: a.learning_rate,
            batch_size: a.batch_size,
            seed: g.seed,
        },
    )?;
    let baseline: Vec<f64> = (0..n)
        .map(|d| data.inputs.iter().map(|x| x[d]).sum::<f64>() / data.inputs.len() as f64)
        .collect();
    let spec = MaskingSpec::per_dimension(baseline)?;
    let mut loss_csv = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        loss_csv.push_str(&format!("{},{l:.16e}\n", i + 1));
    }
    run.json("model.json", &model)?;
    run.json("data.json", &data)?;
    run.text("spec.json", &spec.to_json()?)?;
    run.json("terms.json", &terms)?;
    run.text("train_loss.csv", &loss_csv)?;
    run.json(
        "summary.json",
        &serde_json::json!({ "training_accuracy": model.accuracy(&data)?, "layers": model.layers().len() }),
    )?;
    run.finish()?;
    Ok(())
}

fn synth_dumps(a: &SynthDumpsArgs, name: &str, config: &Value) -> CliResult {
    let mut run = Run::start(&a.out.out_dir, name, config)?;
    for p in [&a.model, &a.spec, &a.data] {
        run.input(p)?;
    }
    let model = ToyModel::read(&a.model)?;
    let spec = MaskingSpec::read(&a.spec)?;
    let data: Dataset = interlayer::json::read(&a.data)?;
    for dump in full_dumps(&model, &data, "s")? {
        run.text(&format!("{}.full.csv", dump.layer()), &dump.to_text())?;
    }
    let count = a.masked_samples.min(data.inputs.len());
    let per_sample = (0..count)
        .into_par_iter()
        .map(|i| masked_dumps(&model, &data.inputs[i], data.labels[i], &format!("s{i}"), &spec))
        .collect::<Result<Vec<_>, Error>>()?;
    for l in 0..model.layers().len() {
        let mut merged = FeatureDump::new(layer_id(l), model.layers()[l].output_dim(), model.class_count())?;
        for dumps in &per_sample {
            for row in dumps[l].rows() {
                merged.push(row.clone())?;
            }
        }
        run.text(&format!("{}.masked.csv", layer_id(l)), &merged.to_text())?;
    }
    for i in 0..count {
        let table = table_from_model(&model, &data.inputs[i], data.labels[i], &spec, a.link.into())?
            .with_label(format!("s{i}"));
        run.text(&format!("final/s{i}.json"), &table.to_json()?)?;
    }
    run.finish()?;
    Ok(())
}
