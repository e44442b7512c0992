use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use interlayer::decomposition::{Method, OptimizerConfig, DEFAULT_KAPPA_RATIO};
use interlayer::metrics::{AnalysisOptions, TauScope, DEFAULT_SIGMA, DEFAULT_TAU_RATIO};
use interlayer::value::{Link, FORMAT_VERSION};

mod commands;
mod output;

use output::CliError;

/// Extract AND/OR interactions from masked-input value functions and track
/// them across the layers of a model.
#[derive(Parser, Debug)]
#[command(name = "interlayer", version)]
struct Cli {
    #[command(flatten)]
    globals: Globals,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Globals {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 uses all available cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,
    /// Salience threshold as a fraction of the largest effect.
    #[arg(long, global = true, default_value_t = DEFAULT_TAU_RATIO)]
    pub tau_ratio: f64,
    /// Residual bound as a fraction of |v(N) − v(∅)|.
    #[arg(long, global = true, default_value_t = DEFAULT_KAPPA_RATIO)]
    pub kappa_ratio: f64,
    /// Spread of the Gaussian input noise used for stability.
    #[arg(long, global = true, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Fold singleton OR effects into AND before thresholding.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    pub merge_first_order: bool,
    #[arg(long, global = true, value_enum, default_value_t = ScopeArg::Layer)]
    pub tau_scope: ScopeArg,
    /// Learn a residual for final-layer tables as well.
    #[arg(long, global = true)]
    pub delta_on_final: bool,
    #[arg(long, global = true, value_enum, default_value_t = MethodArg::Auto)]
    pub method: MethodArg,
    #[arg(long, global = true, default_value_t = 5000)]
    pub max_iters: usize,
    /// Version of the file formats to read and write.
    #[arg(long, global = true, default_value_t = FORMAT_VERSION)]
    pub format_version: u32,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScopeArg {
    Layer,
    Global,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Auto,
    FirstOrder,
    Exact,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkArg {
    Softmax,
    Sigmoid,
}

impl From<LinkArg> for Link {
    fn from(link: LinkArg) -> Self {
        match link {
            LinkArg::Softmax => Link::Softmax,
            LinkArg::Sigmoid => Link::Sigmoid,
        }
    }
}

impl Globals {
    pub fn options(&self) -> AnalysisOptions {
        AnalysisOptions {
            tau_ratio: self.tau_ratio,
            tau_scope: match self.tau_scope {
                ScopeArg::Layer => TauScope::Layer,
                ScopeArg::Global => TauScope::Global,
            },
            kappa_ratio: self.kappa_ratio,
            merge_first_order: self.merge_first_order,
            delta_on_final: self.delta_on_final,
            optimizer: OptimizerConfig {
                method: match self.method {
                    MethodArg::Auto => Method::Auto,
                    MethodArg::FirstOrder => Method::FirstOrder,
                    MethodArg::Exact => Method::Exact,
                },
                max_iters: self.max_iters,
                seed: self.seed,
                ..OptimizerConfig::default()
            },
        }
    }
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Decompose a table and write its spectrum, salient index and sparsity curve.
    Extract(ExtractArgs),
    /// Learn the sparsest AND-OR split of a table.
    Decompose(TableArgs),
    /// Train a linear probe on the unmasked rows of a feature dump.
    ProbeTrain(ProbeTrainArgs),
    /// Turn the masked rows of a feature dump into value tables via a probe.
    ProbeTable(ProbeTableArgs),
    /// Track salient interactions from every layer to the final layer.
    Track(TrackArgs),
    /// Per-order IoU of salient sets between two sets of tables.
    Iou(IouArgs),
    /// Stability of salient interactions under Gaussian input noise.
    Stability(StabilityArgs),
    /// Sorted effect magnitudes and the error of keeping only salient ones.
    Sparsity(TableArgs),
    /// Shapley values from interactions, checked against direct enumeration.
    Shapley(TableArgs),
    /// Generate planted tables, toy models and feature dumps.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Salient sets under several residual bounds and their agreement.
    KappaSweep(KappaSweepArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct OutArgs {
    /// Directory receiving every output and the manifest.
    #[arg(short, long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct TableArgs {
    #[arg(long)]
    pub table: PathBuf,
    /// The table comes from a probe layer, so a residual is learned.
    #[arg(long)]
    pub probe_layer: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct ExtractArgs {
    /// Value table to decompose.
    #[arg(long, conflicts_with_all = ["model", "spec", "data"], required_unless_present = "model")]
    pub table: Option<PathBuf>,
    /// Toy model evaluated on masked copies of one input.
    #[arg(long, requires_all = ["spec", "data"])]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Dataset holding the input.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Row of the dataset to explain.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Class whose log-odds define the value; defaults to the sample's label.
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, value_enum, default_value_t = LinkArg::Softmax)]
    pub link: LinkArg,
    #[arg(long)]
    pub probe_layer: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct ProbeTrainArgs {
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 500)]
    pub epochs: usize,
    /// Train on masked rows too.
    #[arg(long)]
    pub include_masked: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct ProbeTableArgs {
    #[arg(long)]
    pub probe: PathBuf,
    /// Dump with all 2^n masked rows of each sample.
    #[arg(long)]
    pub dump: PathBuf,
    /// Masking spec used upstream; sets n and is recorded in the tables.
    #[arg(long, required_unless_present = "n")]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Class whose log-odds define the value; defaults to each sample's label.
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, value_enum, default_value_t = LinkArg::Softmax)]
    pub link: LinkArg,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct TrackArgs {
    /// Directory with one sub-directory of tables per layer; samples are
    /// matched by file name.
    #[arg(long)]
    pub trace: PathBuf,
    /// Name of the final layer's sub-directory.
    #[arg(long)]
    pub final_layer: String,
    /// Layer order (comma separated); defaults to sorted names.
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct IouArgs {
    /// Tables of the first model, one file per sample.
    #[arg(long)]
    pub a: PathBuf,
    /// Tables of the second model with matching file names.
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub probe_layer: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct StabilityArgs {
    /// Clean tables, one file per sample.
    #[arg(long, requires = "perturbed", required_unless_present = "model")]
    pub clean: Option<PathBuf>,
    /// One sub-directory per sample holding the tables of its noisy copies.
    #[arg(long)]
    pub perturbed: Option<PathBuf>,
    /// Toy model whose final output is perturbed directly.
    #[arg(long, conflicts_with = "clean", requires_all = ["spec", "data"])]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of dataset rows to use with --model.
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
    /// Noisy copies per sample with --model.
    #[arg(long, default_value_t = 100)]
    pub k: usize,
    #[arg(long, value_enum, default_value_t = LinkArg::Softmax)]
    pub link: LinkArg,
    #[arg(long)]
    pub probe_layer: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct KappaSweepArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.03, 0.04, 0.05])]
    pub ratios: Vec<f64>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthCommand {
    /// Planted AND/OR table.
    Table(SynthTableArgs),
    /// Planted classification data, a masking spec and a trained toy model.
    Model(SynthModelArgs),
    /// Per-layer feature dumps of a toy model.
    Dumps(SynthDumpsArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct TermArgs {
    #[arg(long)]
    pub n: usize,
    /// Planted terms as `and:MASK:COEF` or `or:MASK:COEF`, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "random_terms")]
    pub terms: Vec<String>,
    /// Number of random planted terms instead of --terms.
    #[arg(long)]
    pub random_terms: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthTableArgs {
    #[command(flatten)]
    pub terms: TermArgs,
    /// Uniform noise amplitude added to every entry.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthModelArgs {
    #[command(flatten)]
    pub terms: TermArgs,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [32, 16])]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 600)]
    pub samples: usize,
    /// Gaussian jitter on the 0/1 inputs.
    #[arg(long, default_value_t = 0.05)]
    pub jitter: f64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthDumpsArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Leading dataset rows whose 2^n masked variants are dumped; their
    /// final-layer tables go to `final/`.
    #[arg(long, default_value_t = 10)]
    pub masked_samples: usize,
    /// Link for the final-layer tables written next to the dumps.
    #[arg(long, value_enum, default_value_t = LinkArg::Softmax)]
    pub link: LinkArg,
    #[command(flatten)]
    pub out: OutArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.document());
            ExitCode::from(err.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.globals.format_version != FORMAT_VERSION {
        return Err(CliError::Core(interlayer::error::Error::Config(format!(
            "format version {} is not supported (supported: {FORMAT_VERSION})",
            cli.globals.format_version
        ))));
    }
    if cli.globals.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.globals.workers)
            .build_global()
            .map_err(|e| CliError::Core(interlayer::error::Error::Config(e.to_string())))?;
    }
    let g = &cli.globals;
    let name = serde_json::to_value(&cli.command)
        .ok()
        .and_then(|v| match v {
            serde_json::Value::Object(map) => map.keys().next().cloned(),
            serde_json::Value::String(s) => Some(s),
            _ => None,
        })
        .unwrap_or_default();
    let config = serde_json::json!({ "command": &cli.command, "globals": g });
    match &cli.command {
        Command::Extract(a) => commands::extract(g, a, &name, &config),
        Command::Decompose(a) => commands::decompose(g, a, &name, &config),
        Command::ProbeTrain(a) => commands::probe_train(a, &name, &config),
        Command::ProbeTable(a) => commands::probe_table(a, &name, &config),
        Command::Track(a) => commands::track(g, a, &name, &config),
        Command::Iou(a) => commands::iou_cmd(g, a, &name, &config),
        Command::Stability(a) => commands::stability(g, a, &name, &config),
        Command::Sparsity(a) => commands::sparsity(g, a, &name, &config),
        Command::Shapley(a) => commands::shapley(g, a, &name, &config),
        Command::Synth(s) => commands::synth(g, s, &name, &config),
        Command::KappaSweep(a) => commands::kappa_sweep(g, a, &name, &config),
    }
}
