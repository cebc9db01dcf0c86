mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "gmtgp", version, about = "Grouped mixed-effect GP models for periodic time series")]
struct Cli {
    /// Worker threads; overrides GMTGP_THREADS.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Write the metrics JSON here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset as long-format CSV.
    Synth(SynthArgs),
    /// Fit a k-cluster model by EM.
    Fit(FitCmd),
    /// Fit the truncated Dirichlet-process model by variational EM.
    FitDp(FitDpCmd),
    /// Choose k by BIC.
    SelectK(SelectCmd),
    /// Predict fitted tasks on a uniform phase grid.
    Predict(PredictCmd),
    /// Train (or load) a per-label classifier and label test series.
    Classify(ClassifyCmd),
    /// Cluster labeled and unlabeled series together and name the clusters.
    Discover(DiscoverCmd),
    /// Synthetic regression benchmark over sample sizes and methods.
    BenchRegression(BenchRegressionCmd),
    /// Synthetic classification and discovery benchmark.
    BenchClassify(BenchClassifyCmd),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelArg {
    Rbf,
    Empirical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Regression,
    Classification,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FitArgs {
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of equally spaced candidate shifts; 1 disables shifts.
    #[arg(long, default_value_t = 1)]
    pub shift_grid: usize,
    /// Individual-effect kernel: optimized RBF or a free matrix (synchronous data only).
    #[arg(long, value_enum, default_value_t = KernelArg::Rbf)]
    pub kernel: KernelArg,
    /// Group-effect RBF amplitude.
    #[arg(long, default_value_t = 1.0)]
    pub group_amplitude: f64,
    /// Group-effect RBF denominator in phase units.
    #[arg(long, default_value_t = 0.01)]
    pub group_denom: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DataArgs {
    /// Long-format CSV `task_id,t,y[,label]`.
    #[arg(long)]
    pub data: PathBuf,
    /// Period in the CSV's time units.
    #[arg(long, default_value_t = 1.0)]
    pub period: f64,
    /// Snap times onto this many equally spaced phases.
    #[arg(long)]
    pub lattice: Option<usize>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DpArgs {
    #[arg(long, default_value_t = 10)]
    pub truncation: usize,
    #[arg(long, default_value_t = 1.0)]
    pub concentration: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value_t = SynthKind::Regression)]
    pub kind: SynthKind,
    /// Samples per task.
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Tasks (regression) or training tasks (classification).
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset CSV (the training set for classification).
    #[arg(long)]
    pub csv: PathBuf,
    /// True task curves on the full grid (regression).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Test set CSV (classification).
    #[arg(long)]
    pub test_csv: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct FitCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Write the fitted model JSON here.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct FitDpCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[command(flatten)]
    pub dp: DpArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SelectCmd {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long, default_value_t = 1)]
    pub k_min: usize,
    #[arg(long, default_value_t = 6)]
    pub k_max: usize,
    /// Plot data: one `k,bic,log_likelihood,params` row per k.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the selected model JSON here.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct PredictCmd {
    /// Model JSON written by `fit`, `fit-dp` or `select-k`.
    #[arg(long)]
    pub model: PathBuf,
    /// The data the model was fitted on.
    #[command(flatten)]
    pub data: DataArgs,
    /// Query phases `i / points`.
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    /// Predictions as long-format CSV.
    #[arg(long)]
    pub csv: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct ClassifyCmd {
    /// Labeled training CSV.
    #[arg(long, conflicts_with = "classifier", required_unless_present = "classifier")]
    pub train: Option<PathBuf>,
    /// Classifier JSON to load instead of training.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub period: f64,
    #[arg(long)]
    pub lattice: Option<usize>,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Clusters per label.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Save the trained classifier JSON here.
    #[arg(long)]
    pub save: Option<PathBuf>,
    /// Predictions as `task_id,predicted,label` CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct DiscoverCmd {
    /// Labeled reference CSV.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub period: f64,
    #[arg(long)]
    pub lattice: Option<usize>,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long, default_value_t = 9)]
    pub k: usize,
    /// Cluster with the DP model instead of a fixed k.
    #[arg(long)]
    pub dp: bool,
    #[command(flatten)]
    pub dp_args: DpArgs,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchRegressionCmd {
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,50")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Comma-separated subset of ST,SCMT,GMT,DP-GMT,CGMT.
    #[arg(long, value_delimiter = ',', default_value = "ST,SCMT,GMT,DP-GMT,CGMT")]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[command(flatten)]
    pub dp: DpArgs,
    /// Plot data: median RMSE per sample size and method.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct BenchClassifyCmd {
    #[arg(long, default_value_t = 300)]
    pub train_size: usize,
    #[arg(long, default_value_t = 300)]
    pub test_size: usize,
    /// Samples per task.
    #[arg(long, default_value_t = 15)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub restarts: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 100)]
    pub shift_grid: usize,
    /// Clusters per label for classification.
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    /// Clusters for discovery; 0 skips it.
    #[arg(long, default_value_t = 9)]
    pub discover_k: usize,
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    use gmtgp::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Config(_)) => "config",
        Some(E::Parse { .. }) => "parse",
        Some(E::Version(_)) => "version",
        Some(E::Schema(_)) => "schema",
        Some(E::Io(_)) => "io",
        Some(E::Json(_)) => "json",
        Some(E::Empty(_)) => "empty",
        Some(E::TimeOutOfRange { .. } | E::InvalidTask { .. } | E::DegenerateSeries(_)) => "data",
        Some(E::Dimension(_) | E::Contract(_)) => "contract",
        Some(E::Factorization { .. } | E::NonFinite(_) | E::Monotonicity { .. } | E::AllRestartsFailed(..)) => {
            "numerical"
        }
        None if err.downcast_ref::<std::io::Error>().is_some() => "io",
        None => "usage",
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    let obj = json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{obj}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail("usage", e.to_string().trim_end().to_string()),
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var("GMTGP_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = threads {
        if n == 0 {
            return fail("usage", "thread count must be positive".into());
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail("usage", e.to_string());
        }
    }
    match commands::run(cli.command, cli.out.as_deref()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(error_kind(&e), format!("{e:#}")),
    }
}
