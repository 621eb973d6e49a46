use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use imp_lasso::data::DataBundle;
use imp_lasso::features::enumerate_modules;
use imp_lasso::harness::{
    emit_report, generate_dataset, run_diagnostic, run_experiment_with_threads, ExperimentConfig, ExperimentKind,
    Scenario, POOLED_SCOPE,
};
use imp_lasso::pipeline::{fit_gimp, CvMode, FitConfig};
use imp_lasso::predict::{predict_blocks, write_predictions_csv};
use imp_lasso::solver::GimpModel;
use imp_lasso::taxonomy::{write_labels_csv, Population, DEFAULT_TOL};
use imp_lasso::Error;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "imp-lasso", version, about = "Invariant prediction with module-augmented partially penalized Lasso")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one dataset and write it as CSV.
    Simulate(SimulateArgs),
    /// Fit a model to the training environments of a dataset CSV.
    Fit(FitArgs),
    /// Label every module of a simulated scenario at the population level.
    Classify(ClassifyArgs),
    /// Predict the test environments of a dataset CSV with a fitted model.
    Predict(PredictArgs),
    /// Run a full experiment and write the report CSVs.
    Experiment(ExperimentArgs),
    /// Fit one dataset of an experiment and join |theta| with module labels.
    Diagnostic(DiagnosticArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Regular,
    MeasurementError,
    Nonlinear,
}

#[derive(Clone, Copy, ValueEnum)]
enum CvModeArg {
    Reuse,
    Refit,
}

/// Model-fitting options shared by every fitting subcommand.
#[derive(Args, Clone, Default)]
struct FitFlags {
    /// Largest conditioning-set size in the module enumeration.
    #[arg(long)]
    max_r: Option<usize>,
    /// Fit modules without an intercept.
    #[arg(long)]
    no_module_intercept: bool,
    #[arg(long)]
    grid_size: Option<usize>,
    /// Smallest lambda on the grid, relative to lambda_max.
    #[arg(long)]
    epsilon_ratio: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, value_enum)]
    cv_mode: Option<CvModeArg>,
    /// Fit at this penalty instead of cross-validating.
    #[arg(long)]
    lambda: Option<f64>,
}

impl FitFlags {
    fn apply(&self, cfg: &mut FitConfig) {
        if self.max_r.is_some() {
            cfg.max_r = self.max_r;
        }
        if self.no_module_intercept {
            cfg.module_intercept = false;
        }
        if let Some(v) = self.grid_size {
            cfg.grid_size = v;
        }
        if let Some(v) = self.epsilon_ratio {
            cfg.epsilon_ratio = v;
        }
        if let Some(v) = self.folds {
            cfg.folds = v;
        }
        if let Some(m) = self.cv_mode {
            cfg.cv_mode = match m {
                CvModeArg::Reuse => CvMode::Reuse,
                CvModeArg::Refit => CvMode::Refit,
            };
        }
        if self.lambda.is_some() {
            cfg.lambda = self.lambda;
        }
    }
}

/// Experiment configuration: a JSON file, overridden by flags.
#[derive(Args, Clone)]
struct ConfigFlags {
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    experiment: Option<KindArg>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n_per_env: Option<usize>,
    #[arg(long)]
    n_test_per_env: Option<usize>,
    #[arg(long)]
    n_train_envs: Option<usize>,
    #[arg(long)]
    n_test_envs: Option<usize>,
    #[arg(long)]
    n_datasets: Option<usize>,
    #[arg(long)]
    a_train: Option<f64>,
    #[arg(long)]
    a_test: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long)]
    b_exponent: Option<f64>,
    /// Skip the population oracle baseline.
    #[arg(long)]
    no_oracle: bool,
    #[command(flatten)]
    fit: FitFlags,
}

impl ConfigFlags {
    fn resolve(&self, seed: Option<u64>) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => read_json::<ExperimentConfig>(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(k) = self.experiment {
            cfg.experiment = match k {
                KindArg::Regular => ExperimentKind::Regular,
                KindArg::MeasurementError => ExperimentKind::MeasurementError,
                KindArg::Nonlinear => ExperimentKind::Nonlinear,
            };
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            )*};
        }
        set!(d, n_per_env, n_train_envs, n_test_envs, n_datasets, a_train, a_test, sigma2, b_exponent);
        if self.n_test_per_env.is_some() {
            cfg.n_test_per_env = self.n_test_per_env;
        }
        if self.no_oracle {
            cfg.include_oracle = false;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        self.fit.apply(&mut cfg.fit);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset index within the experiment.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Output dataset CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also write the generating model and environments as JSON.
    #[arg(long)]
    scenario_out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Dataset CSV (env,split,x1..xd,y).
    #[arg(long)]
    data: PathBuf,
    /// JSON fit configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    fit: FitFlags,
    /// Output model document (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Scenario JSON written by `simulate --scenario-out`.
    #[arg(long)]
    scenario: PathBuf,
    /// Fitted model whose |theta| is joined to the labels.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    max_r: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Dataset CSV; its test environments are predicted.
    #[arg(long)]
    data: PathBuf,
    /// Predict the training environments instead.
    #[arg(long)]
    train: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    config: ConfigFlags,
    #[arg(long)]
    seed: u64,
    /// Worker threads (defaults to all cores); results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory for the report CSVs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnosticArgs {
    #[command(flatten)]
    config: ConfigFlags,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map_err(Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let cfg = args.config.resolve(args.seed)?;
    let ds = generate_dataset(&cfg, args.index)?;
    ds.data.write_csv_file(&args.out)?;
    if let Some(path) = &args.scenario_out {
        write_json(path, &ds.scenario())?;
    }
    log::info!("wrote dataset {} to {}", args.index, args.out.display());
    Ok(())
}

fn fit(args: FitArgs) -> anyhow::Result<()> {
    let data = DataBundle::read_csv_file(&args.data)?;
    let mut cfg = match &args.config {
        Some(p) => read_json::<FitConfig>(p)?,
        None => FitConfig::default(),
    };
    args.fit.apply(&mut cfg);
    let out = fit_gimp(&data, &cfg)?;
    let m = &out.model;
    log::info!(
        "lambda {} with {} active modules (converged: {})",
        m.lambda,
        m.diagnostics.active_set.len(),
        m.diagnostics.converged
    );
    write_json(&args.out, m)
}

fn classify(args: ClassifyArgs) -> anyhow::Result<()> {
    let scenario: Scenario = read_json(&args.scenario)?;
    let fit: Option<GimpModel> = args.model.as_deref().map(read_json).transpose()?;
    let ids = match &fit {
        Some(f) => f.module_ids.clone(),
        None => enumerate_modules(scenario.model.d(), args.max_r),
    };
    let pop = Population::new(&scenario.model, &scenario.envs)?;
    let labels = pop.classify_all(&ids, args.tol)?;
    write_labels_csv(create(&args.out)?, &labels, fit.as_ref())?;
    Ok(())
}

fn predict(args: PredictArgs) -> anyhow::Result<()> {
    let model: GimpModel = read_json(&args.model)?;
    let data = DataBundle::read_csv_file(&args.data)?;
    let blocks = if args.train { &data.train } else { &data.test };
    if blocks.is_empty() {
        bail!(Error::Config(format!("{} has no environments to predict", args.data.display())));
    }
    let preds = predict_blocks(&model, blocks)?;
    let truths: Vec<_> = blocks.iter().map(|b| Some(&b.y)).collect();
    write_predictions_csv(create(&args.out)?, &preds, &truths)?;
    for p in &preds {
        if let Some(rss) = p.rss {
            log::info!("{}: mean RSS {rss}", p.env_id);
        }
    }
    Ok(())
}

fn experiment(args: ExperimentArgs) -> anyhow::Result<()> {
    let cfg = args.config.resolve(Some(args.seed))?;
    let threads = args.threads.unwrap_or(0);
    let report = run_experiment_with_threads(&cfg, threads)?;
    let files = emit_report(&report, &args.out)?;
    write_json(&args.out.join("config.json"), &cfg)?;
    for s in report.summary().iter().filter(|s| s.scope == POOLED_SCOPE) {
        println!("{:<7} median {:.4}  iqr {:.4}  (n = {})", s.method, s.median, s.iqr, s.n);
    }
    if !report.failures.is_empty() {
        println!("{} of {} datasets failed", report.failures.len(), cfg.n_datasets);
    }
    log::info!("report written to {}", files.summary.parent().unwrap_or(Path::new(".")).display());
    Ok(())
}

fn diagnostic(args: DiagnosticArgs) -> anyhow::Result<()> {
    let cfg = args.config.resolve(args.seed)?;
    let table = run_diagnostic(&cfg, args.index)?;
    table.write_csv(create(&args.out)?)?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::FailureThreshold { .. }) => 3,
        Some(Error::Config(_) | Error::Parse(_) | Error::Json(_) | Error::Dimension(_) | Error::Csv { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Classify(a) => classify(a),
        Command::Predict(a) => predict(a),
        Command::Experiment(a) => experiment(a),
        Command::Diagnostic(a) => diagnostic(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
