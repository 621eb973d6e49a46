//! End-to-end synthetic experiments: dataset generation, fitting, scoring
//! on shifted test environments, and report aggregation.
//!
//! Every dataset draws from its own seed stream derived from the master
//! seed and the dataset index, so results do not depend on scheduling or
//! on how many datasets are requested.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataBundle, EnvBlock};
use crate::error::{Error, Result};
use crate::features::enumerate_modules;
use crate::pipeline::{fit_gimp, FitConfig};
use crate::predict::{oracle_coefficients, pooled_ols, predict_gimp, predict_linear, score};
use crate::rng::{purpose, SeedStream};
use crate::scm::{
    perturb_environments, random_model, sample_environment, EnvParams, MeasurementErrorSpec, NonlinearitySpec,
    ScmModel,
};
use crate::solver::GimpModel;
use crate::taxonomy::{diagnostic_scatter, write_labels_csv, ModuleLabel, Population, ScatterRow, DEFAULT_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    Regular,
    MeasurementError,
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub d: usize,
    pub n_per_env: usize,
    /// Rows per test environment; defaults to `n_per_env`.
    pub n_test_per_env: Option<usize>,
    pub n_train_envs: usize,
    pub n_test_envs: usize,
    pub n_datasets: usize,
    pub a_train: f64,
    pub a_test: f64,
    /// Measurement-error variance, used by `measurement_error` runs.
    pub sigma2: f64,
    /// Exponent of the response transform, used by `nonlinear` runs.
    pub b_exponent: f64,
    pub seed: u64,
    /// Also score the best population predictor of each test environment
    /// (linear runs only).
    pub include_oracle: bool,
    #[serde(flatten)]
    pub fit: FitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            experiment: ExperimentKind::Regular,
            d: 9,
            n_per_env: 300,
            n_test_per_env: None,
            n_train_envs: 5,
            n_test_envs: 5,
            n_datasets: 50,
            a_train: 2.0,
            a_test: 10.0,
            sigma2: 2.5,
            b_exponent: 0.5,
            seed: 0,
            include_oracle: true,
            fit: FitConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("n_per_env", self.n_per_env),
            ("n_train_envs", self.n_train_envs),
            ("n_test_envs", self.n_test_envs),
            ("n_datasets", self.n_datasets),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d < 2 {
            return Err(Error::Config("d must be at least 2".into()));
        }
        if self.n_train_envs < 2 {
            return Err(Error::Config("need at least 2 training environments".into()));
        }
        if self.n_per_env <= self.d + 1 {
            return Err(Error::Config(format!("n_per_env must exceed d + 1 = {}", self.d + 1)));
        }
        if self.fit.folds > self.n_per_env {
            return Err(Error::Config(format!(
                "{} folds need at least as many rows per environment",
                self.fit.folds
            )));
        }
        if self.n_test() < self.d + 2 {
            return Err(Error::Config(format!("test environments need at least {} rows", self.d + 2)));
        }
        if !(self.a_train >= 0.0 && self.a_test >= 0.0) {
            return Err(Error::Config("a_train and a_test must be >= 0".into()));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::Config("sigma2 must be >= 0".into()));
        }
        if !(self.b_exponent > 0.0 && self.b_exponent.is_finite()) {
            return Err(Error::Config("b_exponent must be > 0".into()));
        }
        self.fit.validate(self.d)
    }

    pub fn n_test(&self) -> usize {
        self.n_test_per_env.unwrap_or(self.n_per_env)
    }

    pub fn nonlinearity(&self) -> Result<NonlinearitySpec> {
        match self.experiment {
            ExperimentKind::Nonlinear => NonlinearitySpec::power(self.b_exponent),
            _ => Ok(NonlinearitySpec::default()),
        }
    }

    pub fn measurement_error(&self) -> Result<MeasurementErrorSpec> {
        match self.experiment {
            ExperimentKind::MeasurementError => MeasurementErrorSpec::gaussian(self.sigma2),
            _ => Ok(MeasurementErrorSpec::default()),
        }
    }

    fn stream(&self, index: usize) -> SeedStream {
        SeedStream::new(self.seed).child(index as u64)
    }
}

/// One simulated dataset and the model that generated it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub index: usize,
    pub model: ScmModel,
    /// Training environments first, then test environments.
    pub envs: Vec<EnvParams>,
    pub data: DataBundle,
}

/// The generating side of a dataset: model, environments, and how many
/// of them are training environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub model: ScmModel,
    pub envs: Vec<EnvParams>,
    pub n_train_envs: usize,
}

impl Dataset {
    pub fn scenario(&self) -> Scenario {
        Scenario {
            model: self.model.clone(),
            envs: self.envs.clone(),
            n_train_envs: self.data.train.len(),
        }
    }
}

/// Samples every environment of a known model. The first `n_train`
/// entries of `envs` become training blocks.
pub fn simulate_bundle(
    model: &ScmModel,
    envs: &[EnvParams],
    n_train: usize,
    cfg: &ExperimentConfig,
    stream: SeedStream,
) -> Result<DataBundle> {
    if n_train > envs.len() {
        return Err(Error::Config("more training environments than environments".into()));
    }
    let nl = cfg.nonlinearity()?;
    let me = cfg.measurement_error()?;
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(envs.len() - n_train);
    for (i, env) in envs.iter().enumerate() {
        let is_test = i >= n_train;
        let (tag, n) = if is_test {
            (purpose::TEST_SAMPLE, cfg.n_test())
        } else {
            (purpose::TRAIN_SAMPLE, cfg.n_per_env)
        };
        let mut rng = stream.derive(&[tag, i as u64]).rng();
        let (x, y) = sample_environment(model, env, n, &mut rng, &nl, &me, is_test)?;
        let block = EnvBlock::new(env.env_id.clone(), x, y)?;
        if is_test {
            test.push(block);
        } else {
            train.push(block);
        }
    }
    DataBundle::new(train, test)
}

/// Rebuilds dataset `index` of a configuration.
pub fn generate_dataset(cfg: &ExperimentConfig, index: usize) -> Result<Dataset> {
    let stream = cfg.stream(index);
    let model = random_model(&mut stream.child(purpose::MODEL).rng(), cfg.d)?;
    let (model, envs) = perturb_environments(
        &model,
        &mut stream.child(purpose::ENVIRONMENTS).rng(),
        cfg.n_train_envs,
        cfg.n_test_envs,
        cfg.a_train,
        cfg.a_test,
    )?;
    let data = simulate_bundle(&model, &envs, cfg.n_train_envs, cfg, stream)?;
    Ok(Dataset {
        index,
        model,
        envs,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Gimp,
    Ols,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Gimp, Method::Ols, Method::Oracle];

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method {s:?}")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Method::Gimp => "gimp",
            Method::Ols => "ols",
            Method::Oracle => "oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssRecord {
    pub dataset: usize,
    pub method: Method,
    pub test_env: String,
    pub mean_rss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFailure {
    pub dataset: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub dataset: usize,
    pub lambda: f64,
    pub n_active: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    /// Ordered by dataset, then method, then test environment.
    pub records: Vec<RssRecord>,
    pub fits: Vec<FitRecord>,
    pub failures: Vec<DatasetFailure>,
}

/// Aggregate of one method over datasets. `scope` is `pooled` for the
/// per-dataset mean over test environments, or a test environment id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub scope: String,
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub mean: f64,
    pub variance: f64,
}

pub const POOLED_SCOPE: &str = "pooled";

/// Linearly interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summary statistics of a sample; variance uses the `n - 1` divisor.
pub fn summarize(method: Method, scope: &str, values: &[f64]) -> SummaryRow {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let variance = if n > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        f64::NAN
    };
    let (q1, q3) = (quantile(&v, 0.25), quantile(&v, 0.75));
    SummaryRow {
        method,
        scope: scope.to_string(),
        n,
        median: quantile(&v, 0.5),
        q1,
        q3,
        iqr: q3 - q1,
        mean,
        variance,
    }
}

impl MetricsReport {
    pub fn methods(&self) -> Vec<Method> {
        let mut m: Vec<Method> = self.records.iter().map(|r| r.method).collect();
        m.sort();
        m.dedup();
        m
    }

    /// `(dataset, mean over test environments)` for one method.
    pub fn pooled_rss(&self, method: Method) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in self.records.iter().filter(|r| r.method == method) {
            match out.last_mut() {
                Some(last) if last.0 == r.dataset => {
                    last.1 += r.mean_rss;
                    last.2 += 1;
                }
                _ => out.push((r.dataset, r.mean_rss, 1)),
            }
        }
        out.into_iter().map(|(d, s, c)| (d, s / c as f64)).collect()
    }

    pub fn median_pooled(&self, method: Method) -> f64 {
        let v: Vec<f64> = self.pooled_rss(method).into_iter().map(|(_, r)| r).collect();
        summarize(method, POOLED_SCOPE, &v).median
    }

    /// Pooled rows first, then one row per test environment, per method.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows = Vec::new();
        for m in self.methods() {
            let pooled: Vec<f64> = self.pooled_rss(m).into_iter().map(|(_, r)| r).collect();
            rows.push(summarize(m, POOLED_SCOPE, &pooled));
            let mut envs: Vec<&str> = Vec::new();
            for r in self.records.iter().filter(|r| r.method == m) {
                if !envs.contains(&r.test_env.as_str()) {
                    envs.push(&r.test_env);
                }
            }
            for env in envs {
                let v: Vec<f64> = self
                    .records
                    .iter()
                    .filter(|r| r.method == m && r.test_env == env)
                    .map(|r| r.mean_rss)
                    .collect();
                rows.push(summarize(m, env, &v));
            }
        }
        rows
    }
}

struct DatasetOutcome {
    records: Vec<RssRecord>,
    fit: FitRecord,
}

fn run_dataset(cfg: &ExperimentConfig, index: usize) -> Result<DatasetOutcome> {
    let ds = generate_dataset(cfg, index)?;
    let fit = fit_gimp(&ds.data, &cfg.fit)?.model;
    let (ols_c, ols_b) = pooled_ols(&ds.data)?;
    let oracle = cfg.include_oracle && cfg.experiment != ExperimentKind::Nonlinear;
    let me_var = cfg.measurement_error()?.variance;
    let test_envs = &ds.envs[cfg.n_train_envs..];

    let mut by_method: Vec<Vec<RssRecord>> = vec![Vec::new(); 3];
    for (block, env) in ds.data.test.iter().zip(test_envs) {
        let mut push = |slot: usize, method: Method, y_hat: DVector<f64>| -> Result<()> {
            by_method[slot].push(RssRecord {
                dataset: index,
                method,
                test_env: block.env_id.clone(),
                mean_rss: score(&y_hat, &block.y)?,
            });
            Ok(())
        };
        push(0, Method::Gimp, predict_gimp(&fit, &block.x)?)?;
        push(1, Method::Ols, predict_linear(&ols_c, ols_b, &block.x)?)?;
        if oracle {
            let (c, b) = oracle_coefficients(&ds.model, env, me_var)?;
            push(2, Method::Oracle, predict_linear(&c, b, &block.x)?)?;
        }
    }
    for r in by_method.iter().flatten() {
        if !r.mean_rss.is_finite() {
            return Err(Error::NonFinite("test RSS"));
        }
    }
    Ok(DatasetOutcome {
        records: by_method.into_iter().flatten().collect(),
        fit: FitRecord {
            dataset: index,
            lambda: fit.lambda,
            n_active: fit.diagnostics.active_set.len(),
        },
    })
}

/// Runs every dataset of the configuration on the current thread pool.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let outcomes: Vec<Result<DatasetOutcome>> =
        (0..cfg.n_datasets).into_par_iter().map(|i| run_dataset(cfg, i)).collect();
    let mut report = MetricsReport {
        config: cfg.clone(),
        records: Vec::new(),
        fits: Vec::new(),
        failures: Vec::new(),
    };
    for (i, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(o) => {
                report.records.extend(o.records);
                report.fits.push(o.fit);
            }
            Err(e) => {
                log::warn!("dataset {i} failed: {e}");
                report.failures.push(DatasetFailure {
                    dataset: i,
                    error: e.to_string(),
                });
            }
        }
    }
    if report.failures.len() * 10 > cfg.n_datasets {
        return Err(Error::FailureThreshold {
            failed: report.failures.len(),
            total: cfg.n_datasets,
        });
    }
    Ok(report)
}

/// Like [`run_experiment`], on a dedicated pool of `threads` workers.
pub fn run_experiment_with_threads(cfg: &ExperimentConfig, threads: usize) -> Result<MetricsReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| run_experiment(cfg))
}

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub per_dataset: PathBuf,
    pub summary: PathBuf,
    pub plot_data: PathBuf,
    pub failures: PathBuf,
}

fn csv_file(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_file(path)?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const PER_DATASET_HEADER: [&str; 4] = ["dataset", "method", "test_env", "mean_rss"];
pub const SUMMARY_HEADER: [&str; 9] = ["method", "scope", "n", "median", "q1", "q3", "iqr", "mean", "variance"];
pub const PLOT_HEADER: [&str; 3] = ["method", "dataset", "pooled_rss"];

/// Writes `per_dataset.csv`, `summary.csv`, `plot_data.csv` and
/// `failures.csv` into `dir`, creating it if needed.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = ReportFiles {
        per_dataset: dir.join("per_dataset.csv"),
        summary: dir.join("summary.csv"),
        plot_data: dir.join("plot_data.csv"),
        failures: dir.join("failures.csv"),
    };
    write_rows(
        &files.per_dataset,
        &PER_DATASET_HEADER,
        report
            .records
            .iter()
            .map(|r| [r.dataset.to_string(), r.method.to_string(), r.test_env.clone(), r.mean_rss.to_string()]),
    )?;
    write_rows(
        &files.summary,
        &SUMMARY_HEADER,
        report.summary().into_iter().map(|s| {
            [
                s.method.to_string(),
                s.scope,
                s.n.to_string(),
                s.median.to_string(),
                s.q1.to_string(),
                s.q3.to_string(),
                s.iqr.to_string(),
                s.mean.to_string(),
                s.variance.to_string(),
            ]
        }),
    )?;
    let plot: Vec<[String; 3]> = report
        .methods()
        .into_iter()
        .flat_map(|m| {
            report
                .pooled_rss(m)
                .into_iter()
                .map(move |(d, r)| [m.to_string(), d.to_string(), r.to_string()])
        })
        .collect();
    write_rows(&files.plot_data, &PLOT_HEADER, plot)?;
    write_rows(
        &files.failures,
        &["dataset", "error"],
        report.failures.iter().map(|f| [f.dataset.to_string(), f.error.clone()]),
    )?;
    Ok(files)
}

/// Reads a per-dataset CSV back into records.
pub fn read_per_dataset_csv(path: &Path) -> Result<Vec<RssRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        if rec.len() != 4 {
            return Err(Error::Parse(format!("{}: expected 4 fields", path.display())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Parse(format!("bad number {s:?}")));
        out.push(RssRecord {
            dataset: rec[0].parse().map_err(|_| Error::Parse(format!("bad dataset {:?}", &rec[0])))?,
            method: Method::parse(&rec[1])?,
            test_env: rec[2].to_string(),
            mean_rss: num(&rec[3])?,
        });
    }
    Ok(out)
}

/// A fitted dataset joined with the population labels of its modules.
#[derive(Debug, Clone)]
pub struct DiagnosticTable {
    pub dataset: usize,
    pub fit: GimpModel,
    pub labels: Vec<ModuleLabel>,
    pub rows: Vec<ScatterRow>,
}

impl DiagnosticTable {
    /// CSV `module,label,variation,residual,theta_abs`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_labels_csv(writer, &self.labels, Some(&self.fit))
    }
}

/// Fits `data` and labels every module with the population moments of
/// `envs`. Labels always refer to the linear model, so under a response
/// transform they describe the underlying linear structure.
pub fn diagnose(
    dataset: usize,
    model: &ScmModel,
    envs: &[EnvParams],
    data: &DataBundle,
    fit_cfg: &FitConfig,
) -> Result<DiagnosticTable> {
    let fit = fit_gimp(data, fit_cfg)?.model;
    let population = Population::new(model, envs)?;
    let ids = enumerate_modules(model.d(), fit_cfg.max_r);
    let labels: Vec<ModuleLabel> = ids
        .par_iter()
        .map(|id| population.classify(id, DEFAULT_TOL))
        .collect::<Result<_>>()?;
    let rows = diagnostic_scatter(&labels, &fit)?;
    Ok(DiagnosticTable {
        dataset,
        fit,
        labels,
        rows,
    })
}

/// Reproduces dataset `index` of `cfg`, fits it and labels its modules
/// over all of its environments.
pub fn run_diagnostic(cfg: &ExperimentConfig, index: usize) -> Result<DiagnosticTable> {
    cfg.validate()?;
    let ds = generate_dataset(cfg, index)?;
    diagnose(index, &ds.model, &ds.envs, &ds.data, &cfg.fit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::Label;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            d: 4,
            n_per_env: 60,
            n_datasets: 3,
            n_train_envs: 3,
            n_test_envs: 2,
            fit: FitConfig {
                grid_size: 8,
                ..FitConfig::default()
            },
            seed: 17,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&v, 1.0), 4.0);
        let s = summarize(Method::Ols, POOLED_SCOPE, &[3.0, 1.0, 2.0]);
        assert_eq!((s.median, s.mean, s.variance), (2.0, 2.0, 1.0));
    }

    #[test]
    fn experiment_records_every_method_and_env() {
        let report = run_experiment(&small()).unwrap();
        assert!(report.failures.is_empty());
        assert_eq!(report.records.len(), 3 * 3 * 2);
        assert_eq!(report.methods(), vec![Method::Gimp, Method::Ols, Method::Oracle]);
        assert_eq!(report.pooled_rss(Method::Ols).len(), 3);
        // the population predictor cannot be beaten on average by much
        let s = report.summary();
        assert_eq!(s.len(), 3 * 3);
    }

    #[test]
    fn seed_isolation_across_dataset_counts() {
        let a = run_experiment(&small()).unwrap();
        let b = run_experiment(&ExperimentConfig {
            n_datasets: 4,
            ..small()
        })
        .unwrap();
        assert_eq!(a.records[..], b.records[..a.records.len()]);
    }

    #[test]
    fn nonlinear_runs_have_no_oracle() {
        let report = run_experiment(&ExperimentConfig {
            experiment: ExperimentKind::Nonlinear,
            n_datasets: 1,
            ..small()
        })
        .unwrap();
        assert_eq!(report.methods(), vec![Method::Gimp, Method::Ols]);
    }

    #[test]
    fn emitted_report_round_trips() {
        let report = run_experiment(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&report, dir.path()).unwrap();
        let back = read_per_dataset_csv(&files.per_dataset).unwrap();
        assert_eq!(back, report.records);
        let rebuilt = MetricsReport {
            records: back,
            ..report.clone()
        };
        assert_eq!(rebuilt.summary(), report.summary());
    }

    #[test]
    fn empty_report_writes_headers_only() {
        let report = MetricsReport {
            config: small(),
            records: vec![],
            fits: vec![],
            failures: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&report, dir.path()).unwrap();
        for p in [&files.per_dataset, &files.summary, &files.plot_data, &files.failures] {
            assert_eq!(fs::read_to_string(p).unwrap().lines().count(), 1);
        }
    }

    #[test]
    fn diagnostic_with_forced_zero_fit() {
        let cfg = ExperimentConfig {
            fit: FitConfig {
                lambda: Some(1e12),
                ..small().fit
            },
            ..small()
        };
        let t = run_diagnostic(&cfg, 0).unwrap();
        assert_eq!(t.rows.len(), crate::features::module_count(4));
        assert!(t.rows.iter().all(|r| r.theta_abs == 0.0));
        assert!(t.labels.iter().any(|l| l.label == Label::Matched));
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(ExperimentConfig::default().validate().is_ok());
        for bad in [
            ExperimentConfig {
                n_datasets: 0,
                ..small()
            },
            ExperimentConfig {
                sigma2: -1.0,
                ..small()
            },
            ExperimentConfig {
                b_exponent: 0.0,
                ..small()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"d": 5, "grid_size": 12, "seed": 3}"#).unwrap();
        assert_eq!((cfg.d, cfg.fit.grid_size, cfg.seed), (5, 12, 3));
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
    }
}
