//! Lasso with an unpenalized linear block.
//!
//! Minimizes `||Y - Z theta - X zeta||^2 + lambda ||theta||_1` where `Z`
//! holds the module features and `X` the raw predictors plus a constant
//! column. For fixed `theta` the optimal `zeta` is the least-squares fit of
//! `Y - Z theta` on `X`; substituting it leaves an ordinary Lasso in the
//! residualized quantities `(I - P) Y` and `(I - P) Z`, with `P` the
//! projection onto the columns of `X`. The solver computes the projection
//! with a pivoted QR factorization, runs coordinate descent on the reduced
//! problem, and recovers `zeta` afterwards.

mod cd;
mod cv;

pub use cd::{coordinate_descent, kkt_residual, soft_threshold, CdOptions, CdOutcome};
pub use cv::{cross_validate, cross_validate_refit, stratified_folds, CvResult};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::DataBundle;
use crate::error::{Error, Result};
use crate::features::{ModuleDesign, ModuleFitOptions, ModuleId};
use crate::linalg::PivotedQr;

use cd::CdSolver;

/// Columns whose residual norm after projection falls below this fraction
/// of their original norm are treated as lying in the span of `X`.
const SPAN_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct PartialLassoProblem {
    y: DVector<f64>,
    z: DMatrix<f64>,
    /// Predictors followed by a constant column.
    x_aug: DMatrix<f64>,
    lambda: f64,
    row_env: Vec<usize>,
    module_ids: Vec<ModuleId>,
    module_options: ModuleFitOptions,
}

impl PartialLassoProblem {
    /// `x` is the raw `n x d` predictor block; a constant column is appended.
    pub fn new(y: DVector<f64>, z: DMatrix<f64>, x: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        let n = y.len();
        let d = x.ncols();
        if z.nrows() != n || x.nrows() != n {
            return Err(Error::Dimension(format!(
                "Y has {n} rows, Z has {}, X has {}",
                z.nrows(),
                x.nrows()
            )));
        }
        if n <= d + 1 {
            return Err(Error::Config(format!("need n > d + 1, got n = {n}, d = {d}")));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if y.iter().chain(z.iter()).chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("problem data"));
        }
        let mut x_aug = DMatrix::from_element(n, d + 1, 1.0);
        x_aug.columns_mut(0, d).copy_from(x);
        Ok(PartialLassoProblem {
            y,
            z,
            x_aug,
            lambda,
            row_env: vec![0; n],
            module_ids: Vec::new(),
            module_options: ModuleFitOptions::default(),
        })
    }

    /// Problem over a training design; rows follow the design's stacking order.
    pub fn from_design(design: &ModuleDesign, data: &DataBundle, lambda: f64) -> Result<Self> {
        let pooled = data.pooled_train();
        if pooled.row_env != design.row_env {
            return Err(Error::Dimension("design rows do not match the data bundle".into()));
        }
        let mut problem = Self::new(pooled.y, design.z_hat.clone(), &pooled.x, lambda)?;
        problem.row_env = design.row_env.clone();
        problem.module_ids = design.module_ids.clone();
        problem.module_options = design.options;
        Ok(problem)
    }

    pub fn with_groups(mut self, row_env: Vec<usize>) -> Result<Self> {
        if row_env.len() != self.n() {
            return Err(Error::Dimension("one group label per row required".into()));
        }
        self.row_env = row_env;
        Ok(self)
    }

    pub fn with_module_ids(mut self, ids: Vec<ModuleId>) -> Result<Self> {
        if ids.len() != self.p() {
            return Err(Error::Dimension(format!(
                "{} module ids for {} columns",
                ids.len(),
                self.p()
            )));
        }
        self.module_ids = ids;
        Ok(self)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        self.lambda = lambda;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    /// Number of raw predictors (the constant column excluded).
    pub fn d(&self) -> usize {
        self.x_aug.ncols() - 1
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn x_aug(&self) -> &DMatrix<f64> {
        &self.x_aug
    }

    pub fn row_env(&self) -> &[usize] {
        &self.row_env
    }

    /// Column keys; empty unless the problem came from a design or
    /// [`with_module_ids`](Self::with_module_ids).
    pub fn module_ids(&self) -> &[ModuleId] {
        &self.module_ids
    }

    /// The problem restricted to `rows`, in the given order.
    pub fn subset_rows(&self, rows: &[usize]) -> Result<Self> {
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        let z = self.z.select_rows(rows);
        let x = self.x_aug.columns(0, self.d()).select_rows(rows);
        let mut sub = Self::new(y, z, &x, self.lambda)?;
        sub.row_env = rows.iter().map(|&i| self.row_env[i]).collect();
        sub.module_ids = self.module_ids.clone();
        sub.module_options = self.module_options;
        Ok(sub)
    }

    /// Penalized objective at `(theta, zeta)`, `zeta` including the constant term last.
    pub fn objective(&self, theta: &DVector<f64>, zeta_aug: &DVector<f64>) -> f64 {
        self.objective_at(theta, zeta_aug, self.lambda)
    }

    fn objective_at(&self, theta: &DVector<f64>, zeta_aug: &DVector<f64>, lambda: f64) -> f64 {
        let r = self.residual(theta) - &self.x_aug * zeta_aug;
        r.norm_squared() + lambda * theta.lp_norm(1)
    }

    /// `y - Z theta`, touching only the nonzero columns.
    fn residual(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut r = self.y.clone();
        for (j, &t) in theta.iter().enumerate() {
            if t != 0.0 {
                r.axpy(-t, &self.z.column(j), 1.0);
            }
        }
        r
    }
}

/// Residualized response and module block, with the factorization of `X`.
#[derive(Debug, Clone)]
pub struct Projected {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    /// Columns that lie in the span of the unpenalized block.
    pub pinned: Vec<bool>,
    qr: PivotedQr,
}

/// Removes from `Y` and every column of `Z` their projection onto the
/// columns of the augmented predictor block.
pub fn project_out(problem: &PartialLassoProblem) -> Result<Projected> {
    let qr = PivotedQr::new(&problem.x_aug);
    if !qr.is_full_rank() {
        return Err(Error::Singular {
            columns: qr.dependent_columns(),
        });
    }
    let mut y = problem.y.clone();
    qr.project_out_in_place(y.as_mut_slice());
    let mut x = problem.z.clone();
    qr.project_out_columns(&mut x);
    let mut pinned = vec![false; problem.p()];
    for (j, pin) in pinned.iter_mut().enumerate() {
        let original = problem.z.column(j).norm();
        let mut col = x.column_mut(j);
        if col.norm() <= SPAN_TOL * original {
            col.fill(0.0);
            *pin = true;
        }
    }
    Ok(Projected { y, x, pinned, qr })
}

/// Column centers and norms of the module block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub z_centers: Vec<f64>,
    /// Norms of the residualized columns; coordinate changes are measured
    /// on this unit-norm scale.
    pub z_scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub active_set: Vec<usize>,
    pub kkt_residual: f64,
    pub objective: f64,
    pub converged: bool,
    pub sweeps: usize,
}

/// A fitted invariant predictor `theta^T Z + zeta^T X + intercept`.
#[derive(Debug, Clone, PartialEq)]
pub struct GimpModel {
    pub module_ids: Vec<ModuleId>,
    pub theta: DVector<f64>,
    pub zeta: DVector<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub module_options: ModuleFitOptions,
    pub scaling: Scaling,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ThetaEntry {
    module: ModuleId,
    value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GimpModelDoc {
    lambda: f64,
    theta: Vec<ThetaEntry>,
    zeta: Vec<f64>,
    intercept: f64,
    module_intercept: bool,
    module_ids: Vec<ModuleId>,
    scaling: Scaling,
    diagnostics: FitDiagnostics,
}

impl Serialize for GimpModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::Error as _;
        if self.module_ids.len() != self.theta.len() {
            return Err(S::Error::custom("model columns carry no module ids"));
        }
        GimpModelDoc {
            lambda: self.lambda,
            theta: self
                .active_modules()
                .map(|(id, value)| ThetaEntry {
                    module: id.clone(),
                    value,
                })
                .collect(),
            zeta: self.zeta.as_slice().to_vec(),
            intercept: self.intercept,
            module_intercept: self.module_options.intercept,
            module_ids: self.module_ids.clone(),
            scaling: self.scaling.clone(),
            diagnostics: self.diagnostics.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for GimpModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let doc = GimpModelDoc::deserialize(d)?;
        let mut theta = DVector::zeros(doc.module_ids.len());
        for e in doc.theta {
            let j = doc
                .module_ids
                .iter()
                .position(|m| *m == e.module)
                .ok_or_else(|| D::Error::custom(format!("theta refers to unknown module {}", e.module)))?;
            theta[j] = e.value;
        }
        Ok(GimpModel {
            module_ids: doc.module_ids,
            theta,
            zeta: DVector::from_vec(doc.zeta),
            intercept: doc.intercept,
            lambda: doc.lambda,
            module_options: ModuleFitOptions {
                intercept: doc.module_intercept,
            },
            scaling: doc.scaling,
            diagnostics: doc.diagnostics,
        })
    }
}

impl GimpModel {
    pub fn d(&self) -> usize {
        self.zeta.len()
    }

    /// Columns with nonzero coefficient, in column order.
    pub fn active(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.theta
            .iter()
            .enumerate()
            .filter(|(_, &t)| t != 0.0)
            .map(|(j, &t)| (j, t))
    }

    /// Active modules by id; empty when the columns carry no ids.
    pub fn active_modules(&self) -> impl Iterator<Item = (&ModuleId, f64)> + '_ {
        self.module_ids
            .iter()
            .zip(self.theta.iter())
            .filter(|(_, &t)| t != 0.0)
            .map(|(id, &t)| (id, t))
    }

    /// `zeta` with the intercept appended, matching the augmented predictor block.
    pub fn zeta_aug(&self) -> DVector<f64> {
        let d = self.zeta.len();
        DVector::from_fn(d + 1, |i, _| if i < d { self.zeta[i] } else { self.intercept })
    }

    /// Fitted values on a design that has already been built.
    pub fn fitted(&self, z: &DMatrix<f64>, x_aug: &DMatrix<f64>) -> DVector<f64> {
        let mut out = x_aug * self.zeta_aug();
        for (j, &t) in self.theta.iter().enumerate() {
            if t != 0.0 {
                out.axpy(t, &z.column(j), 1.0);
            }
        }
        out
    }
}

/// Warm-started solves over a sequence of penalties on one problem.
pub struct PathSolver<'a> {
    problem: &'a PartialLassoProblem,
    projected: &'a Projected,
    cd: CdSolver<'a>,
    scales: Vec<f64>,
    centers: Vec<f64>,
    opts: CdOptions,
}

impl<'a> PathSolver<'a> {
    pub fn new(problem: &'a PartialLassoProblem, projected: &'a Projected, opts: CdOptions) -> Self {
        let cd = CdSolver::new(&projected.x, &projected.y, projected.pinned.clone());
        let scales = (0..problem.p()).map(|j| projected.x.column(j).norm()).collect();
        let centers = (0..problem.p()).map(|j| problem.z.column(j).mean()).collect();
        PathSolver {
            problem,
            projected,
            cd,
            scales,
            centers,
            opts,
        }
    }

    pub fn lambda_max(&self) -> f64 {
        self.cd.lambda_max()
    }

    pub fn solve(&mut self, lambda: f64) -> Result<GimpModel> {
        let out = self.cd.solve(lambda, &self.opts);
        let theta = out.theta;
        let resid = self.problem.residual(&theta);
        let zeta_aug = self.projected.qr.solve_least_squares(resid.as_slice())?;
        let d = self.problem.d();
        let objective = self.problem.objective_at(&theta, &zeta_aug, lambda);
        let active_set = (0..theta.len()).filter(|&j| theta[j] != 0.0).collect();
        Ok(GimpModel {
            module_ids: self.problem.module_ids.clone(),
            zeta: zeta_aug.rows(0, d).into_owned(),
            intercept: zeta_aug[d],
            theta,
            lambda,
            module_options: self.problem.module_options,
            scaling: Scaling {
                z_centers: self.centers.clone(),
                z_scales: self.scales.clone(),
            },
            diagnostics: FitDiagnostics {
                active_set,
                kkt_residual: out.kkt_residual,
                objective,
                converged: out.converged,
                sweeps: out.sweeps,
            },
        })
    }
}

/// Solves the partially penalized problem at the problem's own lambda.
pub fn solve_partial_lasso(problem: &PartialLassoProblem) -> Result<GimpModel> {
    solve_partial_lasso_with(problem, &CdOptions::default())
}

pub fn solve_partial_lasso_with(problem: &PartialLassoProblem, opts: &CdOptions) -> Result<GimpModel> {
    let projected = project_out(problem)?;
    PathSolver::new(problem, &projected, *opts).solve(problem.lambda)
}

/// `2 max_j |x'_j^T y'|`: the smallest penalty with an all-zero solution.
pub fn lambda_max(problem: &PartialLassoProblem) -> Result<f64> {
    let projected = project_out(problem)?;
    Ok(CdSolver::new(&projected.x, &projected.y, projected.pinned.clone()).lambda_max())
}

/// Log-spaced grid from `lambda_max` down to `epsilon_ratio * lambda_max`.
pub fn lambda_grid(lambda_max: f64, grid_size: usize, epsilon_ratio: f64) -> Result<Vec<f64>> {
    if grid_size < 2 {
        return Err(Error::Config(format!("lambda grid needs at least 2 points, got {grid_size}")));
    }
    if !(epsilon_ratio > 0.0 && epsilon_ratio < 1.0) {
        return Err(Error::Config(format!(
            "epsilon ratio must lie in (0, 1), got {epsilon_ratio}"
        )));
    }
    let step = epsilon_ratio.ln() / (grid_size - 1) as f64;
    Ok((0..grid_size)
        .map(|k| if k == 0 { lambda_max } else { lambda_max * (step * k as f64).exp() })
        .collect())
}

/// Warm-started fits along an explicit grid.
pub fn solve_path(
    problem: &PartialLassoProblem,
    grid: &[f64],
    opts: &CdOptions,
) -> Result<Vec<GimpModel>> {
    let projected = project_out(problem)?;
    let mut path = PathSolver::new(problem, &projected, *opts);
    grid.iter().map(|&l| path.solve(l)).collect()
}

/// Fits along a log-spaced grid starting at `lambda_max`.
pub fn lambda_path(
    problem: &PartialLassoProblem,
    grid_size: usize,
    epsilon_ratio: f64,
) -> Result<Vec<(f64, GimpModel)>> {
    lambda_path_with(problem, grid_size, epsilon_ratio, &CdOptions::default())
}

pub fn lambda_path_with(
    problem: &PartialLassoProblem,
    grid_size: usize,
    epsilon_ratio: f64,
    opts: &CdOptions,
) -> Result<Vec<(f64, GimpModel)>> {
    if grid_size < 2 {
        return Err(Error::Config(format!("lambda grid needs at least 2 points, got {grid_size}")));
    }
    let projected = project_out(problem)?;
    let mut path = PathSolver::new(problem, &projected, *opts);
    let grid = lambda_grid(path.lambda_max(), grid_size, epsilon_ratio)?;
    grid.into_iter()
        .map(|l| path.solve(l).map(|m| (l, m)))
        .collect()
}
