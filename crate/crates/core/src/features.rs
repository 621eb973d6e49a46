//! Prediction modules and the stacked module design matrix.
//!
//! A prediction module `(k, R)` is the least-squares prediction of `X_k`
//! from `X_R`, fitted separately inside every environment. Stacking the
//! per-environment fitted values for all modules yields the design `Z_hat`
//! whose columns the Lasso selects from.
//!
//! Indices are 0-based in code; the text form `k|r1,r2` is 1-based.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::DataBundle;
use crate::error::{Error, Result};
use crate::linalg::spd_solve_pivoted;

/// A module `(k, R)`: target predictor `k` and nonempty conditioning set `R`, `k ∉ R`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModuleId {
    k: usize,
    r: Vec<usize>,
}

impl ModuleId {
    pub fn new(k: usize, mut r: Vec<usize>) -> Result<Self> {
        r.sort_unstable();
        r.dedup();
        if r.is_empty() {
            return Err(Error::Config("module conditioning set must be nonempty".into()));
        }
        if r.contains(&k) {
            return Err(Error::Config(format!(
                "module target X_{} appears in its own conditioning set",
                k + 1
            )));
        }
        Ok(ModuleId { k, r })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn r(&self) -> &[usize] {
        &self.r
    }

    fn max_index(&self) -> usize {
        self.r.iter().copied().chain([self.k]).max().unwrap_or(0)
    }
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|", self.k + 1)?;
        for (i, j) in self.r.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", j + 1)?;
        }
        Ok(())
    }
}

impl FromStr for ModuleId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad module id {s:?}, expected k|r1,r2,..."));
        let (k, r) = s.split_once('|').ok_or_else(bad)?;
        let idx = |t: &str| -> Result<usize> {
            match t.trim().parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(bad()),
            }
        };
        let k = idx(k)?;
        let r = r.split(',').map(idx).collect::<Result<Vec<_>>>()?;
        ModuleId::new(k, r)
    }
}

impl Serialize for ModuleId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModuleId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Number of modules in the exhaustive enumeration, `d (2^(d-1) - 1)`.
pub fn module_count(d: usize) -> usize {
    if d < 2 {
        0
    } else {
        d * ((1usize << (d - 1)) - 1)
    }
}

fn combinations(pool: &[usize], size: usize, out: &mut Vec<Vec<usize>>) {
    fn rec(pool: &[usize], size: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == size {
            out.push(cur.clone());
            return;
        }
        for i in start..pool.len() {
            if pool.len() - i < size - cur.len() {
                break;
            }
            cur.push(pool[i]);
            rec(pool, size, i + 1, cur, out);
            cur.pop();
        }
    }
    rec(pool, size, 0, &mut Vec::with_capacity(size), out);
}

/// All modules over `d` predictors: ascending `k`, then `R` by ascending
/// size, then lexicographically. `max_r` caps `|R|`.
pub fn enumerate_modules(d: usize, max_r: Option<usize>) -> Vec<ModuleId> {
    let cap = max_r.unwrap_or(usize::MAX).min(d.saturating_sub(1));
    let mut ids = Vec::new();
    for k in 0..d {
        let others: Vec<usize> = (0..d).filter(|&j| j != k).collect();
        for size in 1..=cap {
            let mut subsets = Vec::new();
            combinations(&others, size, &mut subsets);
            ids.extend(subsets.into_iter().map(|r| ModuleId { k, r }));
        }
    }
    ids
}

/// How modules are fitted inside an environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleFitOptions {
    /// Fit an intercept in each module regression. Disabling it gives the
    /// pure projection `X_R (X_R^T X_R)^{-1} X_R^T X_k`.
    pub intercept: bool,
}

impl Default for ModuleFitOptions {
    fn default() -> Self {
        ModuleFitOptions { intercept: true }
    }
}

/// Coefficients of one module in one environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleCoeffs {
    pub coeff: Vec<f64>,
    pub intercept: f64,
    /// The design was rank deficient; the fit fell back to the mean of `X_k`.
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModuleFit {
    pub coeffs: ModuleCoeffs,
    pub fitted: DVector<f64>,
}

/// Sufficient statistics of one environment block.
#[derive(Debug, Clone)]
pub struct EnvStats {
    n: usize,
    means: Vec<f64>,
    /// Centered cross-products when fitting intercepts, raw ones otherwise.
    gram: DMatrix<f64>,
    intercept: bool,
}

impl EnvStats {
    pub fn new(x: &DMatrix<f64>, opts: ModuleFitOptions) -> Self {
        let (n, d) = x.shape();
        let means: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
        let gram = if opts.intercept {
            let mut c = x.clone();
            for j in 0..d {
                let m = means[j];
                c.column_mut(j).iter_mut().for_each(|v| *v -= m);
            }
            c.tr_mul(&c)
        } else {
            x.tr_mul(x)
        };
        EnvStats {
            n,
            means,
            gram,
            intercept: opts.intercept,
        }
    }

    fn min_rows(&self, id: &ModuleId) -> usize {
        id.r.len() + if self.intercept { 2 } else { 1 }
    }

    /// Fits module `id`; falls back to the mean of `X_k` when `X_R` (with
    /// intercept) is rank deficient.
    pub fn fit(&self, id: &ModuleId) -> ModuleCoeffs {
        let r = &id.r;
        let g_rr = DMatrix::from_fn(r.len(), r.len(), |a, b| self.gram[(r[a], r[b])]);
        let g_rk: Vec<f64> = r.iter().map(|&a| self.gram[(a, id.k)]).collect();
        match spd_solve_pivoted(&g_rr, &g_rk) {
            Some(coeff) if self.n >= self.min_rows(id) => {
                let intercept = if self.intercept {
                    self.means[id.k] - r.iter().zip(&coeff).map(|(&a, c)| c * self.means[a]).sum::<f64>()
                } else {
                    0.0
                };
                ModuleCoeffs {
                    coeff,
                    intercept,
                    rank_deficient: false,
                }
            }
            _ => ModuleCoeffs {
                coeff: vec![0.0; r.len()],
                intercept: self.means[id.k],
                rank_deficient: true,
            },
        }
    }
}

/// Fitted values `intercept + X_R coeff` for the rows of `x`.
pub fn module_values(x: &DMatrix<f64>, id: &ModuleId, c: &ModuleCoeffs) -> DVector<f64> {
    let mut out = DVector::from_element(x.nrows(), c.intercept);
    for (&j, &b) in id.r.iter().zip(&c.coeff) {
        if b != 0.0 {
            out.axpy(b, &x.column(j), 1.0);
        }
    }
    out
}

/// Least-squares fit of `X_k` on `X_R` within one environment.
pub fn fit_module_env(x: &DMatrix<f64>, id: &ModuleId, opts: ModuleFitOptions) -> Result<ModuleFit> {
    if id.max_index() >= x.ncols() {
        return Err(Error::Dimension(format!(
            "module {id} refers to a predictor beyond d = {}",
            x.ncols()
        )));
    }
    let stats = EnvStats::new(x, opts);
    if x.nrows() < stats.min_rows(id) {
        return Err(Error::Config(format!(
            "module {id} needs at least {} rows, got {}",
            stats.min_rows(id),
            x.nrows()
        )));
    }
    let coeffs = stats.fit(id);
    let fitted = module_values(x, id, &coeffs);
    Ok(ModuleFit { coeffs, fitted })
}

/// The stacked module design over the training environments.
#[derive(Debug, Clone)]
pub struct ModuleDesign {
    pub module_ids: Vec<ModuleId>,
    /// `n x p`, rows ordered by environment then within-environment row.
    pub z_hat: DMatrix<f64>,
    /// Training environment index of every row.
    pub row_env: Vec<usize>,
    pub env_ids: Vec<String>,
    /// `per_env_coeffs[j][e]`: fit of module `j` in environment `e`.
    pub per_env_coeffs: Vec<Vec<ModuleCoeffs>>,
    pub options: ModuleFitOptions,
}

impl ModuleDesign {
    pub fn p(&self) -> usize {
        self.module_ids.len()
    }

    /// Modules that fell back to the mean in at least one environment.
    pub fn flagged_modules(&self) -> Vec<usize> {
        (0..self.p())
            .filter(|&j| self.per_env_coeffs[j].iter().any(|c| c.rank_deficient))
            .collect()
    }

    /// CSV with header `env,<module ids...>`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["env".to_string()];
        header.extend(self.module_ids.iter().map(ToString::to_string));
        w.write_record(&header).map_err(|e| Error::csv("<design>", e))?;
        for i in 0..self.z_hat.nrows() {
            let mut rec = vec![self.env_ids[self.row_env[i]].clone()];
            rec.extend(self.z_hat.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| Error::csv("<design>", e))?;
        }
        w.flush().map_err(|e| Error::io("<design>", e))
    }
}

fn check_ids(ids: &[ModuleId], d: usize) -> Result<()> {
    match ids.iter().find(|id| id.max_index() >= d) {
        Some(id) => Err(Error::Dimension(format!(
            "module {id} refers to a predictor beyond d = {d}"
        ))),
        None => Ok(()),
    }
}

/// Fits every module in every training environment and stacks the fitted
/// values into `Z_hat`.
pub fn build_train_design(
    data: &DataBundle,
    ids: &[ModuleId],
    opts: ModuleFitOptions,
) -> Result<ModuleDesign> {
    data.validate()?;
    let d = data.d();
    check_ids(ids, d)?;
    if let Some(b) = data.train.iter().find(|b| b.len() <= d + 1) {
        return Err(Error::Config(format!(
            "environment {} has {} rows; per-environment fits need more than d + 1 = {}",
            b.env_id,
            b.len(),
            d + 1
        )));
    }
    let stats: Vec<EnvStats> = data.train.iter().map(|b| EnvStats::new(&b.x, opts)).collect();
    let n = data.n_train();
    let offsets: Vec<usize> = data
        .train
        .iter()
        .scan(0, |acc, b| {
            let start = *acc;
            *acc += b.len();
            Some(start)
        })
        .collect();

    let columns: Vec<(Vec<ModuleCoeffs>, Vec<f64>)> = ids
        .par_iter()
        .map(|id| {
            let mut col = vec![0.0; n];
            let fits: Vec<ModuleCoeffs> = data
                .train
                .iter()
                .zip(&stats)
                .zip(&offsets)
                .map(|((block, st), &off)| {
                    let c = st.fit(id);
                    let v = module_values(&block.x, id, &c);
                    col[off..off + block.len()].copy_from_slice(v.as_slice());
                    c
                })
                .collect();
            (fits, col)
        })
        .collect();

    let mut z_hat = DMatrix::zeros(n, ids.len());
    let mut per_env_coeffs = Vec::with_capacity(ids.len());
    for (j, (fits, col)) in columns.into_iter().enumerate() {
        z_hat.column_mut(j).copy_from_slice(&col);
        per_env_coeffs.push(fits);
    }
    let row_env = data.pooled_train().row_env;
    Ok(ModuleDesign {
        module_ids: ids.to_vec(),
        z_hat,
        row_env,
        env_ids: data.train.iter().map(|b| b.env_id.clone()).collect(),
        per_env_coeffs,
        options: opts,
    })
}

/// Module values for an unlabeled test block, each module re-estimated on
/// the block itself. Also returns which modules fell back to the mean.
pub fn build_test_design(
    x_test: &DMatrix<f64>,
    ids: &[ModuleId],
    opts: ModuleFitOptions,
) -> Result<(DMatrix<f64>, Vec<bool>)> {
    let (m, d) = x_test.shape();
    check_ids(ids, d)?;
    if m < d + 2 {
        return Err(Error::Config(format!(
            "test block has {m} rows; module re-estimation needs at least d + 2 = {}",
            d + 2
        )));
    }
    let stats = EnvStats::new(x_test, opts);
    let mut z = DMatrix::zeros(m, ids.len());
    let mut flags = Vec::with_capacity(ids.len());
    for (j, id) in ids.iter().enumerate() {
        let c = stats.fit(id);
        z.column_mut(j).copy_from(&module_values(x_test, id, &c));
        flags.push(c.rank_deficient);
    }
    Ok((z, flags))
}
