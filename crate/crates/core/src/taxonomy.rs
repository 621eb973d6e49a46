//! Population-level classification of prediction modules.
//!
//! For a module `(k, R)` let `w_e` be the coefficients of the best affine
//! predictor of `X_k` from `X_R` in environment `e` (written as a linear
//! function of all of `X`, intercept last), and let `c_e` be those of the
//! best affine predictor of `Y` from `X`. The module is *matched* if a
//! scalar `lambda` and a vector `eta` exist, shared by all environments,
//! with `c_e = lambda w_e + eta`. Unmatched modules are *redundant* when
//! `w_e` does not vary across environments and *anti-matching* otherwise.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ModuleId;
use crate::linalg::spd_solve_pivoted;
use crate::scm::{population_moments, EnvParams, Moments, NonlinearitySpec, ScmModel};
use crate::solver::GimpModel;

/// Default tolerance for certificate residuals and variation scores.
pub const DEFAULT_TOL: f64 = 1e-6;

/// Best affine predictor of variable `target` from the variables in `given`
/// (joint indexing, `Y` at index `d`). Returns `(coefficients, intercept)`.
pub fn population_lmmse(moments: &Moments, target: usize, given: &[usize]) -> Result<(Vec<f64>, f64)> {
    let dim = moments.mean.len();
    if target >= dim || given.iter().any(|&g| g >= dim) {
        return Err(Error::Dimension(format!("variable index out of range 0..{dim}")));
    }
    let s_gg = DMatrix::from_fn(given.len(), given.len(), |a, b| moments.cov[(given[a], given[b])]);
    let s_gt: Vec<f64> = given.iter().map(|&g| moments.cov[(g, target)]).collect();
    let coeff = if given.is_empty() {
        Vec::new()
    } else {
        spd_solve_pivoted(&s_gg, &s_gt).ok_or_else(|| Error::Singular {
            columns: given.to_vec(),
        })?
    };
    let intercept = moments.mean[target]
        - given.iter().zip(&coeff).map(|(&g, c)| c * moments.mean[g]).sum::<f64>();
    Ok((coeff, intercept))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpCertificate {
    pub module: ModuleId,
    /// The shared scale on the module.
    pub lambda_imp: f64,
    /// Shared coefficients on `X`.
    pub eta: Vec<f64>,
    pub eta_intercept: f64,
    /// `max_e ||c_e - lambda w_e - eta||_inf`.
    pub feasibility_residual: f64,
    /// Conditioning set of the response regression; always all predictors.
    pub s_set: Vec<usize>,
    /// The module does not vary across environments, so `lambda` is not identified.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Matched,
    Redundant,
    AntiMatching,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Label::Matched => "matched",
            Label::Redundant => "redundant",
            Label::AntiMatching => "anti_matching",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matched" => Ok(Label::Matched),
            "redundant" => Ok(Label::Redundant),
            "anti_matching" => Ok(Label::AntiMatching),
            _ => Err(Error::Parse(format!("unknown label {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleLabel {
    pub module: ModuleId,
    pub label: Label,
    pub variation: f64,
    pub residual: f64,
}

/// Exact moments of a linear model across a set of environments, with the
/// response regression precomputed.
#[derive(Debug, Clone)]
pub struct Population {
    d: usize,
    moments: Vec<Moments>,
    /// `c_e` per environment, intercept last.
    response: Vec<Vec<f64>>,
}

impl Population {
    pub fn new(model: &ScmModel, envs: &[EnvParams]) -> Result<Self> {
        if envs.is_empty() {
            return Err(Error::Config("need at least one environment".into()));
        }
        let nl = NonlinearitySpec::default();
        let moments = envs
            .iter()
            .map(|e| population_moments(model, e, &nl))
            .collect::<Result<Vec<_>>>()?;
        Self::from_moments(model.d(), moments)
    }

    pub fn from_moments(d: usize, moments: Vec<Moments>) -> Result<Self> {
        let all: Vec<usize> = (0..d).collect();
        let response = moments
            .iter()
            .map(|m| {
                let (mut c, b) = population_lmmse(m, d, &all)?;
                c.push(b);
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Population { d, moments, response })
    }

    pub fn n_envs(&self) -> usize {
        self.moments.len()
    }

    pub fn moments(&self) -> &[Moments] {
        &self.moments
    }

    /// `c_e` for every environment.
    pub fn response_coefficients(&self) -> &[Vec<f64>] {
        &self.response
    }

    /// `w_e` for every environment, as a length `d + 1` vector.
    pub fn module_coefficients(&self, id: &ModuleId) -> Result<Vec<Vec<f64>>> {
        if id.k() >= self.d || id.r().iter().any(|&j| j >= self.d) {
            return Err(Error::Dimension(format!("module {id} outside d = {}", self.d)));
        }
        self.moments
            .iter()
            .map(|m| {
                let (coeff, b) = population_lmmse(m, id.k(), id.r())?;
                let mut w = vec![0.0; self.d + 1];
                for (&j, c) in id.r().iter().zip(coeff) {
                    w[j] = c;
                }
                w[self.d] = b;
                Ok(w)
            })
            .collect()
    }

    pub fn variation(&self, id: &ModuleId) -> Result<f64> {
        if self.n_envs() < 2 {
            return Err(Error::Config("coefficient variation needs at least 2 environments".into()));
        }
        Ok(max_pairwise_gap(&self.module_coefficients(id)?))
    }

    pub fn certify(&self, id: &ModuleId) -> Result<ImpCertificate> {
        let w = self.module_coefficients(id)?;
        Ok(certify_from(id, &self.response, &w))
    }

    pub fn classify(&self, id: &ModuleId, tol: f64) -> Result<ModuleLabel> {
        let w = self.module_coefficients(id)?;
        let cert = certify_from(id, &self.response, &w);
        let variation = max_pairwise_gap(&w);
        let label = if cert.feasibility_residual <= tol {
            Label::Matched
        } else if variation <= tol {
            Label::Redundant
        } else {
            Label::AntiMatching
        };
        Ok(ModuleLabel {
            module: id.clone(),
            label,
            variation,
            residual: cert.feasibility_residual,
        })
    }

    pub fn classify_all(&self, ids: &[ModuleId], tol: f64) -> Result<Vec<ModuleLabel>> {
        ids.iter().map(|id| self.classify(id, tol)).collect()
    }
}

fn inf_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn max_pairwise_gap(vs: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0_f64;
    for e in 0..vs.len() {
        for h in e + 1..vs.len() {
            worst = worst.max(inf_gap(&vs[e], &vs[h]));
        }
    }
    worst
}

fn certify_from(id: &ModuleId, c: &[Vec<f64>], w: &[Vec<f64>]) -> ImpCertificate {
    let dim = c[0].len();
    let (mut num, mut den) = (0.0, 0.0);
    for e in 0..c.len() {
        for h in e + 1..c.len() {
            for i in 0..dim {
                let dw = w[e][i] - w[h][i];
                num += (c[e][i] - c[h][i]) * dw;
                den += dw * dw;
            }
        }
    }
    let scale = w.iter().flatten().fold(1.0_f64, |m, v| m.max(v.abs()));
    let degenerate = den.sqrt() <= 1e-12 * scale;
    let lambda = if degenerate { 0.0 } else { num / den };

    let k = c.len() as f64;
    let eta_full: Vec<f64> = (0..dim)
        .map(|i| (0..c.len()).map(|e| c[e][i] - lambda * w[e][i]).sum::<f64>() / k)
        .collect();
    let residual = (0..c.len())
        .map(|e| {
            (0..dim)
                .map(|i| (c[e][i] - lambda * w[e][i] - eta_full[i]).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    ImpCertificate {
        module: id.clone(),
        lambda_imp: lambda,
        eta: eta_full[..dim - 1].to_vec(),
        eta_intercept: eta_full[dim - 1],
        feasibility_residual: residual,
        s_set: (0..dim - 1).collect(),
        degenerate,
    }
}

/// Largest difference between the module's population coefficients
/// (intercept included) over all pairs of environments.
pub fn coefficient_variation(model: &ScmModel, envs: &[EnvParams], id: &ModuleId) -> Result<f64> {
    Population::new(model, envs)?.variation(id)
}

/// Solves for the shared `(lambda, eta)` by least squares over pairwise
/// environment differences and reports the worst remaining mismatch.
pub fn certify_imp(model: &ScmModel, envs: &[EnvParams], id: &ModuleId) -> Result<ImpCertificate> {
    Population::new(model, envs)?.certify(id)
}

pub fn classify_module(model: &ScmModel, envs: &[EnvParams], id: &ModuleId, tol: f64) -> Result<ModuleLabel> {
    Population::new(model, envs)?.classify(id, tol)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub module: ModuleId,
    pub theta_abs: f64,
    pub label: Label,
}

/// Joins labels with fitted coefficient magnitudes, one row per module.
pub fn diagnostic_scatter(labels: &[ModuleLabel], fit: &GimpModel) -> Result<Vec<ScatterRow>> {
    if labels.len() != fit.module_ids.len()
        || labels.iter().zip(&fit.module_ids).any(|(l, id)| l.module != *id)
    {
        return Err(Error::Dimension("labels and fit refer to different modules".into()));
    }
    Ok(labels
        .iter()
        .zip(fit.theta.iter())
        .map(|(l, t)| ScatterRow {
            module: l.module.clone(),
            theta_abs: t.abs(),
            label: l.label,
        })
        .collect())
}

/// Total `|theta|` over the modules carrying `label`.
pub fn l1_mass(rows: &[ScatterRow], label: Label) -> f64 {
    rows.iter().filter(|r| r.label == label).map(|r| r.theta_abs).sum()
}

/// CSV `module,label,variation,residual[,theta_abs]`.
pub fn write_labels_csv<W: Write>(writer: W, labels: &[ModuleLabel], fit: Option<&GimpModel>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["module", "label", "variation", "residual"];
    let magnitudes = match fit {
        Some(f) => {
            header.push("theta_abs");
            Some(diagnostic_scatter(labels, f)?)
        }
        None => None,
    };
    w.write_record(&header).map_err(|e| Error::csv("<labels>", e))?;
    for (i, l) in labels.iter().enumerate() {
        let mut rec = vec![
            l.module.to_string(),
            l.label.to_string(),
            l.variation.to_string(),
            l.residual.to_string(),
        ];
        if let Some(rows) = &magnitudes {
            rec.push(rows[i].theta_abs.to_string());
        }
        w.write_record(&rec).map_err(|e| Error::csv("<labels>", e))?;
    }
    w.flush().map_err(|e| Error::io("<labels>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::NoiseSpec;
    use approx::assert_relative_eq;

    /// X1 = e1, Y = (2 + alpha) X1 + mu + eY, X2 = Y + e2; PE = {X1}.
    fn chain() -> ScmModel {
        ScmModel::new(vec![vec![0.0; 2]; 2], vec![0.0, 1.0], vec![2.0, 0.0], NoiseSpec::standard(2))
            .unwrap()
            .with_pe_set(vec![0])
            .unwrap()
    }

    fn envs(alphas: &[f64]) -> Vec<EnvParams> {
        alphas
            .iter()
            .enumerate()
            .map(|(i, &a)| EnvParams {
                env_id: format!("e{}", i + 1),
                alpha: vec![a, 0.0],
                mu: 0.3 * i as f64,
            })
            .collect()
    }

    #[test]
    fn lmmse_on_chain_by_hand() {
        let m = population_moments(&chain(), &EnvParams::baseline("e", 2), &NonlinearitySpec::default())
            .unwrap();
        // Sigma over (X1, X2) = [[1, 2], [2, 6]], Cov((X1, X2), Y) = (2, 5)
        let (c, b) = population_lmmse(&m, 2, &[0, 1]).unwrap();
        assert_relative_eq!(c[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(c[1], 0.5, epsilon = 1e-12);
        assert_relative_eq!(b, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn lmmse_independent_and_exact_cases() {
        let m = Moments {
            mean: nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]),
            cov: DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, 0.0, 2.0, 0.0, 4.0]),
        };
        let (c, b) = population_lmmse(&m, 1, &[0]).unwrap();
        assert_eq!(c, vec![0.0]);
        assert_eq!(b, 2.0);
        // variable 2 = 2 * variable 0 exactly: residual variance 0
        let (c, _) = population_lmmse(&m, 2, &[0]).unwrap();
        let resid = m.cov[(2, 2)] - c[0] * m.cov[(0, 2)];
        assert_relative_eq!(resid, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn chain_module_variation_and_certificates() {
        let model = chain();
        let es = envs(&[0.0, 1.0]);
        let m21 = ModuleId::new(1, vec![0]).unwrap();
        let m12 = ModuleId::new(0, vec![1]).unwrap();
        assert!(coefficient_variation(&model, &es, &m21).unwrap() > 0.5);
        // k = 2 outside PE, R = {1} covers PE, Y has a child: matched
        let cert = certify_imp(&model, &es, &m21).unwrap();
        assert!(cert.feasibility_residual <= 1e-8, "{cert:?}");
        // three environments so the fit of lambda is over-determined
        let es3 = envs(&[0.0, 1.0, -0.7]);
        assert!(certify_imp(&model, &es3, &m21).unwrap().feasibility_residual <= 1e-8);
        assert_eq!(classify_module(&model, &es3, &m21, DEFAULT_TOL).unwrap().label, Label::Matched);
        // k = 1 in PE: no certificate
        let cert = certify_imp(&model, &es3, &m12).unwrap();
        assert!(cert.feasibility_residual > 1e-3);
        assert_eq!(
            classify_module(&model, &es3, &m12, DEFAULT_TOL).unwrap().label,
            Label::AntiMatching
        );
    }

    #[test]
    fn single_environment_is_degenerate() {
        let model = chain();
        let cert = certify_imp(&model, &envs(&[0.4]), &ModuleId::new(1, vec![0]).unwrap()).unwrap();
        assert!(cert.degenerate);
        assert_eq!(cert.feasibility_residual, 0.0);
    }

    #[test]
    fn parent_module_of_non_child_is_redundant() {
        // X1 -> X2, X1 -> Y, Y -> X3; module (2, {1}) has invariant coefficients B[2][1].
        let b = vec![vec![0.0; 3], vec![1.2, 0.0, 0.0], vec![0.0; 3]];
        let model = ScmModel::new(b, vec![0.0, 0.0, 0.8], vec![1.0, 0.0, 0.0], NoiseSpec::standard(3))
            .unwrap()
            .with_pe_set(vec![0])
            .unwrap();
        let es: Vec<EnvParams> = [0.0, 1.5, -1.0]
            .iter()
            .enumerate()
            .map(|(i, &a)| EnvParams {
                env_id: format!("e{i}"),
                alpha: vec![a, 0.0, 0.0],
                mu: a,
            })
            .collect();
        let id = ModuleId::new(1, vec![0]).unwrap();
        assert!(coefficient_variation(&model, &es, &id).unwrap() < 1e-12);
        let w = Population::new(&model, &es).unwrap().module_coefficients(&id).unwrap();
        assert_relative_eq!(w[0][0], 1.2, epsilon = 1e-12);
        assert_eq!(classify_module(&model, &es, &id, DEFAULT_TOL).unwrap().label, Label::Redundant);
    }

    #[test]
    fn scatter_join_checks_ids() {
        let labels = vec![ModuleLabel {
            module: ModuleId::new(0, vec![1]).unwrap(),
            label: Label::Matched,
            variation: 1.0,
            residual: 0.0,
        }];
        let fit = GimpModel {
            module_ids: vec![ModuleId::new(1, vec![0]).unwrap()],
            theta: nalgebra::DVector::from_vec(vec![0.0]),
            zeta: nalgebra::DVector::zeros(2),
            intercept: 0.0,
            lambda: 1.0,
            module_options: Default::default(),
            scaling: crate::solver::Scaling {
                z_centers: vec![0.0],
                z_scales: vec![1.0],
            },
            diagnostics: crate::solver::FitDiagnostics {
                active_set: vec![],
                kkt_residual: 0.0,
                objective: 0.0,
                converged: true,
                sweeps: 0,
            },
        };
        assert!(diagnostic_scatter(&labels, &fit).is_err());
        let fit = GimpModel {
            module_ids: vec![labels[0].module.clone()],
            ..fit
        };
        let rows = diagnostic_scatter(&labels, &fit).unwrap();
        assert_eq!(rows[0].theta_abs, 0.0);
    }
}
