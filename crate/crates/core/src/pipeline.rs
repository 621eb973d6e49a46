//! Training-data to fitted model: module enumeration, design assembly,
//! penalty selection by cross-validation, and the final solve.

use serde::{Deserialize, Serialize};

use crate::data::DataBundle;
use crate::error::{Error, Result};
use crate::features::{build_train_design, enumerate_modules, ModuleFitOptions};
use crate::solver::{
    cross_validate, cross_validate_refit, lambda_grid, project_out, solve_partial_lasso_with, CdOptions, CvResult,
    GimpModel, PartialLassoProblem, PathSolver,
};

/// Largest `d` for which the exhaustive module enumeration is allowed
/// without an explicit cap on `|R|`.
pub const MAX_UNCAPPED_D: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvMode {
    /// Module columns are estimated once on all training rows; folds split rows.
    #[default]
    Reuse,
    /// Modules are re-estimated inside every fold.
    Refit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub max_r: Option<usize>,
    pub module_intercept: bool,
    pub grid_size: usize,
    pub epsilon_ratio: f64,
    pub folds: usize,
    pub cv_mode: CvMode,
    /// Skip cross-validation and fit at this penalty.
    pub lambda: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        let cd = CdOptions::default();
        FitConfig {
            max_r: None,
            module_intercept: true,
            grid_size: 30,
            epsilon_ratio: 1e-2,
            folds: 5,
            cv_mode: CvMode::Reuse,
            lambda: None,
            tol: cd.tol,
            max_iter: cd.max_iter,
        }
    }
}

impl FitConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if d > MAX_UNCAPPED_D && self.max_r.is_none() {
            return Err(Error::Config(format!("d = {d} needs max_r to bound the module count")));
        }
        if self.max_r == Some(0) {
            return Err(Error::Config("max_r must be at least 1".into()));
        }
        if self.grid_size < 2 {
            return Err(Error::Config("grid_size must be at least 2".into()));
        }
        if !(self.epsilon_ratio > 0.0 && self.epsilon_ratio < 1.0) {
            return Err(Error::Config("epsilon_ratio must lie in (0, 1)".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda must be finite and >= 0, got {l}")));
            }
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("tol must be > 0 and max_iter >= 1".into()));
        }
        Ok(())
    }

    pub fn module_options(&self) -> ModuleFitOptions {
        ModuleFitOptions {
            intercept: self.module_intercept,
        }
    }

    pub fn cd_options(&self) -> CdOptions {
        CdOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            ..CdOptions::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: GimpModel,
    /// Absent when the penalty was fixed.
    pub cv: Option<CvResult>,
}

/// Fits the module-augmented model on the training environments of `data`.
pub fn fit_gimp(data: &DataBundle, cfg: &FitConfig) -> Result<FitOutcome> {
    let d = data.d();
    cfg.validate(d)?;
    let ids = enumerate_modules(d, cfg.max_r);
    let opts = cfg.module_options();
    let design = build_train_design(data, &ids, opts)?;
    let problem = PartialLassoProblem::from_design(&design, data, 0.0)?;
    let cd = cfg.cd_options();

    if let Some(l) = cfg.lambda {
        let model = solve_partial_lasso_with(&problem.with_lambda(l)?, &cd)?;
        return Ok(FitOutcome { model, cv: None });
    }

    let projected = project_out(&problem)?;
    let mut path = PathSolver::new(&problem, &projected, cd);
    let grid = lambda_grid(path.lambda_max(), cfg.grid_size, cfg.epsilon_ratio)?;
    let cv = match cfg.cv_mode {
        CvMode::Reuse => cross_validate(&problem, cfg.folds, &grid, &cd)?,
        CvMode::Refit => cross_validate_refit(data, &ids, opts, cfg.folds, &grid, &cd)?,
    };
    // warm starts along the grid down to the selected penalty
    let mut model = None;
    for &l in &grid[..=cv.selected_index] {
        model = Some(path.solve(l)?);
    }
    let model = model.expect("grid is non-empty");
    log::debug!(
        "selected lambda {} (index {}), {} active modules",
        cv.selected_lambda,
        cv.selected_index,
        model.diagnostics.active_set.len()
    );
    Ok(FitOutcome { model, cv: Some(cv) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EnvBlock;
    use crate::rng::SeedStream;
    use crate::scm::{perturb_environments, random_model, sample_environment};

    fn bundle(seed: u64) -> DataBundle {
        let s = SeedStream::new(seed);
        let model = random_model(&mut s.child(1).rng(), 4).unwrap();
        let (model, envs) = perturb_environments(&model, &mut s.child(2).rng(), 3, 1, 2.0, 5.0).unwrap();
        let blocks: Vec<EnvBlock> = envs
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let (x, y) = sample_environment(
                    &model,
                    e,
                    80,
                    &mut s.derive(&[3, i as u64]).rng(),
                    &Default::default(),
                    &Default::default(),
                    false,
                )
                .unwrap();
                EnvBlock::new(e.env_id.clone(), x, y).unwrap()
            })
            .collect();
        let (train, test) = blocks.split_at(3);
        DataBundle::new(train.to_vec(), test.to_vec()).unwrap()
    }

    #[test]
    fn cv_fit_selects_a_grid_point() {
        let data = bundle(5);
        let out = fit_gimp(&data, &FitConfig::default()).unwrap();
        let cv = out.cv.unwrap();
        assert_eq!(out.model.lambda, cv.selected_lambda);
        assert_eq!(cv.lambda_grid.len(), 30);
        assert!(out.model.diagnostics.converged);
        let refit = fit_gimp(
            &data,
            &FitConfig {
                cv_mode: CvMode::Refit,
                ..FitConfig::default()
            },
        )
        .unwrap();
        assert!(refit.cv.is_some());
    }

    #[test]
    fn fixed_lambda_skips_cv() {
        let out = fit_gimp(
            &bundle(6),
            &FitConfig {
                lambda: Some(1e12),
                ..FitConfig::default()
            },
        )
        .unwrap();
        assert!(out.cv.is_none());
        assert!(out.model.theta.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(FitConfig::default().validate(11).is_err());
        let capped = FitConfig {
            max_r: Some(2),
            ..FitConfig::default()
        };
        assert!(capped.validate(11).is_ok());
        assert!(FitConfig {
            folds: 1,
            ..FitConfig::default()
        }
        .validate(4)
        .is_err());
        let parsed: FitConfig = serde_json::from_str(r#"{"folds": 3, "cv_mode": "refit"}"#).unwrap();
        assert_eq!(parsed.folds, 3);
        assert_eq!(parsed.cv_mode, CvMode::Refit);
        assert!(serde_json::from_str::<FitConfig>(r#"{"fold": 3}"#).is_err());
    }
}
