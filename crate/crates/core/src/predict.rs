//! Test-environment prediction from a fitted model, plus the pooled OLS
//! and population-oracle baselines.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{DataBundle, EnvBlock};
use crate::error::{Error, Result};
use crate::features::{build_test_design, ModuleId};
use crate::linalg::PivotedQr;
use crate::scm::{population_moments, EnvParams, NonlinearitySpec, ScmModel};
use crate::solver::GimpModel;
use crate::taxonomy::population_lmmse;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub env_id: String,
    pub y_hat: Vec<f64>,
    /// Mean squared residual, when the truth was available.
    pub rss: Option<f64>,
}

fn with_ones(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(x.ncols(), 1.0)
}

/// `Z_test theta + [X_test, 1] zeta`, re-estimating only the active modules
/// on the test block.
pub fn predict_gimp(fit: &GimpModel, x_test: &DMatrix<f64>) -> Result<DVector<f64>> {
    let d = fit.d();
    if x_test.ncols() != d {
        return Err(Error::Dimension(format!("test block has {} columns, model has {d}", x_test.ncols())));
    }
    if x_test.nrows() < d + 2 {
        return Err(Error::Config(format!(
            "test block needs at least {} rows to re-estimate modules, got {}",
            d + 2,
            x_test.nrows()
        )));
    }
    let active: Vec<(ModuleId, f64)> = fit.active_modules().map(|(id, t)| (id.clone(), t)).collect();
    if active.is_empty() && fit.theta.iter().any(|&t| t != 0.0) {
        return Err(Error::Config("model has active modules but no module ids".into()));
    }
    let mut y_hat = with_ones(x_test) * fit.zeta_aug();
    if !active.is_empty() {
        let ids: Vec<ModuleId> = active.iter().map(|(id, _)| id.clone()).collect();
        let (z, _) = build_test_design(x_test, &ids, fit.module_options)?;
        for (j, (_, t)) in active.iter().enumerate() {
            y_hat.axpy(*t, &z.column(j), 1.0);
        }
    }
    Ok(y_hat)
}

/// Pooled least squares of `Y` on `[X, 1]` over all training environments.
pub fn pooled_ols(data: &DataBundle) -> Result<(DVector<f64>, f64)> {
    let pooled = data.pooled_train();
    let qr = PivotedQr::new(&with_ones(&pooled.x));
    let sol = qr.solve_least_squares(pooled.y.as_slice())?;
    let d = pooled.x.ncols();
    Ok((sol.rows(0, d).into_owned(), sol[d]))
}

/// Affine prediction `X coeff + intercept`.
pub fn predict_linear(coeff: &DVector<f64>, intercept: f64, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() != coeff.len() {
        return Err(Error::Dimension(format!("expected {} columns, got {}", coeff.len(), x.ncols())));
    }
    Ok((x * coeff).add_scalar(intercept))
}

/// Best affine predictor of `Y` from the observed `X` in a known linear
/// environment. With `measurement_variance > 0` the predictors are taken as
/// observed through additive noise of that variance; the response is not.
pub fn oracle_coefficients(
    model: &ScmModel,
    env: &EnvParams,
    measurement_variance: f64,
) -> Result<(DVector<f64>, f64)> {
    let moments = population_moments(model, env, &NonlinearitySpec::default())?;
    let moments = if measurement_variance > 0.0 {
        moments.with_measurement_error(measurement_variance, false)
    } else {
        moments
    };
    let d = model.d();
    let given: Vec<usize> = (0..d).collect();
    let (c, b) = population_lmmse(&moments, d, &given)?;
    Ok((DVector::from_vec(c), b))
}

/// Mean squared residual.
pub fn score(y_hat: &DVector<f64>, y_true: &DVector<f64>) -> Result<f64> {
    if y_hat.len() != y_true.len() || y_hat.is_empty() {
        return Err(Error::Dimension(format!(
            "cannot score {} predictions against {} responses",
            y_hat.len(),
            y_true.len()
        )));
    }
    Ok((y_hat - y_true).norm_squared() / y_hat.len() as f64)
}

/// Predicts every block, scoring wherever all responses are finite.
pub fn predict_blocks(fit: &GimpModel, blocks: &[EnvBlock]) -> Result<Vec<Prediction>> {
    blocks
        .iter()
        .map(|b| {
            let y_hat = predict_gimp(fit, &b.x)?;
            let rss = if b.y.iter().all(|v| v.is_finite()) {
                Some(score(&y_hat, &b.y)?)
            } else {
                None
            };
            Ok(Prediction {
                env_id: b.env_id.clone(),
                y_hat: y_hat.as_slice().to_vec(),
                rss,
            })
        })
        .collect()
}

/// CSV `env_id,row,y_hat,y_true`; `y_true` is left empty when unknown.
pub fn write_predictions_csv<W: Write>(writer: W, preds: &[Prediction], truths: &[Option<&DVector<f64>>]) -> Result<()> {
    if truths.len() != preds.len() {
        return Err(Error::Dimension("one truth slot per prediction block expected".into()));
    }
    let mut w = csv::Writer::from_writer(writer);
    let ctx = "<predictions>";
    w.write_record(["env_id", "row", "y_hat", "y_true"]).map_err(|e| Error::csv(ctx, e))?;
    for (p, t) in preds.iter().zip(truths) {
        for (i, y) in p.y_hat.iter().enumerate() {
            let truth = match t {
                Some(v) if v[i].is_finite() => v[i].to_string(),
                _ => String::new(),
            };
            w.write_record([p.env_id.clone(), i.to_string(), y.to_string(), truth])
                .map_err(|e| Error::csv(ctx, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(ctx, e))
}
