//! Environment-stratified K-fold cross-validation over a lambda grid.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{solve_path, CdOptions, GimpModel, PartialLassoProblem};
use crate::data::{DataBundle, EnvBlock};
use crate::error::{Error, Result};
use crate::features::{build_test_design, build_train_design, ModuleFitOptions, ModuleId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda_grid: Vec<f64>,
    /// `fold_errors[f][l]`: held-out mean squared error of fold `f` at `lambda_grid[l]`.
    pub fold_errors: Vec<Vec<f64>>,
    pub mean_errors: Vec<f64>,
    pub selected_index: usize,
    pub selected_lambda: f64,
    /// Fold of every row.
    pub fold_of_row: Vec<usize>,
}

/// Splits every environment block into `folds` contiguous slices of
/// near-equal size; row `i` of a block of size `m` lands in fold `i * folds / m`.
pub fn stratified_folds(row_env: &[usize], folds: usize) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    let n_groups = row_env.iter().copied().max().map_or(0, |g| g + 1);
    let mut sizes = vec![0usize; n_groups];
    for &g in row_env {
        sizes[g] += 1;
    }
    if let Some((g, &m)) = sizes.iter().enumerate().find(|(_, &m)| m > 0 && m < folds) {
        return Err(Error::Config(format!(
            "environment {g} has {m} rows, fewer than the {folds} folds"
        )));
    }
    let mut seen = vec![0usize; n_groups];
    Ok(row_env
        .iter()
        .map(|&g| {
            let i = seen[g];
            seen[g] += 1;
            i * folds / sizes[g]
        })
        .collect())
}

/// Index of the smallest mean error; ties go to the larger lambda.
fn select(grid: &[f64], mean_errors: &[f64]) -> usize {
    let mut best = 0;
    for l in 1..grid.len() {
        let (e, eb) = (mean_errors[l], mean_errors[best]);
        if e < eb || (e == eb && grid[l] > grid[best]) || eb.is_nan() {
            best = l;
        }
    }
    best
}

fn held_out_error(
    models: &[GimpModel],
    y: &DVector<f64>,
    z: &DMatrix<f64>,
    x_aug: &DMatrix<f64>,
) -> Vec<f64> {
    models
        .iter()
        .map(|m| (y - m.fitted(z, x_aug)).norm_squared() / y.len() as f64)
        .collect()
}

fn finish(grid: &[f64], fold_errors: Vec<Vec<f64>>, fold_of_row: Vec<usize>) -> CvResult {
    let k = fold_errors.len() as f64;
    let mean_errors: Vec<f64> = (0..grid.len())
        .map(|l| fold_errors.iter().map(|f| f[l]).sum::<f64>() / k)
        .collect();
    let selected_index = select(grid, &mean_errors);
    CvResult {
        lambda_grid: grid.to_vec(),
        fold_errors,
        mean_errors,
        selected_index,
        selected_lambda: grid[selected_index],
        fold_of_row,
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::Config("lambda grid must be nonempty, finite and >= 0".into()));
    }
    Ok(())
}

/// Cross-validation that keeps the module columns fitted on the full
/// training data and only splits rows.
pub fn cross_validate(
    problem: &PartialLassoProblem,
    folds: usize,
    grid: &[f64],
    opts: &CdOptions,
) -> Result<CvResult> {
    check_grid(grid)?;
    let fold_of_row = stratified_folds(problem.row_env(), folds)?;
    let fold_errors = (0..folds)
        .into_par_iter()
        .map(|f| {
            let (held, kept): (Vec<usize>, Vec<usize>) =
                (0..problem.n()).partition(|&i| fold_of_row[i] == f);
            let train = problem.subset_rows(&kept)?;
            let models = solve_path(&train, grid, opts)?;
            let y = DVector::from_iterator(held.len(), held.iter().map(|&i| problem.y()[i]));
            let z = problem.z().select_rows(&held);
            let x = problem.x_aug().select_rows(&held);
            Ok(held_out_error(&models, &y, &z, &x))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(grid, fold_errors, fold_of_row))
}

fn split_block(block: &EnvBlock, rows: &[usize]) -> Result<EnvBlock> {
    EnvBlock::new(
        block.env_id.clone(),
        block.x.select_rows(rows),
        DVector::from_iterator(rows.len(), rows.iter().map(|&i| block.y[i])),
    )
}

/// Cross-validation that refits every module on each fold's training rows
/// and re-estimates modules on the held-out rows of each environment.
pub fn cross_validate_refit(
    data: &DataBundle,
    ids: &[ModuleId],
    module_opts: ModuleFitOptions,
    folds: usize,
    grid: &[f64],
    opts: &CdOptions,
) -> Result<CvResult> {
    check_grid(grid)?;
    let row_env = data.pooled_train().row_env;
    let fold_of_row = stratified_folds(&row_env, folds)?;
    // per-environment fold labels, in block order
    let mut per_env: Vec<Vec<usize>> = vec![Vec::new(); data.train.len()];
    for (&e, &f) in row_env.iter().zip(&fold_of_row) {
        per_env[e].push(f);
    }
    let fold_errors = (0..folds)
        .into_par_iter()
        .map(|f| {
            let mut kept_blocks = Vec::new();
            let mut held_blocks = Vec::new();
            for (block, labels) in data.train.iter().zip(&per_env) {
                let (held, kept): (Vec<usize>, Vec<usize>) =
                    (0..block.len()).partition(|&i| labels[i] == f);
                kept_blocks.push(split_block(block, &kept)?);
                held_blocks.push(split_block(block, &held)?);
            }
            let train = DataBundle::new(kept_blocks, Vec::new())?;
            let design = build_train_design(&train, ids, module_opts)?;
            let problem = PartialLassoProblem::from_design(&design, &train, 0.0)?;
            let models = solve_path(&problem, grid, opts)?;

            let mut sse = vec![0.0; grid.len()];
            let mut count = 0usize;
            for block in &held_blocks {
                let (z, _) = build_test_design(&block.x, ids, module_opts)?;
                let x_aug = block.x.clone().insert_column(block.x.ncols(), 1.0);
                for (l, m) in models.iter().enumerate() {
                    sse[l] += (&block.y - m.fitted(&z, &x_aug)).norm_squared();
                }
                count += block.len();
            }
            Ok(sse.into_iter().map(|s| s / count as f64).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(finish(grid, fold_errors, fold_of_row))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_are_proportional_per_environment() {
        let row_env: Vec<usize> = [vec![0; 10], vec![1; 7]].concat();
        let f = stratified_folds(&row_env, 5).unwrap();
        assert_eq!(&f[..10], &[0, 0, 1, 1, 2, 2, 3, 3, 4, 4]);
        for fold in 0..5 {
            let c = f[10..].iter().filter(|&&x| x == fold).count();
            assert!((1..=2).contains(&c));
        }
        assert!(stratified_folds(&[0, 0, 0, 1], 2).is_err());
        assert!(stratified_folds(&[0, 0], 1).is_err());
    }

    #[test]
    fn ties_prefer_larger_lambda() {
        assert_eq!(select(&[3.0, 2.0, 1.0], &[0.5, 0.2, 0.2]), 1);
        assert_eq!(select(&[1.0, 2.0, 3.0], &[0.2, 0.2, 0.5]), 1);
        assert_eq!(select(&[3.0, 2.0, 1.0], &[0.5, 0.4, 0.1]), 2);
    }
}
