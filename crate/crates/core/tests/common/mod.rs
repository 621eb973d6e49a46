//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub y: DVector<f64>,
    pub z: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl Instance {
    pub fn x_aug(&self) -> DMatrix<f64> {
        self.x.clone().insert_column(self.x.ncols(), 1.0)
    }
}

/// Gaussian design with a sparse signal on `z`, correlated through a shared factor.
pub fn random_instance<R: Rng>(rng: &mut R, n: usize, d: usize, p: usize) -> Instance {
    let g = |r: &mut R| r.sample::<f64, _>(StandardNormal);
    let x = DMatrix::from_fn(n, d, |_, _| g(rng));
    let factor = DVector::from_fn(n, |_, _| g(rng));
    let z = DMatrix::from_fn(n, p, |i, j| g(rng) + 0.5 * factor[i] + 0.3 * x[(i, j % d)]);
    let mut y = DVector::from_fn(n, |_, _| g(rng));
    for j in 0..p.min(3) {
        y.axpy(1.5 - j as f64, &z.column(j), 1.0);
    }
    for j in 0..d {
        y.axpy(0.7, &x.column(j), 1.0);
    }
    y.add_scalar_mut(2.0);
    Instance { y, z, x }
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Minimizes `||y - Z theta - X_aug zeta||^2 + lambda ||theta||_1` by
/// alternating exact least squares in `zeta` with cyclic coordinate steps
/// in `theta`, on the raw (unprojected) design.
pub fn joint_minimizer(y: &DVector<f64>, z: &DMatrix<f64>, x_aug: &DMatrix<f64>, lambda: f64) -> (DVector<f64>, DVector<f64>) {
    let p = z.ncols();
    let qr = x_aug.clone().qr();
    let (q, upper) = (qr.q(), qr.r());
    let ls = |r: &DVector<f64>| -> DVector<f64> {
        upper
            .solve_upper_triangular(&q.tr_mul(r))
            .expect("X has full rank")
    };
    let norms2: Vec<f64> = (0..p).map(|j| z.column(j).norm_squared()).collect();
    let mut theta = DVector::zeros(p);
    let mut zeta = ls(y);
    let mut r = y - z * &theta - x_aug * &zeta;
    let scale = y.norm();
    for _ in 0..1_000_000 {
        let mut change = 0.0_f64;
        for j in 0..p {
            if norms2[j] == 0.0 {
                continue;
            }
            let old = theta[j];
            let rho = z.column(j).dot(&r) + norms2[j] * old;
            let new = soft(rho, lambda / 2.0) / norms2[j];
            if new != old {
                r.axpy(old - new, &z.column(j), 1.0);
                theta[j] = new;
                change = change.max((new - old).abs() * norms2[j].sqrt());
            }
        }
        let new_zeta = ls(&(y - z * &theta));
        r = y - z * &theta - x_aug * &new_zeta;
        let dz = (x_aug * (&new_zeta - &zeta)).norm();
        zeta = new_zeta;
        if change.max(dz) <= 1e-14 * scale {
            break;
        }
    }
    (theta, zeta)
}

pub fn objective(y: &DVector<f64>, z: &DMatrix<f64>, x_aug: &DMatrix<f64>, theta: &DVector<f64>, zeta: &DVector<f64>, lambda: f64) -> f64 {
    (y - z * theta - x_aug * zeta).norm_squared() + lambda * theta.lp_norm(1)
}

/// Largest violation of the optimality conditions of the full problem:
/// `2 z_j^T r = lambda sign(theta_j)` on the support, `|2 z_j^T r| <= lambda`
/// off it, and `X_aug^T r = 0`.
pub fn kkt_violation(y: &DVector<f64>, z: &DMatrix<f64>, x_aug: &DMatrix<f64>, theta: &DVector<f64>, zeta: &DVector<f64>, lambda: f64) -> (f64, f64) {
    let r = y - z * theta - x_aug * zeta;
    let g = 2.0 * z.tr_mul(&r);
    let mut worst = 0.0_f64;
    for j in 0..theta.len() {
        let v = if theta[j] == 0.0 {
            (g[j].abs() - lambda).max(0.0)
        } else {
            (g[j] - lambda * theta[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    let zeta_grad = (2.0 * x_aug.tr_mul(&r)).amax();
    (worst, zeta_grad)
}

pub fn rel_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
