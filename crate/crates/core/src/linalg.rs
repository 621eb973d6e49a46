//! Small dense factorizations used by the least-squares fits.
//!
//! Householder QR with column pivoting backs every full-size least-squares
//! solve and projection. A pivoted Cholesky factorization of small Gram
//! matrices backs the many per-environment module fits.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative threshold on pivots below which a column counts as dependent.
pub const RANK_TOL: f64 = 1e-10;

/// Relative threshold on Cholesky pivots of a Gram matrix.
pub const GRAM_RANK_TOL: f64 = 1e-12;

/// Householder QR with column pivoting, `A P = Q R`.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    /// Reflectors below the diagonal (implicit unit leading entry), `R` on and above.
    qr: DMatrix<f64>,
    tau: Vec<f64>,
    /// `perm[i]` is the original column placed at position `i`.
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let (m, n) = a.shape();
        let mut qr = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let steps = m.min(n);
        let mut tau = Vec::with_capacity(steps);
        let mut rank = 0;
        let mut first_pivot = 0.0;

        for j in 0..steps {
            // Column norms of the trailing block are recomputed each step;
            // the matrices here have few columns.
            let (best, best_norm) = (j..n)
                .map(|c| (c, qr.view((j, c), (m - j, 1)).norm()))
                .fold((j, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
            if best != j {
                qr.swap_columns(j, best);
                perm.swap(j, best);
            }
            if j == 0 {
                first_pivot = best_norm;
            }
            if best_norm <= RANK_TOL * first_pivot.max(f64::MIN_POSITIVE) || best_norm == 0.0 {
                break;
            }
            rank += 1;

            let alpha0 = qr[(j, j)];
            let beta = if alpha0 >= 0.0 { -best_norm } else { best_norm };
            let t = (beta - alpha0) / beta;
            let scale = 1.0 / (alpha0 - beta);
            for i in j + 1..m {
                qr[(i, j)] *= scale;
            }
            qr[(j, j)] = beta;
            tau.push(t);

            for c in j + 1..n {
                let mut w = qr[(j, c)];
                for i in j + 1..m {
                    w += qr[(i, j)] * qr[(i, c)];
                }
                w *= t;
                qr[(j, c)] -= w;
                for i in j + 1..m {
                    qr[(i, c)] -= w * qr[(i, j)];
                }
            }
        }

        PivotedQr { qr, tau, perm, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn nrows(&self) -> usize {
        self.qr.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.qr.ncols()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.ncols()
    }

    /// Original indices of the columns that fell below the rank threshold.
    pub fn dependent_columns(&self) -> Vec<usize> {
        let mut cols = self.perm[self.rank..].to_vec();
        cols.sort_unstable();
        cols
    }

    fn reflect(&self, j: usize, b: &mut [f64]) {
        let m = self.nrows();
        let col = self.qr.column(j);
        let mut w = b[j];
        for i in j + 1..m {
            w += col[i] * b[i];
        }
        w *= self.tau[j];
        b[j] -= w;
        for i in j + 1..m {
            b[i] -= w * col[i];
        }
    }

    /// `b <- Q^T b`, using the reflectors of the numerically independent columns.
    pub fn apply_qt(&self, b: &mut [f64]) {
        for j in 0..self.rank {
            self.reflect(j, b);
        }
    }

    /// `b <- Q b`.
    pub fn apply_q(&self, b: &mut [f64]) {
        for j in (0..self.rank).rev() {
            self.reflect(j, b);
        }
    }

    /// Replaces `b` by its component orthogonal to the column space.
    /// Orthonormal basis of the column space, `n x rank`.
    pub fn thin_q(&self) -> DMatrix<f64> {
        let n = self.nrows();
        let mut q = DMatrix::zeros(n, self.rank);
        for i in 0..self.rank {
            let mut col = q.column_mut(i);
            col[i] = 1.0;
            self.apply_q(col.as_mut_slice());
        }
        q
    }

    /// `(I - Q Q^T) B` for every column of `B` at once.
    pub fn project_out_columns(&self, b: &mut DMatrix<f64>) {
        let q = self.thin_q();
        let qtb = q.tr_mul(b);
        b.gemm(-1.0, &q, &qtb, 1.0);
    }

    pub fn project_out_in_place(&self, b: &mut [f64]) {
        self.apply_qt(b);
        for v in b.iter_mut().take(self.rank) {
            *v = 0.0;
        }
        self.apply_q(b);
    }

    /// Least-squares solution of `A x ~ b`; requires full column rank.
    pub fn solve_least_squares(&self, b: &[f64]) -> Result<DVector<f64>> {
        if b.len() != self.nrows() {
            return Err(Error::Dimension(format!(
                "right-hand side has {} rows, design has {}",
                b.len(),
                self.nrows()
            )));
        }
        if !self.is_full_rank() {
            return Err(Error::Singular {
                columns: self.dependent_columns(),
            });
        }
        let n = self.ncols();
        let mut qtb = b.to_vec();
        self.apply_qt(&mut qtb);
        let mut z = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = qtb[i];
            for k in i + 1..n {
                s -= self.qr[(i, k)] * z[k];
            }
            z[i] = s / self.qr[(i, i)];
        }
        let mut x = DVector::zeros(n);
        for (pos, &orig) in self.perm.iter().enumerate() {
            x[orig] = z[pos];
        }
        Ok(x)
    }
}

/// Ordinary least squares via pivoted QR.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    PivotedQr::new(a).solve_least_squares(b.as_slice())
}

/// Solves `G x = r` for a small symmetric positive semidefinite `G` by
/// diagonally pivoted Cholesky. Returns `None` when `G` is numerically
/// rank deficient.
pub fn spd_solve_pivoted(g: &DMatrix<f64>, r: &[f64]) -> Option<Vec<f64>> {
    let n = g.nrows();
    debug_assert_eq!(g.ncols(), n);
    debug_assert_eq!(r.len(), n);
    if n == 0 {
        return Some(Vec::new());
    }
    let mut a = g.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0_f64, f64::max);
    if !(max_diag > 0.0) {
        return None;
    }
    if n == 1 {
        return Some(vec![r[0] / g[(0, 0)]]);
    }
    // Pivots scale like squared residual norms; rounding in the Gram matrix
    // itself is of order eps * max_diag, so the cutoff sits well above that.
    let tol = GRAM_RANK_TOL * max_diag;

    for j in 0..n {
        let (p, piv) = (j..n)
            .map(|i| (i, a[(i, i)]))
            .fold((j, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
        if !(piv > tol) {
            return None;
        }
        if p != j {
            a.swap_rows(j, p);
            a.swap_columns(j, p);
            perm.swap(j, p);
        }
        let d = a[(j, j)].sqrt();
        a[(j, j)] = d;
        for i in j + 1..n {
            a[(i, j)] /= d;
        }
        // full trailing update: later symmetric swaps read both triangles
        for c in j + 1..n {
            let l_cj = a[(c, j)];
            for i in j + 1..n {
                a[(i, c)] -= a[(i, j)] * l_cj;
            }
        }
    }

    // L L^T y = P^T r
    let mut y: Vec<f64> = perm.iter().map(|&i| r[i]).collect();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= a[(i, k)] * y[k];
        }
        y[i] = s / a[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= a[(k, i)] * y[k];
        }
        y[i] = s / a[(i, i)];
    }
    let mut x = vec![0.0; n];
    for (pos, &orig) in perm.iter().enumerate() {
        x[orig] = y[pos];
    }
    Some(x)
}

/// Dense inverse of a small square matrix; `None` if singular.
pub fn invert(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    a.clone().try_inverse()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pivoted_cholesky_matches_dense_solve() {
        // diagonal ordering forces pivots out of natural order
        let m = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.0, -6.2, 5.9, 0.0, 1.0, 0.0, 0.0, -6.2, 0.0, 40.6, -37.9, 5.9, 0.0, -37.9, 37.4,
            ],
        );
        for seed in 0..20u64 {
            let b = DMatrix::from_fn(6, 6, |i, j| ((i * 7 + j * 3 + seed as usize) % 11) as f64 - 5.0);
            let g = b.transpose() * &b + DMatrix::identity(6, 6) * 0.1 * (seed + 1) as f64;
            let r: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
            let want = g.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&r));
            let got = spd_solve_pivoted(&g, &r).unwrap();
            for i in 0..6 {
                assert_relative_eq!(got[i], want[i], epsilon = 1e-8, max_relative = 1e-8);
            }
        }
        let r = [1.0, 2.0, 3.0, 4.0];
        let want = m.clone().cholesky().unwrap().solve(&DVector::from_column_slice(&r));
        let got = spd_solve_pivoted(&m, &r).unwrap();
        for i in 0..4 {
            assert_relative_eq!(got[i], want[i], max_relative = 1e-9);
        }
    }

    #[test]
    fn qr_solves_overdetermined_system() {
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 3.0, 5.0, 7.0]);
        let x = least_squares(&a, &b).unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn qr_names_dependent_column() {
        // Third column = first + second.
        let a = DMatrix::from_row_slice(
            4,
            3,
            &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 2.0, 3.0, 1.0, 5.0, 6.0],
        );
        let qr = PivotedQr::new(&a);
        assert_eq!(qr.rank(), 2);
        assert_eq!(qr.dependent_columns().len(), 1);
        assert!(matches!(
            qr.solve_least_squares(&[0.0; 4]),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn projection_is_orthogonal() {
        let a = DMatrix::from_fn(6, 2, |i, j| ((i * 7 + j * 3) % 5) as f64 + j as f64);
        let mut b: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect();
        let qr = PivotedQr::new(&a);
        qr.project_out_in_place(&mut b);
        let bv = DVector::from_vec(b);
        let atb = a.transpose() * bv;
        assert!(atb.amax() < 1e-12);
    }

    #[test]
    fn pivoted_cholesky_matches_inverse_and_flags_singularity() {
        let g = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let x = spd_solve_pivoted(&g, &[2.0, 1.0]).unwrap();
        let expect = g.clone().try_inverse().unwrap() * DVector::from_vec(vec![2.0, 1.0]);
        assert_relative_eq!(x[0], expect[0], epsilon = 1e-14);
        assert_relative_eq!(x[1], expect[1], epsilon = 1e-14);

        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(spd_solve_pivoted(&s, &[1.0, 1.0]).is_none());
        assert!(spd_solve_pivoted(&DMatrix::zeros(1, 1), &[0.0]).is_none());
    }
}
