//! Small direct solvers used by the finite-difference schemes.

use crate::error::{Error, Result};

/// Cholesky factor of a symmetric positive-definite band matrix with
/// half-bandwidth `p`, stored row-wise: row `i` holds columns `i-p ..= i`.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    p: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    /// `entry(i, j)` must return `A[i][j]` for `i - p <= j <= i`.
    pub fn factor(n: usize, p: usize, entry: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let w = p + 1;
        let mut l = vec![0.0; n * w];
        let at = |i: usize, j: usize| i * w + (j + p - i);
        for i in 0..n {
            let lo = i.saturating_sub(p);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(p));
                let mut sum = entry(i, j);
                for k in klo..j {
                    sum -= l[at(i, k)] * l[at(j, k)];
                }
                if j == i {
                    if !(sum > 0.0) {
                        return Err(Error::Solver(format!(
                            "matrix is not positive definite at row {i}"
                        )));
                    }
                    l[at(i, i)] = sum.sqrt();
                } else {
                    l[at(i, j)] = sum / l[at(j, j)];
                }
            }
        }
        Ok(Self { n, p, l })
    }

    pub fn solve(&self, b: &mut [f64]) {
        let (n, p, w) = (self.n, self.p, self.p + 1);
        let at = |i: usize, j: usize| i * w + (j + p - i);
        for i in 0..n {
            let mut sum = b[i];
            for k in i.saturating_sub(p)..i {
                sum -= self.l[at(i, k)] * b[k];
            }
            b[i] = sum / self.l[at(i, i)];
        }
        for i in (0..n).rev() {
            let mut sum = b[i];
            for k in i + 1..(i + p + 1).min(n) {
                sum -= self.l[at(k, i)] * b[k];
            }
            b[i] = sum / self.l[at(i, i)];
        }
    }
}

/// Solves a tridiagonal system with constant coefficients
/// `lower·x[i-1] + diag·x[i] + upper·x[i+1] = d[i]` in place (Thomas).
pub fn thomas_constant(lower: f64, diag: f64, upper: f64, d: &mut [f64]) {
    let n = d.len();
    if n == 0 {
        return;
    }
    let mut c = vec![0.0; n];
    c[0] = upper / diag;
    d[0] /= diag;
    for i in 1..n {
        let m = diag - lower * c[i - 1];
        c[i] = upper / m;
        d[i] = (d[i] - lower * d[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
}

/// Solves the periodic (cyclic) tridiagonal system with constant
/// coefficients, where row 0 couples to `x[n-1]` and row `n-1` to `x[0]`,
/// by a Sherman–Morrison correction of the open system.
pub fn cyclic_thomas_constant(lower: f64, diag: f64, upper: f64, d: &mut [f64]) {
    let n = d.len();
    assert!(n >= 3, "cyclic system needs at least 3 unknowns");
    // A = B + u vᵀ with u = (γ, 0, …, 0, upper)ᵀ, v = (1, 0, …, 0, lower/γ)ᵀ
    let gamma = -diag;
    let mut diag_b = vec![diag; n];
    diag_b[0] = diag - gamma;
    diag_b[n - 1] = diag - lower * upper / gamma;
    let solve = |rhs: &mut [f64]| {
        let mut c = vec![0.0; n];
        c[0] = upper / diag_b[0];
        rhs[0] /= diag_b[0];
        for i in 1..n {
            let m = diag_b[i] - lower * c[i - 1];
            c[i] = upper / m;
            rhs[i] = (rhs[i] - lower * rhs[i - 1]) / m;
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= c[i] * rhs[i + 1];
        }
    };
    solve(d);
    let mut z = vec![0.0; n];
    z[0] = gamma;
    z[n - 1] = upper;
    solve(&mut z);
    let vy = d[0] + lower / gamma * d[n - 1];
    let vz = z[0] + lower / gamma * z[n - 1];
    let factor = vy / (1.0 + vz);
    for (x, zi) in d.iter_mut().zip(&z) {
        *x -= factor * zi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for k in 0..n {
            let piv = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs())).unwrap();
            a.swap(k, piv);
            b.swap(k, piv);
            for i in k + 1..n {
                let f = a[i][k] / a[k][k];
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            x[i] = (b[i] - (i + 1..n).map(|j| a[i][j] * x[j]).sum::<f64>()) / a[i][i];
        }
        x
    }

    #[test]
    fn band_cholesky_matches_dense_solve() {
        let (n, p) = (9, 3);
        let entry = |i: usize, j: usize| -> f64 {
            let d = i.abs_diff(j);
            match d {
                0 => 6.0 + i as f64 * 0.1,
                _ if d <= p => -1.0 / d as f64,
                _ => 0.0,
            }
        };
        let chol = BandCholesky::factor(n, p, entry).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut x = b.clone();
        chol.solve(&mut x);
        let dense: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| entry(i.max(j), i.min(j))).collect()).collect();
        let r = dense_solve(dense, b);
        for (a, b) in x.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn band_cholesky_rejects_indefinite() {
        assert!(BandCholesky::factor(3, 1, |i, j| if i == j { -1.0 } else { 0.0 }).is_err());
    }

    #[test]
    fn cyclic_thomas_matches_dense_solve() {
        let n = 7;
        let (lo, di, up) = (-0.3, 1.8, -0.45);
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            dense[i][i] = di;
            dense[i][(i + n - 1) % n] = lo;
            dense[i][(i + 1) % n] = up;
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut x = b.clone();
        cyclic_thomas_constant(lo, di, up, &mut x);
        let r = dense_solve(dense, b);
        for (a, b) in x.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn thomas_matches_dense_solve() {
        let n = 6;
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            dense[i][i] = 2.5;
            if i > 0 {
                dense[i][i - 1] = -1.0;
            }
            if i + 1 < n {
                dense[i][i + 1] = -0.5;
            }
        }
        let b: Vec<f64> = (0..n).map(|i| i as f64 - 2.0).collect();
        let mut x = b.clone();
        thomas_constant(-1.0, 2.5, -0.5, &mut x);
        let r = dense_solve(dense, b);
        for (a, b) in x.iter().zip(&r) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
