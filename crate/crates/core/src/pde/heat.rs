//! `u_t = α·u_ξξ` on `ξ ∈ [0,1]`, `t ∈ [0,1]`, zero Dirichlet ends,
//! `u(ξ,0) = a·sin(πξ) + b·sin(2πξ)`, Crank–Nicolson.
//!
//! Output rows are time levels `n/(s−1)`, columns are nodes `j/(s−1)`.

use std::f64::consts::PI;

use super::linalg::thomas_constant;
use crate::error::{Error, Result};
use crate::field::SolutionField;

pub fn solve_heat(x: &[f64], s: usize) -> Result<SolutionField> {
    let [alpha, a, b] = *x else {
        return Err(Error::Contract(format!(
            "heat expects 3 parameters (alpha, a, b), got {}",
            x.len()
        )));
    };
    if s < 3 {
        return Err(Error::Config(format!("heat grid needs s >= 3, got {s}")));
    }
    if !(alpha > 0.0) {
        return Err(Error::Domain(format!("diffusivity must be positive, got {alpha}")));
    }
    let h = 1.0 / (s - 1) as f64;
    let r = alpha * h / (h * h);
    let mut field = SolutionField::zeros(s, s);
    for j in 1..s - 1 {
        let xi = j as f64 * h;
        field.set(0, j, a * (PI * xi).sin() + b * (2.0 * PI * xi).sin());
    }
    let m = s - 2;
    let mut rhs = vec![0.0; m];
    for n in 1..s {
        for (k, v) in rhs.iter_mut().enumerate() {
            let j = k + 1;
            let (l, c, rr) = (field.get(n - 1, j - 1), field.get(n - 1, j), field.get(n - 1, j + 1));
            *v = c + 0.5 * r * (l - 2.0 * c + rr);
        }
        thomas_constant(-0.5 * r, 1.0 + r, -0.5 * r, &mut rhs);
        for (k, v) in rhs.iter().enumerate() {
            field.set(n, k + 1, *v);
        }
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_mode_error(alpha: f64, s: usize) -> f64 {
        let u = solve_heat(&[alpha, 1.0, 0.0], s).unwrap();
        let h = 1.0 / (s - 1) as f64;
        let exact = SolutionField::from_fn(s, s, |n, j| {
            (-alpha * PI * PI * n as f64 * h).exp() * (PI * j as f64 * h).sin()
        });
        let diff: f64 = u.data().iter().zip(exact.data()).map(|(a, b)| (a - b).powi(2)).sum();
        diff.sqrt() / exact.frobenius_norm()
    }

    #[test]
    fn zero_initial_data_stays_zero() {
        let u = solve_heat(&[0.05, 0.0, 0.0], 16).unwrap();
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_order_convergence() {
        for alpha in [0.01, 0.1] {
            for s in [8, 16, 32] {
                let ratio = single_mode_error(alpha, s) / single_mode_error(alpha, 2 * s);
                assert!((3.2..=4.8).contains(&ratio), "alpha={alpha} s={s}: ratio {ratio}");
            }
        }
    }

    #[test]
    fn boundaries_and_initial_profile() {
        let u = solve_heat(&[0.05, 0.4, -0.3], 9).unwrap();
        for n in 0..9 {
            assert_eq!(u.get(n, 0), 0.0);
            assert_eq!(u.get(n, 8), 0.0);
        }
        assert!((u.get(0, 4) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(solve_heat(&[0.1, 1.0], 8), Err(Error::Contract(_))));
        assert!(matches!(solve_heat(&[0.0, 1.0, 0.0], 8), Err(Error::Domain(_))));
    }
}
