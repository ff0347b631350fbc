//! Viscous Burgers `u_t + (u²/2)_ξ = ν·u_ξξ` on the periodic unit interval,
//! `u(ξ,0) = sin(2πξ)`, `t ∈ [0,1]`.
//!
//! Each substep advances advection with a conservative MUSCL scheme (van Leer
//! limiter, Godunov flux, SSP-RK2), then diffusion with Crank–Nicolson on the
//! periodic grid. Output rows are time levels `n/(s−1)`; columns are nodes
//! `j/(s−1)` with the periodic endpoint repeated.

use std::f64::consts::PI;

use super::linalg::cyclic_thomas_constant;
use crate::error::{Error, Result};
use crate::field::SolutionField;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurgersOptions {
    /// Courant number for the advective substep.
    pub cfl: f64,
    /// Upper bound on substeps per output interval.
    pub max_substeps: usize,
}

impl Default for BurgersOptions {
    fn default() -> Self {
        Self {
            cfl: 0.4,
            max_substeps: 100_000,
        }
    }
}

fn van_leer(back: f64, fwd: f64) -> f64 {
    if back * fwd > 0.0 {
        2.0 * back * fwd / (back + fwd)
    } else {
        0.0
    }
}

fn godunov_flux(ul: f64, ur: f64) -> f64 {
    let (fl, fr) = (0.5 * ul * ul, 0.5 * ur * ur);
    if ul > ur {
        fl.max(fr)
    } else if ul < 0.0 && ur > 0.0 {
        0.0
    } else {
        fl.min(fr)
    }
}

/// Flux divergence `(F_{i+1/2} − F_{i−1/2})/h` on a periodic grid.
fn flux_divergence(u: &[f64], h: f64, out: &mut [f64], flux: &mut [f64]) {
    let n = u.len();
    let slope = |i: usize| {
        let (prev, next) = (u[(i + n - 1) % n], u[(i + 1) % n]);
        van_leer(u[i] - prev, next - u[i])
    };
    // flux[i] is the flux through the face between cells i and i+1
    for i in 0..n {
        let ip = (i + 1) % n;
        let ul = u[i] + 0.5 * slope(i);
        let ur = u[ip] - 0.5 * slope(ip);
        flux[i] = godunov_flux(ul, ur);
    }
    for i in 0..n {
        out[i] = (flux[i] - flux[(i + n - 1) % n]) / h;
    }
}

pub fn solve_burgers(x: &[f64], s: usize) -> Result<SolutionField> {
    solve_burgers_with(x, s, &BurgersOptions::default())
}

pub fn solve_burgers_with(x: &[f64], s: usize, opts: &BurgersOptions) -> Result<SolutionField> {
    let [nu] = *x else {
        return Err(Error::Contract(format!(
            "burgers expects 1 parameter (viscosity), got {}",
            x.len()
        )));
    };
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(Error::Domain(format!("viscosity must be positive, got {nu}")));
    }
    if s < 4 {
        return Err(Error::Config(format!("burgers grid needs s >= 4, got {s}")));
    }
    let n = s - 1;
    let h = 1.0 / n as f64;
    let dt_out = 1.0 / (s - 1) as f64;
    let mut u: Vec<f64> = (0..n).map(|j| (2.0 * PI * j as f64 * h).sin()).collect();
    let mut field = SolutionField::zeros(s, s);
    let record = |field: &mut SolutionField, row: usize, u: &[f64]| {
        for (j, &v) in u.iter().enumerate() {
            field.set(row, j, v);
        }
        field.set(row, n, u[0]);
    };
    record(&mut field, 0, &u);

    let (mut k1, mut u1, mut flux) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut rhs = vec![0.0; n];
    for row in 1..s {
        let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let needed = (dt_out * umax / (opts.cfl * h)).ceil().max(1.0);
        if !needed.is_finite() || needed > opts.max_substeps as f64 {
            return Err(Error::Solver(format!(
                "burgers (nu={nu}, s={s}) needs {needed} substeps per output step, cap is {}",
                opts.max_substeps
            )));
        }
        let m = needed as usize;
        let dt = dt_out / m as f64;
        let d = 0.5 * dt * nu / (h * h);
        for _ in 0..m {
            flux_divergence(&u, h, &mut k1, &mut flux);
            for i in 0..n {
                u1[i] = u[i] - dt * k1[i];
            }
            flux_divergence(&u1, h, &mut k1, &mut flux);
            for i in 0..n {
                u[i] = 0.5 * (u[i] + u1[i] - dt * k1[i]);
            }
            for i in 0..n {
                rhs[i] = u[i] + d * (u[(i + n - 1) % n] - 2.0 * u[i] + u[(i + 1) % n]);
            }
            cyclic_thomas_constant(-d, 1.0 + 2.0 * d, -d, &mut rhs);
            u.copy_from_slice(&rhs);
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!(
                "burgers (nu={nu}, s={s}) produced non-finite values at output row {row}"
            )));
        }
        record(&mut field, row, &u);
    }
    Ok(field)
}
