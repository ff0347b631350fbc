//! `−Δu = A·sin(πξ)·sin(πη)` on the unit square with constant Dirichlet
//! sides, 5-point Laplacian on an `s × s` node grid.
//!
//! Row index is η (bottom row 0, top row s−1), column index is ξ (left
//! column 0, right column s−1). Corner nodes take the mean of their two sides.

use std::f64::consts::PI;

use super::linalg::BandCholesky;
use crate::error::{Error, Result};
use crate::field::SolutionField;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonParams {
    pub left: f64,
    pub right: f64,
    pub top: f64,
    pub bottom: f64,
    pub amplitude: f64,
}

impl PoissonParams {
    pub fn from_slice(x: &[f64]) -> Result<Self> {
        match *x {
            [left, right, top, bottom, amplitude] => Ok(Self {
                left,
                right,
                top,
                bottom,
                amplitude,
            }),
            _ => Err(Error::Contract(format!(
                "poisson expects 5 parameters (c_left, c_right, c_top, c_bottom, A), got {}",
                x.len()
            ))),
        }
    }
}

fn boundary_value(p: &PoissonParams, s: usize, i: usize, j: usize) -> Option<f64> {
    let (bottom, top) = (i == 0, i == s - 1);
    let (left, right) = (j == 0, j == s - 1);
    let side = |v: bool, c: f64| v.then_some(c);
    let vals: Vec<f64> = [
        side(left, p.left),
        side(right, p.right),
        side(bottom, p.bottom),
        side(top, p.top),
    ]
    .into_iter()
    .flatten()
    .collect();
    match vals.len() {
        0 => None,
        n => Some(vals.iter().sum::<f64>() / n as f64),
    }
}

pub fn solve_poisson(x: &[f64], s: usize) -> Result<SolutionField> {
    let p = PoissonParams::from_slice(x)?;
    if s < 3 {
        return Err(Error::Config(format!("poisson grid needs s >= 3, got {s}")));
    }
    let h = 1.0 / (s - 1) as f64;
    let m = s - 2;
    let mut field = SolutionField::zeros(s, s);
    for i in 0..s {
        for j in 0..s {
            if let Some(v) = boundary_value(&p, s, i, j) {
                field.set(i, j, v);
            }
        }
    }
    if m == 0 {
        return Ok(field);
    }
    // unknown k = (i-1)·m + (j-1); scaled by h²: 4u − Σ neighbours = h² f
    let chol = BandCholesky::factor(m * m, m, |a, b| {
        if a == b {
            4.0
        } else if a - b == m || (a - b == 1 && a % m != 0) {
            -1.0
        } else {
            0.0
        }
    })?;
    let mut rhs = vec![0.0; m * m];
    for i in 1..=m {
        for j in 1..=m {
            let (xi, eta) = (j as f64 * h, i as f64 * h);
            let mut b = h * h * p.amplitude * (PI * xi).sin() * (PI * eta).sin();
            for (ni, nj) in [(i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)] {
                if ni == 0 || nj == 0 || ni == s - 1 || nj == s - 1 {
                    b += field.get(ni, nj);
                }
            }
            rhs[(i - 1) * m + (j - 1)] = b;
        }
    }
    chol.solve(&mut rhs);
    for i in 1..=m {
        for j in 1..=m {
            field.set(i, j, rhs[(i - 1) * m + (j - 1)]);
        }
    }
    Ok(field)
}
