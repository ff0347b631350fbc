//! Finite-difference solvers that generate multi-fidelity training data.

mod burgers;
mod heat;
pub mod linalg;
mod poisson;

pub use burgers::{solve_burgers, solve_burgers_with, BurgersOptions};
pub use heat::solve_heat;
pub use poisson::{solve_poisson, PoissonParams};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SolutionField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeKind {
    Poisson2d,
    Heat1d,
    Burgers1d,
}

impl PdeKind {
    pub fn name(self) -> &'static str {
        match self {
            PdeKind::Poisson2d => "poisson2d",
            PdeKind::Heat1d => "heat1d",
            PdeKind::Burgers1d => "burgers1d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "poisson" | "poisson2d" => Ok(PdeKind::Poisson2d),
            "heat" | "heat1d" => Ok(PdeKind::Heat1d),
            "burgers" | "burgers1d" => Ok(PdeKind::Burgers1d),
            other => Err(Error::Config(format!(
                "unknown pde {other:?}; expected poisson, heat or burgers"
            ))),
        }
    }

    /// Default closed interval for each parameter.
    pub fn default_domain(self) -> Vec<(f64, f64)> {
        match self {
            PdeKind::Poisson2d => vec![(-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0), (0.0, 10.0)],
            PdeKind::Heat1d => vec![(0.01, 0.1), (-1.0, 1.0), (-1.0, 1.0)],
            PdeKind::Burgers1d => vec![(0.001, 0.1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeSpec {
    pub kind: PdeKind,
    pub param_domain: Vec<(f64, f64)>,
}

impl PdeSpec {
    pub fn new(kind: PdeKind) -> Self {
        Self {
            kind,
            param_domain: kind.default_domain(),
        }
    }

    pub fn param_dim(&self) -> usize {
        self.param_domain.len()
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.kind.default_domain().len();
        if self.param_domain.len() != expected {
            return Err(Error::Config(format!(
                "{} takes {expected} parameters, domain lists {}",
                self.kind.name(),
                self.param_domain.len()
            )));
        }
        for (i, &(lo, hi)) in self.param_domain.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("parameter {i} has empty domain [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// Solution on an `s × s` output grid.
    pub fn solve(&self, x: &[f64], s: usize) -> Result<SolutionField> {
        if s < 4 {
            return Err(Error::Config(format!("grid size must be >= 4, got {s}")));
        }
        match self.kind {
            PdeKind::Poisson2d => solve_poisson(x, s),
            PdeKind::Heat1d => solve_heat(x, s),
            PdeKind::Burgers1d => solve_burgers(x, s),
        }
    }
}

/// `n` independent uniform draws from the parameter box.
pub fn sample_params<R: Rng + ?Sized>(spec: &PdeSpec, rng: &mut R, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            spec.param_domain
                .iter()
                .map(|&(lo, hi)| if lo == hi { lo } else { rng.random_range(lo..=hi) })
                .collect()
        })
        .collect()
}
