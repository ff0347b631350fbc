//! Forward variance-exploding SDE and the pieces of its reversal.
//!
//! The forward process is `dz = g(t) dw` with zero drift and the geometric
//! variance schedule
//!
//! ```text
//! v(t) = sigma_min^2 * (sigma_max / sigma_min)^(2t/T),   g(t) = sqrt(dv/dt)
//! ```
//!
//! so the perturbation kernel is `q(z(t) | z(0)) = N(z(0), (v(t) - v(0)) I)`.
//! Every function here is pure: noise is always passed in by the caller.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SolutionField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    pub horizon: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Smallest time used for training draws and as the sampler end point.
    pub t_eps: f64,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            sigma_min: 0.01,
            sigma_max: 50.0,
            t_eps: 1e-5,
        }
    }
}

/// A state `z(t)` of the diffusion.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub z: SolutionField,
    pub t: f64,
}

impl SdeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.horizon > 0.0
            && self.sigma_min > 0.0
            && self.sigma_min < self.sigma_max
            && self.t_eps > 0.0
            && self.t_eps < self.horizon
            && [self.horizon, self.sigma_min, self.sigma_max, self.t_eps]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "need 0 < sigma_min < sigma_max and 0 < t_eps < T, got {self:?}"
            )))
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "t = {t} outside [0, {}]",
                self.horizon
            )))
        }
    }

    /// `2 ln(sigma_max / sigma_min) / T`, the log-growth rate of `v`.
    #[inline]
    fn log_rate(&self) -> f64 {
        2.0 * (self.sigma_max / self.sigma_min).ln() / self.horizon
    }

    #[inline]
    pub(crate) fn variance_unchecked(&self, t: f64) -> f64 {
        self.sigma_min * self.sigma_min * (self.log_rate() * t).exp()
    }

    /// `v(t) - v(0)`, computed without cancellation for small `t`.
    #[inline]
    pub(crate) fn kernel_variance_unchecked(&self, t: f64) -> f64 {
        self.sigma_min * self.sigma_min * (self.log_rate() * t).exp_m1()
    }

    /// `v(t)`.
    pub fn variance(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.variance_unchecked(t))
    }

    /// Standard deviation of `q(z(t) | z(0))`, i.e. `sqrt(v(t) - v(0))`.
    pub fn marginal_std(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.kernel_variance_unchecked(t).sqrt())
    }

    /// Inverse of [`marginal_std`](Self::marginal_std) on `[0, T]`.
    pub fn time_for_marginal_std(&self, std: f64) -> Result<f64> {
        let max = self.kernel_variance_unchecked(self.horizon).sqrt();
        if !(0.0..=max * (1.0 + 1e-12)).contains(&std) {
            return Err(Error::Domain(format!("marginal std {std} outside [0, {max}]")));
        }
        let ratio = std * std / (self.sigma_min * self.sigma_min);
        Ok((ratio.ln_1p() / self.log_rate()).min(self.horizon))
    }

    /// Diffusion coefficient `g(t) = sqrt(dv/dt)`.
    pub fn diffusion_coeff(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok((self.variance_unchecked(t) * self.log_rate()).sqrt())
    }

    /// Draws `z(t) = z0 + sqrt(v(t) - v(0)) * noise`.
    pub fn perturb(
        &self,
        z0: &SolutionField,
        t: f64,
        noise: &SolutionField,
    ) -> Result<DiffusionState> {
        z0.check_same_shape(noise, "perturb noise")?;
        let std = self.marginal_std(t)?;
        let mut z = z0.clone();
        for (zi, ni) in z.data_mut().iter_mut().zip(noise.data()) {
            *zi += std * ni;
        }
        Ok(DiffusionState { z, t })
    }

    /// Score of the perturbation kernel, `(z0 - zt) / (v(t) - v(0))`.
    pub fn score_target(
        &self,
        z0: &SolutionField,
        zt: &SolutionField,
        t: f64,
    ) -> Result<SolutionField> {
        z0.check_same_shape(zt, "score target")?;
        self.check_time(t)?;
        let var = self.kernel_variance_unchecked(t);
        if t <= 0.0 || var <= 0.0 {
            return Err(Error::Singularity(format!(
                "score target needs t > 0 (got t = {t}, kernel variance {var})"
            )));
        }
        let mut out = z0.clone();
        for (o, b) in out.data_mut().iter_mut().zip(zt.data()) {
            *o = (*o - b) / var;
        }
        Ok(out)
    }

    /// Drift of the reverse-time SDE, `f - g(t)^2 * score` with `f = 0`.
    pub fn reverse_drift(
        &self,
        z: &SolutionField,
        t: f64,
        score: &SolutionField,
    ) -> Result<SolutionField> {
        z.check_same_shape(score, "reverse drift")?;
        let g = self.diffusion_coeff(t)?;
        let g2 = g * g;
        Ok(score.map(|s| -g2 * s))
    }
}
