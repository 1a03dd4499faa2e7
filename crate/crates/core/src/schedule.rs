//! Variance schedules and the closed-form forward/reverse diffusion steps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How β is interpolated between its endpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BetaSpacing {
    /// β linear in t.
    #[default]
    Linear,
    /// √β linear in t (the Stable Diffusion variant).
    ScaledLinear,
}

impl BetaSpacing {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "scaled_linear" => Ok(Self::ScaledLinear),
            other => Err(Error::Config(format!("unknown beta spacing `{other}`"))),
        }
    }
}

/// β, α and ᾱ tables for steps `t = 1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::Param("schedule needs at least one step".into()));
        }
        if let Some(b) = beta.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Param(format!("beta {b} outside (0, 1)")));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// `β_t = β₀ + (t−1)/(T−1)·(β_T − β₀)`.
    pub fn linear(steps: usize, beta0: f64, beta_t: f64) -> Result<Self> {
        Self::with_spacing(steps, beta0, beta_t, BetaSpacing::Linear)
    }

    pub fn with_spacing(
        steps: usize,
        beta0: f64,
        beta_t: f64,
        spacing: BetaSpacing,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Param("T must be at least 1".into()));
        }
        if !(beta0 > 0.0 && beta0 <= beta_t && beta_t < 1.0) {
            return Err(Error::Param(format!(
                "need 0 < beta0 <= betaT < 1, got {beta0} and {beta_t}"
            )));
        }
        let frac = |t: usize| {
            if steps == 1 {
                0.0
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            }
        };
        let beta = (1..=steps)
            .map(|t| match spacing {
                BetaSpacing::Linear => beta0 + frac(t) * (beta_t - beta0),
                BetaSpacing::ScaledLinear => {
                    let (lo, hi) = (beta0.sqrt(), beta_t.sqrt());
                    let r = lo + frac(t) * (hi - lo);
                    r * r
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    /// T = 1000, β from 0.00085 to 0.012, linear.
    pub fn paper_default() -> Self {
        Self::linear(1000, 0.00085, 0.012).expect("valid default schedule")
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Step(format!("t = {t} not in 1..={}", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.check(t)?])
    }

    /// ᾱ extended with `ᾱ_0 = 1`.
    pub fn alpha_bar_or_one(&self, t: usize) -> Result<f64> {
        if t == 0 {
            Ok(1.0)
        } else {
            self.alpha_bar(t)
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Signal-to-noise ratio `ᾱ_t / (1 − ᾱ_t)`.
    pub fn snr(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(ab / (1.0 - ab))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `z_t = √ᾱ_t · z0 + √(1−ᾱ_t) · ε`.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape("forward_diffuse", z0, eps)?;
    let ab = s.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// Mean of the reverse step `p(z_{t−1} | z_t)` given a noise estimate:
/// `(z_t − β_t/√(1−ᾱ_t) · ε̂) / √α_t`.
pub fn posterior_mean(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape("posterior_mean", z_t, eps_hat)?;
    let (beta, alpha, ab) = (s.beta(t)?, s.alpha(t)?, s.alpha_bar(t)?);
    let coef = beta / (1.0 - ab).sqrt();
    let inv = 1.0 / alpha.sqrt();
    z_t.zip_map(eps_hat, |z, e| inv * (z - coef * e))
}
