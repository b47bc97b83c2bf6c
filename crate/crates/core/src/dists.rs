//! Variational families: log-densities, derivatives with respect to the
//! latent value and the parameters, entropies, and entropy gradients.
//!
//! Evaluation functions reject boundary points instead of clamping: the
//! samplers stay away from the endpoints by construction, so a boundary hit
//! signals corrupted state. On the unit interval the guard is the
//! [`INTERIOR_MARGIN`] band (protecting the `1 - z` arithmetic); on
//! unbounded positive supports it is strict positivity, since arbitrarily
//! small positive draws are legitimate for sub-one shapes and their
//! log-densities stay exact in log space.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::specialfn::{digamma, log_gamma, trigamma};
use serde::{Deserialize, Serialize};

/// Unit-interval points closer than this to 0 or 1 are rejected.
pub const INTERIOR_MARGIN: f64 = 1e-12;

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_74;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        let p = GammaParams { shape, rate };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.shape.is_finite() || self.shape <= 0.0 || !self.rate.is_finite() || self.rate <= 0.0
        {
            return Err(Error::Domain(format!(
                "gamma params require shape > 0 and rate > 0, got ({}, {})",
                self.shape, self.rate
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let p = BetaParams { alpha, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha <= 0.0 || !self.beta.is_finite() || self.beta <= 0.0
        {
            return Err(Error::Domain(format!(
                "beta params require alpha > 0 and beta > 0, got ({}, {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub loc: f64,
    pub scale: f64,
}

impl LogNormalParams {
    pub fn new(loc: f64, scale: f64) -> Result<Self> {
        let p = LogNormalParams { loc, scale };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.loc.is_finite() || !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::Domain(format!(
                "log-normal params require finite loc and scale > 0, got ({}, {})",
                self.loc, self.scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    pub alpha: Vec<f64>,
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        let p = DirichletParams { alpha };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() < 2 {
            return Err(Error::Domain(
                "dirichlet params require at least 2 components".into(),
            ));
        }
        if self.alpha.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return Err(Error::Domain(format!(
                "dirichlet params require all alpha > 0, got {:?}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// α₀ = Σ_k α_k.
    pub fn total(&self) -> f64 {
        self.alpha.iter().sum()
    }
}

/// Per-factor variational parameters, one variant per family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum FamilyParams {
    Gamma(GammaParams),
    Beta(BetaParams),
    LogNormal(LogNormalParams),
    Dirichlet(DirichletParams),
}

impl FamilyParams {
    pub fn validate(&self) -> Result<()> {
        match self {
            FamilyParams::Gamma(p) => p.validate(),
            FamilyParams::Beta(p) => p.validate(),
            FamilyParams::LogNormal(p) => p.validate(),
            FamilyParams::Dirichlet(p) => p.validate(),
        }
    }

    /// Dimension of one latent draw (1 for scalar families, K for Dirichlet).
    pub fn dim(&self) -> usize {
        match self {
            FamilyParams::Dirichlet(p) => p.alpha.len(),
            _ => 1,
        }
    }

    /// Number of free parameters (2 for scalar families, K for Dirichlet).
    pub fn n_params(&self) -> usize {
        match self {
            FamilyParams::Dirichlet(p) => p.alpha.len(),
            _ => 2,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            FamilyParams::Gamma(_) => "gamma",
            FamilyParams::Beta(_) => "beta",
            FamilyParams::LogNormal(_) => "lognormal",
            FamilyParams::Dirichlet(_) => "dirichlet",
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            FamilyParams::Gamma(_) => vec!["shape".into(), "rate".into()],
            FamilyParams::Beta(_) => vec!["alpha".into(), "beta".into()],
            FamilyParams::LogNormal(_) => vec!["loc".into(), "scale".into()],
            FamilyParams::Dirichlet(p) => {
                (0..p.alpha.len()).map(|k| format!("alpha{k}")).collect()
            }
        }
    }

    /// True when every coordinate of `z` is strictly inside the support.
    pub fn is_interior(&self, z: &[f64]) -> bool {
        if z.len() != self.dim() || z.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self {
            FamilyParams::Gamma(_) | FamilyParams::LogNormal(_) => z[0] > 0.0,
            FamilyParams::Beta(_) => z[0] > INTERIOR_MARGIN && z[0] < 1.0 - INTERIOR_MARGIN,
            FamilyParams::Dirichlet(_) => z.iter().all(|&v| v > 0.0),
        }
    }

    fn check_interior(&self, z: &[f64]) -> Result<()> {
        if !self.is_interior(z) {
            return Err(Error::Domain(format!(
                "{} evaluation outside open support: {:?}",
                self.family_name(),
                z
            )));
        }
        Ok(())
    }

    /// Exact log-density at `z`, normalizing constant included.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        self.validate()?;
        self.check_interior(z)?;
        match self {
            FamilyParams::Gamma(p) => {
                let z = z[0];
                Ok(p.shape * p.rate.ln() - log_gamma(p.shape)? + (p.shape - 1.0) * z.ln()
                    - p.rate * z)
            }
            FamilyParams::Beta(p) => {
                let z = z[0];
                Ok((p.alpha - 1.0) * z.ln() + (p.beta - 1.0) * (1.0 - z).ln()
                    - log_beta(p.alpha, p.beta)?)
            }
            FamilyParams::LogNormal(p) => {
                let z = z[0];
                let t = (z.ln() - p.loc) / p.scale;
                Ok(-z.ln() - p.scale.ln() - HALF_LN_TWO_PI - 0.5 * t * t)
            }
            FamilyParams::Dirichlet(p) => {
                let a0 = p.total();
                let mut acc = log_gamma(a0)?;
                for (&a, &zi) in p.alpha.iter().zip(z) {
                    acc += (a - 1.0) * zi.ln() - log_gamma(a)?;
                }
                Ok(acc)
            }
        }
    }

    /// ∂ log q / ∂z, one entry per latent coordinate.
    pub fn dlogq_dz(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        self.check_interior(z)?;
        match self {
            FamilyParams::Gamma(p) => Ok(vec![(p.shape - 1.0) / z[0] - p.rate]),
            FamilyParams::Beta(p) => {
                Ok(vec![(p.alpha - 1.0) / z[0] - (p.beta - 1.0) / (1.0 - z[0])])
            }
            FamilyParams::LogNormal(p) => {
                let z = z[0];
                Ok(vec![-1.0 / z - (z.ln() - p.loc) / (p.scale * p.scale * z)])
            }
            FamilyParams::Dirichlet(p) => Ok(p
                .alpha
                .iter()
                .zip(z)
                .map(|(&a, &zi)| (a - 1.0) / zi)
                .collect()),
        }
    }

    /// Score function ∂ log q / ∂params, one entry per parameter.
    pub fn dlogq_dparams(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        self.check_interior(z)?;
        match self {
            FamilyParams::Gamma(p) => {
                let z = z[0];
                Ok(vec![
                    p.rate.ln() - digamma(p.shape)? + z.ln(),
                    p.shape / p.rate - z,
                ])
            }
            FamilyParams::Beta(p) => {
                let z = z[0];
                let dg_sum = digamma(p.alpha + p.beta)?;
                Ok(vec![
                    dg_sum - digamma(p.alpha)? + z.ln(),
                    dg_sum - digamma(p.beta)? + (1.0 - z).ln(),
                ])
            }
            FamilyParams::LogNormal(p) => {
                let t = z[0].ln() - p.loc;
                let s2 = p.scale * p.scale;
                Ok(vec![t / s2, -1.0 / p.scale + t * t / (s2 * p.scale)])
            }
            FamilyParams::Dirichlet(p) => {
                let dg0 = digamma(p.total())?;
                p.alpha
                    .iter()
                    .zip(z)
                    .map(|(&a, &zi)| Ok(dg0 - digamma(a)? + zi.ln()))
                    .collect()
            }
        }
    }

    /// Closed-form differential entropy.
    pub fn entropy(&self) -> Result<f64> {
        self.validate()?;
        match self {
            FamilyParams::Gamma(p) => Ok(p.shape - p.rate.ln()
                + log_gamma(p.shape)?
                + (1.0 - p.shape) * digamma(p.shape)?),
            FamilyParams::Beta(p) => {
                let ab = p.alpha + p.beta;
                Ok(log_beta(p.alpha, p.beta)?
                    - (p.alpha - 1.0) * digamma(p.alpha)?
                    - (p.beta - 1.0) * digamma(p.beta)?
                    + (ab - 2.0) * digamma(ab)?)
            }
            FamilyParams::LogNormal(p) => Ok(0.5 + HALF_LN_TWO_PI + p.scale.ln() + p.loc),
            FamilyParams::Dirichlet(p) => {
                let a0 = p.total();
                let k = p.alpha.len() as f64;
                let mut h = -log_gamma(a0)? + (a0 - k) * digamma(a0)?;
                for &a in &p.alpha {
                    h += log_gamma(a)? - (a - 1.0) * digamma(a)?;
                }
                Ok(h)
            }
        }
    }

    /// Exact gradient of the entropy with respect to the parameters.
    pub fn dentropy_dparams(&self) -> Result<Vec<f64>> {
        self.validate()?;
        match self {
            FamilyParams::Gamma(p) => Ok(vec![
                1.0 + (1.0 - p.shape) * trigamma(p.shape)?,
                -1.0 / p.rate,
            ]),
            FamilyParams::Beta(p) => {
                let ab = p.alpha + p.beta;
                let t_ab = trigamma(ab)?;
                Ok(vec![
                    -(p.alpha - 1.0) * trigamma(p.alpha)? + (ab - 2.0) * t_ab,
                    -(p.beta - 1.0) * trigamma(p.beta)? + (ab - 2.0) * t_ab,
                ])
            }
            FamilyParams::LogNormal(p) => Ok(vec![1.0, 1.0 / p.scale]),
            FamilyParams::Dirichlet(p) => {
                let a0 = p.total();
                let k = p.alpha.len() as f64;
                let t0 = trigamma(a0)?;
                p.alpha
                    .iter()
                    .map(|&a| Ok((a0 - k) * t0 - (a - 1.0) * trigamma(a)?))
                    .collect()
            }
        }
    }

    /// Draw one latent value (length [`FamilyParams::dim`]).
    pub fn sample(&self, rng: &mut RngState) -> Result<Vec<f64>> {
        match self {
            FamilyParams::Gamma(p) => Ok(vec![rng.gamma(p.shape, p.rate)?]),
            FamilyParams::Beta(p) => Ok(vec![rng.beta(p.alpha, p.beta)?]),
            FamilyParams::LogNormal(p) => {
                Ok(vec![(p.loc + p.scale * rng.standard_normal()).exp()])
            }
            FamilyParams::Dirichlet(p) => rng.dirichlet(&p.alpha),
        }
    }
}

pub fn log_beta(a: f64, b: f64) -> Result<f64> {
    Ok(log_gamma(a)? + log_gamma(b)? - log_gamma(a + b)?)
}
