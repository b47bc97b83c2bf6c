//! Standardization transforms: the invertible maps T and T⁻¹, their
//! log-Jacobians, and the auxiliary functions h = ∇_v T and u = ∇_v log J
//! evaluated at ε = T⁻¹(z).
//!
//! Each family's standardization centers a sufficient statistic: log z for
//! the gamma and log-normal, logit z for the beta, and the full-covariance
//! whitening of log z for the Dirichlet. The identity transform is valid
//! for every family and zeroes h and u, which turns the correction term of
//! the gradient into the plain score-function integrand.

use crate::dists::{BetaParams, DirichletParams, FamilyParams, GammaParams, LogNormalParams};
use crate::error::{Error, Result};
use crate::linalg::{lyapunov_spd_solve, sym_eigen, Mat, SymEigen};
use crate::numeric::{logit, sigmoid};
use crate::specialfn::{digamma, tetragamma, trigamma};

/// How the beta logit transform picks its denominator sigma.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetaSigmaMode {
    /// Sigma is the standard deviation of logit z, so ε has unit variance.
    StdDev,
    /// Sigma derivatives are chosen per sample so the correction term
    /// vanishes; slightly biased since sigma's dependence on z is ignored.
    AdaptiveZeroCorr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    GammaStd,
    LogNormalStd,
    BetaLogit(BetaSigmaMode),
    DirichletFullCov,
    Identity,
}

impl TransformKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gamma-std" => Ok(TransformKind::GammaStd),
            "lognormal-std" => Ok(TransformKind::LogNormalStd),
            "beta-logit-stddev" => Ok(TransformKind::BetaLogit(BetaSigmaMode::StdDev)),
            "beta-logit-adaptive" => {
                Ok(TransformKind::BetaLogit(BetaSigmaMode::AdaptiveZeroCorr))
            }
            "dirichlet-fullcov" => Ok(TransformKind::DirichletFullCov),
            "identity" => Ok(TransformKind::Identity),
            other => Err(Error::Config(format!("unknown transform kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::GammaStd => "gamma-std",
            TransformKind::LogNormalStd => "lognormal-std",
            TransformKind::BetaLogit(BetaSigmaMode::StdDev) => "beta-logit-stddev",
            TransformKind::BetaLogit(BetaSigmaMode::AdaptiveZeroCorr) => "beta-logit-adaptive",
            TransformKind::DirichletFullCov => "dirichlet-fullcov",
            TransformKind::Identity => "identity",
        }
    }

    pub fn compatible_with(&self, params: &FamilyParams) -> bool {
        matches!(
            (self, params),
            (TransformKind::Identity, _)
                | (TransformKind::GammaStd, FamilyParams::Gamma(_))
                | (TransformKind::LogNormalStd, FamilyParams::LogNormal(_))
                | (TransformKind::BetaLogit(_), FamilyParams::Beta(_))
                | (TransformKind::DirichletFullCov, FamilyParams::Dirichlet(_))
        )
    }

    /// True when the estimator built on this transform is biased.
    pub fn is_biased(&self) -> bool {
        matches!(self, TransformKind::BetaLogit(BetaSigmaMode::AdaptiveZeroCorr))
    }
}

/// One sample's full transform evaluation at ε = T⁻¹(z).
#[derive(Debug, Clone)]
pub struct TransformEval {
    pub z: Vec<f64>,
    pub eps: Vec<f64>,
    pub log_abs_det_jac: f64,
    /// ∇_v T as a (latent dim × parameter count) matrix.
    pub h: Mat,
    /// ∇_v log J, one entry per parameter.
    pub u: Vec<f64>,
}

fn check_compat(kind: TransformKind, params: &FamilyParams) -> Result<()> {
    params.validate()?;
    if !kind.compatible_with(params) {
        return Err(Error::Config(format!(
            "transform {} is not defined for the {} family",
            kind.name(),
            params.family_name()
        )));
    }
    Ok(())
}

fn check_interior(params: &FamilyParams, z: &[f64]) -> Result<()> {
    if !params.is_interior(z) {
        return Err(Error::Domain(format!(
            "transform evaluation outside open support: {z:?}"
        )));
    }
    Ok(())
}

/// ε = T⁻¹(z; v).
pub fn inverse(kind: TransformKind, params: &FamilyParams, z: &[f64]) -> Result<Vec<f64>> {
    check_compat(kind, params)?;
    check_interior(params, z)?;
    match (kind, params) {
        (TransformKind::Identity, _) => Ok(z.to_vec()),
        (TransformKind::GammaStd, FamilyParams::Gamma(p)) => {
            Ok(vec![gamma_inverse(p, z[0])?])
        }
        (TransformKind::LogNormalStd, FamilyParams::LogNormal(p)) => {
            Ok(vec![(z[0].ln() - p.loc) / p.scale])
        }
        (TransformKind::BetaLogit(_), FamilyParams::Beta(p)) => {
            let sigma = beta_sigma(p)?;
            Ok(vec![(logit(z[0]) - digamma(p.alpha)? + digamma(p.beta)?) / sigma])
        }
        (TransformKind::DirichletFullCov, FamilyParams::Dirichlet(p)) => {
            DirichletStd::new(p)?.inverse(z)
        }
        _ => unreachable!("compatibility checked above"),
    }
}

/// z = T(ε; v).
pub fn forward(kind: TransformKind, params: &FamilyParams, eps: &[f64]) -> Result<Vec<f64>> {
    check_compat(kind, params)?;
    if eps.len() != params.dim() || eps.iter().any(|e| !e.is_finite()) {
        return Err(Error::Domain(format!("invalid standardized value {eps:?}")));
    }
    match (kind, params) {
        (TransformKind::Identity, _) => Ok(eps.to_vec()),
        (TransformKind::GammaStd, FamilyParams::Gamma(p)) => {
            let log_z = eps[0] * trigamma(p.shape)?.sqrt() + digamma(p.shape)? - p.rate.ln();
            checked_exp(log_z).map(|z| vec![z])
        }
        (TransformKind::LogNormalStd, FamilyParams::LogNormal(p)) => {
            checked_exp(eps[0] * p.scale + p.loc).map(|z| vec![z])
        }
        (TransformKind::BetaLogit(_), FamilyParams::Beta(p)) => {
            let sigma = beta_sigma(p)?;
            let w = eps[0] * sigma + digamma(p.alpha)? - digamma(p.beta)?;
            let z = sigmoid(w);
            if z <= 0.0 || z >= 1.0 {
                return Err(Error::Range(format!(
                    "beta logit transform saturated at z = {z}"
                )));
            }
            Ok(vec![z])
        }
        (TransformKind::DirichletFullCov, FamilyParams::Dirichlet(p)) => {
            DirichletStd::new(p)?.forward(eps)
        }
        _ => unreachable!("compatibility checked above"),
    }
}

fn checked_exp(log_z: f64) -> Result<f64> {
    let z = log_z.exp();
    if !z.is_finite() || z <= 0.0 {
        return Err(Error::Range(format!(
            "exp overflow/underflow in forward transform (log z = {log_z})"
        )));
    }
    Ok(z)
}

/// log |det ∇_ε T(ε; v)|.
pub fn log_abs_det_jacobian(
    kind: TransformKind,
    params: &FamilyParams,
    eps: &[f64],
) -> Result<f64> {
    check_compat(kind, params)?;
    if eps.len() != params.dim() || eps.iter().any(|e| !e.is_finite()) {
        return Err(Error::Domain(format!("invalid standardized value {eps:?}")));
    }
    match (kind, params) {
        (TransformKind::Identity, _) => Ok(0.0),
        (TransformKind::GammaStd, FamilyParams::Gamma(p)) => {
            // J = T(ε) √ψ₁(α); log T needs no exp
            let t1 = trigamma(p.shape)?;
            let log_t = eps[0] * t1.sqrt() + digamma(p.shape)? - p.rate.ln();
            Ok(log_t + 0.5 * t1.ln())
        }
        (TransformKind::LogNormalStd, FamilyParams::LogNormal(p)) => {
            Ok(eps[0] * p.scale + p.loc + p.scale.ln())
        }
        (TransformKind::BetaLogit(_), FamilyParams::Beta(p)) => {
            let sigma = beta_sigma(p)?;
            let w = eps[0] * sigma + digamma(p.alpha)? - digamma(p.beta)?;
            let z = sigmoid(w);
            if z <= 0.0 || z >= 1.0 {
                return Err(Error::Range("beta logit transform saturated".into()));
            }
            Ok(z.ln() + (1.0 - z).ln() + sigma.ln())
        }
        (TransformKind::DirichletFullCov, FamilyParams::Dirichlet(p)) => {
            DirichletStd::new(p)?.log_abs_det_jacobian(eps)
        }
        _ => unreachable!("compatibility checked above"),
    }
}

/// h = ∇_v T at ε = T⁻¹(z), as a (latent dim × parameter count) matrix.
pub fn aux_h(kind: TransformKind, params: &FamilyParams, z: &[f64]) -> Result<Mat> {
    Ok(evaluate(kind, params, z)?.h)
}

/// u = ∇_v log J at ε = T⁻¹(z), one entry per parameter.
pub fn aux_u(kind: TransformKind, params: &FamilyParams, z: &[f64]) -> Result<Vec<f64>> {
    Ok(evaluate(kind, params, z)?.u)
}

/// Full evaluation at ε = T⁻¹(z): shared intermediates computed once.
pub fn evaluate(kind: TransformKind, params: &FamilyParams, z: &[f64]) -> Result<TransformEval> {
    check_compat(kind, params)?;
    check_interior(params, z)?;
    match (kind, params) {
        (TransformKind::Identity, _) => {
            let dim = params.dim();
            Ok(TransformEval {
                z: z.to_vec(),
                eps: z.to_vec(),
                log_abs_det_jac: 0.0,
                h: Mat::zeros(dim, params.n_params()),
                u: vec![0.0; params.n_params()],
            })
        }
        (TransformKind::GammaStd, FamilyParams::Gamma(p)) => gamma_evaluate(p, z[0]),
        (TransformKind::LogNormalStd, FamilyParams::LogNormal(p)) => {
            lognormal_evaluate(p, z[0])
        }
        (TransformKind::BetaLogit(mode), FamilyParams::Beta(p)) => {
            beta_evaluate(p, z[0], mode)
        }
        (TransformKind::DirichletFullCov, FamilyParams::Dirichlet(p)) => {
            DirichletStd::new(p)?.evaluate(z)
        }
        _ => unreachable!("compatibility checked above"),
    }
}

fn gamma_inverse(p: &GammaParams, z: f64) -> Result<f64> {
    Ok((z.ln() - digamma(p.shape)? + p.rate.ln()) / trigamma(p.shape)?.sqrt())
}

fn gamma_evaluate(p: &GammaParams, z: f64) -> Result<TransformEval> {
    let t1 = trigamma(p.shape)?;
    let t2 = tetragamma(p.shape)?;
    let sqrt_t1 = t1.sqrt();
    let eps = (z.ln() - digamma(p.shape)? + p.rate.ln()) / sqrt_t1;
    // shared factor ε ψ₂ / (2 √ψ₁) + ψ₁
    let shape_factor = eps * t2 / (2.0 * sqrt_t1) + t1;
    let mut h = Mat::zeros(1, 2);
    h[(0, 0)] = z * shape_factor;
    h[(0, 1)] = -z / p.rate;
    let u = vec![shape_factor + t2 / (2.0 * t1), -1.0 / p.rate];
    Ok(TransformEval {
        z: vec![z],
        eps: vec![eps],
        log_abs_det_jac: z.ln() + 0.5 * t1.ln(),
        h,
        u,
    })
}

fn lognormal_evaluate(p: &LogNormalParams, z: f64) -> Result<TransformEval> {
    let eps = (z.ln() - p.loc) / p.scale;
    let mut h = Mat::zeros(1, 2);
    h[(0, 0)] = z;
    h[(0, 1)] = eps * z;
    let u = vec![1.0, eps + 1.0 / p.scale];
    Ok(TransformEval {
        z: vec![z],
        eps: vec![eps],
        log_abs_det_jac: z.ln() + p.scale.ln(),
        h,
        u,
    })
}

fn beta_sigma(p: &BetaParams) -> Result<f64> {
    Ok((trigamma(p.alpha)? + trigamma(p.beta)?).sqrt())
}

/// Derivatives (∂φ/∂α, ∂φ/∂β) of log sigma under the standard-deviation
/// choice sigma² = ψ₁(α) + ψ₁(β).
fn beta_phi_stddev(p: &BetaParams) -> Result<(f64, f64)> {
    let denom = 2.0 * (trigamma(p.alpha)? + trigamma(p.beta)?);
    Ok((tetragamma(p.alpha)? / denom, tetragamma(p.beta)? / denom))
}

/// Derivatives (∂φ/∂α, ∂φ/∂β) of log sigma chosen so both components of the
/// correction integrand vanish at the drawn z. The product εσ is computed
/// from z alone as logit z − ψ(α) + ψ(β), so the value of σ never enters.
pub fn beta_phi_derivs(p: &BetaParams, z: f64) -> Result<(f64, f64)> {
    p.validate()?;
    let fam = FamilyParams::Beta(*p);
    check_interior(&fam, &[z])?;
    let s = logit(z) - digamma(p.alpha)? + digamma(p.beta)?;
    let dlogq_dz = (p.alpha - 1.0) / z - (p.beta - 1.0) / (1.0 - z);
    let c = dlogq_dz * z * (1.0 - z) + (1.0 - 2.0 * z);
    let coef = c * s + 1.0;
    if coef.abs() < 1e-12 {
        return Err(Error::DegenerateSolve);
    }
    let dg_sum = digamma(p.alpha + p.beta)?;
    let score_alpha = dg_sum - digamma(p.alpha)? + z.ln();
    let score_beta = dg_sum - digamma(p.beta)? + (1.0 - z).ln();
    let phi_alpha = -(trigamma(p.alpha)? * c + score_alpha) / coef;
    let phi_beta = (trigamma(p.beta)? * c - score_beta) / coef;
    Ok((phi_alpha, phi_beta))
}

fn beta_evaluate(p: &BetaParams, z: f64, mode: BetaSigmaMode) -> Result<TransformEval> {
    let t_alpha = trigamma(p.alpha)?;
    let t_beta = trigamma(p.beta)?;
    let sigma = (t_alpha + t_beta).sqrt();
    let s = logit(z) - digamma(p.alpha)? + digamma(p.beta)?; // εσ, known without σ
    let eps = s / sigma;
    let (phi_alpha, phi_beta) = match mode {
        BetaSigmaMode::StdDev => beta_phi_stddev(p)?,
        BetaSigmaMode::AdaptiveZeroCorr => match beta_phi_derivs(p, z) {
            Ok(d) => d,
            Err(Error::DegenerateSolve) => beta_phi_stddev(p)?,
            Err(e) => return Err(e),
        },
    };
    let factor_alpha = t_alpha + s * phi_alpha;
    let factor_beta = -t_beta + s * phi_beta;
    let z1z = z * (1.0 - z);
    let mut h = Mat::zeros(1, 2);
    h[(0, 0)] = z1z * factor_alpha;
    h[(0, 1)] = z1z * factor_beta;
    let one_minus_2z = 1.0 - 2.0 * z;
    let u = vec![
        one_minus_2z * factor_alpha + phi_alpha,
        one_minus_2z * factor_beta + phi_beta,
    ];
    Ok(TransformEval {
        z: vec![z],
        eps: vec![eps],
        log_abs_det_jac: z.ln() + (1.0 - z).ln() + sigma.ln(),
        h,
        u,
    })
}

/// Covariance Σ = diag(ψ₁(α)) − ψ₁(α₀) 1 1ᵀ of log z under Dirichlet(α).
pub fn dirichlet_cov(p: &DirichletParams) -> Result<Mat> {
    p.validate()?;
    let k = p.alpha.len();
    let t0 = trigamma(p.total())?;
    let mut m = Mat::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            m[(i, j)] = if i == j {
                trigamma(p.alpha[i])? - t0
            } else {
                -t0
            };
        }
    }
    Ok(m)
}

/// Symmetric square root Σ^{1/2} = V D^{1/2} Vᵀ.
pub fn dirichlet_cov_sqrt(p: &DirichletParams) -> Result<Mat> {
    Ok(DirichletStd::new(p)?.sqrt)
}

/// ∂Σ^{1/2}/∂α_i, the solution X of X Σ^{1/2} + Σ^{1/2} X = ∂Σ/∂α_i.
pub fn dirichlet_cov_sqrt_deriv(p: &DirichletParams, i: usize) -> Result<Mat> {
    let std = DirichletStd::new(p)?;
    std.sqrt_deriv(i)
}

/// Shared Dirichlet standardization state: eigendecomposition of Σ and the
/// pieces derived from it.
struct DirichletStd {
    alpha: Vec<f64>,
    alpha0: f64,
    mu: Vec<f64>,
    eigen: SymEigen,
    sqrt_vals: Vec<f64>,
    sqrt: Mat,
}

impl DirichletStd {
    fn new(p: &DirichletParams) -> Result<Self> {
        p.validate()?;
        let alpha0 = p.total();
        let dg0 = digamma(alpha0)?;
        let mu = p
            .alpha
            .iter()
            .map(|&a| Ok(digamma(a)? - dg0))
            .collect::<Result<Vec<f64>>>()?;
        let cov = dirichlet_cov(p)?;
        let mut eigen = sym_eigen(&cov)?;
        for d in &mut eigen.values {
            if *d < -1e-10 {
                return Err(Error::Numerical(format!(
                    "Dirichlet covariance has eigenvalue {d} below -1e-10"
                )));
            }
            if *d < 0.0 {
                *d = 0.0;
            }
        }
        let sqrt_vals: Vec<f64> = eigen.values.iter().map(|d| d.sqrt()).collect();
        let sqrt = eigen.apply_spectral(|d| d.sqrt());
        Ok(DirichletStd {
            alpha: p.alpha.clone(),
            alpha0,
            mu,
            eigen,
            sqrt_vals,
            sqrt,
        })
    }

    fn k(&self) -> usize {
        self.alpha.len()
    }

    fn inv_sqrt_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.sqrt_vals.iter().any(|&s| s < 1e-12) {
            return Err(Error::Numerical(
                "Dirichlet covariance is numerically singular".into(),
            ));
        }
        // V D^{-1/2} Vᵀ x
        let vt_x = self.eigen.vectors.transpose().matvec(x);
        let scaled: Vec<f64> = vt_x
            .iter()
            .zip(&self.sqrt_vals)
            .map(|(v, s)| v / s)
            .collect();
        Ok(self.eigen.vectors.matvec(&scaled))
    }

    fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        let centered: Vec<f64> = z
            .iter()
            .zip(&self.mu)
            .map(|(&zi, &mi)| zi.ln() - mi)
            .collect();
        self.inv_sqrt_apply(&centered)
    }

    fn forward(&self, eps: &[f64]) -> Result<Vec<f64>> {
        let se = self.sqrt.matvec(eps);
        se.iter()
            .zip(&self.mu)
            .map(|(&s, &m)| checked_exp(s + m))
            .collect()
    }

    fn log_det_sqrt(&self) -> Result<f64> {
        if self.sqrt_vals.iter().any(|&s| s <= 0.0) {
            return Err(Error::Numerical(
                "Dirichlet covariance is numerically singular".into(),
            ));
        }
        Ok(self.sqrt_vals.iter().map(|s| s.ln()).sum())
    }

    fn log_abs_det_jacobian(&self, eps: &[f64]) -> Result<f64> {
        let se = self.sqrt.matvec(eps);
        let log_prod: f64 = se.iter().zip(&self.mu).map(|(&s, &m)| s + m).sum();
        Ok(self.log_det_sqrt()? + log_prod)
    }

    /// ∂Σ/∂α_i = diag(e_i ψ₂(α_i)) − ψ₂(α₀) 1 1ᵀ.
    fn cov_deriv(&self, i: usize) -> Result<Mat> {
        let k = self.k();
        let t2_0 = tetragamma(self.alpha0)?;
        let mut m = Mat::zeros(k, k);
        for r in 0..k {
            for c in 0..k {
                m[(r, c)] = -t2_0;
            }
        }
        m[(i, i)] += tetragamma(self.alpha[i])?;
        Ok(m)
    }

    fn sqrt_deriv(&self, i: usize) -> Result<Mat> {
        let b = self.cov_deriv(i)?;
        lyapunov_spd_solve(&self.sqrt_vals, &self.eigen.vectors, &b)
    }

    /// ∂μ/∂α_i: ψ₁(α_i) on the i-th entry, −ψ₁(α₀) everywhere.
    fn mu_deriv(&self, i: usize) -> Result<Vec<f64>> {
        let k = self.k();
        let t0 = trigamma(self.alpha0)?;
        let mut v = vec![-t0; k];
        v[i] += trigamma(self.alpha[i])?;
        Ok(v)
    }

    fn evaluate(&self, z: &[f64]) -> Result<TransformEval> {
        let k = self.k();
        let eps = self.inverse(z)?;
        let log_jac = {
            let log_prod: f64 = z.iter().map(|zi| zi.ln()).sum();
            self.log_det_sqrt()? + log_prod
        };
        let mut h = Mat::zeros(k, k);
        let mut u = vec![0.0; k];
        for j in 0..k {
            let ds = self.sqrt_deriv(j)?;
            let dmu = self.mu_deriv(j)?;
            let ds_eps = ds.matvec(&eps);
            // trace(Σ^{-1/2} ∂Σ^{1/2}/∂α_j) in the eigenbasis
            let ds_tilde = self
                .eigen
                .vectors
                .transpose()
                .matmul(&ds)
                .matmul(&self.eigen.vectors);
            let mut trace = 0.0;
            for (idx, &s) in self.sqrt_vals.iter().enumerate() {
                if s < 1e-12 {
                    return Err(Error::Numerical(
                        "Dirichlet covariance is numerically singular".into(),
                    ));
                }
                trace += ds_tilde[(idx, idx)] / s;
            }
            let mut col_sum = 0.0;
            for i in 0..k {
                let d_log_t = ds_eps[i] + dmu[i];
                h[(i, j)] = z[i] * d_log_t;
                col_sum += d_log_t;
            }
            u[j] = trace + col_sum;
        }
        Ok(TransformEval {
            z: z.to_vec(),
            eps,
            log_abs_det_jac: log_jac,
            h,
            u,
        })
    }
}
