//! Monte Carlo gradient estimators over a mean-field variational state.
//!
//! The generalized reparameterization estimator splits the gradient of the
//! expected log-joint into a reparameterization term
//! g_rep = E_q[∇_z f · h] and a correction term
//! g_corr = E_q[f · (∇_z log q · h + ∇_v log q + u)], with h and u the
//! transform sensitivities from [`crate::transforms`]. The analytic entropy
//! gradient completes the estimate. With the identity transform h and u
//! vanish and the correction term becomes the score-function integrand,
//! which is also exposed directly (with optional control variates).

use crate::dists::{BetaParams, DirichletParams, FamilyParams, GammaParams, LogNormalParams};
use crate::error::{Error, Result};
use crate::models::{Model, Support};
use crate::parallel;
use crate::rng::RngState;
use crate::stats;
use crate::transforms::{self, TransformKind};

/// Bounded retries when a sampler lands on a support boundary.
const RESAMPLE_RETRIES: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    Gamma,
    Beta,
    LogNormal,
    Dirichlet,
}

impl FamilyKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(FamilyKind::Gamma),
            "beta" => Ok(FamilyKind::Beta),
            "lognormal" => Ok(FamilyKind::LogNormal),
            "dirichlet" => Ok(FamilyKind::Dirichlet),
            other => Err(Error::Config(format!("unknown family {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::Gamma => "gamma",
            FamilyKind::Beta => "beta",
            FamilyKind::LogNormal => "lognormal",
            FamilyKind::Dirichlet => "dirichlet",
        }
    }

    pub fn supports(&self, support: Support) -> bool {
        matches!(
            (self, support),
            (FamilyKind::Gamma | FamilyKind::LogNormal, Support::Positive)
                | (FamilyKind::Beta, Support::UnitInterval)
                | (FamilyKind::Dirichlet, Support::Simplex { .. })
        )
    }

    /// The standardization transform built for this family.
    pub fn default_transform(&self) -> TransformKind {
        match self {
            FamilyKind::Gamma => TransformKind::GammaStd,
            FamilyKind::Beta => TransformKind::BetaLogit(crate::transforms::BetaSigmaMode::StdDev),
            FamilyKind::LogNormal => TransformKind::LogNormalStd,
            FamilyKind::Dirichlet => TransformKind::DirichletFullCov,
        }
    }
}

/// One mean-field factor: a family with parameters plus the transform its
/// gradients flow through.
#[derive(Debug, Clone)]
pub struct Factor {
    pub name: String,
    pub params: FamilyParams,
    pub transform: TransformKind,
}

/// Per-block variational choices used to build a state over a model layout.
#[derive(Debug, Clone, Copy)]
pub struct BlockBinding {
    pub family: FamilyKind,
    pub transform: TransformKind,
}

/// Fully factorized variational distribution aligned with a model layout.
#[derive(Debug, Clone)]
pub struct VariationalState {
    pub factors: Vec<Factor>,
}

impl VariationalState {
    /// Build the initial state for a model: variational shapes start at one
    /// and means match the model's per-block prior means.
    pub fn init(model: &dyn Model, bindings: &[BlockBinding]) -> Result<Self> {
        let layout = model.layout();
        if bindings.len() != layout.blocks().len() {
            return Err(Error::Config(format!(
                "{} bindings for {} blocks",
                bindings.len(),
                layout.blocks().len()
            )));
        }
        let means = model.block_init_means();
        let mut factors = Vec::new();
        for ((block, binding), &mean) in layout.blocks().iter().zip(bindings).zip(&means) {
            if !binding.family.supports(block.support) {
                return Err(Error::Config(format!(
                    "family {} cannot cover block {:?} with support {:?}",
                    binding.family.name(),
                    block.name,
                    block.support
                )));
            }
            let (factor_dim, count) = match block.support {
                Support::Simplex { k } => (k, block.len / k),
                _ => (1, block.len),
            };
            for i in 0..count {
                let params = match binding.family {
                    FamilyKind::Gamma => FamilyParams::Gamma(GammaParams::new(1.0, 1.0 / mean)?),
                    FamilyKind::Beta => FamilyParams::Beta(BetaParams::new(1.0, 1.0)?),
                    FamilyKind::LogNormal => {
                        // unit log-scale, mean matched: E z = exp(μ + 1/2)
                        FamilyParams::LogNormal(LogNormalParams::new(mean.ln() - 0.5, 1.0)?)
                    }
                    FamilyKind::Dirichlet => {
                        FamilyParams::Dirichlet(DirichletParams::new(vec![1.0; factor_dim])?)
                    }
                };
                if !binding.transform.compatible_with(&params) {
                    return Err(Error::Config(format!(
                        "transform {} incompatible with family {}",
                        binding.transform.name(),
                        binding.family.name()
                    )));
                }
                factors.push(Factor {
                    name: format!("{}[{i}]", block.name),
                    params,
                    transform: binding.transform,
                });
            }
        }
        Ok(VariationalState { factors })
    }

    pub fn latent_dim(&self) -> usize {
        self.factors.iter().map(|f| f.params.dim()).sum()
    }

    pub fn param_dim(&self) -> usize {
        self.factors.iter().map(|f| f.params.n_params()).sum()
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.param_dim());
        for f in &self.factors {
            for p in f.params.param_names() {
                names.push(format!("{}.{p}", f.name));
            }
        }
        names
    }

    /// True when any factor's transform yields a biased estimator.
    pub fn is_biased(&self) -> bool {
        self.factors.iter().any(|f| f.transform.is_biased())
    }

    /// Draw a full latent vector, retrying factors that land on a support
    /// boundary up to the retry budget.
    pub fn sample(&self, rng: &mut RngState) -> Result<Vec<f64>> {
        let mut z = Vec::with_capacity(self.latent_dim());
        for f in &self.factors {
            let mut attempts = 0;
            loop {
                let v = f.params.sample(rng)?;
                if f.params.is_interior(&v) {
                    z.extend_from_slice(&v);
                    break;
                }
                attempts += 1;
                if attempts > RESAMPLE_RETRIES {
                    return Err(Error::ResampleLimit {
                        retries: RESAMPLE_RETRIES,
                    });
                }
            }
        }
        Ok(z)
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        let mut off = 0;
        for f in &self.factors {
            let d = f.params.dim();
            total += f.params.log_density(&z[off..off + d])?;
            off += d;
        }
        Ok(total)
    }

    pub fn entropy(&self) -> Result<f64> {
        self.factors.iter().map(|f| f.params.entropy()).sum()
    }

    pub fn dentropy_dparams(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.param_dim());
        for f in &self.factors {
            out.extend(f.params.dentropy_dparams()?);
        }
        Ok(out)
    }

    /// ∇_v log q(z; v), flattened over factors.
    pub fn score(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.param_dim());
        let mut off = 0;
        for f in &self.factors {
            let d = f.params.dim();
            out.extend(f.params.dlogq_dparams(&z[off..off + d])?);
            off += d;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorKind {
    GRep,
    ScoreFunction,
    ScoreFunctionCV,
}

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::GRep => "grep",
            EstimatorKind::ScoreFunction => "score",
            EstimatorKind::ScoreFunctionCV => "score-cv",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradBreakdown {
    pub g_rep: Vec<f64>,
    pub g_corr: Vec<f64>,
    pub entropy_grad: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub kind: EstimatorKind,
    pub n_samples: usize,
    /// Full ELBO gradient per variational parameter, factor order.
    pub total: Vec<f64>,
    pub breakdown: Option<GradBreakdown>,
    /// Mean of f(z) = log p(x, z) over the estimator's samples.
    pub mean_log_joint: f64,
    /// Set when any factor uses the adaptive beta transform.
    pub biased: bool,
}

impl GradientEstimate {
    fn assemble(
        kind: EstimatorKind,
        n_samples: usize,
        g_rep: Vec<f64>,
        g_corr: Vec<f64>,
        entropy_grad: Vec<f64>,
        mean_log_joint: f64,
        biased: bool,
    ) -> Result<Self> {
        let total: Vec<f64> = g_rep
            .iter()
            .zip(&g_corr)
            .zip(&entropy_grad)
            .map(|((r, c), e)| r + c + e)
            .collect();
        if total.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient estimate".into()));
        }
        Ok(GradientEstimate {
            kind,
            n_samples,
            total,
            breakdown: Some(GradBreakdown {
                g_rep,
                g_corr,
                entropy_grad,
            }),
            mean_log_joint,
            biased,
        })
    }
}

/// Generalized reparameterization gradient of the ELBO.
pub fn grad_grep(
    model: &dyn Model,
    state: &VariationalState,
    n_samples: usize,
    rng: &mut RngState,
) -> Result<GradientEstimate> {
    if n_samples == 0 {
        return Err(Error::Domain("n_samples must be >= 1".into()));
    }
    let dim_p = state.param_dim();
    let mut g_rep = vec![0.0; dim_p];
    let mut g_corr = vec![0.0; dim_p];
    let mut mean_f = 0.0;
    for _ in 0..n_samples {
        let z = state.sample(rng)?;
        let f = model.log_joint(&z)?;
        let grad_f = model.grad_log_joint(&z)?;
        mean_f += f;
        let mut z_off = 0;
        let mut p_off = 0;
        for factor in &state.factors {
            let dim_z = factor.params.dim();
            let n_params = factor.params.n_params();
            let zb = &z[z_off..z_off + dim_z];
            let ev = transforms::evaluate(factor.transform, &factor.params, zb)?;
            let dlogq_dz = factor.params.dlogq_dz(zb)?;
            let score = factor.params.dlogq_dparams(zb)?;
            for p in 0..n_params {
                let mut rep = 0.0;
                let mut corr_inner = 0.0;
                for i in 0..dim_z {
                    rep += grad_f[z_off + i] * ev.h[(i, p)];
                    corr_inner += dlogq_dz[i] * ev.h[(i, p)];
                }
                g_rep[p_off + p] += rep;
                g_corr[p_off + p] += f * (corr_inner + score[p] + ev.u[p]);
            }
            z_off += dim_z;
            p_off += n_params;
        }
    }
    let scale = 1.0 / n_samples as f64;
    for v in g_rep.iter_mut().chain(g_corr.iter_mut()) {
        *v *= scale;
    }
    GradientEstimate::assemble(
        EstimatorKind::GRep,
        n_samples,
        g_rep,
        g_corr,
        state.dentropy_dparams()?,
        mean_f * scale,
        state.is_biased(),
    )
}

/// Score-function (log-derivative) gradient of the ELBO. With
/// `cv_samples >= 2` a separate batch estimates per-component control
/// variate coefficients a_k = Cov(f·s_k, s_k) / Var(s_k).
pub fn grad_score_function(
    model: &dyn Model,
    state: &VariationalState,
    n_samples: usize,
    cv_samples: usize,
    rng: &mut RngState,
) -> Result<GradientEstimate> {
    if n_samples == 0 {
        return Err(Error::Domain("n_samples must be >= 1".into()));
    }
    if cv_samples == 1 {
        return Err(Error::Domain(
            "cv_samples must be 0 (disabled) or at least 2".into(),
        ));
    }
    let dim_p = state.param_dim();

    let coeffs = if cv_samples >= 2 {
        let mut fs: Vec<Vec<f64>> = vec![Vec::with_capacity(cv_samples); dim_p];
        let mut ss: Vec<Vec<f64>> = vec![Vec::with_capacity(cv_samples); dim_p];
        for _ in 0..cv_samples {
            let z = state.sample(rng)?;
            let f = model.log_joint(&z)?;
            let score = state.score(&z)?;
            for (k, &s) in score.iter().enumerate() {
                fs[k].push(f * s);
                ss[k].push(s);
            }
        }
        let mut a = vec![0.0; dim_p];
        for k in 0..dim_p {
            let (mean_fs, _) = stats::mean_variance(&fs[k]);
            let (mean_s, var_s) = stats::mean_variance(&ss[k]);
            if var_s < 1e-30 {
                continue;
            }
            let n = cv_samples as f64;
            let cov: f64 = fs[k]
                .iter()
                .zip(&ss[k])
                .map(|(a, b)| (a - mean_fs) * (b - mean_s))
                .sum::<f64>()
                / (n - 1.0);
            a[k] = cov / var_s;
        }
        Some(a)
    } else {
        None
    };

    let mut g_corr = vec![0.0; dim_p];
    let mut mean_f = 0.0;
    for _ in 0..n_samples {
        let z = state.sample(rng)?;
        let f = model.log_joint(&z)?;
        mean_f += f;
        let score = state.score(&z)?;
        match &coeffs {
            None => {
                for (g, s) in g_corr.iter_mut().zip(&score) {
                    *g += f * s;
                }
            }
            Some(a) => {
                for ((g, s), ak) in g_corr.iter_mut().zip(&score).zip(a) {
                    *g += f * s - ak * s;
                }
            }
        }
    }
    let scale = 1.0 / n_samples as f64;
    for v in g_corr.iter_mut() {
        *v *= scale;
    }
    let kind = if coeffs.is_some() {
        EstimatorKind::ScoreFunctionCV
    } else {
        EstimatorKind::ScoreFunction
    };
    GradientEstimate::assemble(
        kind,
        n_samples,
        vec![0.0; dim_p],
        g_corr,
        state.dentropy_dparams()?,
        mean_f * scale,
        false,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElboMode {
    /// Mean of f(z) − log q(z).
    SampledEntropy,
    /// Mean of f(z) plus the closed-form entropy.
    AnalyticEntropy,
}

pub fn elbo_estimate(
    model: &dyn Model,
    state: &VariationalState,
    n_samples: usize,
    mode: ElboMode,
    rng: &mut RngState,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Domain("n_samples must be >= 1".into()));
    }
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let z = state.sample(rng)?;
        acc += model.log_joint(&z)?;
        if mode == ElboMode::SampledEntropy {
            acc -= state.log_density(&z)?;
        }
    }
    let mut elbo = acc / n_samples as f64;
    if mode == ElboMode::AnalyticEntropy {
        elbo += state.entropy()?;
    }
    Ok(elbo)
}

/// Everything needed to run one gradient estimate repeatedly.
pub struct EstimatorRun<'a> {
    pub model: &'a dyn Model,
    pub state: &'a VariationalState,
    pub kind: EstimatorKind,
    pub n_samples: usize,
    pub cv_samples: usize,
}

impl EstimatorRun<'_> {
    pub fn estimate(&self, rng: &mut RngState) -> Result<GradientEstimate> {
        match self.kind {
            EstimatorKind::GRep => grad_grep(self.model, self.state, self.n_samples, rng),
            EstimatorKind::ScoreFunction => {
                grad_score_function(self.model, self.state, self.n_samples, 0, rng)
            }
            EstimatorKind::ScoreFunctionCV => {
                grad_score_function(self.model, self.state, self.n_samples, self.cv_samples, rng)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub kind: EstimatorKind,
    pub trials: usize,
    pub component_names: Vec<String>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Empirical per-component variance over independent repeated estimates.
/// Trials run on indexed substreams, in parallel when the `parallel`
/// feature is on, with results identical to the sequential order.
pub fn estimator_variance(
    run: &EstimatorRun<'_>,
    trials: usize,
    rng: &mut RngState,
) -> Result<VarianceReport> {
    if trials < 100 {
        return Err(Error::Domain(format!(
            "variance estimation needs >= 100 trials, got {trials}"
        )));
    }
    let family = rng.fork();
    let results: Vec<Result<Vec<f64>>> = parallel::map_indexed(trials, |i| {
        let mut trial_rng = family.stream(i as u64);
        run.estimate(&mut trial_rng).map(|g| g.total)
    });
    let dim = run.state.param_dim();
    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(trials); dim];
    for r in results {
        let total = r?;
        for (c, v) in columns.iter_mut().zip(total) {
            c.push(v);
        }
    }
    let mut mean = Vec::with_capacity(dim);
    let mut variance = Vec::with_capacity(dim);
    for c in &columns {
        let (m, v) = stats::mean_variance(c);
        mean.push(m);
        variance.push(v);
    }
    Ok(VarianceReport {
        kind: run.kind,
        trials,
        component_names: run.state.param_names(),
        mean,
        variance,
    })
}
