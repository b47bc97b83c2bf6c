//! Stochastic optimization of the variational parameters: one noisy
//! gradient per iteration, an rmsprop/adagrad-style adaptive step size, and
//! softplus maps that keep constrained parameters positive.
//!
//! Gamma factors are optimized in (shape, mean) coordinates rather than
//! (shape, rate); the chain rule between the two lives here. Each update is
//! v' ← v' + ρ ∘ ∇L in unconstrained coordinates (gradient ascent).

use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, EstimatorRun, VariationalState};
use crate::models::Model;
use crate::numeric::{sigmoid, softplus};
use crate::rng::RngState;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizeConfig {
    pub eta: f64,
    pub kappa: f64,
    pub tau: f64,
    pub gamma: f64,
}

impl Default for StepSizeConfig {
    fn default() -> Self {
        StepSizeConfig {
            eta: 1.0,
            kappa: 1e-16,
            tau: 1.0,
            gamma: 0.1,
        }
    }
}

impl StepSizeConfig {
    pub fn with_eta(eta: f64) -> Self {
        StepSizeConfig {
            eta,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta", self.eta),
            ("tau", self.tau),
            ("gamma", self.gamma),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("step-size {name} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Running state of the adaptive schedule:
/// s_k ← γ g_k² + (1−γ) s_k, then ρ_k = η · i^(−1/2+κ) / (τ + √s_k).
/// The running second moment is seeded with the first gradient's square.
#[derive(Debug, Clone)]
pub struct StepSizeState {
    s: Vec<f64>,
    i: u64,
    pub cfg: StepSizeConfig,
}

impl StepSizeState {
    pub fn new(dim: usize, cfg: StepSizeConfig) -> Self {
        StepSizeState {
            s: vec![0.0; dim],
            i: 0,
            cfg,
        }
    }

    pub fn iteration(&self) -> u64 {
        self.i
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.s
    }

    /// Advance one iteration: update s from the gradient, return the
    /// per-component step sizes.
    pub fn step(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        if grad.len() != self.s.len() {
            return Err(Error::Domain(format!(
                "gradient dim {} vs step state dim {}",
                grad.len(),
                self.s.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient in step-size update".into()));
        }
        self.i += 1;
        let first = self.i == 1;
        let decay = (self.i as f64).powf(-0.5 + self.cfg.kappa);
        let mut rho = Vec::with_capacity(grad.len());
        for (s, &g) in self.s.iter_mut().zip(grad) {
            let prev = if first { g * g } else { *s };
            *s = self.cfg.gamma * g * g + (1.0 - self.cfg.gamma) * prev;
            rho.push(self.cfg.eta * decay / (self.cfg.tau + s.sqrt()));
        }
        Ok(rho)
    }
}

/// Map an unconstrained value to a positive one: v = log(1 + e^{v'}).
pub fn constrain(vp: f64) -> f64 {
    softplus(vp)
}

/// Inverse of [`constrain`]: v' = log(e^v − 1), for v > 0.
pub fn unconstrain(v: f64) -> Result<f64> {
    if !v.is_finite() || v <= 0.0 {
        return Err(Error::Domain(format!("unconstrain requires v > 0, got {v}")));
    }
    if v > 30.0 {
        Ok(v)
    } else {
        // log(e^v − 1) = v + log(1 − e^{−v}), with the small difference
        // taken through exp_m1 to keep precision for tiny v
        Ok(v + (-(-v).exp_m1()).ln())
    }
}

/// Chain a gradient in v through v = softplus(v'): ∇_{v'} = ∇_v · σ(v').
pub fn chain_grad(grad_v: f64, vp: f64) -> f64 {
    grad_v * sigmoid(vp)
}

/// Convert a gamma-factor gradient from (shape, rate) to (shape, mean)
/// coordinates, where rate = shape / mean.
pub fn gamma_shape_mean_chain(
    grad_shape_rate: (f64, f64),
    shape: f64,
    mean: f64,
) -> Result<(f64, f64)> {
    if !mean.is_finite() || mean <= 0.0 {
        return Err(Error::Domain(format!(
            "shape-mean chain requires mean > 0, got {mean}"
        )));
    }
    let (g_shape, g_rate) = grad_shape_rate;
    let g_shape_given_mean = g_shape + g_rate * (1.0 / mean);
    let g_mean = g_rate * (-shape / (mean * mean));
    Ok((g_shape_given_mean, g_mean))
}

/// Unconstrained training coordinates of one factor, paired with the maps
/// back to natural parameters.
mod coords {
    use super::*;
    use crate::dists::{
        BetaParams, DirichletParams, FamilyParams, GammaParams, LogNormalParams,
    };

    pub fn pack(state: &VariationalState) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(state.param_dim());
        for f in &state.factors {
            match &f.params {
                FamilyParams::Gamma(p) => {
                    v.push(unconstrain(p.shape)?);
                    v.push(unconstrain(p.mean())?);
                }
                FamilyParams::Beta(p) => {
                    v.push(unconstrain(p.alpha)?);
                    v.push(unconstrain(p.beta)?);
                }
                FamilyParams::LogNormal(p) => {
                    v.push(p.loc);
                    v.push(unconstrain(p.scale)?);
                }
                FamilyParams::Dirichlet(p) => {
                    for &a in &p.alpha {
                        v.push(unconstrain(a)?);
                    }
                }
            }
        }
        Ok(v)
    }

    pub fn unpack(state: &mut VariationalState, v: &[f64]) -> Result<()> {
        let mut off = 0;
        for f in &mut state.factors {
            match &mut f.params {
                FamilyParams::Gamma(p) => {
                    let shape = constrain(v[off]);
                    let mean = constrain(v[off + 1]);
                    *p = GammaParams::new(shape, shape / mean)?;
                    off += 2;
                }
                FamilyParams::Beta(p) => {
                    *p = BetaParams::new(constrain(v[off]), constrain(v[off + 1]))?;
                    off += 2;
                }
                FamilyParams::LogNormal(p) => {
                    *p = LogNormalParams::new(v[off], constrain(v[off + 1]))?;
                    off += 2;
                }
                FamilyParams::Dirichlet(p) => {
                    let k = p.alpha.len();
                    let alpha: Vec<f64> = v[off..off + k].iter().map(|&u| constrain(u)).collect();
                    *p = DirichletParams::new(alpha)?;
                    off += k;
                }
            }
        }
        Ok(())
    }

    /// Natural-parameter gradient → gradient in the unconstrained training
    /// coordinates (shape-mean chain for gamma factors, then softplus).
    pub fn chain(
        state: &VariationalState,
        natural: &[f64],
        unconstrained: &[f64],
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(natural.len());
        let mut off = 0;
        for f in &state.factors {
            match &f.params {
                FamilyParams::Gamma(p) => {
                    let (g_shape, g_mean) = gamma_shape_mean_chain(
                        (natural[off], natural[off + 1]),
                        p.shape,
                        p.mean(),
                    )?;
                    out.push(chain_grad(g_shape, unconstrained[off]));
                    out.push(chain_grad(g_mean, unconstrained[off + 1]));
                    off += 2;
                }
                FamilyParams::Beta(_) => {
                    out.push(chain_grad(natural[off], unconstrained[off]));
                    out.push(chain_grad(natural[off + 1], unconstrained[off + 1]));
                    off += 2;
                }
                FamilyParams::LogNormal(_) => {
                    out.push(natural[off]);
                    out.push(chain_grad(natural[off + 1], unconstrained[off + 1]));
                    off += 2;
                }
                FamilyParams::Dirichlet(p) => {
                    for k in 0..p.alpha.len() {
                        out.push(chain_grad(natural[off + k], unconstrained[off + k]));
                    }
                    off += p.alpha.len();
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub elbo: f64,
    pub grad_norm: f64,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub iterations: u64,
    pub step: StepSizeConfig,
    pub kind: EstimatorKind,
    pub n_samples: usize,
    pub cv_samples: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 2000,
            step: StepSizeConfig::default(),
            kind: EstimatorKind::GRep,
            n_samples: 1,
            cv_samples: 0,
        }
    }
}

/// Outcome of a fit: the final state and per-iteration trace, plus the
/// error when the run aborted early (trace rows up to the abort are kept).
#[derive(Debug)]
pub struct FitRun {
    pub state: VariationalState,
    pub trace: TrainTrace,
    pub error: Option<Error>,
}

/// Run the optimization loop: draw, estimate the noisy gradient, convert to
/// unconstrained coordinates, set the adaptive step size, and ascend.
pub fn fit(
    model: &dyn Model,
    init: VariationalState,
    cfg: &FitConfig,
    rng: &mut RngState,
) -> FitRun {
    let mut state = init;
    let mut trace = TrainTrace::default();
    let start = Instant::now();

    let mut unconstrained = match coords::pack(&state) {
        Ok(v) => v,
        Err(e) => {
            return FitRun {
                state,
                trace,
                error: Some(e),
            }
        }
    };
    let mut steps = StepSizeState::new(unconstrained.len(), cfg.step);

    for iteration in 1..=cfg.iterations {
        match fit_step(model, cfg, &mut state, &mut unconstrained, &mut steps, rng) {
            Ok((elbo, grad_norm)) => trace.rows.push(TraceRow {
                iteration,
                elbo,
                grad_norm,
                elapsed_seconds: start.elapsed().as_secs_f64(),
            }),
            Err(e) => {
                return FitRun {
                    state,
                    trace,
                    error: Some(e),
                }
            }
        }
    }
    FitRun {
        state,
        trace,
        error: None,
    }
}

fn fit_step(
    model: &dyn Model,
    cfg: &FitConfig,
    state: &mut VariationalState,
    unconstrained: &mut [f64],
    steps: &mut StepSizeState,
    rng: &mut RngState,
) -> Result<(f64, f64)> {
    let est = EstimatorRun {
        model,
        state,
        kind: cfg.kind,
        n_samples: cfg.n_samples,
        cv_samples: cfg.cv_samples,
    }
    .estimate(rng)?;
    let elbo = est.mean_log_joint + state.entropy()?;
    let grad = coords::chain(state, &est.total, unconstrained)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient at iteration {}",
            steps.iteration() + 1
        )));
    }
    let rho = steps.step(&grad)?;
    for ((v, r), g) in unconstrained.iter_mut().zip(&rho).zip(&grad) {
        *v += r * g;
    }
    coords::unpack(state, unconstrained)?;
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok((elbo, grad_norm))
}

/// Mean of the last `window` ELBO values at or before `iteration`.
pub fn smoothed_elbo(trace: &TrainTrace, iteration: u64, window: usize) -> Option<f64> {
    let upto: Vec<f64> = trace
        .rows
        .iter()
        .filter(|r| r.iteration <= iteration)
        .map(|r| r.elbo)
        .collect();
    if upto.is_empty() {
        return None;
    }
    let tail = &upto[upto.len().saturating_sub(window)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dists::{FamilyParams, GammaParams};
    use crate::estimators::{BlockBinding, FamilyKind};
    use crate::models::{BetaBernoulliToy, GammaPoissonToy};
    use crate::transforms::{BetaSigmaMode, TransformKind};

    fn assert_rel(got: f64, want: f64, tol: f64) {
        assert!(
            (got - want).abs() <= tol * want.abs().max(1.0),
            "got {got}, want {want}"
        );
    }

    #[test]
    fn step_size_first_iteration_hand_value() {
        let mut st = StepSizeState::new(1, StepSizeConfig::with_eta(1.0));
        let rho = st.step(&[1.0]).unwrap();
        // s = 0.1·1 + 0.9·1 = 1, ρ = 1 · 1 · (1 + 1)^{-1}
        assert_eq!(st.second_moment()[0], 1.0);
        assert_eq!(rho[0], 0.5);
    }

    #[test]
    fn step_size_zero_gradient_decays_geometrically() {
        let mut st = StepSizeState::new(1, StepSizeConfig::with_eta(1.0));
        st.step(&[2.0]).unwrap();
        let s1 = st.second_moment()[0];
        st.step(&[0.0]).unwrap();
        assert_rel(st.second_moment()[0], 0.9 * s1, 1e-15);
        st.step(&[0.0]).unwrap();
        assert_rel(st.second_moment()[0], 0.81 * s1, 1e-15);
    }

    #[test]
    fn step_size_linear_in_eta() {
        let grads = [[1.0], [2.0], [0.5]];
        let mut a = StepSizeState::new(1, StepSizeConfig::with_eta(0.7));
        let mut b = StepSizeState::new(1, StepSizeConfig::with_eta(1.4));
        for g in grads {
            let ra = a.step(&g).unwrap()[0];
            let rb = b.step(&g).unwrap()[0];
            assert_rel(rb, 2.0 * ra, 1e-15);
        }
    }

    #[test]
    fn step_size_rejects_non_finite() {
        let mut st = StepSizeState::new(2, StepSizeConfig::default());
        assert!(st.step(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn constrain_known_value_and_round_trips() {
        assert!(unconstrain(2.0_f64.ln()).unwrap().abs() < 1e-15);
        for v in [1e-4, 1.0, 1e3] {
            let rt = constrain(unconstrain(v).unwrap());
            assert!((rt - v).abs() <= 1e-12 * v.max(1.0), "{v} -> {rt}");
        }
        assert!(unconstrain(0.0).is_err());
        assert!(unconstrain(-1.0).is_err());
    }

    #[test]
    fn chain_grad_matches_elbo_finite_difference() {
        // d/dv' ELBO(softplus(v')) on the toy, against the analytic gradient
        // chained through the softplus
        let toy =
            GammaPoissonToy::new(vec![3, 1, 2], GammaParams::new(1.0, 1.0).unwrap()).unwrap();
        let q = GammaParams::new(2.2, 1.4).unwrap();
        let grad = toy.analytic_elbo_grad(&q).unwrap();
        let vp_shape = unconstrain(q.shape).unwrap();
        let chained = chain_grad(grad[0], vp_shape);
        let h = 1e-6;
        let elbo_at = |vp: f64| {
            toy.analytic_elbo(&GammaParams::new(constrain(vp), q.rate).unwrap())
                .unwrap()
        };
        let fd = (elbo_at(vp_shape + h) - elbo_at(vp_shape - h)) / (2.0 * h);
        assert_rel(chained, fd, 1e-4);
    }

    #[test]
    fn shape_mean_chain_hand_values() {
        // zero rate gradient gives zero mean gradient
        let (_, g_mean) = gamma_shape_mean_chain((3.0, 0.0), 2.0, 0.5).unwrap();
        assert_eq!(g_mean, 0.0);
        // α = 2, m = 1/2, ∇β = 1, ∇α|β = 0: ∇m = −α/m² = −8, ∇α|m = 1/m = 2
        let (g_shape, g_mean) = gamma_shape_mean_chain((0.0, 1.0), 2.0, 0.5).unwrap();
        assert_eq!(g_mean, -8.0);
        assert_eq!(g_shape, 2.0);
        assert!(gamma_shape_mean_chain((0.0, 0.0), 1.0, 0.0).is_err());
    }

    #[test]
    fn shape_mean_chain_matches_elbo_finite_difference() {
        let toy =
            GammaPoissonToy::new(vec![2, 4, 1], GammaParams::new(1.5, 0.8).unwrap()).unwrap();
        let (shape, mean) = (2.5, 1.3);
        let q = GammaParams::new(shape, shape / mean).unwrap();
        let grad = toy.analytic_elbo_grad(&q).unwrap();
        let (g_shape, g_mean) = gamma_shape_mean_chain((grad[0], grad[1]), shape, mean).unwrap();
        let h = 1e-6;
        let elbo = |a: f64, m: f64| {
            toy.analytic_elbo(&GammaParams::new(a, a / m).unwrap()).unwrap()
        };
        let fd_shape = (elbo(shape + h, mean) - elbo(shape - h, mean)) / (2.0 * h);
        let fd_mean = (elbo(shape, mean + h) - elbo(shape, mean - h)) / (2.0 * h);
        assert_rel(g_shape, fd_shape, 1e-4);
        assert_rel(g_mean, fd_mean, 1e-4);
    }

    fn toy_state(model: &GammaPoissonToy) -> VariationalState {
        VariationalState::init(
            model,
            &[BlockBinding {
                family: FamilyKind::Gamma,
                transform: TransformKind::GammaStd,
            }],
        )
        .unwrap()
    }

    #[test]
    fn fit_zero_iterations_is_identity() {
        let model =
            GammaPoissonToy::new(vec![2, 1], GammaParams::new(1.0, 1.0).unwrap()).unwrap();
        let init = toy_state(&model);
        let before = init.factors[0].params.clone();
        let cfg = FitConfig {
            iterations: 0,
            ..Default::default()
        };
        let run = fit(&model, init, &cfg, &mut RngState::from_seed(1));
        assert!(run.error.is_none());
        assert!(run.trace.rows.is_empty());
        assert_eq!(run.state.factors[0].params, before);
    }

    #[test]
    fn fit_recovers_gamma_poisson_posterior() {
        let model = GammaPoissonToy::new(
            vec![2, 1, 0, 3, 1, 2],
            GammaParams::new(1.0, 1.0).unwrap(),
        )
        .unwrap();
        let post = model.posterior();
        let cfg = FitConfig {
            iterations: 2000,
            step: StepSizeConfig::with_eta(0.5),
            ..Default::default()
        };
        let run = fit(
            &model,
            toy_state(&model),
            &cfg,
            &mut RngState::substream(2024, crate::rng::stream::TRAINING),
        );
        assert!(run.error.is_none(), "{:?}", run.error);
        let FamilyParams::Gamma(fitted) = &run.state.factors[0].params else {
            panic!("family changed");
        };
        assert!(
            (fitted.shape - post.shape).abs() / post.shape < 0.10,
            "shape {} vs posterior {}",
            fitted.shape,
            post.shape
        );
        assert!(
            (fitted.rate - post.rate).abs() / post.rate < 0.10,
            "rate {} vs posterior {}",
            fitted.rate,
            post.rate
        );
    }

    #[test]
    fn fit_improves_smoothed_elbo_on_beta_toy() {
        let model = BetaBernoulliToy::new(
            vec![true, true, false, true, false, true, true, false],
            crate::dists::BetaParams::new(1.0, 1.0).unwrap(),
        )
        .unwrap();
        let init = VariationalState::init(
            &model,
            &[BlockBinding {
                family: FamilyKind::Beta,
                transform: TransformKind::BetaLogit(BetaSigmaMode::StdDev),
            }],
        )
        .unwrap();
        let cfg = FitConfig {
            iterations: 2000,
            step: StepSizeConfig::with_eta(0.5),
            ..Default::default()
        };
        let run = fit(&model, init, &cfg, &mut RngState::from_seed(13));
        assert!(run.error.is_none());
        let early = smoothed_elbo(&run.trace, 1, 50).unwrap();
        let late = smoothed_elbo(&run.trace, 2000, 50).unwrap();
        assert!(late > early, "smoothed ELBO {early} -> {late}");
    }

    #[test]
    fn fit_is_deterministic_given_seed() {
        let model =
            GammaPoissonToy::new(vec![2, 1, 4], GammaParams::new(1.0, 1.0).unwrap()).unwrap();
        let cfg = FitConfig {
            iterations: 50,
            ..Default::default()
        };
        let a = fit(&model, toy_state(&model), &cfg, &mut RngState::from_seed(7));
        let b = fit(&model, toy_state(&model), &cfg, &mut RngState::from_seed(7));
        assert_eq!(a.state.factors[0].params, b.state.factors[0].params);
        for (ra, rb) in a.trace.rows.iter().zip(&b.trace.rows) {
            assert_eq!(ra.iteration, rb.iteration);
            assert_eq!(ra.elbo.to_bits(), rb.elbo.to_bits());
            assert_eq!(ra.grad_norm.to_bits(), rb.grad_norm.to_bits());
        }
    }

    #[test]
    fn params_stay_positive_throughout() {
        let model =
            GammaPoissonToy::new(vec![0, 0, 0, 9], GammaParams::new(0.5, 2.0).unwrap()).unwrap();
        let cfg = FitConfig {
            iterations: 400,
            step: StepSizeConfig::with_eta(5.0),
            ..Default::default()
        };
        let run = fit(&model, toy_state(&model), &cfg, &mut RngState::from_seed(3));
        assert!(run.error.is_none());
        let FamilyParams::Gamma(p) = &run.state.factors[0].params else {
            panic!()
        };
        assert!(p.shape > 0.0 && p.rate > 0.0);
    }
}
