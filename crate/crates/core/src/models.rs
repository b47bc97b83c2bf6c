//! Model log-joints f(z) = log p(x, z) and their hand-derived latent
//! gradients: two conjugate toys with closed-form oracles, the sparse gamma
//! deep exponential family, and the beta-gamma matrix factorization model.
//!
//! Latents are flattened into one vector ordered by the model's
//! [`LatentLayout`]; gradients come back in the same order and are verified
//! against finite differences in the test suites.

use crate::dists::{BetaParams, GammaParams};
use crate::error::{Error, Result};
use crate::numeric::{logit, sigmoid, softplus};
use crate::rng::RngState;
use crate::specialfn::{digamma, log_gamma, trigamma};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Support {
    Positive,
    UnitInterval,
    Simplex { k: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub len: usize,
    pub support: Support,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentLayout {
    blocks: Vec<Block>,
    offsets: Vec<usize>,
}

impl LatentLayout {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut dim = 0;
        for (i, b) in blocks.iter().enumerate() {
            if b.len == 0 {
                return Err(Error::Config(format!("block {:?} is empty", b.name)));
            }
            if let Support::Simplex { k } = b.support {
                if k < 2 || b.len % k != 0 {
                    return Err(Error::Config(format!(
                        "simplex block {:?} has len {} not a multiple of k = {k}",
                        b.name, b.len
                    )));
                }
            }
            if blocks[..i].iter().any(|other| other.name == b.name) {
                return Err(Error::Config(format!("duplicate block name {:?}", b.name)));
            }
            offsets.push(dim);
            dim += b.len;
        }
        Ok(LatentLayout { blocks, offsets })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn total_dim(&self) -> usize {
        self.offsets
            .last()
            .map_or(0, |o| o + self.blocks.last().unwrap().len)
    }

    pub fn offset(&self, block_idx: usize) -> usize {
        self.offsets[block_idx]
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }
}

/// A probabilistic model: differentiable log-joint over flattened latents.
pub trait Model: Sync {
    fn layout(&self) -> &LatentLayout;

    fn log_joint(&self, z: &[f64]) -> Result<f64>;

    fn grad_log_joint(&self, z: &[f64]) -> Result<Vec<f64>>;

    /// Per-block prior means, used to seed the variational parameters.
    fn block_init_means(&self) -> Vec<f64>;
}

/// Models with an observation matrix that held-out entries can be scored
/// against: the predicted parameter is a Poisson rate for count models and
/// a Bernoulli probability otherwise.
pub trait ObservedModel: Model {
    fn data_shape(&self) -> (usize, usize);

    /// Predicted observation parameters given latents, row-major.
    fn predicted_params(&self, z: &[f64]) -> Result<Vec<f64>>;

    /// Log-likelihood of one observed value under a predicted parameter.
    fn entry_log_lik(&self, param: f64, value: f64) -> Result<f64>;

    /// True when observations are counts (enables perplexity).
    fn is_count_model(&self) -> bool;
}

fn check_layout_support(layout: &LatentLayout, z: &[f64]) -> Result<()> {
    if z.len() != layout.total_dim() {
        return Err(Error::Domain(format!(
            "latent vector has dim {}, layout expects {}",
            z.len(),
            layout.total_dim()
        )));
    }
    for (idx, b) in layout.blocks().iter().enumerate() {
        let off = layout.offset(idx);
        for &v in &z[off..off + b.len] {
            let ok = v.is_finite()
                && match b.support {
                    Support::Positive | Support::Simplex { .. } => v > 0.0,
                    Support::UnitInterval => v > 0.0 && v < 1.0,
                };
            if !ok {
                return Err(Error::Domain(format!(
                    "latent {v} outside support of block {:?}",
                    b.name
                )));
            }
        }
    }
    Ok(())
}

fn log_gamma_pdf(z: f64, shape: f64, rate: f64) -> Result<f64> {
    Ok(shape * rate.ln() - log_gamma(shape)? + (shape - 1.0) * z.ln() - rate * z)
}

fn log_poisson_pmf(x: u64, lambda: f64) -> Result<f64> {
    if lambda <= 0.0 {
        return if x == 0 {
            Ok(-lambda)
        } else {
            Err(Error::Numerical(format!(
                "Poisson rate underflowed to {lambda} with count {x}"
            )))
        };
    }
    Ok(x as f64 * lambda.ln() - lambda - log_gamma(x as f64 + 1.0)?)
}

/// Dense nonnegative-integer observations, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u64>,
}

impl CountMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "count matrix: {} values for shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(CountMatrix { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u64 {
        self.data[r * self.cols + c]
    }
}

/// Dense binary observations, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
}

impl BinaryMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "binary matrix: {} values for shape {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|&b| b > 1) {
            return Err(Error::Config("binary matrix entries must be 0 or 1".into()));
        }
        Ok(BinaryMatrix { rows, cols, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.cols + c]
    }
}

// ---------------------------------------------------------------------------
// Conjugate toys
// ---------------------------------------------------------------------------

/// Gamma prior on a single positive rate, Poisson observations. Conjugate,
/// so the posterior, marginal likelihood, and the ELBO for a gamma
/// variational factor are all closed-form oracles.
pub struct GammaPoissonToy {
    pub data: Vec<u64>,
    pub prior: GammaParams,
    layout: LatentLayout,
}

impl GammaPoissonToy {
    pub fn new(data: Vec<u64>, prior: GammaParams) -> Result<Self> {
        prior.validate()?;
        let layout = LatentLayout::new(vec![Block {
            name: "z".into(),
            len: 1,
            support: Support::Positive,
        }])?;
        Ok(GammaPoissonToy {
            data,
            prior,
            layout,
        })
    }

    fn count_sum(&self) -> u64 {
        self.data.iter().sum()
    }

    pub fn posterior(&self) -> GammaParams {
        GammaParams {
            shape: self.prior.shape + self.count_sum() as f64,
            rate: self.prior.rate + self.data.len() as f64,
        }
    }

    /// log p(x) in negative-binomial closed form.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let a = self.prior.shape;
        let b = self.prior.rate;
        let s = self.count_sum() as f64;
        let n = self.data.len() as f64;
        let mut lml = a * b.ln() - log_gamma(a)? + log_gamma(a + s)? - (a + s) * (b + n).ln();
        for &x in &self.data {
            lml -= log_gamma(x as f64 + 1.0)?;
        }
        Ok(lml)
    }

    /// Exact ELBO for q = Gamma(α, β), using E[z] = α/β and
    /// E[log z] = ψ(α) − log β.
    pub fn analytic_elbo(&self, q: &GammaParams) -> Result<f64> {
        q.validate()?;
        let a = self.prior.shape;
        let b = self.prior.rate;
        let s = self.count_sum() as f64;
        let n = self.data.len() as f64;
        let e_log_z = digamma(q.shape)? - q.rate.ln();
        let e_z = q.shape / q.rate;
        let mut expected_f = (a - 1.0 + s) * e_log_z - (b + n) * e_z + a * b.ln() - log_gamma(a)?;
        for &x in &self.data {
            expected_f -= log_gamma(x as f64 + 1.0)?;
        }
        let entropy =
            q.shape - q.rate.ln() + log_gamma(q.shape)? + (1.0 - q.shape) * digamma(q.shape)?;
        Ok(expected_f + entropy)
    }

    /// Exact ELBO gradient with respect to (shape, rate).
    pub fn analytic_elbo_grad(&self, q: &GammaParams) -> Result<[f64; 2]> {
        q.validate()?;
        let a = self.prior.shape;
        let b = self.prior.rate;
        let s = self.count_sum() as f64;
        let n = self.data.len() as f64;
        let t1 = trigamma(q.shape)?;
        let d_shape = (a - 1.0 + s) * t1 - (b + n) / q.rate + 1.0 + (1.0 - q.shape) * t1;
        let d_rate =
            -(a - 1.0 + s) / q.rate + (b + n) * q.shape / (q.rate * q.rate) - 1.0 / q.rate;
        Ok([d_shape, d_rate])
    }
}

impl Model for GammaPoissonToy {
    fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    fn log_joint(&self, z: &[f64]) -> Result<f64> {
        check_layout_support(&self.layout, z)?;
        let z = z[0];
        let mut f = log_gamma_pdf(z, self.prior.shape, self.prior.rate)?;
        for &x in &self.data {
            f += log_poisson_pmf(x, z)?;
        }
        Ok(f)
    }

    fn grad_log_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_layout_support(&self.layout, z)?;
        let z = z[0];
        let s = self.count_sum() as f64;
        let n = self.data.len() as f64;
        Ok(vec![(self.prior.shape - 1.0 + s) / z - self.prior.rate - n])
    }

    fn block_init_means(&self) -> Vec<f64> {
        vec![self.prior.mean()]
    }
}

impl ObservedModel for GammaPoissonToy {
    fn data_shape(&self) -> (usize, usize) {
        (self.data.len(), 1)
    }

    fn predicted_params(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_layout_support(&self.layout, z)?;
        Ok(vec![z[0]; self.data.len()])
    }

    fn entry_log_lik(&self, param: f64, value: f64) -> Result<f64> {
        log_poisson_pmf(value as u64, param)
    }

    fn is_count_model(&self) -> bool {
        true
    }
}

/// Beta prior on a single probability, Bernoulli observations.
pub struct BetaBernoulliToy {
    pub data: Vec<bool>,
    pub prior: BetaParams,
    layout: LatentLayout,
}

impl BetaBernoulliToy {
    pub fn new(data: Vec<bool>, prior: BetaParams) -> Result<Self> {
        prior.validate()?;
        let layout = LatentLayout::new(vec![Block {
            name: "z".into(),
            len: 1,
            support: Support::UnitInterval,
        }])?;
        Ok(BetaBernoulliToy {
            data,
            prior,
            layout,
        })
    }

    fn heads(&self) -> f64 {
        self.data.iter().filter(|&&b| b).count() as f64
    }

    fn tails(&self) -> f64 {
        self.data.len() as f64 - self.heads()
    }

    pub fn posterior(&self) -> BetaParams {
        BetaParams {
            alpha: self.prior.alpha + self.heads(),
            beta: self.prior.beta + self.tails(),
        }
    }

    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let post = self.posterior();
        Ok(crate::dists::log_beta(post.alpha, post.beta)?
            - crate::dists::log_beta(self.prior.alpha, self.prior.beta)?)
    }

    pub fn analytic_elbo(&self, q: &BetaParams) -> Result<f64> {
        q.validate()?;
        let (a, b) = (self.prior.alpha, self.prior.beta);
        let dg_sum = digamma(q.alpha + q.beta)?;
        let e_log_z = digamma(q.alpha)? - dg_sum;
        let e_log_1mz = digamma(q.beta)? - dg_sum;
        let expected_f = (a - 1.0 + self.heads()) * e_log_z
            + (b - 1.0 + self.tails()) * e_log_1mz
            - crate::dists::log_beta(a, b)?;
        let qsum = q.alpha + q.beta;
        let entropy = crate::dists::log_beta(q.alpha, q.beta)?
            - (q.alpha - 1.0) * digamma(q.alpha)?
            - (q.beta - 1.0) * digamma(q.beta)?
            + (qsum - 2.0) * digamma(qsum)?;
        Ok(expected_f + entropy)
    }

    pub fn analytic_elbo_grad(&self, q: &BetaParams) -> Result<[f64; 2]> {
        q.validate()?;
        let (a, b) = (self.prior.alpha, self.prior.beta);
        let (h, t) = (self.heads(), self.tails());
        let qsum = q.alpha + q.beta;
        let t_sum = trigamma(qsum)?;
        let d_alpha = (a - 1.0 + h) * (trigamma(q.alpha)? - t_sum) - (b - 1.0 + t) * t_sum
            - (q.alpha - 1.0) * trigamma(q.alpha)?
            + (qsum - 2.0) * t_sum;
        let d_beta = (b - 1.0 + t) * (trigamma(q.beta)? - t_sum) - (a - 1.0 + h) * t_sum
            - (q.beta - 1.0) * trigamma(q.beta)?
            + (qsum - 2.0) * t_sum;
        Ok([d_alpha, d_beta])
    }
}

impl Model for BetaBernoulliToy {
    fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    fn log_joint(&self, z: &[f64]) -> Result<f64> {
        check_layout_support(&self.layout, z)?;
        let z = z[0];
        let f = (self.prior.alpha - 1.0) * z.ln()
            + (self.prior.beta - 1.0) * (1.0 - z).ln()
            - crate::dists::log_beta(self.prior.alpha, self.prior.beta)?
            + self.heads() * z.ln()
            + self.tails() * (1.0 - z).ln();
        Ok(f)
    }

    fn grad_log_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_layout_support(&self.layout, z)?;
        let z = z[0];
        Ok(vec![
            (self.prior.alpha - 1.0 + self.heads()) / z
                - (self.prior.beta - 1.0 + self.tails()) / (1.0 - z),
        ])
    }

    fn block_init_means(&self) -> Vec<f64> {
        vec![self.prior.alpha / (self.prior.alpha + self.prior.beta)]
    }
}

impl ObservedModel for BetaBernoulliToy {
    fn data_shape(&self) -> (usize, usize) {
        (self.data.len(), 1)
    }

    fn predicted_params(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_layout_support(&self.layout, z)?;
        Ok(vec![z[0]; self.data.len()])
    }

    fn entry_log_lik(&self, param: f64, value: f64) -> Result<f64> {
        bernoulli_log_lik(param, value)
    }

    fn is_count_model(&self) -> bool {
        false
    }
}

fn bernoulli_log_lik(param: f64, value: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&param) {
        return Err(Error::Domain(format!("Bernoulli parameter {param}")));
    }
    let eta = logit(param.clamp(1e-300, 1.0 - 1e-16));
    Ok(if value != 0.0 {
        -softplus(-eta)
    } else {
        -softplus(eta)
    })
}

// ---------------------------------------------------------------------------
// Sparse gamma deep exponential family
// ---------------------------------------------------------------------------

/// Layer sizes run bottom-up: `layer_sizes[0]` is the layer wired to the
/// observations, the last entry is the top layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseGammaDefConfig {
    pub layer_sizes: Vec<usize>,
    pub alpha_z: f64,
    pub weight_shape: f64,
    pub weight_rate: f64,
    pub top_shape: f64,
    pub top_rate: f64,
}

impl SparseGammaDefConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.is_empty() || self.layer_sizes.iter().any(|&k| k == 0) {
            return Err(Error::Config(
                "DEF needs at least one layer with nonzero width".into(),
            ));
        }
        for (name, v) in [
            ("alpha_z", self.alpha_z),
            ("weight_shape", self.weight_shape),
            ("weight_rate", self.weight_rate),
            ("top_shape", self.top_shape),
            ("top_rate", self.top_rate),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!(
                    "DEF config field {name} must be > 0"
                )));
            }
        }
        Ok(())
    }
}

pub struct SparseGammaDef {
    pub config: SparseGammaDefConfig,
    pub data: CountMatrix,
    layout: LatentLayout,
}

impl SparseGammaDef {
    pub fn new(config: SparseGammaDefConfig, data: CountMatrix) -> Result<Self> {
        config.validate()?;
        let layout = Self::build_layout(&config, data.rows, data.cols)?;
        Ok(SparseGammaDef {
            config,
            data,
            layout,
        })
    }

    /// Blocks: z1..zL (locations, bottom-up), then w0..w(L-1). Weight block
    /// wℓ (ℓ ≥ 1) has shape (K_{ℓ+1} × K_ℓ); w0 has shape (K_1 × D).
    fn build_layout(cfg: &SparseGammaDefConfig, n: usize, d: usize) -> Result<LatentLayout> {
        let ks = &cfg.layer_sizes;
        let levels = ks.len();
        let mut blocks = Vec::new();
        for (i, &k) in ks.iter().enumerate() {
            blocks.push(Block {
                name: format!("z{}", i + 1),
                len: n * k,
                support: Support::Positive,
            });
        }
        blocks.push(Block {
            name: "w0".into(),
            len: ks[0] * d,
            support: Support::Positive,
        });
        for ell in 1..levels {
            blocks.push(Block {
                name: format!("w{ell}"),
                len: ks[ell] * ks[ell - 1],
                support: Support::Positive,
            });
        }
        LatentLayout::new(blocks)
    }

    fn n_layers(&self) -> usize {
        self.config.layer_sizes.len()
    }

    fn z_block(&self, ell: usize) -> usize {
        // ell is a 1-based layer index
        ell - 1
    }

    fn w_block(&self, ell: usize) -> usize {
        self.n_layers() + ell
    }

    fn z_slice<'a>(&self, z: &'a [f64], ell: usize) -> &'a [f64] {
        let idx = self.z_block(ell);
        let off = self.layout.offset(idx);
        &z[off..off + self.layout.blocks()[idx].len]
    }

    fn w_slice<'a>(&self, z: &'a [f64], ell: usize) -> &'a [f64] {
        let idx = self.w_block(ell);
        let off = self.layout.offset(idx);
        &z[off..off + self.layout.blocks()[idx].len]
    }

    /// Conditional mean m_{nk} = Σ_{k'} z^{(ℓ+1)}_{nk'} w^{(ℓ)}_{k'k} for
    /// layer ℓ in 1..L, one row per observation.
    fn layer_means(&self, z: &[f64], ell: usize) -> Vec<f64> {
        let n = self.data.rows;
        let k_out = self.config.layer_sizes[ell - 1];
        let k_in = self.config.layer_sizes[ell];
        let z_upper = self.z_slice(z, ell + 1);
        let w = self.w_slice(z, ell);
        let mut m = vec![0.0; n * k_out];
        for row in 0..n {
            for kp in 0..k_in {
                let zu = z_upper[row * k_in + kp];
                for k in 0..k_out {
                    m[row * k_out + k] += zu * w[kp * k_out + k];
                }
            }
        }
        m
    }

    /// Poisson rates λ_{nd} = Σ_{k'} z^{(1)}_{nk'} w^{(0)}_{k'd}.
    fn rates(&self, z: &[f64]) -> Vec<f64> {
        let (n, d) = (self.data.rows, self.data.cols);
        let k1 = self.config.layer_sizes[0];
        let z1 = self.z_slice(z, 1);
        let w0 = self.w_slice(z, 0);
        let mut lambda = vec![0.0; n * d];
        for row in 0..n {
            for kp in 0..k1 {
                let zv = z1[row * k1 + kp];
                for col in 0..d {
                    lambda[row * d + col] += zv * w0[kp * d + col];
                }
            }
        }
        lambda
    }
}

impl Model for SparseGammaDef {
    fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    fn log_joint(&self, z: &[f64]) -> Result<f64> {
        check_layout_support(&self.layout, z)?;
        let levels = self.n_layers();
        let az = self.config.alpha_z;
        let mut f = 0.0;
        for &zv in self.z_slice(z, levels) {
            f += log_gamma_pdf(zv, self.config.top_shape, self.config.top_rate)?;
        }
        for ell in 1..levels {
            let m = self.layer_means(z, ell);
            for (&zv, &mv) in self.z_slice(z, ell).iter().zip(&m) {
                if mv <= 0.0 {
                    return Err(Error::Numerical(format!(
                        "layer {ell} conditional mean underflowed to {mv}"
                    )));
                }
                f += log_gamma_pdf(zv, az, az / mv)?;
            }
        }
        for ell in 0..levels {
            for &wv in self.w_slice(z, ell) {
                f += log_gamma_pdf(wv, self.config.weight_shape, self.config.weight_rate)?;
            }
        }
        let lambda = self.rates(z);
        for (i, &lam) in lambda.iter().enumerate() {
            f += log_poisson_pmf(self.data.data[i], lam)?;
        }
        Ok(f)
    }

    fn grad_log_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_layout_support(&self.layout, z)?;
        let levels = self.n_layers();
        let az = self.config.alpha_z;
        let n = self.data.rows;
        let d = self.data.cols;
        let mut grad = vec![0.0; z.len()];

        // own-prior terms for every location
        for ell in 1..=levels {
            let idx = self.z_block(ell);
            let off = self.layout.offset(idx);
            if ell == levels {
                for (i, &zv) in self.z_slice(z, ell).iter().enumerate() {
                    grad[off + i] +=
                        (self.config.top_shape - 1.0) / zv - self.config.top_rate;
                }
            } else {
                let m = self.layer_means(z, ell);
                for (i, &zv) in self.z_slice(z, ell).iter().enumerate() {
                    if m[i] <= 0.0 {
                        return Err(Error::Numerical("conditional mean underflowed".into()));
                    }
                    grad[off + i] += (az - 1.0) / zv - az / m[i];
                }
            }
        }

        // weight priors
        for ell in 0..levels {
            let idx = self.w_block(ell);
            let off = self.layout.offset(idx);
            for (i, &wv) in self.w_slice(z, ell).iter().enumerate() {
                grad[off + i] += (self.config.weight_shape - 1.0) / wv - self.config.weight_rate;
            }
        }

        // rate coupling: layer ℓ's prior depends on z^{(ℓ+1)} and w^{(ℓ)}
        // through m, with ∂/∂m log Gamma(z; a, a/m) = −a/m + a z / m²
        for ell in 1..levels {
            let k_out = self.config.layer_sizes[ell - 1];
            let k_in = self.config.layer_sizes[ell];
            let m = self.layer_means(z, ell);
            let z_lower = self.z_slice(z, ell);
            let z_upper = self.z_slice(z, ell + 1);
            let w = self.w_slice(z, ell);
            let z_upper_off = self.layout.offset(self.z_block(ell + 1));
            let w_off = self.layout.offset(self.w_block(ell));
            for row in 0..n {
                for k in 0..k_out {
                    let mv = m[row * k_out + k];
                    let zv = z_lower[row * k_out + k];
                    let dm = -az / mv + az * zv / (mv * mv);
                    for kp in 0..k_in {
                        grad[z_upper_off + row * k_in + kp] += dm * w[kp * k_out + k];
                        grad[w_off + kp * k_out + k] += dm * z_upper[row * k_in + kp];
                    }
                }
            }
        }

        // Poisson coupling to z1 and w0
        let k1 = self.config.layer_sizes[0];
        let lambda = self.rates(z);
        let z1 = self.z_slice(z, 1);
        let w0 = self.w_slice(z, 0);
        let z1_off = self.layout.offset(self.z_block(1));
        let w0_off = self.layout.offset(self.w_block(0));
        for row in 0..n {
            for col in 0..d {
                let lam = lambda[row * d + col];
                if lam <= 0.0 {
                    return Err(Error::Numerical("Poisson rate underflowed".into()));
                }
                let dl = self.data.get(row, col) as f64 / lam - 1.0;
                for kp in 0..k1 {
                    grad[z1_off + row * k1 + kp] += dl * w0[kp * d + col];
                    grad[w0_off + kp * d + col] += dl * z1[row * k1 + kp];
                }
            }
        }
        Ok(grad)
    }

    fn block_init_means(&self) -> Vec<f64> {
        let w_mean = self.config.weight_shape / self.config.weight_rate;
        let levels = self.n_layers();
        // ancestral mean cascade, top down
        let mut z_means = vec![0.0; levels];
        z_means[levels - 1] = self.config.top_shape / self.config.top_rate;
        for ell in (1..levels).rev() {
            z_means[ell - 1] = self.config.layer_sizes[ell] as f64 * z_means[ell] * w_mean;
        }
        let mut means = z_means;
        for _ in 0..levels {
            means.push(w_mean);
        }
        means
    }
}

impl ObservedModel for SparseGammaDef {
    fn data_shape(&self) -> (usize, usize) {
        (self.data.rows, self.data.cols)
    }

    fn predicted_params(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_layout_support(&self.layout, z)?;
        Ok(self.rates(z))
    }

    fn entry_log_lik(&self, param: f64, value: f64) -> Result<f64> {
        log_poisson_pmf(value as u64, param)
    }

    fn is_count_model(&self) -> bool {
        true
    }
}

/// Ancestral draw of latents plus two independent observation matrices
/// (training and held-out) from the same latents.
pub struct DefSynth {
    pub latents: Vec<f64>,
    pub data: CountMatrix,
    pub heldout: CountMatrix,
}

pub fn synth_sparse_gamma_def(
    config: &SparseGammaDefConfig,
    rows: usize,
    cols: usize,
    rng: &mut RngState,
) -> Result<DefSynth> {
    config.validate()?;
    let layout = SparseGammaDef::build_layout(config, rows, cols)?;
    let levels = config.layer_sizes.len();
    let mut latents = vec![0.0; layout.total_dim()];

    // weights first, then the top layer, then the downward pass
    for b in 0..levels {
        let idx = levels + b;
        let off = layout.offset(idx);
        for i in 0..layout.blocks()[idx].len {
            latents[off + i] = rng.gamma(config.weight_shape, config.weight_rate)?;
        }
    }
    {
        let idx = levels - 1;
        let off = layout.offset(idx);
        for i in 0..layout.blocks()[idx].len {
            latents[off + i] = rng.gamma(config.top_shape, config.top_rate)?;
        }
    }
    let probe = SparseGammaDef {
        config: config.clone(),
        data: CountMatrix::new(rows, cols, vec![0; rows * cols])?,
        layout: layout.clone(),
    };
    for ell in (1..levels).rev() {
        let m = probe.layer_means(&latents, ell);
        let off = layout.offset(probe.z_block(ell));
        for (i, &mv) in m.iter().enumerate() {
            if mv <= 0.0 {
                return Err(Error::Numerical(
                    "ancestral sampling produced a zero conditional mean".into(),
                ));
            }
            latents[off + i] = rng.gamma(config.alpha_z, config.alpha_z / mv)?;
        }
    }
    let lambda = probe.rates(&latents);
    let mut draw = |rng: &mut RngState| -> Result<CountMatrix> {
        let mut data = Vec::with_capacity(lambda.len());
        for &lam in &lambda {
            data.push(rng.poisson(lam)?);
        }
        CountMatrix::new(rows, cols, data)
    };
    let data = draw(rng)?;
    let heldout = draw(rng)?;
    Ok(DefSynth {
        latents,
        data,
        heldout,
    })
}

// ---------------------------------------------------------------------------
// Beta-gamma matrix factorization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaGammaMfConfig {
    pub k: usize,
    pub weight_shape: f64,
    pub weight_rate: f64,
}

impl BetaGammaMfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("MF needs k >= 1".into()));
        }
        if !self.weight_shape.is_finite()
            || self.weight_shape <= 0.0
            || !self.weight_rate.is_finite()
            || self.weight_rate <= 0.0
        {
            return Err(Error::Config("MF weight prior must be positive".into()));
        }
        Ok(())
    }
}

/// Binary observations through a logit link: uniform beta locations,
/// gamma weights.
pub struct BetaGammaMf {
    pub config: BetaGammaMfConfig,
    pub data: BinaryMatrix,
    layout: LatentLayout,
}

impl BetaGammaMf {
    pub fn new(config: BetaGammaMfConfig, data: BinaryMatrix) -> Result<Self> {
        config.validate()?;
        let layout = Self::build_layout(&config, data.rows, data.cols)?;
        Ok(BetaGammaMf {
            config,
            data,
            layout,
        })
    }

    fn build_layout(cfg: &BetaGammaMfConfig, n: usize, d: usize) -> Result<LatentLayout> {
        LatentLayout::new(vec![
            Block {
                name: "z".into(),
                len: n * cfg.k,
                support: Support::UnitInterval,
            },
            Block {
                name: "w".into(),
                len: cfg.k * d,
                support: Support::Positive,
            },
        ])
    }

    fn z_slice<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        &z[..self.layout.blocks()[0].len]
    }

    fn w_slice<'a>(&self, z: &'a [f64]) -> &'a [f64] {
        &z[self.layout.offset(1)..]
    }

    /// Link values η_{nd} = Σ_k logit(z_{nk}) w_{kd}.
    fn link(&self, z: &[f64]) -> Vec<f64> {
        let (n, d, k) = (self.data.rows, self.data.cols, self.config.k);
        let zs = self.z_slice(z);
        let ws = self.w_slice(z);
        let mut eta = vec![0.0; n * d];
        for row in 0..n {
            for kk in 0..k {
                let lz = logit(zs[row * k + kk]);
                for col in 0..d {
                    eta[row * d + col] += lz * ws[kk * d + col];
                }
            }
        }
        eta
    }
}

impl Model for BetaGammaMf {
    fn layout(&self) -> &LatentLayout {
        &self.layout
    }

    fn log_joint(&self, z: &[f64]) -> Result<f64> {
        check_layout_support(&self.layout, z)?;
        // uniform prior over z contributes zero
        let mut f = 0.0;
        for &wv in self.w_slice(z) {
            f += log_gamma_pdf(wv, self.config.weight_shape, self.config.weight_rate)?;
        }
        let eta = self.link(z);
        for (i, &e) in eta.iter().enumerate() {
            f += if self.data.data[i] == 1 {
                -softplus(-e)
            } else {
                -softplus(e)
            };
        }
        Ok(f)
    }

    fn grad_log_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_layout_support(&self.layout, z)?;
        let (n, d, k) = (self.data.rows, self.data.cols, self.config.k);
        let zs = self.z_slice(z);
        let ws = self.w_slice(z);
        let w_off = self.layout.offset(1);
        let mut grad = vec![0.0; z.len()];
        for (i, &wv) in ws.iter().enumerate() {
            grad[w_off + i] = (self.config.weight_shape - 1.0) / wv - self.config.weight_rate;
        }
        let eta = self.link(z);
        for row in 0..n {
            for col in 0..d {
                let resid = self.data.get(row, col) as f64 - sigmoid(eta[row * d + col]);
                for kk in 0..k {
                    let zv = zs[row * k + kk];
                    grad[row * k + kk] += resid * ws[kk * d + col] / (zv * (1.0 - zv));
                    grad[w_off + kk * d + col] += resid * logit(zv);
                }
            }
        }
        Ok(grad)
    }

    fn block_init_means(&self) -> Vec<f64> {
        vec![0.5, self.config.weight_shape / self.config.weight_rate]
    }
}

impl ObservedModel for BetaGammaMf {
    fn data_shape(&self) -> (usize, usize) {
        (self.data.rows, self.data.cols)
    }

    fn predicted_params(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_layout_support(&self.layout, z)?;
        Ok(self.link(z).into_iter().map(sigmoid).collect())
    }

    fn entry_log_lik(&self, param: f64, value: f64) -> Result<f64> {
        bernoulli_log_lik(param, value)
    }

    fn is_count_model(&self) -> bool {
        false
    }
}

pub struct MfSynth {
    pub latents: Vec<f64>,
    pub data: BinaryMatrix,
    pub heldout: BinaryMatrix,
}

pub fn synth_beta_gamma_mf(
    config: &BetaGammaMfConfig,
    rows: usize,
    cols: usize,
    rng: &mut RngState,
) -> Result<MfSynth> {
    config.validate()?;
    let k = config.k;
    let mut latents = vec![0.0; rows * k + k * cols];
    for v in latents[..rows * k].iter_mut() {
        *v = rng.uniform();
    }
    for v in latents[rows * k..].iter_mut() {
        *v = rng.gamma(config.weight_shape, config.weight_rate)?;
    }
    let probe = BetaGammaMf::new(
        config.clone(),
        BinaryMatrix::new(rows, cols, vec![0; rows * cols])?,
    )?;
    let eta = probe.link(&latents);
    let draw = |rng: &mut RngState| -> Result<BinaryMatrix> {
        let mut data = Vec::with_capacity(eta.len());
        for &e in &eta {
            data.push(rng.bernoulli(sigmoid(e))? as u8);
        }
        BinaryMatrix::new(rows, cols, data)
    };
    let data = draw(rng)?;
    let heldout = draw(rng)?;
    Ok(MfSynth {
        latents,
        data,
        heldout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn assert_rel(got: f64, want: f64, tol: f64) {
        assert!(
            (got - want).abs() <= tol * want.abs().max(1.0),
            "got {got}, want {want}"
        );
    }

    fn fd_gradient_check(model: &dyn Model, z: &[f64], tol: f64) {
        let grad = model.grad_log_joint(z).unwrap();
        for i in 0..z.len() {
            let step = 1e-6 * z[i].abs().max(1e-4);
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[i] += step;
            zm[i] -= step;
            let fd =
                (model.log_joint(&zp).unwrap() - model.log_joint(&zm).unwrap()) / (2.0 * step);
            let denom = fd.abs().max(grad[i].abs()).max(1.0);
            assert!(
                (grad[i] - fd).abs() <= tol * denom,
                "component {i}: grad {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn gamma_poisson_conjugacy() {
        let toy =
            GammaPoissonToy::new(vec![2, 1, 0, 3], GammaParams::new(1.5, 0.5).unwrap()).unwrap();
        let post = toy.posterior();
        assert_eq!(post.shape, 1.5 + 6.0);
        assert_eq!(post.rate, 0.5 + 4.0);
    }

    #[test]
    fn gamma_poisson_marginal_likelihood() {
        let toy = GammaPoissonToy::new(vec![0], GammaParams::new(1.0, 1.0).unwrap()).unwrap();
        assert_rel(toy.log_marginal_likelihood().unwrap(), -(2.0_f64.ln()), 1e-12);
    }

    #[test]
    fn gamma_poisson_elbo_gradient_zero_at_posterior() {
        let toy = GammaPoissonToy::new(vec![2, 1, 0, 3, 1], GammaParams::new(1.0, 1.0).unwrap())
            .unwrap();
        let g = toy.analytic_elbo_grad(&toy.posterior()).unwrap();
        assert!(g[0].abs() < 1e-10 && g[1].abs() < 1e-10, "{g:?}");
        // at the exact posterior the ELBO equals the log marginal likelihood
        assert_rel(
            toy.analytic_elbo(&toy.posterior()).unwrap(),
            toy.log_marginal_likelihood().unwrap(),
            1e-10,
        );
    }

    #[test]
    fn gamma_poisson_analytic_elbo_matches_fd_gradient() {
        let toy = GammaPoissonToy::new(vec![4, 2, 2], GammaParams::new(2.0, 1.0).unwrap()).unwrap();
        let q = GammaParams::new(3.3, 1.7).unwrap();
        let g = toy.analytic_elbo_grad(&q).unwrap();
        let h = 1e-6;
        let fd0 = (toy
            .analytic_elbo(&GammaParams::new(q.shape + h, q.rate).unwrap())
            .unwrap()
            - toy
                .analytic_elbo(&GammaParams::new(q.shape - h, q.rate).unwrap())
                .unwrap())
            / (2.0 * h);
        let fd1 = (toy
            .analytic_elbo(&GammaParams::new(q.shape, q.rate + h).unwrap())
            .unwrap()
            - toy
                .analytic_elbo(&GammaParams::new(q.shape, q.rate - h).unwrap())
                .unwrap())
            / (2.0 * h);
        assert_rel(g[0], fd0, 1e-6);
        assert_rel(g[1], fd1, 1e-6);
    }

    #[test]
    fn beta_bernoulli_conjugacy_and_marginal() {
        let toy =
            BetaBernoulliToy::new(vec![true, false, true], BetaParams::new(1.0, 1.0).unwrap())
                .unwrap();
        let post = toy.posterior();
        assert_eq!((post.alpha, post.beta), (3.0, 2.0));

        let single = BetaBernoulliToy::new(vec![true], BetaParams::new(1.0, 1.0).unwrap()).unwrap();
        assert_rel(single.log_marginal_likelihood().unwrap().exp(), 0.5, 1e-12);
    }

    #[test]
    fn beta_bernoulli_elbo_gradient_zero_at_posterior() {
        let toy = BetaBernoulliToy::new(
            vec![true, true, false, true, false],
            BetaParams::new(2.0, 1.0).unwrap(),
        )
        .unwrap();
        let g = toy.analytic_elbo_grad(&toy.posterior()).unwrap();
        assert!(g[0].abs() < 1e-10 && g[1].abs() < 1e-10, "{g:?}");
        assert_rel(
            toy.analytic_elbo(&toy.posterior()).unwrap(),
            toy.log_marginal_likelihood().unwrap(),
            1e-10,
        );
    }

    #[test]
    fn toy_gradients_match_finite_differences() {
        let toy = GammaPoissonToy::new(vec![2, 0, 5], GammaParams::new(1.2, 0.7).unwrap()).unwrap();
        fd_gradient_check(&toy, &[0.8], 1e-6);
        let toy2 =
            BetaBernoulliToy::new(vec![true, false], BetaParams::new(0.8, 1.4).unwrap()).unwrap();
        fd_gradient_check(&toy2, &[0.37], 1e-6);
    }

    fn desk_def_config() -> SparseGammaDefConfig {
        SparseGammaDefConfig {
            layer_sizes: vec![10, 5, 3],
            alpha_z: 0.1,
            weight_shape: 0.1,
            weight_rate: 0.3,
            top_shape: 0.1,
            top_rate: 0.1,
        }
    }

    #[test]
    fn def_single_layer_composes_terms() {
        // one layer, one factor, one observation, all latents at 1
        let cfg = SparseGammaDefConfig {
            layer_sizes: vec![1],
            alpha_z: 0.7, // unused at L = 1
            weight_shape: 0.1,
            weight_rate: 0.3,
            top_shape: 0.1,
            top_rate: 0.1,
        };
        let x = 2u64;
        let def = SparseGammaDef::new(cfg, CountMatrix::new(1, 1, vec![x]).unwrap()).unwrap();
        let f = def.log_joint(&[1.0, 1.0]).unwrap();
        let want = log_gamma_pdf(1.0, 0.1, 0.1).unwrap()
            + log_gamma_pdf(1.0, 0.1, 0.3).unwrap()
            + log_poisson_pmf(x, 1.0).unwrap();
        assert_rel(f, want, 1e-12);
    }

    #[test]
    fn def_gradient_matches_finite_differences() {
        let mut rng = RngState::from_seed(83);
        let mut data = Vec::new();
        for _ in 0..5 * 7 {
            data.push(rng.poisson(2.0).unwrap());
        }
        let def =
            SparseGammaDef::new(desk_def_config(), CountMatrix::new(5, 7, data).unwrap()).unwrap();
        let dim = def.layout().total_dim();
        for _ in 0..20 {
            let z: Vec<f64> = (0..dim).map(|_| 0.2 + 2.0 * rng.uniform()).collect();
            fd_gradient_check(&def, &z, 1e-5);
        }
    }

    #[test]
    fn def_count_change_hits_only_poisson_term() {
        let mut rng = RngState::from_seed(89);
        let data: Vec<u64> = (0..6).map(|_| rng.poisson(1.5).unwrap()).collect();
        let def1 = SparseGammaDef::new(
            desk_def_config(),
            CountMatrix::new(2, 3, data.clone()).unwrap(),
        )
        .unwrap();
        let mut data2 = data;
        data2[4] += 1;
        let def2 = SparseGammaDef::new(
            desk_def_config(),
            CountMatrix::new(2, 3, data2.clone()).unwrap(),
        )
        .unwrap();
        let dim = def1.layout().total_dim();
        let z: Vec<f64> = (0..dim).map(|i| 0.5 + 0.01 * i as f64).collect();
        let lambda = def1.rates(&z);
        let x_old = data2[4] - 1;
        let want_delta = lambda[4].ln() - (x_old as f64 + 1.0).ln();
        let delta = def2.log_joint(&z).unwrap() - def1.log_joint(&z).unwrap();
        assert_rel(delta, want_delta, 1e-10);
    }

    #[test]
    fn mf_link_at_half_is_half() {
        let cfg = BetaGammaMfConfig {
            k: 3,
            weight_shape: 0.1,
            weight_rate: 0.3,
        };
        let data = BinaryMatrix::new(2, 4, vec![1, 0, 1, 0, 0, 1, 1, 0]).unwrap();
        let mf = BetaGammaMf::new(cfg, data).unwrap();
        let dim = mf.layout().total_dim();
        let mut z = vec![0.5; dim];
        for (i, v) in z[2 * 3..].iter_mut().enumerate() {
            *v = 0.3 + 0.2 * i as f64;
        }
        let p = mf.predicted_params(&z).unwrap();
        for v in p {
            assert_rel(v, 0.5, 1e-12);
        }
    }

    #[test]
    fn mf_gradient_matches_finite_differences() {
        let mut rng = RngState::from_seed(97);
        let cfg = BetaGammaMfConfig {
            k: 5,
            weight_shape: 0.1,
            weight_rate: 0.3,
        };
        let data: Vec<u8> = (0..6 * 8).map(|_| rng.bernoulli(0.4).unwrap() as u8).collect();
        let mf = BetaGammaMf::new(cfg, BinaryMatrix::new(6, 8, data).unwrap()).unwrap();
        let n_z = 6 * 5;
        let dim = mf.layout().total_dim();
        for _ in 0..20 {
            let mut z = vec![0.0; dim];
            for v in z[..n_z].iter_mut() {
                *v = 0.05 + 0.9 * rng.uniform();
            }
            for v in z[n_z..].iter_mut() {
                *v = 0.2 + 2.0 * rng.uniform();
            }
            fd_gradient_check(&mf, &z, 1e-5);
        }
    }

    #[test]
    fn mf_flip_changes_f_by_logit_p() {
        let cfg = BetaGammaMfConfig {
            k: 2,
            weight_shape: 0.1,
            weight_rate: 0.3,
        };
        let data = BinaryMatrix::new(1, 2, vec![0, 1]).unwrap();
        let mut flipped_raw = data.data.clone();
        flipped_raw[0] = 1;
        let flipped = BinaryMatrix::new(1, 2, flipped_raw).unwrap();
        let mf0 = BetaGammaMf::new(cfg.clone(), data).unwrap();
        let mf1 = BetaGammaMf::new(cfg, flipped).unwrap();
        let z = vec![0.3, 0.7, 0.9, 1.4, 0.6, 0.2];
        let eta = mf0.link(&z)[0];
        let delta = mf1.log_joint(&z).unwrap() - mf0.log_joint(&z).unwrap();
        // flipping x: 0 → 1 adds log(p/(1−p)) = η
        assert_rel(delta, eta, 1e-10);
    }

    #[test]
    fn synth_is_deterministic_and_in_support() {
        let cfg = desk_def_config();
        let a = synth_sparse_gamma_def(&cfg, 20, 30, &mut RngState::from_seed(7)).unwrap();
        let b = synth_sparse_gamma_def(&cfg, 20, 30, &mut RngState::from_seed(7)).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.heldout, b.heldout);
        assert_eq!(a.latents, b.latents);
        // the model fits its own draw: log joint is finite there
        let def = SparseGammaDef::new(cfg, a.data).unwrap();
        assert!(def.log_joint(&a.latents).unwrap().is_finite());

        let mcfg = BetaGammaMfConfig {
            k: 5,
            weight_shape: 0.1,
            weight_rate: 0.3,
        };
        let s1 = synth_beta_gamma_mf(&mcfg, 30, 20, &mut RngState::from_seed(9)).unwrap();
        let s2 = synth_beta_gamma_mf(&mcfg, 30, 20, &mut RngState::from_seed(9)).unwrap();
        assert_eq!(s1.data, s2.data);
        assert!(s1.data.data.iter().all(|&v| v <= 1));
        let mf = BetaGammaMf::new(mcfg, s1.data).unwrap();
        assert!(mf.log_joint(&s1.latents).unwrap().is_finite());
    }

    #[test]
    fn out_of_support_latents_rejected() {
        let toy = GammaPoissonToy::new(vec![1], GammaParams::new(1.0, 1.0).unwrap()).unwrap();
        assert!(toy.log_joint(&[-0.5]).is_err());
        assert!(toy.log_joint(&[0.0]).is_err());
        let toy2 = BetaBernoulliToy::new(vec![true], BetaParams::new(1.0, 1.0).unwrap()).unwrap();
        assert!(toy2.log_joint(&[1.2]).is_err());
    }

    #[test]
    fn layout_rejects_duplicates_and_bad_simplex() {
        assert!(LatentLayout::new(vec![
            Block {
                name: "a".into(),
                len: 2,
                support: Support::Positive
            },
            Block {
                name: "a".into(),
                len: 2,
                support: Support::Positive
            },
        ])
        .is_err());
        assert!(LatentLayout::new(vec![Block {
            name: "s".into(),
            len: 5,
            support: Support::Simplex { k: 3 },
        }])
        .is_err());
    }
}
