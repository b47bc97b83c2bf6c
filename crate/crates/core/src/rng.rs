//! Deterministic, splittable random number generation and samplers.
//!
//! The generator is xoshiro256++ seeded through a splitmix64 expansion. A
//! fixed seed reproduces the exact sample stream across runs and platforms.
//! Substreams are derived by hashing `(seed, label)`, so parallel workers
//! indexed by trial number draw from non-overlapping streams regardless of
//! scheduling.

use crate::error::{Error, Result};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn splitmix_next(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn mix64(z: u64) -> u64 {
    let mut state = z;
    splitmix_next(&mut state)
}

/// Deterministic random generator state. Single-owner; use [`RngState::fork`]
/// to hand independent substreams to parallel workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    s: [u64; 4],
}

/// Key for a family of indexed substreams, cheap to share across threads.
#[derive(Debug, Clone, Copy)]
pub struct StreamFamily {
    key: u64,
}

impl StreamFamily {
    /// The substream for a given trial index. Same key and index always
    /// yield the same stream.
    pub fn stream(&self, index: u64) -> RngState {
        RngState::substream(self.key, index)
    }
}

impl RngState {
    pub fn from_seed(seed: u64) -> Self {
        let mut st = seed;
        Self::expand(&mut st)
    }

    /// Derive a named substream of a root seed without consuming state.
    pub fn substream(seed: u64, label: u64) -> Self {
        let mut st = mix64(seed ^ mix64(label ^ 0xA076_1D64_78BD_642F));
        Self::expand(&mut st)
    }

    fn expand(st: &mut u64) -> Self {
        let mut s = [
            splitmix_next(st),
            splitmix_next(st),
            splitmix_next(st),
            splitmix_next(st),
        ];
        if s.iter().all(|&w| w == 0) {
            s[0] = GOLDEN;
        }
        RngState { s }
    }

    /// Split off an independent child stream, advancing this one.
    pub fn split(&mut self) -> RngState {
        let key = self.next_u64();
        RngState::substream(key, 0x5EED)
    }

    /// Capture a key for indexed substreams (one draw from this stream).
    pub fn fork(&mut self) -> StreamFamily {
        StreamFamily {
            key: self.next_u64(),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform draw on the open interval (0, 1); exact endpoints are rejected
    /// so downstream logs and logits stay finite.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        loop {
            let u = (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Standard normal draw via the Marsaglia polar method.
    pub fn standard_normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Gamma draw with shape `shape` and rate `rate` by the Marsaglia-Tsang
    /// squeeze method; shapes below one use the `u^{1/shape}` boost.
    pub fn gamma(&mut self, shape: f64, rate: f64) -> Result<f64> {
        if !shape.is_finite() || shape <= 0.0 || !rate.is_finite() || rate <= 0.0 {
            return Err(Error::Domain(format!(
                "gamma sampler requires shape > 0 and rate > 0, got ({shape}, {rate})"
            )));
        }
        let z = if shape < 1.0 {
            let boost = self.uniform().powf(1.0 / shape);
            self.gamma_unit_rate(shape + 1.0) * boost
        } else {
            self.gamma_unit_rate(shape)
        };
        Ok(z / rate)
    }

    fn gamma_unit_rate(&mut self, shape: f64) -> f64 {
        debug_assert!(shape >= 1.0);
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.standard_normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v3 = v * v * v;
            let u = self.uniform();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 {
                return d * v3;
            }
            if u.ln() < 0.5 * x2 + d * (1.0 - v3 + v3.ln()) {
                return d * v3;
            }
        }
    }

    /// Beta draw as a ratio of two unit-rate gammas.
    pub fn beta(&mut self, alpha: f64, beta: f64) -> Result<f64> {
        let g1 = self.gamma(alpha, 1.0)?;
        let g2 = self.gamma(beta, 1.0)?;
        let sum = g1 + g2;
        if sum <= 0.0 {
            return Err(Error::Numerical(
                "beta sampler: both gamma draws underflowed".into(),
            ));
        }
        Ok(g1 / sum)
    }

    /// Dirichlet draw as normalized gammas.
    pub fn dirichlet(&mut self, alpha: &[f64]) -> Result<Vec<f64>> {
        if alpha.len() < 2 {
            return Err(Error::Domain(
                "dirichlet sampler requires at least 2 components".into(),
            ));
        }
        let mut g = Vec::with_capacity(alpha.len());
        let mut sum = 0.0;
        for &a in alpha {
            let v = self.gamma(a, 1.0)?;
            sum += v;
            g.push(v);
        }
        if sum <= 0.0 {
            return Err(Error::Numerical(
                "dirichlet sampler: all gamma draws underflowed".into(),
            ));
        }
        for v in &mut g {
            *v /= sum;
        }
        Ok(g)
    }

    /// Poisson draw by counting unit-exponential arrivals.
    pub fn poisson(&mut self, lambda: f64) -> Result<u64> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Domain(format!(
                "poisson sampler requires lambda >= 0, got {lambda}"
            )));
        }
        if lambda == 0.0 {
            return Ok(0);
        }
        let mut count = 0u64;
        let mut acc = -self.uniform().ln();
        while acc <= lambda {
            count += 1;
            acc += -self.uniform().ln();
        }
        Ok(count)
    }

    pub fn bernoulli(&mut self, p: f64) -> Result<bool> {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!(
                "bernoulli sampler requires p in [0, 1], got {p}"
            )));
        }
        Ok(self.uniform() < p)
    }
}

/// Labels for the named substreams every run derives from its config seed.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAINING: u64 = 3;
    pub const EVAL: u64 = 4;
}
