//! Scalar special functions on the positive reals: log-gamma, digamma,
//! trigamma, and tetragamma.
//!
//! All four use the same scheme: shift the argument upward with the
//! recurrence until it reaches [`ASYMPTOTIC_CUTOFF`], then evaluate the
//! Bernoulli-number asymptotic expansion. Domain violations are reported,
//! never clamped; the callers guarantee positivity, so a bad argument here
//! means a bug upstream.

use crate::error::{Error, Result};

/// Arguments at or above this go straight to the asymptotic series.
const ASYMPTOTIC_CUTOFF: f64 = 6.0;

/// Bernoulli numbers B_2 .. B_16.
const BERNOULLI: [f64; 8] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
    7.0 / 6.0,
    -3617.0 / 510.0,
];

/// Stirling-series coefficients B_{2n} / (2n (2n-1)) for log-gamma.
const STIRLING: [f64; 8] = [
    1.0 / 12.0,
    -1.0 / 360.0,
    1.0 / 1260.0,
    -1.0 / 1680.0,
    1.0 / 1188.0,
    -691.0 / 360_360.0,
    1.0 / 156.0,
    -3617.0 / 122_400.0,
];

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_74;

fn check_arg(x: f64, what: &'static str) -> Result<()> {
    if !x.is_finite() || x <= 0.0 {
        return Err(Error::Domain(format!("{what} requires x > 0, got {x}")));
    }
    Ok(())
}

/// Natural log of the gamma function, ln Γ(x).
pub fn log_gamma(x: f64) -> Result<f64> {
    check_arg(x, "log_gamma")?;
    let mut shift = 0.0;
    let mut y = x;
    while y < ASYMPTOTIC_CUTOFF {
        shift += y.ln();
        y += 1.0;
    }
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv;
    for c in STIRLING {
        series += c * pow;
        pow *= inv2;
    }
    Ok((y - 0.5) * y.ln() - y + HALF_LN_TWO_PI + series - shift)
}

/// Digamma function ψ(x) = d/dx ln Γ(x).
pub fn digamma(x: f64) -> Result<f64> {
    check_arg(x, "digamma")?;
    let mut acc = 0.0;
    let mut y = x;
    while y < ASYMPTOTIC_CUTOFF {
        acc -= 1.0 / y;
        y += 1.0;
    }
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv2;
    for (n, b) in BERNOULLI.iter().enumerate() {
        series += b / (2.0 * (n as f64 + 1.0)) * pow;
        pow *= inv2;
    }
    Ok(acc + y.ln() - 0.5 * inv - series)
}

/// Trigamma function ψ₁(x), the derivative of the digamma.
pub fn trigamma(x: f64) -> Result<f64> {
    check_arg(x, "trigamma")?;
    let mut acc = 0.0;
    let mut y = x;
    while y < ASYMPTOTIC_CUTOFF {
        acc += 1.0 / (y * y);
        y += 1.0;
    }
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv * inv2;
    for b in BERNOULLI {
        series += b * pow;
        pow *= inv2;
    }
    Ok(acc + inv + 0.5 * inv2 + series)
}

/// Tetragamma function ψ₂(x), the second derivative of the digamma.
/// Strictly negative on the positive reals.
pub fn tetragamma(x: f64) -> Result<f64> {
    check_arg(x, "tetragamma")?;
    let mut acc = 0.0;
    let mut y = x;
    while y < ASYMPTOTIC_CUTOFF {
        acc -= 2.0 / (y * y * y);
        y += 1.0;
    }
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv2 * inv2;
    for (n, b) in BERNOULLI.iter().enumerate() {
        series += (2.0 * (n as f64 + 1.0) + 1.0) * b * pow;
        pow *= inv2;
    }
    Ok(acc - inv2 - inv * inv2 - series)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
    const ZETA_3: f64 = 1.202_056_903_159_594_3;

    fn assert_rel(got: f64, want: f64, tol: f64) {
        let denom = want.abs().max(1.0);
        assert!(
            (got - want).abs() <= tol * denom,
            "got {got}, want {want} (tol {tol})"
        );
    }

    /// Series oracle ψ(x) = -γ + Σ_{n≥0} (1/(n+1) - 1/(n+x)), truncated at N
    /// with an Euler-Maclaurin tail bound. Independent of the implementation.
    fn digamma_series_oracle(x: f64) -> f64 {
        let n_terms: usize = 1_000_000;
        let mut sum = 0.0;
        // small terms first
        for n in (0..n_terms).rev() {
            let nf = n as f64;
            sum += 1.0 / (nf + 1.0) - 1.0 / (nf + x);
        }
        let nf = n_terms as f64;
        // tail of Σ (x-1)/((n+1)(n+x)): integral plus half the first term
        let tail = ((nf + x) / (nf + 1.0)).ln() + (x - 1.0) / (2.0 * (nf + 1.0) * (nf + x));
        -EULER_GAMMA + sum + tail
    }

    /// Series oracle ψ₁(x) = Σ_{n≥0} 1/(n+x)², truncated with integral tail.
    fn trigamma_series_oracle(x: f64) -> f64 {
        let n_terms: usize = 1_000_000;
        let mut sum = 0.0;
        for n in (0..n_terms).rev() {
            let t = n as f64 + x;
            sum += 1.0 / (t * t);
        }
        let t = n_terms as f64 + x;
        sum + 1.0 / t + 1.0 / (2.0 * t * t) + 1.0 / (6.0 * t * t * t)
    }

    #[test]
    fn log_gamma_known_values() {
        assert!(log_gamma(1.0).unwrap().abs() < 1e-12);
        assert_rel(log_gamma(5.0).unwrap(), 24.0_f64.ln(), 1e-12);
        assert_rel(
            log_gamma(0.5).unwrap(),
            0.5 * std::f64::consts::PI.ln(),
            1e-12,
        );
        assert!(log_gamma(2.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn log_gamma_wide_range_vs_recurrence() {
        // ln Γ(x+1) = ln Γ(x) + ln x across fourteen decades
        let mut x = 1e-6;
        while x < 1e8 {
            let lhs = log_gamma(x + 1.0).unwrap();
            let rhs = log_gamma(x).unwrap() + x.ln();
            assert_rel(lhs, rhs, 1e-11);
            x *= 7.3;
        }
    }

    #[test]
    fn digamma_known_values() {
        assert_rel(digamma(1.0).unwrap(), -EULER_GAMMA, 1e-12);
        // ψ(10) = -γ + H_9
        let h9: f64 = (1..=9).map(|k| 1.0 / k as f64).sum();
        assert_rel(digamma(10.0).unwrap(), h9 - EULER_GAMMA, 1e-12);
        assert_rel(digamma(10.0).unwrap(), 2.251_752_589_066_721, 1e-10);
    }

    #[test]
    fn digamma_matches_series_oracle() {
        for &x in &[0.1, 0.5, 1.0, 2.3, 10.0, 41.7] {
            assert_rel(digamma(x).unwrap(), digamma_series_oracle(x), 1e-9);
        }
    }

    #[test]
    fn trigamma_known_values() {
        let pi2_6 = std::f64::consts::PI.powi(2) / 6.0;
        assert_rel(trigamma(1.0).unwrap(), pi2_6, 1e-12);
        // ψ₁(2) = π²/6 - 1
        assert_rel(trigamma(2.0).unwrap(), pi2_6 - 1.0, 1e-12);
        assert_rel(trigamma(0.1).unwrap(), 101.433_299_150_792_76, 1e-9);
    }

    #[test]
    fn trigamma_matches_series_oracle() {
        for &x in &[0.1, 0.7, 1.0, 3.9, 25.0] {
            assert_rel(trigamma(x).unwrap(), trigamma_series_oracle(x), 1e-10);
        }
    }

    #[test]
    fn tetragamma_known_values() {
        assert_rel(tetragamma(1.0).unwrap(), -2.0 * ZETA_3, 1e-12);
        assert_rel(tetragamma(2.0).unwrap(), -2.0 * ZETA_3 + 2.0, 1e-12);
        for &x in &[0.05, 0.3, 1.0, 4.5, 100.0] {
            assert!(tetragamma(x).unwrap() < 0.0, "ψ₂({x}) must be negative");
        }
    }

    /// The recurrence can only hold to 1e-9 relative to the size of its
    /// terms; at small x the shifted side is dominated by 1/x powers.
    fn assert_recurrence(lhs: f64, base: f64, step: f64, tol: f64) {
        let scale = lhs.abs().max(base.abs()).max(step.abs()).max(1.0);
        assert!(
            (lhs - (base + step)).abs() <= tol * scale,
            "recurrence violated: {lhs} vs {base} + {step}"
        );
    }

    #[test]
    fn recurrences_hold_on_random_grid() {
        // ψ(x+1) = ψ(x) + 1/x and its two derivatives, 1000 points in (1e-3, 1e3)
        let mut state = 0x9e37_79b9_7f4a_7c15_u64;
        for _ in 0..1000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            let x = 1e-3 * (1e6_f64).powf(u);
            assert_recurrence(digamma(x + 1.0).unwrap(), digamma(x).unwrap(), 1.0 / x, 1e-9);
            assert_recurrence(
                trigamma(x + 1.0).unwrap(),
                trigamma(x).unwrap(),
                -1.0 / (x * x),
                1e-9,
            );
            assert_recurrence(
                tetragamma(x + 1.0).unwrap(),
                tetragamma(x).unwrap(),
                2.0 / (x * x * x),
                1e-9,
            );
        }
    }

    #[test]
    fn derivative_chain_by_finite_differences() {
        let h = 1e-5;
        for &x in &[0.3, 0.9, 2.1, 7.5, 40.0] {
            let fd_digamma = (log_gamma(x + h).unwrap() - log_gamma(x - h).unwrap()) / (2.0 * h);
            assert_rel(digamma(x).unwrap(), fd_digamma, 1e-5);
            let fd_trigamma = (digamma(x + h).unwrap() - digamma(x - h).unwrap()) / (2.0 * h);
            assert_rel(trigamma(x).unwrap(), fd_trigamma, 1e-5);
            let fd_tetragamma = (trigamma(x + h).unwrap() - trigamma(x - h).unwrap()) / (2.0 * h);
            assert_rel(tetragamma(x).unwrap(), fd_tetragamma, 1e-5);
        }
    }

    #[test]
    fn monotonicity_on_grid() {
        let grid: Vec<f64> = (1..400).map(|i| 0.01 * i as f64).collect();
        for pair in grid.windows(2) {
            assert!(digamma(pair[1]).unwrap() > digamma(pair[0]).unwrap());
            assert!(trigamma(pair[1]).unwrap() < trigamma(pair[0]).unwrap());
        }
    }

    #[test]
    fn domain_errors_reported() {
        for f in [log_gamma, digamma, trigamma, tetragamma] {
            assert!(f(0.0).is_err());
            assert!(f(-1.5).is_err());
            assert!(f(f64::NAN).is_err());
            assert!(f(f64::INFINITY).is_err());
        }
    }
}
