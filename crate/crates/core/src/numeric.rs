//! Shared scalar helpers with overflow-safe tails.

/// ln(1 + e^x), linear for large x and exponentially small for very
/// negative x.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function, evaluated without overflowing either tail.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(z / (1 - z)) for z in the open unit interval.
pub fn logit(z: f64) -> f64 {
    (z / (1.0 - z)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_tails() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((softplus(0.0) - 2.0_f64.ln()).abs() < 1e-15);
        // softplus(x) - softplus(-x) = x
        for x in [-5.0, -0.3, 0.0, 2.2, 17.0] {
            assert!((softplus(x) - softplus(-x) - x).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_and_logit_invert() {
        for x in [-20.0, -1.0, 0.0, 0.5, 12.0] {
            assert!((logit(sigmoid(x)) - x).abs() < 1e-9);
        }
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) <= 1.0 && sigmoid(800.0) > 0.999);
    }
}
