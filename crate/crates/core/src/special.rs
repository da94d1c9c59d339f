//! Gamma-family special functions.

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Trigamma ψ₁(x) = d/dx ψ(x) for x > 0.
///
/// Shifts the argument up with ψ₁(x) = ψ₁(x + 1) + 1/x² and finishes with the
/// asymptotic series in 1/x.
pub fn trigamma(mut x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli-number tail: 1/x + 1/2x² + Σ B_{2k} / x^{2k+1}
    let tail = inv2
        * (1.0 / 6.0
            - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0)))));
    acc + inv + 0.5 * inv2 + inv * tail
}
