//! Gamma-family special functions used by the Dirichlet policy head.

pub use statrs::function::gamma::{digamma, ln_gamma};

/// Second derivative of `ln Γ(x)` for `x > 0`.
///
/// Shifts the argument above 12 with `ψ₁(x) = ψ₁(x + 1) + 1/x²`, then applies
/// the asymptotic Bernoulli expansion.
pub fn trigamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 12.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + inv
        + inv2 / 2.0
        + inv * inv2
            * (1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0))))
}
