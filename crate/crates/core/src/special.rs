//! Log-gamma, digamma and trigamma for positive real arguments.
//!
//! Each function shifts small arguments upward with the standard recurrences
//! until the argument is large enough for the asymptotic (Stirling / Bernoulli)
//! series to be accurate to roughly 1e-12, then evaluates the series.

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this the asymptotic expansions are not used directly.
const ASYMPTOTIC_MIN: f64 = 7.0;

/// Natural log of the gamma function for `x > 0`.
///
/// Returns `+inf` at zero and NaN for negative or NaN input.
pub fn ln_gamma(x: f64) -> f64 {
    if x.is_nan() || x < 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return f64::INFINITY;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    if x == 1.0 || x == 2.0 {
        return 0.0;
    }
    // ln Γ(x) = ln Γ(x + n) - ln(x (x+1) ... (x+n-1))
    let mut shift = 0.0;
    let mut y = x;
    let mut prod = 1.0;
    while y < ASYMPTOTIC_MIN {
        prod *= y;
        y += 1.0;
        // keep the running product well inside f64 range
        if !(1e-200..=1e200).contains(&prod) {
            shift += prod.ln();
            prod = 1.0;
        }
    }
    shift += prod.ln();
    stirling(y) - shift
}

fn stirling(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli terms B_2k / (2k (2k-1) x^(2k-1))
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2 * (1.0 / 1188.0 + inv2 * (-691.0 / 360_360.0))))));
    (x - 0.5) * x.ln() - x + LN_SQRT_2PI + series
}

/// Digamma ψ(x) = d/dx ln Γ(x) for `x > 0`.
pub fn digamma(x: f64) -> f64 {
    if x.is_nan() || x < 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return f64::NEG_INFINITY;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    // ψ(x) = ψ(x + 1) - 1/x
    let mut acc = 0.0;
    let mut y = x;
    while y < ASYMPTOTIC_MIN {
        acc -= 1.0 / y;
        y += 1.0;
    }
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    acc + y.ln() - 0.5 * inv - series
}

/// Trigamma ψ'(x) for `x > 0`.
pub fn trigamma(x: f64) -> f64 {
    if x.is_nan() || x < 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return f64::INFINITY;
    }
    if x.is_infinite() {
        return 0.0;
    }
    // ψ'(x) = ψ'(x + 1) + 1/x²
    let mut acc = 0.0;
    let mut y = x;
    while y < ASYMPTOTIC_MIN {
        acc += 1.0 / (y * y);
        y += 1.0;
    }
    let inv = 1.0 / y;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0
                        - inv2
                            * (1.0 / 42.0
                                - inv2
                                    * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * 691.0 / 2730.0)))));
    acc + series
}
