//! Standard normal density, tails and truncated-cell moments.
//!
//! All cell computations are done in log space so that cells lying deep in a
//! Gaussian tail keep full relative precision. The straddling case (cell
//! contains the origin) has mass bounded well away from underflow and uses the
//! erf difference directly.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Beyond this point `erfc(x / sqrt 2)` is too close to the subnormal range.
const ASYMPTOTIC_TAIL: f64 = 35.0;

pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn log_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return f64::NEG_INFINITY;
    }
    -0.5 * x * x - LN_SQRT_2PI
}

pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Phi(x)`.
pub fn sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// `log(1 - Phi(x))`, accurate for large positive `x`.
pub fn log_sf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    if x < ASYMPTOTIC_TAIL {
        return sf(x).ln();
    }
    let z = 1.0 / (x * x);
    let series = 1.0 - z * (1.0 - 3.0 * z * (1.0 - 5.0 * z * (1.0 - 7.0 * z)));
    log_pdf(x) - x.ln() + series.ln()
}

/// `log(1 - exp(a))` for `a <= 0`.
pub fn log1mexp(a: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        0.0
    } else if a > -LN_2 {
        (-a.exp_m1()).ln()
    } else {
        (-a.exp()).ln_1p()
    }
}

/// Mass and conditional mean of a standard normal restricted to `(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellMoments {
    /// `log(Phi(hi) - Phi(lo))`
    pub log_mass: f64,
    /// `E[xi | lo < xi < hi] = (phi(lo) - phi(hi)) / mass`
    pub mean: f64,
}

pub fn cell_moments(lo: f64, hi: f64) -> CellMoments {
    debug_assert!(lo <= hi, "cell bounds out of order: {lo} > {hi}");
    let log_mass = if lo >= 0.0 {
        let a = log_sf(lo);
        a + log1mexp(log_sf(hi) - a)
    } else if hi <= 0.0 {
        let a = log_sf(-hi);
        a + log1mexp(log_sf(-lo) - a)
    } else {
        (0.5 * (libm::erf(hi * FRAC_1_SQRT_2) - libm::erf(lo * FRAC_1_SQRT_2))).ln()
    };
    let mean = if log_mass == f64::NEG_INFINITY {
        // zero-width cell: the conditional law collapses onto the point
        lo
    } else {
        (log_pdf(lo) - log_mass).exp() - (log_pdf(hi) - log_mass).exp()
    };
    CellMoments { log_mass, mean }
}
