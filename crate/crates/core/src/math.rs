//! Numerically stable scalar helpers.

use alloc::vec::Vec;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// `log σ(x) = -softplus(-x)`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Logistic function evaluated through log space.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    libm::exp(log_sigmoid(x))
}

/// Max-shifted log-sum-exp. Entries equal to `-inf` are ignored; an all `-inf`
/// slice returns `-inf`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = xs
        .iter()
        .filter(|x| **x != f64::NEG_INFINITY)
        .map(|x| libm::exp(x - m))
        .sum();
    m + libm::log(s)
}

/// Log-softmax of `logits / temperature`. `-inf` logits stay masked.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let z = logsumexp(&scaled);
    scaled.iter().map(|x| x - z).collect()
}

/// Central-difference relative error with the `max(|a|, |n|, 1e-8)` denominator.
#[inline]
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}
