//! Binary relative entropy, its partial inverse, and the two certificate
//! formulas.
//!
//! Both certificates bound the population 01-error of the trained hypothesis
//! with probability `1 - delta` over the draw of (dataset, initialization).
//! The shared complexity bracket is
//!
//! ```text
//! complexity + ln K + xi_log + ln(1/delta)
//! ```
//!
//! where `complexity` is the log prior-density ratio plus the Laplacian
//! integral tracked along the training trajectory, `K` the number of
//! pre-declared stopping times (union bound), and `xi_log` the log of the
//! moment constant, `ln(2 sqrt m)` for losses in [0, 1]. The bracket may come
//! out negative; it is clamped at zero, which only loosens the bound.

use crate::{Error, Result};

/// Everything the two bound formulas consume.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundInputs {
    /// Empirical 01-loss on the training sample, in [0, 1].
    pub empirical_loss: f64,
    /// Log density ratio plus Laplacian integral (dimensionless, may be < 0).
    pub complexity: f64,
    /// Training sample count.
    pub m: usize,
    /// Tail probability, in (0, 1).
    pub delta: f64,
    /// Size of the stopping-time grid covered by the union bound.
    pub k: usize,
    /// Log of the moment constant xi; `ln(2 sqrt m)` for [0, 1]-valued losses.
    pub xi_log: f64,
}

impl BoundInputs {
    /// Inputs with the default `xi_log = ln(2 sqrt m)`.
    pub fn new(empirical_loss: f64, complexity: f64, m: usize, delta: f64, k: usize) -> Result<Self> {
        let xi_log = (2.0 * (m as f64).sqrt()).ln();
        Self::with_xi_log(empirical_loss, complexity, m, delta, k, xi_log)
    }

    pub fn with_xi_log(
        empirical_loss: f64,
        complexity: f64,
        m: usize,
        delta: f64,
        k: usize,
        xi_log: f64,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&empirical_loss) {
            return Err(Error::Domain(format!(
                "empirical loss {empirical_loss} outside [0, 1]"
            )));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::Domain(format!("delta {delta} outside (0, 1)")));
        }
        if m == 0 {
            return Err(Error::Domain("sample count m must be >= 1".into()));
        }
        if k == 0 {
            return Err(Error::Domain("horizon count K must be >= 1".into()));
        }
        if !complexity.is_finite() || !xi_log.is_finite() {
            return Err(Error::Domain("non-finite complexity or xi_log".into()));
        }
        Ok(Self { empirical_loss, complexity, m, delta, k, xi_log })
    }

    /// The clamped bracket `max(0, complexity + ln K + xi_log + ln(1/delta))`.
    fn bracket(&self) -> f64 {
        let raw = self.complexity + (self.k as f64).ln() + self.xi_log + (1.0 / self.delta).ln();
        raw.max(0.0)
    }

    /// `ln(K xi / delta)`, the part of the bracket that does not depend on the
    /// trajectory.
    pub fn penalty(&self) -> f64 {
        (self.k as f64).ln() + self.xi_log + (1.0 / self.delta).ln()
    }
}

/// Itemized pieces of the complexity bracket, kept for bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundComponents {
    pub log_density_ratio: f64,
    pub laplacian_integral: f64,
    /// `ln(K xi / delta)`.
    pub penalty: f64,
}

/// One evaluated certificate: both bound values plus their ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCertificate {
    pub inputs: BoundInputs,
    /// Square-root form, clamped into [0, 1].
    pub mcallester: f64,
    /// kl-inverse form, in [0, 1]. Always <= `mcallester` when both are < 1.
    pub kl_inv: f64,
    pub components: BoundComponents,
}

impl BoundCertificate {
    /// Evaluate both bounds from itemized complexity components.
    pub fn evaluate(
        empirical_loss: f64,
        log_density_ratio: f64,
        laplacian_integral: f64,
        m: usize,
        delta: f64,
        k: usize,
    ) -> Result<Self> {
        let complexity = log_density_ratio + laplacian_integral;
        let inputs = BoundInputs::new(empirical_loss, complexity, m, delta, k)?;
        let components = BoundComponents {
            log_density_ratio,
            laplacian_integral,
            penalty: inputs.penalty(),
        };
        Ok(Self {
            mcallester: mcallester_bound(&inputs),
            kl_inv: kl_bound(&inputs),
            inputs,
            components,
        })
    }
}

/// Relative entropy between Bernoulli(u) and Bernoulli(v), with the
/// convention `0 ln 0 = 0`.
///
/// `v` must lie in (0, 1) unless `u == v` (so `binary_kl(0, 0)` and
/// `binary_kl(1, 1)` are 0).
pub fn binary_kl(u: f64, v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Domain(format!("u = {u} outside [0, 1]")));
    }
    if !(v > 0.0 && v < 1.0) {
        if u == v {
            return Ok(0.0);
        }
        return Err(Error::Domain(format!("v = {v} outside (0, 1)")));
    }
    Ok(binary_kl_inner(u, v))
}

/// Core formula; assumes `u` in [0, 1], returns +inf for `v` at an endpoint
/// with `u != v`.
fn binary_kl_inner(u: f64, v: f64) -> f64 {
    if u == v {
        return 0.0;
    }
    if v <= 0.0 || v >= 1.0 {
        return f64::INFINITY;
    }
    let a = if u == 0.0 { 0.0 } else { u * (u / v).ln() };
    let b = if u == 1.0 {
        0.0
    } else {
        (1.0 - u) * ((1.0 - u) / (1.0 - v)).ln()
    };
    a + b
}

/// Partial inverse of [`binary_kl`] in its second argument:
/// `sup { v in [0, 1] : kl(u||v) <= c }`.
///
/// Negative `c` is clamped to 0. Monotone nondecreasing in both arguments and
/// always >= `u`. Bisection runs to floating-point exhaustion of the bracket
/// (at most 200 iterations) and returns the infeasible endpoint, so the result
/// never understates the supremum.
pub fn kl_inverse(u: f64, c: f64) -> f64 {
    assert!((0.0..=1.0).contains(&u), "u = {u} outside [0, 1]");
    assert!(!c.is_nan(), "c is NaN");
    if c <= 0.0 {
        return u;
    }
    if u >= 1.0 {
        return 1.0;
    }
    let mut lo = u; // kl(u, lo) <= c
    let mut hi = 1.0; // kl(u, hi) > c, or the saturation point
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break; // bracket exhausted at f64 resolution
        }
        if binary_kl_inner(u, mid) <= c {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Square-root certificate:
/// `min(1, loss + sqrt(bracket / (2m)))` with the clamped bracket.
pub fn mcallester_bound(b: &BoundInputs) -> f64 {
    let v = b.empirical_loss + (b.bracket() / (2.0 * b.m as f64)).sqrt();
    v.min(1.0)
}

/// kl-inverse certificate: `kl_inverse(loss, bracket / m)`.
pub fn kl_bound(b: &BoundInputs) -> f64 {
    kl_inverse(b.empirical_loss, b.bracket() / b.m as f64)
}
