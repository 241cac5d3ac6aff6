//! Rényi-DP accounting for one keyword release: exponential mechanism for `k`
//! composed with the Gaussian stability test, converted to (ε, δ)-DP.
//!
//! All privacy losses are in nats.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orders used when none are given.
pub const DEFAULT_ORDERS: [f64; 17] = [
    1.0625, 1.25, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 12.0, 16.0, 24.0, 32.0, 48.0, 64.0, 128.0, 256.0,
    512.0,
];

const SIGMA_MIN: f64 = 0.05;
const SIGMA_MAX: f64 = 200.0;

#[derive(Debug, Error, PartialEq)]
pub enum AccountantError {
    #[error("order grid must be non-empty with every order > 1")]
    BadOrders,
    #[error("order grids differ")]
    GridMismatch,
    #[error("invalid parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error(
        "target epsilon {target} unreachable: {binding} (best achievable {best:.4} at sigma = {sigma})"
    )]
    Unreachable {
        target: f64,
        best: f64,
        sigma: f64,
        binding: &'static str,
    },
}

fn check_orders(orders: &[f64]) -> Result<(), AccountantError> {
    if orders.is_empty() || orders.iter().any(|a| !(*a > 1.0) || !a.is_finite()) {
        return Err(AccountantError::BadOrders);
    }
    Ok(())
}

/// `alpha -> epsilon(alpha)` on a fixed grid of orders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    orders: Vec<f64>,
    eps: Vec<f64>,
}

impl RdpCurve {
    pub fn new(orders: Vec<f64>, eps: Vec<f64>) -> Result<Self, AccountantError> {
        check_orders(&orders)?;
        if orders.len() != eps.len() {
            return Err(AccountantError::GridMismatch);
        }
        if let Some(bad) = eps.iter().find(|e| !(**e >= 0.0) || !e.is_finite()) {
            return Err(AccountantError::InvalidParameter {
                name: "epsilon(alpha)",
                value: *bad,
            });
        }
        Ok(Self { orders, eps })
    }

    pub fn zero(orders: &[f64]) -> Result<Self, AccountantError> {
        Self::new(orders.to_vec(), vec![0.0; orders.len()])
    }

    pub fn orders(&self) -> &[f64] {
        &self.orders
    }

    pub fn values(&self) -> &[f64] {
        &self.eps
    }

    pub fn at(&self, alpha: f64) -> Option<f64> {
        self.orders
            .iter()
            .position(|a| *a == alpha)
            .map(|i| self.eps[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.orders.iter().copied().zip(self.eps.iter().copied())
    }
}

/// An RDP curve that holds except on an event of probability `delta1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproxRdpGuarantee {
    pub curve: RdpCurve,
    pub delta1: f64,
}

impl ApproxRdpGuarantee {
    pub fn new(curve: RdpCurve, delta1: f64) -> Result<Self, AccountantError> {
        if !(0.0..1.0).contains(&delta1) {
            return Err(AccountantError::InvalidParameter {
                name: "delta1",
                value: delta1,
            });
        }
        Ok(Self { curve, delta1 })
    }

    pub fn pure(curve: RdpCurve) -> Self {
        Self { curve, delta1: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpGuarantee {
    pub epsilon: f64,
    pub delta: f64,
}

impl DpGuarantee {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self, AccountantError> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(AccountantError::InvalidParameter {
                name: "epsilon",
                value: epsilon,
            });
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(AccountantError::InvalidParameter {
                name: "delta",
                value: delta,
            });
        }
        Ok(Self { epsilon, delta })
    }
}

/// Result of [`to_dp`]: the guarantee and the order that attains it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConversion {
    pub guarantee: DpGuarantee,
    pub alpha: f64,
}

/// `ln cosh(x)` without overflow.
fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// RDP of an `epsilon`-DP exponential mechanism at order `alpha`:
/// `min(alpha eps^2 / 2, ln((sinh(alpha eps) - sinh((alpha-1) eps)) / sinh(eps)) / (alpha - 1))`.
///
/// The sinh ratio equals `cosh((2 alpha - 1) eps / 2) / cosh(eps / 2)`, which is
/// evaluated through `ln cosh` so it stays finite for any `alpha * eps`.
pub fn em_rdp(epsilon: f64, alpha: f64) -> f64 {
    let quadratic = alpha * epsilon * epsilon / 2.0;
    let ratio = ln_cosh((2.0 * alpha - 1.0) * epsilon / 2.0) - ln_cosh(epsilon / 2.0);
    let sinh_branch = (ratio / (alpha - 1.0)).max(0.0);
    quadratic.min(sinh_branch)
}

pub fn em_rdp_curve(epsilon_pure: f64, orders: &[f64]) -> Result<RdpCurve, AccountantError> {
    if !(epsilon_pure > 0.0) || !epsilon_pure.is_finite() {
        return Err(AccountantError::InvalidParameter {
            name: "epsilon_pure",
            value: epsilon_pure,
        });
    }
    check_orders(orders)?;
    let eps = orders.iter().map(|a| em_rdp(epsilon_pure, *a)).collect();
    RdpCurve::new(orders.to_vec(), eps)
}

/// `alpha / (2 sigma^2)` at every order.
pub fn gaussian_ptr_rdp_curve(sigma: f64, orders: &[f64]) -> Result<RdpCurve, AccountantError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(AccountantError::InvalidParameter {
            name: "sigma",
            value: sigma,
        });
    }
    check_orders(orders)?;
    let eps = orders.iter().map(|a| a / (2.0 * sigma * sigma)).collect();
    RdpCurve::new(orders.to_vec(), eps)
}

pub fn compose(
    a: &ApproxRdpGuarantee,
    b: &ApproxRdpGuarantee,
) -> Result<ApproxRdpGuarantee, AccountantError> {
    if a.curve.orders != b.curve.orders {
        return Err(AccountantError::GridMismatch);
    }
    let eps = a
        .curve
        .eps
        .iter()
        .zip(&b.curve.eps)
        .map(|(x, y)| x + y)
        .collect();
    Ok(ApproxRdpGuarantee {
        curve: RdpCurve::new(a.curve.orders.clone(), eps)?,
        delta1: a.delta1 + b.delta1,
    })
}

/// Converts to (ε, δ)-DP, minimizing `eps(alpha) + ln(1/delta_conv) / (alpha - 1)`
/// over the grid. The reported delta is `delta_conv + delta1`.
pub fn to_dp(g: &ApproxRdpGuarantee, delta_conv: f64) -> Result<DpConversion, AccountantError> {
    if !(delta_conv > 0.0 && delta_conv < 1.0) {
        return Err(AccountantError::InvalidParameter {
            name: "delta_conv",
            value: delta_conv,
        });
    }
    let log_inv = (1.0 / delta_conv).ln();
    let (alpha, epsilon) = g
        .curve
        .iter()
        .map(|(a, e)| (a, e + log_inv / (a - 1.0)))
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .ok_or(AccountantError::BadOrders)?;
    Ok(DpConversion {
        guarantee: DpGuarantee {
            epsilon,
            delta: delta_conv + g.delta1,
        },
        alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub sigma: f64,
    pub epsilon_em: f64,
    pub alpha_star: f64,
    /// Failure probability used by the stability test (`delta1`).
    pub ptr_delta: f64,
    pub achieved: DpGuarantee,
}

/// Forward accounting for one release with EM budget `epsilon_em` and test
/// scale `sigma`; `delta1` and `delta_conv` are both `delta_total / 2`.
pub fn account_release(
    epsilon_em: f64,
    sigma: f64,
    delta_total: f64,
    orders: &[f64],
) -> Result<DpConversion, AccountantError> {
    let half = delta_total / 2.0;
    let em = ApproxRdpGuarantee::pure(em_rdp_curve(epsilon_em, orders)?);
    let ptr = ApproxRdpGuarantee::new(gaussian_ptr_rdp_curve(sigma, orders)?, half)?;
    to_dp(&compose(&em, &ptr)?, half)
}

/// Finds the smallest test scale `sigma` in `[0.05, 200]` such that one release
/// meets `target`, with `epsilon_em = em_fraction * target.epsilon`.
pub fn calibrate(
    target: DpGuarantee,
    em_fraction: f64,
    orders: &[f64],
) -> Result<CalibrationResult, AccountantError> {
    if !(target.epsilon > 0.0) || !target.epsilon.is_finite() {
        return Err(AccountantError::InvalidParameter {
            name: "epsilon",
            value: target.epsilon,
        });
    }
    if !(target.delta > 0.0 && target.delta < 1.0) {
        return Err(AccountantError::InvalidParameter {
            name: "delta",
            value: target.delta,
        });
    }
    if !(em_fraction > 0.0 && em_fraction < 1.0) {
        return Err(AccountantError::InvalidParameter {
            name: "em_fraction",
            value: em_fraction,
        });
    }
    check_orders(orders)?;

    let epsilon_em = em_fraction * target.epsilon;
    let forward = |sigma: f64| account_release(epsilon_em, sigma, target.delta, orders);

    let loosest = forward(SIGMA_MAX)?;
    if loosest.guarantee.epsilon > target.epsilon {
        // Without the Gaussian term the loss is the EM curve plus the
        // conversion overhead; report whichever already exceeds the target.
        let em_only = to_dp(
            &ApproxRdpGuarantee::pure(em_rdp_curve(epsilon_em, orders)?),
            target.delta / 2.0,
        )?;
        let binding = if em_only.guarantee.epsilon > target.epsilon {
            "exponential-mechanism share plus RDP conversion overhead exceeds the target"
        } else {
            "test noise scale would exceed the upper search bound"
        };
        return Err(AccountantError::Unreachable {
            target: target.epsilon,
            best: loosest.guarantee.epsilon,
            sigma: SIGMA_MAX,
            binding,
        });
    }

    let tightest = forward(SIGMA_MIN)?;
    let (sigma, conv) = if tightest.guarantee.epsilon <= target.epsilon {
        (SIGMA_MIN, tightest)
    } else {
        // Invariant: forward(lo) > target >= forward(hi).
        let (mut lo, mut hi) = (SIGMA_MIN, SIGMA_MAX);
        let mut hi_conv = loosest;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let c = forward(mid)?;
            if c.guarantee.epsilon > target.epsilon {
                lo = mid;
            } else {
                hi = mid;
                hi_conv = c;
            }
        }
        (hi, hi_conv)
    };

    Ok(CalibrationResult {
        sigma,
        epsilon_em,
        alpha_star: conv.alpha,
        ptr_delta: target.delta / 2.0,
        achieved: conv.guarantee,
    })
}
