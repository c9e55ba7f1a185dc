//! Log barriers and the closed-form barrier proximity operator.
//!
//! The prox acts on the ball `|w2|^2 < alpha` with `alpha = 2 Gamma n0 tan^2(phi)`:
//!
//! ```text
//! prox(w0) = argmin_w 1/2 |w0 - w|^2 - gamma upsilon ln(alpha - |w|^2)
//!          = k w0,   k = (alpha - chi^2) / (alpha - chi^2 + 2 gamma upsilon)
//! ```
//!
//! where `chi = |prox(w0)|` is the root in `[0, sqrt(alpha))` of
//! `chi^3 - s chi^2 - (alpha + 2 gamma upsilon) chi + alpha s`, `s = |w0|`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SlpError};
use crate::geometry::{combined_margin, constraint_margins, CiInstance};

const BISECT_TOL: f64 = 1e-12;
const BISECT_MAX_ITER: usize = 200;
const BOUNDARY_GUARD: f64 = 1e-9;
const NUDGE: f64 = 1.0 - 1e-6;

/// Step size, barrier weight and linear-term multiplier of one prox update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierParams {
    pub gamma: f64,
    pub upsilon: f64,
    pub lambda: f64,
}

impl BarrierParams {
    pub fn new(gamma: f64, upsilon: f64, lambda: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(SlpError::Parameter(format!("step size must be > 0, got {gamma}")));
        }
        if !(upsilon > 0.0) || !upsilon.is_finite() {
            return Err(SlpError::Parameter(format!("barrier weight must be > 0, got {upsilon}")));
        }
        if !lambda.is_finite() {
            return Err(SlpError::Parameter("lambda must be finite".into()));
        }
        Ok(Self { gamma, upsilon, lambda })
    }
}

/// `-ln(-g1) - ln(-g2)`, or `+inf` outside the strict interior.
pub fn barrier_value(inst: &CiInstance, w2: &DVector<f64>) -> f64 {
    let (g1, g2) = constraint_margins(inst, w2);
    if g1 < 0.0 && g2 < 0.0 {
        -(-g1).ln() - (-g2).ln()
    } else {
        f64::INFINITY
    }
}

/// Squared radius of the barrier ball, `2 Gamma n0 tan^2(phi)`.
pub fn ball_radius_sq(inst: &CiInstance) -> f64 {
    2.0 * inst.sinr * inst.noise * inst.tan_phi().powi(2)
}

/// `-ln(alpha - |w2|^2)`, or `+inf` outside the ball.
pub fn ball_barrier(inst: &CiInstance, w2: &DVector<f64>) -> f64 {
    let gap = ball_radius_sq(inst) - w2.norm_squared();
    if gap > 0.0 {
        -gap.ln()
    } else {
        f64::INFINITY
    }
}

/// The stationarity cubic of the radial prox.
pub fn prox_cubic(chi: f64, s: f64, alpha: f64, kappa: f64) -> f64 {
    ((chi - s) * chi - (alpha + 2.0 * kappa)) * chi + alpha * s
}

fn cubic_slope(chi: f64, s: f64, alpha: f64, kappa: f64) -> f64 {
    3.0 * chi * chi - 2.0 * s * chi - (alpha + 2.0 * kappa)
}

/// Real roots of the prox cubic by Cardano / the trigonometric form.
fn cardano_roots(s: f64, alpha: f64, kappa: f64) -> Vec<f64> {
    // x^3 + b x^2 + c x + d
    let b = -s;
    let c = -(alpha + 2.0 * kappa);
    let d = alpha * s;
    let shift = -b / 3.0;
    let p = c - b * b / 3.0;
    let q = 2.0 * b.powi(3) / 27.0 - b * c / 3.0 + d;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    if disc < 0.0 {
        let r = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (2.0 * p) * (-3.0 / p).sqrt()).clamp(-1.0, 1.0);
        let theta = arg.acos() / 3.0;
        (0..3)
            .map(|k| r * (theta - 2.0 * PI * k as f64 / 3.0).cos() + shift)
            .collect()
    } else {
        let sq = disc.sqrt();
        vec![(-q / 2.0 + sq).cbrt() + (-q / 2.0 - sq).cbrt() + shift]
    }
}

/// Root of the prox cubic in `[0, sqrt(alpha))` by bisection. The cubic is
/// `alpha s >= 0` at 0 and `-2 kappa sqrt(alpha) < 0` at `sqrt(alpha)`.
pub fn chi_bisect(s: f64, alpha: f64, kappa: f64) -> Result<f64> {
    let (mut lo, mut hi) = (0.0, alpha.sqrt());
    if !(s >= 0.0 && alpha > 0.0 && kappa > 0.0) {
        return Err(SlpError::Numerical(format!(
            "prox cubic has no sign change on [0, {hi}] (s = {s}, alpha = {alpha}, gamma*upsilon = {kappa})"
        )));
    }
    for _ in 0..BISECT_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if prox_cubic(mid, s, alpha, kappa) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= BISECT_TOL * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn chi_from_norm(s: f64, alpha: f64, kappa: f64) -> Result<f64> {
    if !(alpha > 0.0) || !(kappa > 0.0) || !s.is_finite() {
        return Err(SlpError::Parameter(format!(
            "prox needs alpha > 0 and gamma*upsilon > 0, got {alpha}, {kappa}"
        )));
    }
    if s == 0.0 {
        return Ok(0.0);
    }
    let upper = alpha.sqrt();
    let scale = alpha * upper;
    for root in cardano_roots(s, alpha, kappa) {
        if !(root.is_finite() && root >= -1e-12 * upper && root < upper) {
            continue;
        }
        let mut chi = root.clamp(0.0, upper);
        for _ in 0..3 {
            let slope = cubic_slope(chi, s, alpha, kappa);
            if slope == 0.0 {
                break;
            }
            let next = chi - prox_cubic(chi, s, alpha, kappa) / slope;
            if !(0.0..upper).contains(&next) {
                break;
            }
            chi = next;
        }
        if prox_cubic(chi, s, alpha, kappa).abs() <= 1e-12 * scale.max(s * alpha).max(1.0) {
            return Ok(chi);
        }
    }
    chi_bisect(s, alpha, kappa)
}

/// Norm of the prox output for input `w2`.
pub fn solve_chi(inst: &CiInstance, w2: &DVector<f64>, gamma: f64, upsilon: f64) -> Result<f64> {
    chi_from_norm(w2.norm(), ball_radius_sq(inst), gamma * upsilon)
}

/// Radial prox factor and its derivatives for an input of norm `s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialProx {
    pub chi: f64,
    /// Scaling factor applied to the input.
    pub k: f64,
    /// `dk/ds`.
    pub dk_ds: f64,
    /// `dk/d(gamma upsilon)`.
    pub dk_dkappa: f64,
}

pub fn radial_prox(s: f64, alpha: f64, kappa: f64) -> Result<RadialProx> {
    let chi = chi_from_norm(s, alpha, kappa)?;
    let gap = alpha - chi * chi;
    let denom = gap + 2.0 * kappa;
    let slope = cubic_slope(chi, s, alpha, kappa);
    let dchi_ds = -gap / slope;
    let dchi_dkappa = 2.0 * chi / slope;
    if gap > 0.5 * alpha || s == 0.0 {
        let dk_dchi = -4.0 * kappa * chi / (denom * denom);
        return Ok(RadialProx {
            chi,
            k: gap / denom,
            dk_ds: dk_dchi * dchi_ds,
            dk_dkappa: -2.0 * gap / (denom * denom) + dk_dchi * dchi_dkappa,
        });
    }
    // near the boundary gap is dominated by rounding; at the root k = chi / s
    Ok(RadialProx {
        chi,
        k: chi / s,
        dk_ds: (dchi_ds * s - chi) / (s * s),
        dk_dkappa: dchi_dkappa / s,
    })
}

/// Closed-form prox of `gamma upsilon` times the ball barrier.
pub fn prox_barrier(inst: &CiInstance, w2: &DVector<f64>, gamma: f64, upsilon: f64) -> Result<DVector<f64>> {
    if !(gamma > 0.0 && upsilon > 0.0) {
        return Err(SlpError::Parameter(format!(
            "prox needs gamma, upsilon > 0, got {gamma}, {upsilon}"
        )));
    }
    let r = radial_prox(w2.norm(), ball_radius_sq(inst), gamma * upsilon)?;
    Ok(w2 * r.k)
}

/// Derivatives of the prox output.
#[derive(Debug, Clone)]
pub struct ProxJacobians {
    /// d prox / d w2.
    pub j_w: DMatrix<f64>,
    /// `M` such that `j_w = k M`.
    pub m: DMatrix<f64>,
    pub d_upsilon: DVector<f64>,
    pub d_gamma: DVector<f64>,
}

pub fn prox_jacobians(inst: &CiInstance, w2: &DVector<f64>, gamma: f64, upsilon: f64) -> Result<ProxJacobians> {
    if !(gamma > 0.0 && upsilon > 0.0) {
        return Err(SlpError::Parameter(format!(
            "prox needs gamma, upsilon > 0, got {gamma}, {upsilon}"
        )));
    }
    let margin = combined_margin(inst, w2);
    if !margin.is_finite() || margin > 0.0 {
        return Err(SlpError::Domain(format!("combined margin {margin} is not feasible")));
    }
    let nudged;
    let w2 = if margin > -BOUNDARY_GUARD {
        nudged = w2 * NUDGE;
        &nudged
    } else {
        w2
    };
    let n = w2.len();
    let s = w2.norm();
    let r = radial_prox(s, ball_radius_sq(inst), gamma * upsilon)?;
    let mut m = DMatrix::identity(n, n);
    if s > 0.0 {
        m += (w2 * w2.transpose()) * (r.dk_ds / (r.k * s));
    }
    let j_w = &m * r.k;
    let d_kappa = w2 * r.dk_dkappa;
    Ok(ProxJacobians {
        j_w,
        m,
        d_upsilon: &d_kappa * gamma,
        d_gamma: d_kappa * upsilon,
    })
}

/// Gradient step on `|w2|^2 + lambda 1'w2` followed by the prox.
pub fn update_step(inst: &CiInstance, w2: &DVector<f64>, params: &BarrierParams) -> Result<DVector<f64>> {
    let BarrierParams { gamma, upsilon, lambda } = *params;
    let v = w2 * (1.0 - 2.0 * gamma) - DVector::repeat(w2.len(), gamma * lambda);
    if gamma * upsilon == 0.0 {
        return Ok(v);
    }
    prox_barrier(inst, &v, gamma, upsilon)
}
