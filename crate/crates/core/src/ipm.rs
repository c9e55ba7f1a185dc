//! Log-barrier interior-point solver for robust SLP power minimization.
//!
//! Minimizes `|w2|^2` subject to every user's two CI margins being negative,
//! by following the central path of `|w2|^2 + upsilon * sum_i B_i(w2)`.

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SlpError};
use crate::geometry::{constraint_margins, CiInstance};

const ARMIJO_C: f64 = 1e-4;
const MAX_BACKTRACK: usize = 60;
const START_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Initial barrier weight, relative to the power of the starting point.
    pub upsilon0: f64,
    pub shrink: f64,
    pub inner_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            upsilon0: 1.0,
            shrink: 0.2,
            inner_tol: 1e-8,
            max_outer: 12,
            max_inner: 500,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(SlpError::Parameter(format!("shrink must lie in (0, 1), got {}", self.shrink)));
        }
        if !(self.upsilon0 > 0.0) || !(self.inner_tol > 0.0) {
            return Err(SlpError::Parameter("barrier weight and tolerance must be > 0".into()));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(SlpError::Parameter("iteration limits must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub w2: DVector<f64>,
    pub power: f64,
    /// Total Newton iterations.
    pub iterations: usize,
    /// Power at the end of each outer stage.
    pub stage_powers: Vec<f64>,
    /// Barrier weight of the last stage.
    pub final_upsilon: f64,
    /// Newton decrement of the last centering problem.
    pub decrement: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    pub max_margin: f64,
    pub power: f64,
    /// `(g1, g2)` per user.
    pub slacks: Vec<(f64, f64)>,
    pub feasible: bool,
}

/// Recompute margins and power of a candidate precoder.
pub fn certify(slot: &[CiInstance], w2: &DVector<f64>) -> Certificate {
    let slacks: Vec<(f64, f64)> = slot.iter().map(|inst| constraint_margins(inst, w2)).collect();
    let max_margin = slacks
        .iter()
        .map(|&(a, b)| a.max(b))
        .fold(f64::NEG_INFINITY, f64::max);
    Certificate {
        max_margin,
        power: w2.norm_squared(),
        slacks,
        feasible: max_margin < 0.0,
    }
}

/// Rows `a_j` of the linear constraint parts, two per user.
fn normal_rows(slot: &[CiInstance]) -> Vec<DVector<f64>> {
    slot.iter()
        .flat_map(|inst| inst.normals().into_iter().cloned())
        .collect()
}

/// Homogeneous parts `a_j'w + rho|w|` of every margin.
fn homogeneous_margins(slot: &[CiInstance], w2: &DVector<f64>) -> Vec<f64> {
    slot.iter()
        .flat_map(|inst| {
            let (g1, g2) = constraint_margins(inst, w2);
            let c = inst.threshold();
            [g1 - c, g2 - c]
        })
        .collect()
}

/// Scale a direction whose homogeneous margins are all negative so that
/// every margin sits at most `-max(c, START_MARGIN)`.
fn scale_into_interior(slot: &[CiInstance], dir: &DVector<f64>) -> Option<DVector<f64>> {
    let worst = homogeneous_margins(slot, dir).into_iter().fold(f64::NEG_INFINITY, f64::max);
    if !(worst < 0.0) {
        return None;
    }
    let c = slot.iter().map(|i| i.threshold()).fold(0.0, f64::max);
    let target = c + c.max(START_MARGIN);
    Some(dir * (target / -worst))
}

struct Newton {
    x: DVector<f64>,
    iterations: usize,
    /// Newton decrement `sqrt(g' H^-1 g)` at the returned point.
    decrement: f64,
}

/// Damped Newton with Armijo backtracking. `eval` returns `None` outside the
/// domain. Stops once the Newton decrement drops below `tol * (1 + |x|)`.
fn newton_minimize<F>(eval: F, x0: DVector<f64>, tol: f64, max_iter: usize, mut stop: impl FnMut(&DVector<f64>) -> bool) -> Newton
where
    F: Fn(&DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)>,
{
    let mut x = x0;
    let mut decrement = f64::INFINITY;
    let mut iterations = 0;
    while let Some((f, g, h)) = eval(&x) {
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&(-&g)),
            None => {
                let ridge = 1e-10 * h.diagonal().amax().max(1.0);
                let n = h.nrows();
                match (h + DMatrix::identity(n, n) * ridge).cholesky() {
                    Some(ch) => ch.solve(&(-&g)),
                    None => -&g,
                }
            }
        };
        let slope = g.dot(&step);
        decrement = (-slope).max(0.0).sqrt();
        if decrement <= tol * (1.0 + x.norm()) || stop(&x) || iterations >= max_iter {
            break;
        }
        iterations += 1;
        // rounding floor for comparing objective values
        let slack = 8.0 * f64::EPSILON * f.abs();
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..MAX_BACKTRACK {
            let cand = &x + &step * t;
            if let Some((fc, _, _)) = eval(&cand) {
                if fc <= f + ARMIJO_C * t * slope + slack {
                    x = cand;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Newton { x, iterations, decrement }
}

/// Find a strictly feasible point: the matched-filter direction when it
/// works, otherwise a phase-I barrier solve over the unit ball.
pub fn find_feasible_start(slot: &[CiInstance]) -> Result<DVector<f64>> {
    let first = slot
        .first()
        .ok_or_else(|| SlpError::Dimension("no user instances".into()))?;
    let n = first.dim();
    if slot.iter().any(|i| i.dim() != n) {
        return Err(SlpError::Dimension("instances disagree on antenna count".into()));
    }
    let mf = slot.iter().fold(DVector::zeros(n), |acc, i| acc + &i.psi);
    if let Some(w) = scale_into_interior(slot, &mf) {
        return Ok(w);
    }
    let dir = phase_one(slot)?;
    scale_into_interior(slot, &dir).ok_or(SlpError::Infeasible {
        max_margin: first.threshold(),
    })
}

/// Minimize `s` subject to `a_j'w <= s` and `|w| < 1`, stopping as soon as
/// some iterate has all homogeneous margins negative.
fn phase_one(slot: &[CiInstance]) -> Result<DVector<f64>> {
    let rows = normal_rows(slot);
    let rho = slot[0].delta * slot[0].q_gain();
    let n = slot[0].dim();
    let m = rows.len();
    let scale = rows.iter().map(|a| a.norm()).fold(0.0, f64::max).max(1e-300);
    let rows: Vec<DVector<f64>> = rows.into_iter().map(|a| a / scale).collect();
    let rho = rho / scale;

    let found = |z: &DVector<f64>| -> bool {
        let w = z.rows(0, n);
        let wn = w.norm();
        wn > 0.0 && rows.iter().all(|a| a.dot(&w) + rho * wn < 0.0)
    };

    let mut z = DVector::zeros(n + 1);
    z[n] = 1.0;
    let mut tau = 1.0;
    for _ in 0..14 {
        let eval = |z: &DVector<f64>| {
            let w = z.rows(0, n);
            let s = z[n];
            let q = 1.0 - w.norm_squared();
            if q <= 0.0 {
                return None;
            }
            let mut val = tau * s - q.ln();
            let mut g = DVector::zeros(n + 1);
            let mut h = DMatrix::zeros(n + 1, n + 1);
            g[n] = tau;
            {
                let mut gw = g.rows_mut(0, n);
                gw += w * (2.0 / q);
            }
            {
                let mut hw = h.view_mut((0, 0), (n, n));
                hw += DMatrix::identity(n, n) * (2.0 / q) + w * w.transpose() * (4.0 / (q * q));
            }
            for a in &rows {
                let r = s - a.dot(&w);
                if r <= 0.0 {
                    return None;
                }
                val -= r.ln();
                let mut b = DVector::zeros(n + 1);
                b.rows_mut(0, n).copy_from(&(-a));
                b[n] = 1.0;
                g -= &b / r;
                h += &b * b.transpose() / (r * r);
            }
            Some((val, g, h))
        };
        let res = newton_minimize(eval, z, 1e-10, 200, |z| found(z));
        z = res.x;
        if found(&z) {
            return Ok(z.rows(0, n).into_owned());
        }
        if (m + 1) as f64 / tau < 1e-12 {
            break;
        }
        tau *= 10.0;
    }
    debug!("phase one ended at s = {}, rho = {}", z[n], rho);
    Err(SlpError::Infeasible {
        max_margin: slot.iter().map(|i| i.threshold()).fold(0.0, f64::max),
    })
}

fn barrier_objective(slot: &[CiInstance], upsilon: f64, w: &DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
    let n = w.len();
    let wn = w.norm();
    let mut val = w.norm_squared();
    let mut g = w * 2.0;
    let mut h = DMatrix::identity(n, n) * 2.0;
    for inst in slot {
        let rho = inst.delta * inst.q_gain();
        let c = inst.threshold();
        let (unit, curvature) = if rho > 0.0 && wn > 0.0 {
            let u = w / wn;
            let curv = (DMatrix::identity(n, n) - &u * u.transpose()) * (rho / wn);
            (u, Some(curv))
        } else {
            (DVector::zeros(n), None)
        };
        for a in inst.normals() {
            let gj = a.dot(w) + rho * wn + c;
            if !(gj < 0.0) {
                return None;
            }
            let grad_gj = a + &unit * rho;
            val -= upsilon * (-gj).ln();
            g += &grad_gj * (upsilon / -gj);
            h += &grad_gj * grad_gj.transpose() * (upsilon / (gj * gj));
            if let Some(curv) = &curvature {
                h += curv * (upsilon / -gj);
            }
        }
    }
    Some((val, g, h))
}

/// Solve one symbol slot from a feasible start.
pub fn solve_slp(slot: &[CiInstance], opts: &SolverOptions) -> Result<SolveResult> {
    opts.validate()?;
    let mut w = find_feasible_start(slot)?;
    let base = w.norm_squared().max(1e-300);
    let mut upsilon = opts.upsilon0 * base;
    let mut iterations = 0;
    let mut stage_powers = Vec::with_capacity(opts.max_outer);
    let mut decrement = f64::INFINITY;
    let mut final_upsilon = upsilon;
    for stage in 0..opts.max_outer {
        let res = newton_minimize(
            |x| barrier_objective(slot, upsilon, x),
            w,
            opts.inner_tol,
            opts.max_inner,
            |_| false,
        );
        w = res.x;
        iterations += res.iterations;
        decrement = res.decrement;
        stage_powers.push(w.norm_squared());
        final_upsilon = upsilon;
        debug!("stage {stage}: upsilon {upsilon:.3e} power {:.6e} decrement {decrement:.2e}", w.norm_squared());
        upsilon *= opts.shrink;
    }
    let cert = certify(slot, &w);
    if !cert.feasible {
        return Err(SlpError::Infeasible {
            max_margin: cert.max_margin,
        });
    }
    Ok(SolveResult {
        power: w.norm_squared(),
        w2: w,
        iterations,
        stage_powers,
        final_upsilon,
        decrement,
    })
}
