//! Real-valued constructive-interference constraint system.
//!
//! A precoder `w` in C^M is handled as the stacked vector
//! `w2 = [Re(w); -Im(w)]`. With `Psi = [Re(h); Im(h)]` for a rotated channel
//! `h`, this gives `Psi' w2 = Re(h' w)` and `Psi' Theta w2 = Im(h' w)`, so the
//! two robust CI inequalities read
//!
//! ```text
//! g1 =  Psi' Q1 w2 + delta |Q1 w2| + sqrt(Gamma n0) tan(phi) <= 0
//! g2 = -Psi' Q2 w2 + delta |Q2 w2| + sqrt(Gamma n0) tan(phi) <= 0
//! ```
//!
//! with `Q1 = Theta - tan(phi) I` and `Q2 = Theta + tan(phi) I`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::channel::{build_rotated_channel, db_to_linear, stack_channel, ChannelMatrix, SymbolFrame};
use crate::error::{Result, SlpError};

/// Noise power; SINR targets are expressed relative to it.
pub const NOISE_POWER: f64 = 1.0;

/// Constraint data for one user in one symbol slot.
#[derive(Debug, Clone)]
pub struct CiInstance {
    pub psi: DVector<f64>,
    pub theta: DMatrix<f64>,
    pub q1: DMatrix<f64>,
    pub q2: DMatrix<f64>,
    pub g: DMatrix<f64>,
    /// Linear SINR target.
    pub sinr: f64,
    pub noise: f64,
    pub half_angle: f64,
    pub delta: f64,
    /// Gradient of the linear part of g1 (= Q1' Psi).
    normal1: DVector<f64>,
    /// Gradient of the linear part of g2 (= -Q2' Psi).
    normal2: DVector<f64>,
}

/// The 2M×2M rotation `[[0, -I], [I, 0]]`.
pub fn theta_matrix(antennas: usize) -> DMatrix<f64> {
    let n = 2 * antennas;
    let mut theta = DMatrix::zeros(n, n);
    for i in 0..antennas {
        theta[(i, antennas + i)] = -1.0;
        theta[(antennas + i, i)] = 1.0;
    }
    theta
}

impl CiInstance {
    pub fn dim(&self) -> usize {
        self.psi.len()
    }

    pub fn antennas(&self) -> usize {
        self.psi.len() / 2
    }

    pub fn tan_phi(&self) -> f64 {
        self.half_angle.tan()
    }

    /// `sqrt(Gamma n0) tan(phi)`, the constant term of both margins.
    pub fn threshold(&self) -> f64 {
        (self.sinr * self.noise).sqrt() * self.tan_phi()
    }

    /// `sqrt(1 + tan^2 phi)`: every `Qj` scales norms by this factor.
    pub fn q_gain(&self) -> f64 {
        (1.0 + self.tan_phi().powi(2)).sqrt()
    }

    /// Linear constraint normals `(Q1' Psi, -Q2' Psi)`.
    pub fn normals(&self) -> [&DVector<f64>; 2] {
        [&self.normal1, &self.normal2]
    }

    /// Same instance with a different SINR target.
    pub fn with_sinr_db(&self, sinr_db: f64) -> Self {
        Self {
            sinr: db_to_linear(sinr_db),
            ..self.clone()
        }
    }
}

/// Assemble the constraint system for rotated channel `rotated`.
pub fn build_instance(rotated: &[Complex64], sinr_db: f64, delta: f64, half_angle: f64) -> Result<CiInstance> {
    if rotated.is_empty() {
        return Err(SlpError::Dimension("rotated channel is empty".into()));
    }
    if !sinr_db.is_finite() {
        return Err(SlpError::Parameter(format!("SINR must be finite, got {sinr_db} dB")));
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(SlpError::Parameter(format!("CSI bound must be >= 0, got {delta}")));
    }
    if !(half_angle > 0.0 && half_angle < FRAC_PI_2) {
        return Err(SlpError::Geometry(format!(
            "CI half-angle must lie in (0, pi/2), got {half_angle}"
        )));
    }
    let antennas = rotated.len();
    let n = 2 * antennas;
    let psi = DVector::from_vec(stack_channel(rotated));
    let theta = theta_matrix(antennas);
    let tan = half_angle.tan();
    let eye = DMatrix::<f64>::identity(n, n);
    let q1 = &theta - &eye * tan;
    let q2 = &theta + &eye * tan;
    let g = q1.transpose() * &q1 + q2.transpose() * &q2;
    let normal1 = q1.transpose() * &psi;
    let normal2 = -(q2.transpose() * &psi);
    Ok(CiInstance {
        psi,
        theta,
        q1,
        q2,
        g,
        sinr: db_to_linear(sinr_db),
        noise: NOISE_POWER,
        half_angle,
        delta,
        normal1,
        normal2,
    })
}

/// One instance per user for a channel sample and its symbol frame.
pub fn build_slot(
    channel: &ChannelMatrix,
    frame: &SymbolFrame,
    sinr_db: f64,
    delta: f64,
    half_angle: f64,
) -> Result<Vec<CiInstance>> {
    if frame.users() != channel.users() {
        return Err(SlpError::Dimension(format!(
            "frame has {} symbols for {} users",
            frame.users(),
            channel.users()
        )));
    }
    (0..channel.users())
        .map(|i| {
            let rotated = build_rotated_channel(channel.row(i), frame, i)?;
            build_instance(&rotated, sinr_db, delta, half_angle)
        })
        .collect()
}

/// Real-stacked precoding vector `w2 = [Re(w); -Im(w)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecoderVec(pub DVector<f64>);

impl PrecoderVec {
    pub fn zeros(antennas: usize) -> Self {
        Self(DVector::zeros(2 * antennas))
    }

    pub fn from_complex(w: &[Complex64]) -> Self {
        let stacked = w.iter().map(|z| z.re).chain(w.iter().map(|z| -z.im));
        Self(DVector::from_iterator(2 * w.len(), stacked))
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        let m = self.0.len() / 2;
        (0..m).map(|i| Complex64::new(self.0[i], -self.0[m + i])).collect()
    }

    pub fn power(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }
}

impl From<DVector<f64>> for PrecoderVec {
    fn from(v: DVector<f64>) -> Self {
        Self(v)
    }
}

/// Left-hand sides `(g1, g2)` of the robust CI inequalities.
pub fn constraint_margins(inst: &CiInstance, w2: &DVector<f64>) -> (f64, f64) {
    let c = inst.threshold();
    let robust = inst.delta * inst.q_gain() * w2.norm();
    (
        inst.normal1.dot(w2) + robust + c,
        inst.normal2.dot(w2) + robust + c,
    )
}

/// Worst margin over all users of a slot.
pub fn max_margin(slot: &[CiInstance], w2: &DVector<f64>) -> f64 {
    slot.iter()
        .map(|inst| {
            let (g1, g2) = constraint_margins(inst, w2);
            g1.max(g2)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Combined quadratic margin of both inequalities,
/// `(delta^2 - Psi'Psi) G |w2|^2 + 4 Psi'w2 tan(phi) sqrt(Gamma n0) - 2 Gamma n0 tan^2(phi)`,
/// with `G = 2 (1 + tan^2 phi) I` acting as its scalar.
pub fn combined_margin(inst: &CiInstance, w2: &DVector<f64>) -> f64 {
    let tan = inst.tan_phi();
    let gn = inst.sinr * inst.noise;
    let g_scalar = 2.0 * (1.0 + tan * tan);
    (inst.delta.powi(2) - inst.psi.norm_squared()) * g_scalar * w2.norm_squared()
        + 4.0 * inst.psi.dot(w2) * tan * gn.sqrt()
        - 2.0 * gn * tan * tan
}

/// Does the noiseless received point `h' w` lie in the CI sector?
pub fn ci_region_check(rotated: &[Complex64], w: &[Complex64], sinr: f64, noise: f64, half_angle: f64) -> bool {
    let z: Complex64 = rotated.iter().zip(w).map(|(h, w)| h * w).sum();
    let slack = z.im.abs() - (z.re - (sinr * noise).sqrt()) * half_angle.tan();
    slack <= 1e-12 * (1.0 + z.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{stream_rng, Stream};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;
    use std::f64::consts::FRAC_PI_4;

    fn random_complex(rng: &mut impl Rng, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect()
    }

    #[test]
    fn smallest_block_form() {
        let inst = build_instance(&[Complex64::new(1.0, 0.5)], 0.0, 0.0, FRAC_PI_4).unwrap();
        let theta = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let q1 = DMatrix::from_row_slice(2, 2, &[-1.0, -1.0, 1.0, -1.0]);
        assert_relative_eq!(inst.theta, theta);
        assert_relative_eq!(inst.q1, q1, epsilon = 1e-15);
    }

    #[test]
    fn g_is_four_identity_at_quarter_pi() {
        let mut rng = stream_rng(3, Stream::Channel, 0);
        for m in 1..6 {
            let inst = build_instance(&random_complex(&mut rng, m), 10.0, 0.01, FRAC_PI_4).unwrap();
            let expected = DMatrix::<f64>::identity(2 * m, 2 * m) * 4.0;
            assert!((inst.g.clone() - expected).amax() <= 1e-12);
        }
    }

    #[test]
    fn invariants_over_angle_grid() {
        let mut rng = stream_rng(4, Stream::Channel, 0);
        let h = random_complex(&mut rng, 3);
        for k in 0..=26 {
            let phi = 0.1 + 0.05 * k as f64;
            let inst = build_instance(&h, 5.0, 0.0, phi).unwrap();
            let n = inst.dim();
            let eye = DMatrix::<f64>::identity(n, n);
            assert!((inst.theta.transpose() + &inst.theta).amax() == 0.0);
            assert!((inst.theta.transpose() * &inst.theta - &eye).amax() <= 1e-15);
            let t = phi.tan();
            assert!((inst.g.clone() - &eye * (2.0 * (1.0 + t * t))).amax() <= 1e-12 * (1.0 + t * t));
            let w = DVector::from_fn(n, |i, _| (i as f64 * 0.7).sin());
            assert_relative_eq!((&inst.theta * &w).norm(), w.norm(), epsilon = 1e-14);
        }
    }

    #[test]
    fn invalid_angle_is_geometry_error() {
        let h = [Complex64::new(1.0, 0.0)];
        for phi in [0.0, FRAC_PI_2, -0.3, 2.0] {
            assert!(matches!(build_instance(&h, 0.0, 0.0, phi), Err(SlpError::Geometry(_))));
        }
        assert!(matches!(build_instance(&h, 0.0, -1.0, 0.5), Err(SlpError::Parameter(_))));
    }

    #[test]
    fn zero_precoder_is_infeasible_by_threshold() {
        let inst = build_instance(&[Complex64::new(0.4, -0.2); 4], 10.0, 0.01, FRAC_PI_4).unwrap();
        let (g1, g2) = constraint_margins(&inst, &DVector::zeros(8));
        let expected = 10f64.sqrt();
        assert_relative_eq!(g1, expected, epsilon = 1e-12);
        assert_relative_eq!(g2, expected, epsilon = 1e-12);
    }

    #[test]
    fn nominal_split_without_uncertainty() {
        // at delta = 0 the margins are the plain real/imaginary split
        let mut rng = stream_rng(5, Stream::Channel, 0);
        for _ in 0..50 {
            let h = random_complex(&mut rng, 3);
            let w = random_complex(&mut rng, 3);
            let inst = build_instance(&h, 3.0, 0.0, 0.6).unwrap();
            let w2 = PrecoderVec::from_complex(&w);
            let z: Complex64 = h.iter().zip(&w).map(|(a, b)| a * b).sum();
            let c = inst.threshold();
            let t = inst.tan_phi();
            let (g1, g2) = constraint_margins(&inst, &w2.0);
            assert_relative_eq!(g1, z.im - t * z.re + c, epsilon = 1e-12);
            assert_relative_eq!(g2, -z.im - t * z.re + c, epsilon = 1e-12);
        }
    }

    #[test]
    fn real_complex_verdicts_agree() {
        let mut rng = stream_rng(6, Stream::Channel, 0);
        let mut feasible = 0;
        for _ in 0..1000 {
            let h = random_complex(&mut rng, 4);
            let w = random_complex(&mut rng, 4);
            let sinr_db = rng.random_range(-10.0..10.0);
            let inst = build_instance(&h, sinr_db, 0.0, FRAC_PI_4).unwrap();
            let (g1, g2) = constraint_margins(&inst, &PrecoderVec::from_complex(&w).0);
            let verdict = ci_region_check(&h, &w, inst.sinr, NOISE_POWER, FRAC_PI_4);
            assert_eq!(g1.max(g2) <= 0.0, verdict);
            feasible += verdict as usize;
        }
        assert!(feasible > 50 && feasible < 950, "degenerate draw mix: {feasible}");
    }

    #[test]
    fn region_check_edge_cases() {
        let h = vec![Complex64::new(0.6, 0.8), Complex64::new(0.0, 0.0)];
        let sinr: f64 = 4.0;
        // h'w = sqrt(sinr) exactly on the real axis: the sector vertex
        let w = vec![h[0].conj() * sinr.sqrt() / h[0].norm_sqr(), Complex64::new(0.0, 0.0)];
        assert!(ci_region_check(&h, &w, sinr, 1.0, FRAC_PI_4));
        let w_imag = vec![h[0].conj() * Complex64::new(0.0, 5.0), Complex64::new(0.0, 0.0)];
        assert!(!ci_region_check(&h, &w_imag, sinr, 1.0, FRAC_PI_4));
    }

    #[test]
    fn combined_margin_at_origin() {
        let inst = build_instance(&[Complex64::new(1.0, 2.0); 2], 7.0, 0.05, 0.7).unwrap();
        let t = 0.7f64.tan();
        let expected = -2.0 * inst.sinr * t * t;
        assert_relative_eq!(combined_margin(&inst, &DVector::zeros(4)), expected, epsilon = 1e-12);
    }

    #[test]
    fn precoder_stacking() {
        let w = vec![Complex64::new(1.0, 2.0), Complex64::new(-3.0, 0.5)];
        let p = PrecoderVec::from_complex(&w);
        assert_eq!(p.0.as_slice(), &[1.0, -3.0, -2.0, -0.5]);
        assert_eq!(p.to_complex(), w);
        assert_relative_eq!(p.power(), 1.0 + 4.0 + 9.0 + 0.25);
    }
}
