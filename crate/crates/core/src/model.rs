//! Unfolded proximal network: parameter-update blocks, post-processing
//! unit, closed-form precoder recovery and block-wise training.
//!
//! Internally every slot is normalized so that the CI threshold is 1 and the
//! per-user stacked channels have unit rms norm. A normalized precoder `w'` maps back to
//! `w = (c / sigma) w'` and normalized multipliers `u'` to `u = u' / sigma^2`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::barrier::{radial_prox, BarrierParams};
use crate::channel::{stream_rng, ChannelSet, Psk, Stream, SymbolFrame};
use crate::error::{Result, SlpError};
use crate::geometry::{build_slot, CiInstance, PrecoderVec};
use crate::nn::{
    sigmoid, softplus, softplus_inverse, AdamState, AvgPool2d, BatchNorm2d, Conv2d, Flatten, Layer, LayerParam, Linear, Mode, Module, PRelu, Precision,
    ColumnStack, Role, Sequential, SignAct, Softplus, Tensor,
};
use crate::quant::{memory_estimate, MemoryReport};

/// Ridge added to a singular recovery system.
pub const RECOVERY_RIDGE: f64 = 1e-10;
/// Margin below which the rescaled-power surrogate continues linearly.
pub const SURROGATE_KNEE: f64 = 0.01;
/// Weight of the squared violation in the block objective.
pub const PENALTY_WEIGHT: f64 = 100.0;
/// Channel rms below which a slot counts as having cancelled rotations.
pub const DEGENERATE_RMS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub antennas: usize,
    pub users: usize,
    pub blocks: usize,
    pub precision: Precision,
    pub half_angle: f64,
    pub barrier_channels: usize,
    pub ppu_channels: (usize, usize),
    /// Insert sign activations after the PPU PReLUs.
    pub sign_activations: bool,
    /// Initial bias of the last PPU convolution.
    pub ppu_bias_init: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(antennas: usize, users: usize) -> Self {
        Self {
            antennas,
            users,
            blocks: 2,
            precision: Precision::Fp32,
            half_angle: std::f64::consts::FRAC_PI_4,
            barrier_channels: 20,
            ppu_channels: (16, 8),
            sign_activations: false,
            ppu_bias_init: -4.0,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.antennas == 0 || self.users == 0 {
            return Err(SlpError::Dimension("model needs M, K >= 1".into()));
        }
        if self.blocks == 0 {
            return Err(SlpError::Parameter("model needs at least one PUU block".into()));
        }
        if self.barrier_channels == 0 || self.ppu_channels.0 == 0 || self.ppu_channels.1 == 0 {
            return Err(SlpError::Parameter("channel widths must be positive".into()));
        }
        if !(self.half_angle > 0.0 && self.half_angle < std::f64::consts::FRAC_PI_2) {
            return Err(SlpError::Geometry(format!("half-angle {} outside (0, pi/2)", self.half_angle)));
        }
        Ok(())
    }

    /// Description of the PPU reshape, stored with checkpoints.
    pub fn reshape_mapping(&self) -> String {
        let (m2, k) = (2 * self.antennas, self.users);
        format!("(B,C,{m2},{k}) -> (B,C,{},1): row r, user i -> position i*{m2}+r", m2 * k)
    }
}

/// Multipliers of the two CI constraints of one user.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiplierPair {
    pub upsilon1: f64,
    pub upsilon2: f64,
}

/// Normalized constraint data of one slot.
#[derive(Debug, Clone)]
pub struct SlotFeatures {
    pub antennas: usize,
    pub users: usize,
    /// rms over users of the stacked channel norms.
    pub sigma: f64,
    /// Normalized robust coefficient `delta sqrt(1 + tan^2 phi) / sigma`.
    pub rho: f64,
    /// Normalized constraint normals `[a1_0, a2_0, a1_1, a2_1, ...]`.
    pub normals: Vec<DVector<f64>>,
    /// Normalized `Psi` grid `(2M, K)`, row-major.
    pub grid: Vec<f64>,
}

impl SlotFeatures {
    pub fn from_slot(slot: &[CiInstance]) -> Result<Self> {
        let first = slot.first().ok_or_else(|| SlpError::Dimension("empty slot".into()))?;
        let (n, k) = (first.dim(), slot.len());
        if slot.iter().any(|i| i.dim() != n || i.delta != first.delta || i.half_angle != first.half_angle) {
            return Err(SlpError::Dimension("slot instances disagree in size, bound or angle".into()));
        }
        let energy: f64 = slot.iter().map(|i| i.psi.norm_squared()).sum();
        let sigma = (energy / k as f64).sqrt();
        if !(sigma > DEGENERATE_RMS * (n as f64).sqrt()) {
            return Err(SlpError::Numerical(format!("rotated channels vanish (rms {sigma:e})")));
        }
        let mut grid = vec![0.0; n * k];
        for (i, inst) in slot.iter().enumerate() {
            for r in 0..n {
                grid[r * k + i] = inst.psi[r] / sigma;
            }
        }
        let normals = slot
            .iter()
            .flat_map(|inst| inst.normals().map(|a| a / sigma))
            .collect();
        Ok(Self {
            antennas: n / 2,
            users: k,
            sigma,
            rho: first.delta * first.q_gain() / sigma,
            normals,
            grid,
        })
    }

    /// Sum of normalized channels, the block input.
    pub fn matched_filter(&self) -> DVector<f64> {
        let k = self.users;
        DVector::from_iterator(2 * self.antennas, self.grid.chunks(k).map(|row| row.iter().sum()))
    }
}

/// Training samples: channels with a fixed CSI bound.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub channels: ChannelSet,
    pub delta: f64,
    pub half_angle: f64,
}

impl TrainingSet {
    /// Normalized slots for one epoch, each with freshly drawn symbols.
    /// Slots whose symbols sum to zero have no feasible precoder and are skipped.
    pub fn epoch_features(&self, seed: u64, epoch: u64) -> Result<Vec<SlotFeatures>> {
        let psk = Psk::qpsk();
        let n = self.channels.len() as u64;
        let mut out = Vec::with_capacity(self.channels.len());
        for (i, h) in self.channels.samples.iter().enumerate() {
            let mut rng = stream_rng(seed, Stream::Symbols, epoch * n + i as u64);
            let frame = SymbolFrame::random(&psk, h.users(), &mut rng);
            if symbols_cancel(&frame) {
                continue;
            }
            out.push(SlotFeatures::from_slot(&build_slot(h, &frame, 0.0, self.delta, self.half_angle)?)?);
        }
        Ok(out)
    }
}

/// True when the symbols of a frame sum to zero, which zeroes every rotated channel.
pub fn symbols_cancel(frame: &SymbolFrame) -> bool {
    let total: num_complex::Complex64 = frame.symbols.iter().sum();
    total.norm() <= 1e-9 * frame.users().max(1) as f64
}

fn slot_degenerate(slot: &[CiInstance]) -> bool {
    let n = slot.iter().map(|i| i.dim()).sum::<usize>().max(1);
    let energy: f64 = slot.iter().map(|i| i.psi.norm_squared()).sum();
    !((energy / n as f64).sqrt() > DEGENERATE_RMS)
}

/// One parameter-update block.
#[derive(Debug, Clone)]
pub struct PuuBlock {
    pub subnet: Sequential,
    /// Pre-softplus step size.
    pub gamma: LayerParam,
    pub lambda: LayerParam,
}

impl PuuBlock {
    pub fn gamma(&self) -> f64 {
        softplus(self.gamma.values[0])
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.values[0]
    }

    fn params_mut(&mut self) -> Vec<&mut LayerParam> {
        let mut p = self.subnet.params_mut();
        p.push(&mut self.gamma);
        p.push(&mut self.lambda);
        p
    }
}

#[derive(Debug, Clone)]
pub struct UnfoldedModel {
    pub config: ModelConfig,
    pub blocks: Vec<PuuBlock>,
    pub ppu: Sequential,
}

fn barrier_subnet<R: Rng>(cfg: &ModelConfig, index: usize, rng: &mut R) -> Result<Sequential> {
    let name = format!("puu{index}");
    let c = cfg.barrier_channels;
    let conv = Conv2d::new(&format!("{name}.conv"), 1, c, (3, 3), (1, 1), (1, 1), true, rng)?;
    let pool = AvgPool2d::new((1, 1), (1, 1))?;
    let (h, w) = conv.output_hw(2 * cfg.antennas, cfg.users)?;
    let mut fc = Linear::new(&format!("{name}.fc"), c * h * w, 1, true, rng)?;
    if let Some(b) = &mut fc.bias {
        b.values[0] = rng.random_range(0.0..1.0);
    }
    Ok(Sequential::new(vec![
        Layer::Conv2d(conv),
        Layer::AvgPool2d(pool),
        Layer::Softplus(Softplus::new()),
        Layer::Flatten(Flatten::new()),
        Layer::Linear(fc),
        Layer::Softplus(Softplus::new()),
    ]))
}

fn post_processing<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Sequential> {
    let (c1, c2) = cfg.ppu_channels;
    let mut layers = vec![
        Layer::Conv2d(Conv2d::new("ppu.conv1", 2, c1, (3, 3), (1, 1), (1, 1), false, rng)?),
        Layer::BatchNorm2d(BatchNorm2d::new("ppu.bn1", c1)?),
        Layer::PRelu(PRelu::new("ppu.prelu1", 0.25)?),
    ];
    if cfg.sign_activations {
        layers.push(Layer::SignAct(SignAct::new()));
    }
    layers.extend([
        Layer::Conv2d(Conv2d::new("ppu.conv2", c1, c2, (3, 3), (1, 1), (1, 1), false, rng)?),
        Layer::BatchNorm2d(BatchNorm2d::new("ppu.bn2", c2)?),
        Layer::PRelu(PRelu::new("ppu.prelu2", 0.25)?),
    ]);
    if cfg.sign_activations {
        layers.push(Layer::SignAct(SignAct::new()));
    }
    let mut last = Conv2d::new("ppu.conv3", c2, 1, (3, 3), (1, 1), (1, 1), true, rng)?;
    if let Some(b) = &mut last.bias {
        b.values[0] = cfg.ppu_bias_init;
    }
    layers.push(Layer::ColumnStack(ColumnStack::new()));
    layers.push(Layer::Conv2d(last));
    Ok(Sequential::new(layers))
}

/// Build the network for `config`; weights are drawn from `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<UnfoldedModel> {
    config.validate()?;
    let mut rng = stream_rng(config.seed, Stream::Init, 0);
    let mut blocks = Vec::with_capacity(config.blocks);
    for l in 0..config.blocks {
        blocks.push(PuuBlock {
            subnet: barrier_subnet(config, l, &mut rng)?,
            gamma: LayerParam::new(format!("puu{l}.gamma"), Role::Scalar, vec![1], vec![softplus_inverse(0.01)])?,
            lambda: LayerParam::new(format!("puu{l}.lambda"), Role::Scalar, vec![1], vec![0.0])?,
        });
    }
    let ppu = post_processing(config, &mut rng)?;
    let mut model = UnfoldedModel { config: config.clone(), blocks, ppu };
    model.set_precision(config.precision)?;
    Ok(model)
}

/// Cached quantities of one block step.
#[derive(Debug, Clone)]
struct BlockCache {
    v: DVector<f64>,
    k: f64,
    dk_ds: f64,
    dk_dkappa: f64,
}

/// `prox((1 - 2 gamma) w - gamma lambda 1)` for the ball barrier of radius^2 `alpha`.
fn block_step(w: &DVector<f64>, alpha: f64, p: &BarrierParams) -> Result<(DVector<f64>, BlockCache)> {
    let v = w * (1.0 - 2.0 * p.gamma) - DVector::repeat(w.len(), p.gamma * p.lambda);
    if p.gamma * p.upsilon == 0.0 {
        return Ok((v.clone(), BlockCache { v, k: 1.0, dk_ds: 0.0, dk_dkappa: 0.0 }));
    }
    let r = radial_prox(v.norm(), alpha, p.gamma * p.upsilon)?;
    Ok((&v * r.k, BlockCache { v, k: r.k, dk_ds: r.dk_ds, dk_dkappa: r.dk_dkappa }))
}

/// Gradients of a block output with respect to `(gamma, upsilon, lambda)`.
fn block_backward(g: &DVector<f64>, w: &DVector<f64>, cache: &BlockCache, p: &BarrierParams) -> (f64, f64, f64) {
    let s = cache.v.norm();
    let vg = cache.v.dot(g);
    let mut dv = g * cache.k;
    if s > 0.0 {
        dv += &cache.v * (cache.dk_ds * vg / s);
    }
    let dkappa = cache.dk_dkappa * vg;
    let sum_dv: f64 = dv.sum();
    let dgamma = dkappa * p.upsilon - 2.0 * w.dot(&dv) - p.lambda * sum_dv;
    (dgamma, dkappa * p.gamma, -p.gamma * sum_dv)
}

/// Run unfolded blocks with fixed parameters from `w0`.
pub fn unfold_blocks(w0: &DVector<f64>, alpha: f64, params: &[BarrierParams]) -> Result<DVector<f64>> {
    let mut w = w0.clone();
    for p in params {
        w = block_step(&w, alpha, p)?.0;
    }
    Ok(w)
}

/// Ball radius^2 of normalized slots (threshold 1).
const NORMALIZED_ALPHA: f64 = 2.0;

/// Solution of the recovery system `P w = -c sum_j u_j a_j`.
#[derive(Debug, Clone)]
pub struct RecoverySolve {
    pub w: DVector<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    /// True when the system was singular and a ridge was added.
    pub regularized: bool,
}

fn recovery_matrix(normals: &[DVector<f64>], rho: f64, u: &[f64]) -> DMatrix<f64> {
    let n = normals[0].len();
    let total: f64 = u.iter().sum();
    let mut p = DMatrix::identity(n, n) * (1.0 + rho * rho * total);
    for (a, &uj) in normals.iter().zip(u) {
        p.ger(-uj, a, a, 1.0);
    }
    p
}

fn solve_recovery(normals: &[DVector<f64>], rho: f64, u: &[f64], c: f64) -> Result<RecoverySolve> {
    let n = normals[0].len();
    let mut rhs = DVector::zeros(n);
    for (a, &uj) in normals.iter().zip(u) {
        rhs.axpy(-c * uj, a, 1.0);
    }
    let p = recovery_matrix(normals, rho, u);
    let lu = p.clone().lu();
    if let Some(w) = lu.solve(&rhs).filter(|w| w.iter().all(|v| v.is_finite())) {
        return Ok(RecoverySolve { w, lu, regularized: false });
    }
    let lu = (p + DMatrix::identity(n, n) * RECOVERY_RIDGE).lu();
    let w = lu
        .solve(&rhs)
        .filter(|w| w.iter().all(|v| v.is_finite()))
        .ok_or_else(|| SlpError::Numerical("recovery system singular even with ridge".into()))?;
    Ok(RecoverySolve { w, lu, regularized: true })
}

/// `dL/du` given `dL/dw` at a recovered precoder.
fn recovery_backward(g: &DVector<f64>, solve: &RecoverySolve, normals: &[DVector<f64>], rho: f64, c: f64) -> Vec<f64> {
    let Some(gt) = solve.lu.solve(g) else {
        return vec![0.0; normals.len()];
    };
    let gw = gt.dot(&solve.w);
    normals
        .iter()
        .map(|a| {
            let ga = gt.dot(a);
            -c * ga - rho * rho * gw + ga * a.dot(&solve.w)
        })
        .collect()
}

fn slot_normals(slot: &[CiInstance]) -> Vec<DVector<f64>> {
    slot.iter().flat_map(|i| i.normals().map(|a| a.clone())).collect()
}

fn flatten_pairs(pairs: &[MultiplierPair]) -> Vec<f64> {
    pairs.iter().flat_map(|p| [p.upsilon1, p.upsilon2]).collect()
}

fn check_pairs(slot: &[CiInstance], pairs: &[MultiplierPair]) -> Result<()> {
    if slot.is_empty() || pairs.len() != slot.len() {
        return Err(SlpError::Dimension(format!("{} multiplier pairs for {} users", pairs.len(), slot.len())));
    }
    if pairs.iter().any(|p| !(p.upsilon1 >= 0.0 && p.upsilon2 >= 0.0)) {
        return Err(SlpError::Parameter("multipliers must be non-negative".into()));
    }
    Ok(())
}

/// Recovered precoder and whether the system needed a ridge.
#[derive(Debug, Clone)]
pub struct Recovery {
    pub w2: PrecoderVec,
    pub regularized: bool,
}

/// Minimizer in `w2` of the Lagrangian for given multipliers:
/// `w2 = -c P^-1 sum_j u_j a_j` with `P = (1 + rho^2 sum u) I - sum_j u_j a_j a_j'`.
pub fn recover_precoder(slot: &[CiInstance], pairs: &[MultiplierPair]) -> Result<Recovery> {
    check_pairs(slot, pairs)?;
    let inst = &slot[0];
    let rho = inst.delta * inst.q_gain();
    let solve = solve_recovery(&slot_normals(slot), rho, &flatten_pairs(pairs), inst.threshold())?;
    if solve.regularized {
        log::warn!("recovery system singular; solved with ridge {RECOVERY_RIDGE:e}");
    }
    Ok(Recovery { w2: PrecoderVec(solve.w), regularized: solve.regularized })
}

/// Per-slot Lagrangian and its gradients.
fn lagrangian_core(normals: &[DVector<f64>], rho: f64, c: f64, w: &DVector<f64>, u: &[f64]) -> (f64, DVector<f64>, Vec<f64>) {
    let power = w.norm_squared();
    let mut value = power;
    let mut gw = w * 2.0;
    let mut gu = Vec::with_capacity(u.len());
    for (a, &uj) in normals.iter().zip(u) {
        let gap = c - a.dot(w);
        let term = rho * rho * power - gap * gap;
        value += uj * term;
        gw += w * (2.0 * uj * rho * rho);
        gw.axpy(2.0 * uj * gap, a, 1.0);
        gu.push(term);
    }
    (value, gw, gu)
}

/// One entry of a Lagrangian batch.
#[derive(Debug, Clone, Copy)]
pub struct LagrangianSample<'a> {
    pub slot: &'a [CiInstance],
    pub w2: &'a DVector<f64>,
    pub pairs: &'a [MultiplierPair],
}

#[derive(Debug, Clone)]
pub struct LagrangianLoss {
    pub value: f64,
    pub grad_w: Vec<DVector<f64>>,
    pub grad_pairs: Vec<Vec<MultiplierPair>>,
}

/// Batch mean of `|w2|^2 + sum_i sum_j u_ij (delta^2 |Q_j w2|^2 - (c - a_ij' w2)^2)`
/// plus the parameter penalty `penalty` (see [`parameter_penalty`]).
pub fn lagrangian_loss(batch: &[LagrangianSample<'_>], penalty: f64) -> Result<LagrangianLoss> {
    if batch.is_empty() {
        return Err(SlpError::Dimension("empty Lagrangian batch".into()));
    }
    let n = batch.len() as f64;
    let mut out = LagrangianLoss { value: penalty, grad_w: Vec::new(), grad_pairs: Vec::new() };
    for s in batch {
        check_pairs(s.slot, s.pairs)?;
        let inst = &s.slot[0];
        if s.w2.len() != inst.dim() {
            return Err(SlpError::Dimension("precoder length does not match the slot".into()));
        }
        let rho = inst.delta * inst.q_gain();
        let (v, gw, gu) = lagrangian_core(&slot_normals(s.slot), rho, inst.threshold(), s.w2, &flatten_pairs(s.pairs));
        out.value += v / n;
        out.grad_w.push(gw / n);
        out.grad_pairs.push(gu.chunks(2).map(|c| MultiplierPair { upsilon1: c[0] / n, upsilon2: c[1] / n }).collect());
    }
    Ok(out)
}

/// `(mu / L) sum |Omega|^2` over `layers` parameter groups, and its gradient scale.
pub fn parameter_penalty(params: &[&LayerParam], mu: f64, layers: usize) -> f64 {
    let l = layers.max(1) as f64;
    mu / l * params.iter().map(|p| p.values.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
}

fn add_penalty_grad(params: &mut [&mut LayerParam], mu: f64, layers: usize) {
    let scale = 2.0 * mu / layers.max(1) as f64;
    for p in params.iter_mut() {
        for (g, v) in p.grad.iter_mut().zip(&p.values) {
            *g += scale * v;
        }
    }
}

/// Power needed after scaling the direction of `w` onto the constraint
/// boundary (threshold 1), continued linearly below margin [`SURROGATE_KNEE`].
pub fn rescaled_power(normals: &[DVector<f64>], rho: f64, w: &DVector<f64>) -> (f64, DVector<f64>) {
    let m0 = SURROGATE_KNEE;
    let norm = w.norm();
    if norm == 0.0 {
        return (1.0 / (m0 * m0) + 2.0 / (m0 * m0 * m0) * (m0 + rho), DVector::zeros(w.len()));
    }
    let v = w / norm;
    let (j, m) = normals
        .iter()
        .map(|a| -(a.dot(&v) + rho))
        .enumerate()
        .fold((0, f64::INFINITY), |best, (j, e)| if e < best.1 { (j, e) } else { best });
    let (value, dm) = if m > m0 {
        (1.0 / (m * m), -2.0 / (m * m * m))
    } else {
        (1.0 / (m0 * m0) - 2.0 / (m0 * m0 * m0) * (m - m0), -2.0 / (m0 * m0 * m0))
    };
    // dm/dw = -(I - v v') a_j / |w|
    let a = &normals[j];
    let proj = a - &v * v.dot(a);
    (value, proj * (-dm / norm))
}

/// `|w|^2` plus a squared penalty on violated constraints (threshold 1).
pub fn penalty_power(normals: &[DVector<f64>], rho: f64, w: &DVector<f64>) -> (f64, DVector<f64>) {
    let norm = w.norm();
    let mut value = w.norm_squared();
    let mut grad = w * 2.0;
    for a in normals {
        let g = a.dot(w) + rho * norm + 1.0;
        if g > 0.0 {
            value += PENALTY_WEIGHT * g * g;
            grad.axpy(2.0 * PENALTY_WEIGHT * g, a, 1.0);
            if norm > 0.0 {
                grad.axpy(2.0 * PENALTY_WEIGHT * g * rho / norm, w, 1.0);
            }
        }
    }
    (value, grad)
}

/// Scale the direction of `w2` so the tightest constraint holds with equality.
/// `None` when the direction violates some constraint for every scale.
pub fn rescale_to_threshold(slot: &[CiInstance], w2: &DVector<f64>) -> Option<DVector<f64>> {
    let norm = w2.norm();
    if norm == 0.0 {
        return None;
    }
    let v = w2 / norm;
    let inst = slot.first()?;
    let rho = inst.delta * inst.q_gain();
    let m = slot
        .iter()
        .flat_map(|i| i.normals().map(|a| -(a.dot(&v) + rho)))
        .fold(f64::INFINITY, f64::min);
    (m > 0.0).then(|| v * (inst.threshold() / m))
}

/// Result of a forward pass on one slot.
#[derive(Debug, Clone)]
pub struct Inference {
    pub w2: PrecoderVec,
    pub power: f64,
    /// Recovered direction satisfies every constraint after rescaling.
    pub feasible: bool,
    pub pairs: Vec<MultiplierPair>,
    pub regularized: bool,
}

fn feature_tensor(feats: &[&SlotFeatures], m2: usize, k: usize) -> Result<Tensor> {
    let data = feats.iter().flat_map(|f| f.grid.iter().copied()).collect();
    Tensor::new(vec![feats.len(), 1, m2, k], data)
}

fn ppu_input(feats: &[&SlotFeatures], w: &[DVector<f64>], m2: usize, k: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(feats.len() * 2 * m2 * k);
    for (f, wb) in feats.iter().zip(w) {
        data.extend(&f.grid);
        for r in 0..m2 {
            data.extend(std::iter::repeat_n(wb[r], k));
        }
    }
    Tensor::new(vec![feats.len(), 2, m2, k], data)
}

/// `(B, 1, 2MK, 1)` PPU output to `2K` multipliers per sample: user `i`
/// owns positions `[2Mi, 2M(i+1))`; softplus then mean over each half.
fn output_to_multipliers(z: &[f64], m: usize, k: usize) -> Vec<f64> {
    let mut u = Vec::with_capacity(2 * k);
    for i in 0..k {
        for half in 0..2 {
            let start = 2 * m * i + m * half;
            u.push(z[start..start + m].iter().map(|&v| softplus(v)).sum::<f64>() / m as f64);
        }
    }
    u
}

fn multipliers_backward(z: &[f64], du: &[f64], m: usize) -> Vec<f64> {
    z.iter()
        .enumerate()
        .map(|(p, &v)| sigmoid(v) / m as f64 * du[p / m])
        .collect()
}

impl UnfoldedModel {
    pub fn dims(&self) -> (usize, usize) {
        (2 * self.config.antennas, self.config.users)
    }

    pub fn set_precision(&mut self, precision: Precision) -> Result<()> {
        for b in &mut self.blocks {
            b.subnet.set_precision(precision)?;
        }
        self.ppu.set_precision(precision)?;
        self.config.precision = precision;
        Ok(())
    }

    /// Build packed kernels for quantized inference.
    pub fn freeze(&mut self) -> Result<()> {
        for b in &mut self.blocks {
            b.subnet.freeze()?;
        }
        self.ppu.freeze()
    }

    /// Every layer in checkpoint order.
    pub fn layers(&self) -> Vec<&Layer> {
        self.blocks.iter().flat_map(|b| b.subnet.layers.iter()).chain(self.ppu.layers.iter()).collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Layer> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.subnet.layers.iter_mut())
            .chain(self.ppu.layers.iter_mut())
            .collect()
    }

    /// All trainable parameters.
    pub fn params(&self) -> Vec<&LayerParam> {
        let mut p = Vec::new();
        for b in &self.blocks {
            p.extend(b.subnet.params());
            p.push(&b.gamma);
            p.push(&b.lambda);
        }
        p.extend(self.ppu.params());
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Inference memory; batch norm counts as its folded per-channel affine.
    pub fn memory_report(&self) -> MemoryReport {
        let kind = self.config.precision.quant_kind();
        let (mut fp, mut q) = (0, 0);
        for p in self.params() {
            if p.role == Role::Weight && kind.is_some() {
                q += p.len();
            } else {
                fp += p.len();
            }
        }
        memory_estimate(fp, q, kind)
    }

    /// Fixed-parameter view of block `l` for a batch of barrier weights.
    fn block_params(&self, l: usize, upsilon: f64) -> BarrierParams {
        let b = &self.blocks[l];
        BarrierParams { gamma: b.gamma(), upsilon, lambda: b.lambda() }
    }

    /// Barrier weight of block `l` for each sample of `x` `(B, 1, 2M, K)`.
    pub fn barrier_subnet_forward(&self, l: usize, x: &Tensor) -> Result<Vec<f64>> {
        let block = self.blocks.get(l).ok_or_else(|| SlpError::Parameter(format!("no block {l}")))?;
        Ok(block.subnet.infer(x)?.into_data())
    }

    /// Outputs of the first `upto` blocks for each slot.
    fn puu_run(&self, feats: &[&SlotFeatures], upto: usize) -> Result<Vec<DVector<f64>>> {
        let (m2, k) = self.dims();
        let x = feature_tensor(feats, m2, k)?;
        let mut w: Vec<DVector<f64>> = feats.iter().map(|f| f.matched_filter()).collect();
        for l in 0..upto {
            let ups = self.barrier_subnet_forward(l, &x)?;
            for (wb, &u) in w.iter_mut().zip(&ups) {
                *wb = block_step(wb, NORMALIZED_ALPHA, &self.block_params(l, u))?.0;
            }
        }
        Ok(w)
    }

    /// Output of all PUU blocks (normalized units).
    pub fn puu_forward(&self, feats: &[&SlotFeatures]) -> Result<Vec<DVector<f64>>> {
        self.puu_run(feats, self.blocks.len())
    }

    /// Normalized multiplier pairs from the PPU for input `x` `(B, 2, 2M, K)`.
    pub fn ppu_forward(&self, x: &Tensor) -> Result<Vec<Vec<MultiplierPair>>> {
        let z = self.ppu.infer(x)?;
        let per = z.len() / x.batch().max(1);
        Ok(z.data()
            .chunks(per)
            .map(|zb| {
                output_to_multipliers(zb, self.config.antennas, self.config.users)
                    .chunks(2)
                    .map(|c| MultiplierPair { upsilon1: c[0], upsilon2: c[1] })
                    .collect()
            })
            .collect())
    }

    /// Forward pass on a batch of slots; never mutates the model. Slots with
    /// vanishing rotated channels yield an infeasible zero precoder.
    pub fn infer_batch(&self, slots: &[Vec<CiInstance>]) -> Result<Vec<Inference>> {
        let (m2, k) = self.dims();
        if slots.iter().any(|s| s.len() != k || s.iter().any(|i| i.dim() != m2)) {
            return Err(SlpError::Dimension(format!("model expects M = {}, K = {k}", m2 / 2)));
        }
        let live: Vec<usize> = (0..slots.len()).filter(|&i| !slot_degenerate(&slots[i])).collect();
        let feats = live.iter().map(|&i| SlotFeatures::from_slot(&slots[i])).collect::<Result<Vec<_>>>()?;
        let mut out: Vec<Inference> = slots
            .iter()
            .map(|_| Inference {
                w2: PrecoderVec(DVector::zeros(m2)),
                power: 0.0,
                feasible: false,
                pairs: vec![MultiplierPair { upsilon1: 0.0, upsilon2: 0.0 }; k],
                regularized: false,
            })
            .collect();
        if feats.is_empty() {
            return Ok(out);
        }
        let refs: Vec<&SlotFeatures> = feats.iter().collect();
        let w = self.puu_forward(&refs)?;
        let normalized = self.ppu_forward(&ppu_input(&refs, &w, m2, k)?)?;
        for ((&i, f), np) in live.iter().zip(&feats).zip(normalized) {
            let slot = &slots[i];
            let s2 = f.sigma * f.sigma;
            let pairs: Vec<MultiplierPair> = np
                .iter()
                .map(|p| MultiplierPair { upsilon1: p.upsilon1 / s2, upsilon2: p.upsilon2 / s2 })
                .collect();
            let rec = recover_precoder(slot, &pairs)?;
            let (w2, feasible) = match rescale_to_threshold(slot, &rec.w2.0) {
                Some(w) => (w, true),
                None => (rec.w2.0, false),
            };
            let power = w2.norm_squared();
            out[i] = Inference { w2: PrecoderVec(w2), power, feasible, pairs, regularized: rec.regularized };
        }
        Ok(out)
    }

    pub fn infer(&self, slot: &[CiInstance]) -> Result<Inference> {
        Ok(self.infer_batch(std::slice::from_ref(&slot.to_vec()))?.remove(0))
    }
}

/// Loss driving the PPU stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Power after rescaling the recovered direction onto the constraints.
    RescaledPower,
    /// The Lagrangian evaluated at the recovered precoder.
    Lagrangian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub puu_iters: usize,
    pub ppu_iters: usize,
    /// Passes over the training set per outer iteration.
    pub epochs_per_iter: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub mu: f64,
    pub objective: Objective,
    /// Draw new symbols for every pass; otherwise reuse the first draw.
    pub resample_symbols: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            puu_iters: 15,
            ppu_iters: 10,
            epochs_per_iter: 20,
            batch: 200,
            lr: 1e-3,
            lr_decay: 0.65,
            mu: 1e-4,
            objective: Objective::RescaledPower,
            resample_symbols: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.epochs_per_iter == 0 {
            return Err(SlpError::Parameter("batch and epochs must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay < 1.0) || !(self.mu >= 0.0) {
            return Err(SlpError::Parameter("need lr > 0, decay in (0, 1), mu >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub stage: String,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn batches(n: usize, size: usize, seed: u64, pass: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Shuffle, pass));
    order.chunks(size).map(<[usize]>::to_vec).collect()
}

fn count_groups(params: &[&mut LayerParam]) -> usize {
    params.len()
}

fn finish_iteration(trace: &mut LossTrace, stage: &str, losses: &[f64], adam: &mut AdamState, decay: f64) -> Result<()> {
    let loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    let iter = trace.rows.len();
    trace.rows.push(TraceRow { iter, stage: stage.to_string(), loss, lr: adam.lr });
    if !loss.is_finite() {
        return Err(SlpError::Diverged { iteration: iter });
    }
    log::info!("{stage} iteration {iter}: loss {loss:.6e}, lr {:.3e}", adam.lr);
    adam.decay(decay);
    Ok(())
}

/// Block-wise training: each PUU block in turn (earlier blocks frozen),
/// then the PPU. Rows are appended to `trace` even when training fails.
pub fn train(model: &mut UnfoldedModel, set: &TrainingSet, cfg: &TrainConfig, trace: &mut LossTrace) -> Result<()> {
    cfg.validate()?;
    if set.channels.is_empty() {
        return Err(SlpError::Parameter("training set is empty".into()));
    }
    let (m2, k) = model.dims();
    if set.channels.antennas != m2 / 2 || set.channels.users != k {
        return Err(SlpError::Dimension("training channels do not match the model".into()));
    }
    let mut pass = 0u64;
    for l in 0..model.blocks.len() {
        if cfg.puu_iters == 0 {
            break;
        }
        let mut adam = AdamState::new(cfg.lr)?;
        for _ in 0..cfg.puu_iters {
            let mut losses = Vec::new();
            for _ in 0..cfg.epochs_per_iter {
                let feats = set.epoch_features(cfg.seed, if cfg.resample_symbols { pass } else { 0 })?;
                for idx in batches(feats.len(), cfg.batch, cfg.seed, pass) {
                    let refs: Vec<&SlotFeatures> = idx.iter().map(|&i| &feats[i]).collect();
                    losses.push(puu_step(model, l, &refs, cfg, &mut adam)?);
                }
                pass += 1;
            }
            finish_iteration(trace, &format!("puu{l}"), &losses, &mut adam, cfg.lr_decay)?;
        }
    }
    if cfg.ppu_iters > 0 {
        let mut adam = AdamState::new(cfg.lr)?;
        for _ in 0..cfg.ppu_iters {
            let mut losses = Vec::new();
            for _ in 0..cfg.epochs_per_iter {
                let feats = set.epoch_features(cfg.seed, if cfg.resample_symbols { pass } else { 0 })?;
                let refs: Vec<&SlotFeatures> = feats.iter().collect();
                let w = model.puu_forward(&refs)?;
                for idx in batches(feats.len(), cfg.batch, cfg.seed, pass) {
                    let fb: Vec<&SlotFeatures> = idx.iter().map(|&i| &feats[i]).collect();
                    let wb: Vec<DVector<f64>> = idx.iter().map(|&i| w[i].clone()).collect();
                    losses.push(ppu_step(model, &fb, &wb, cfg, &mut adam)?);
                }
                pass += 1;
            }
            finish_iteration(trace, "ppu", &losses, &mut adam, cfg.lr_decay)?;
        }
    }
    Ok(())
}

fn puu_step(model: &mut UnfoldedModel, l: usize, feats: &[&SlotFeatures], cfg: &TrainConfig, adam: &mut AdamState) -> Result<f64> {
    let (m2, k) = model.dims();
    let inputs = model.puu_run(feats, l)?;
    let x = feature_tensor(feats, m2, k)?;
    let block = &mut model.blocks[l];
    block.subnet.zero_grad();
    block.gamma.zero_grad();
    block.lambda.zero_grad();
    let ups = block.subnet.forward(&x, Mode::Train)?;
    let (gamma, lambda) = (block.gamma(), block.lambda());
    let bsz = feats.len() as f64;
    let (mut loss, mut dgamma, mut dlambda) = (0.0, 0.0, 0.0);
    let mut dups = Vec::with_capacity(feats.len());
    for ((f, w), &u) in feats.iter().zip(&inputs).zip(ups.data()) {
        let p = BarrierParams { gamma, upsilon: u, lambda };
        let (out, cache) = block_step(w, NORMALIZED_ALPHA, &p)?;
        let (value, g) = penalty_power(&f.normals, f.rho, &out);
        let (dg, du, dl) = block_backward(&(g / bsz), w, &cache, &p);
        loss += value / bsz;
        dgamma += dg;
        dlambda += dl;
        dups.push(du);
    }
    block.subnet.backward(&Tensor::new(vec![feats.len(), 1], dups)?)?;
    block.gamma.grad[0] += dgamma * sigmoid(block.gamma.values[0]);
    block.lambda.grad[0] += dlambda;
    let mut params = block.params_mut();
    let groups = count_groups(&params);
    loss += parameter_penalty(&params.iter().map(|p| &**p).collect::<Vec<_>>(), cfg.mu, groups);
    add_penalty_grad(&mut params, cfg.mu, groups);
    adam.step(&mut params)?;
    Ok(loss)
}

fn ppu_step(
    model: &mut UnfoldedModel,
    feats: &[&SlotFeatures],
    w_puu: &[DVector<f64>],
    cfg: &TrainConfig,
    adam: &mut AdamState,
) -> Result<f64> {
    let mut loss = ppu_loss_grad(model, feats, w_puu, cfg.objective)?;
    let mut params = model.ppu.params_mut();
    let groups = count_groups(&params);
    loss += parameter_penalty(&params.iter().map(|p| &**p).collect::<Vec<_>>(), cfg.mu, groups);
    add_penalty_grad(&mut params, cfg.mu, groups);
    adam.step(&mut params)?;
    Ok(loss)
}

/// Batch objective of the PPU in training mode; gradients land in the PPU parameters.
fn ppu_loss_grad(model: &mut UnfoldedModel, feats: &[&SlotFeatures], w_puu: &[DVector<f64>], objective: Objective) -> Result<f64> {
    let (m2, k) = model.dims();
    let m = m2 / 2;
    let x = ppu_input(feats, w_puu, m2, k)?;
    model.ppu.zero_grad();
    let z = model.ppu.forward(&x, Mode::Train)?;
    let per = z.len() / feats.len();
    let bsz = feats.len() as f64;
    let mut loss = 0.0;
    let mut dz = Vec::with_capacity(z.len());
    for (f, zb) in feats.iter().zip(z.data().chunks(per)) {
        let u = output_to_multipliers(zb, m, k);
        let solve = solve_recovery(&f.normals, f.rho, &u, 1.0)?;
        let (value, gw, direct) = match objective {
            Objective::RescaledPower => {
                let (v, g) = rescaled_power(&f.normals, f.rho, &solve.w);
                (v, g, vec![0.0; u.len()])
            }
            Objective::Lagrangian => lagrangian_core(&f.normals, f.rho, 1.0, &solve.w, &u),
        };
        let du: Vec<f64> = recovery_backward(&gw, &solve, &f.normals, f.rho, 1.0)
            .into_iter()
            .zip(direct)
            .map(|(a, b)| (a + b) / bsz)
            .collect();
        loss += value / bsz;
        dz.extend(multipliers_backward(zb, &du, m));
    }
    model.ppu.backward(&Tensor::new(z.shape().to_vec(), dz)?)?;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{ball_radius_sq, update_step};
    use crate::channel::{draw_channel, generate_channels};
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    fn slot(seed: u64, m: usize, k: usize, db: f64, delta: f64) -> Vec<CiInstance> {
        let mut rng = stream_rng(seed, Stream::Channel, 0);
        let h = draw_channel(k, m, &mut rng).unwrap();
        let frame = SymbolFrame::random(&Psk::qpsk(), k, &mut rng);
        build_slot(&h, &frame, db, delta, std::f64::consts::FRAC_PI_4).unwrap()
    }

    fn pairs(rng: &mut impl Rng, k: usize, scale: f64) -> Vec<MultiplierPair> {
        (0..k)
            .map(|_| MultiplierPair { upsilon1: scale * rng.random::<f64>(), upsilon2: scale * rng.random::<f64>() })
            .collect()
    }

    #[test]
    fn default_model_shapes() {
        let model = build_model(&ModelConfig::new(4, 4)).unwrap();
        assert_eq!(model.blocks.len(), 2);
        let count = model.parameter_count();
        assert_eq!(count, build_model(&ModelConfig::new(4, 4)).unwrap().parameter_count());
        // subnet: conv 180 + 20, fc 640 + 1; gamma, lambda; PPU: 288 + 32 + 1 + 1152 + 16 + 1 + 72 + 1
        assert_eq!(count, 2 * (200 + 641 + 2) + 288 + 32 + 1 + 1152 + 16 + 1 + 73);
        let x = Tensor::zeros(vec![200, 1, 8, 4]);
        let ups = model.barrier_subnet_forward(0, &x).unwrap();
        assert_eq!(ups.len(), 200);
        let h1 = model.ppu.layers[0].infer(&Tensor::zeros(vec![1, 2, 8, 4])).unwrap();
        assert_eq!(h1.shape(), &[1, 16, 8, 4]);
        let z = model.ppu.infer(&Tensor::zeros(vec![3, 2, 8, 4])).unwrap();
        assert_eq!(z.shape(), &[3, 1, 32, 1]);
        assert!(build_model(&ModelConfig { blocks: 0, ..ModelConfig::new(4, 4) }).is_err());
        assert!(build_model(&ModelConfig::new(0, 4)).is_err());
    }

    #[test]
    fn barrier_subnet_is_positive() {
        let mut rng = stream_rng(1, Stream::Init, 5);
        for seed in 0..5 {
            let model = build_model(&ModelConfig { seed, ..ModelConfig::new(4, 4) }).unwrap();
            let data = (0..10 * 32).map(|_| 10.0 * rng.sample::<f64, _>(StandardNormal)).collect();
            let x = Tensor::new(vec![10, 1, 8, 4], data).unwrap();
            assert!(model.barrier_subnet_forward(0, &x).unwrap().iter().all(|&u| u > 0.0));
        }
    }

    #[test]
    fn barrier_subnet_zero_input_is_traceable() {
        let mut model = build_model(&ModelConfig::new(4, 4)).unwrap();
        if let Layer::Linear(fc) = &mut model.blocks[0].subnet.layers[4] {
            fc.bias.as_mut().unwrap().values[0] = 0.0;
            fc.weight.values.iter_mut().for_each(|w| *w = 0.0);
        }
        let ups = model.barrier_subnet_forward(0, &Tensor::zeros(vec![1, 1, 8, 4])).unwrap();
        assert_relative_eq!(ups[0], std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn ppu_pairs_positive_and_bn_mode_matters() {
        let mut rng = stream_rng(2, Stream::Init, 5);
        let mut model = build_model(&ModelConfig::new(4, 4)).unwrap();
        let data: Vec<f64> = (0..6 * 64).map(|_| rng.sample(StandardNormal)).collect();
        let x = Tensor::new(vec![6, 2, 8, 4], data).unwrap();
        let pairs = model.ppu_forward(&x).unwrap();
        assert!(pairs.iter().flatten().all(|p| p.upsilon1 > 0.0 && p.upsilon2 > 0.0));
        let eval = model.ppu.infer(&x).unwrap();
        let train = model.ppu.forward(&x, Mode::Train).unwrap();
        assert!(eval.data().iter().zip(train.data()).any(|(a, b)| (a - b).abs() > 1e-6));
    }

    #[test]
    fn zero_step_block_is_identity() {
        let w = DVector::from_vec(vec![0.3, -1.0, 0.2, 0.5]);
        let p = BarrierParams { gamma: 0.0, upsilon: 0.7, lambda: 0.4 };
        assert_eq!(unfold_blocks(&w, 2.0, &[p, p]).unwrap(), w);
        let tiny = BarrierParams { gamma: 1e-12, upsilon: 0.7, lambda: 0.4 };
        let inside = &w * 0.1;
        let out = unfold_blocks(&inside, 2.0, &[tiny]).unwrap();
        assert!((out - inside).norm() < 1e-10);
    }

    #[test]
    fn blocks_reproduce_update_steps() {
        let mut rng = stream_rng(3, Stream::Init, 5);
        for seed in 0..50 {
            let s = slot(seed, 4, 3, rng.random_range(0.0..30.0), 0.01);
            let inst = &s[0];
            let params: Vec<BarrierParams> = (0..3)
                .map(|_| BarrierParams {
                    gamma: rng.random_range(0.001..0.3),
                    upsilon: rng.random_range(0.01..2.0),
                    lambda: rng.random_range(-1.0..1.0),
                })
                .collect();
            let w0 = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
            let ours = unfold_blocks(&w0, ball_radius_sq(inst), &params).unwrap();
            let mut reference = w0.clone();
            for p in &params {
                reference = update_step(inst, &reference, p).unwrap();
            }
            assert!((&ours - &reference).norm() <= 1e-12 * (1.0 + reference.norm()));
        }
    }

    #[test]
    fn block_backward_matches_finite_differences() {
        let mut rng = stream_rng(4, Stream::Init, 5);
        for _ in 0..20 {
            let w = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
            let g = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
            let p = BarrierParams {
                gamma: rng.random_range(0.01..0.3),
                upsilon: rng.random_range(0.1..2.0),
                lambda: rng.random_range(-1.0..1.0),
            };
            let (_, cache) = block_step(&w, 2.0, &p).unwrap();
            let (dg, du, dl) = block_backward(&g, &w, &cache, &p);
            let f = |q: BarrierParams| block_step(&w, 2.0, &q).unwrap().0.dot(&g);
            let h = 1e-6;
            let num_g = (f(BarrierParams { gamma: p.gamma + h, ..p }) - f(BarrierParams { gamma: p.gamma - h, ..p })) / (2.0 * h);
            let num_u = (f(BarrierParams { upsilon: p.upsilon + h, ..p }) - f(BarrierParams { upsilon: p.upsilon - h, ..p })) / (2.0 * h);
            let num_l = (f(BarrierParams { lambda: p.lambda + h, ..p }) - f(BarrierParams { lambda: p.lambda - h, ..p })) / (2.0 * h);
            assert_relative_eq!(dg, num_g, epsilon = 1e-6, max_relative = 1e-5);
            assert_relative_eq!(du, num_u, epsilon = 1e-6, max_relative = 1e-5);
            assert_relative_eq!(dl, num_l, epsilon = 1e-6, max_relative = 1e-5);
        }
    }

    #[test]
    fn zero_multipliers_give_zero_precoder() {
        let s = slot(5, 4, 4, 20.0, 0.01);
        let zero = vec![MultiplierPair { upsilon1: 0.0, upsilon2: 0.0 }; 4];
        let rec = recover_precoder(&s, &zero).unwrap();
        assert!(rec.w2.0.iter().all(|&v| v == 0.0));
        assert!(!rec.regularized);
        let negative = vec![MultiplierPair { upsilon1: -1.0, upsilon2: 0.0 }; 4];
        assert!(recover_precoder(&s, &negative).is_err());
        assert!(recover_precoder(&s, &zero[..3]).is_err());
    }

    fn lagrangian_grad_fd(s: &[CiInstance], w: &DVector<f64>, p: &[MultiplierPair]) -> DVector<f64> {
        let f = |x: &DVector<f64>| {
            lagrangian_loss(&[LagrangianSample { slot: s, w2: x, pairs: p }], 0.0).unwrap().value
        };
        let h = 1e-6 * (1.0 + w.norm());
        DVector::from_fn(w.len(), |i, _| {
            let mut a = w.clone();
            a[i] += h;
            let mut b = w.clone();
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
    }

    #[test]
    fn recovered_precoder_is_stationary() {
        let mut rng = stream_rng(6, Stream::Init, 5);
        for seed in 0..30 {
            let k = if seed < 10 { 1 } else { 4 };
            let s = slot(seed, 4, k, rng.random_range(0.0..30.0), 0.01 * (seed % 3) as f64);
            let scale = 10f64.powf(rng.random_range(-3.0..0.0));
            let p = pairs(&mut rng, k, scale);
            let rec = recover_precoder(&s, &p).unwrap();
            let zero = DVector::zeros(8);
            let g0 = lagrangian_grad_fd(&s, &zero, &p).norm();
            let g = lagrangian_grad_fd(&s, &rec.w2.0, &p).norm();
            assert!(g <= 1e-6 * (1.0 + g0) * (1.0 + rec.w2.0.norm()), "{g:e} vs {g0:e}");
            let analytic = lagrangian_loss(&[LagrangianSample { slot: &s, w2: &rec.w2.0, pairs: &p }], 0.0).unwrap();
            assert!(analytic.grad_w[0].norm() <= 1e-8 * (1.0 + g0));
        }
    }

    #[test]
    fn recovery_has_a_limit_for_large_multipliers() {
        let mut rng = stream_rng(7, Stream::Init, 5);
        let s = slot(8, 4, 4, 10.0, 0.01);
        let p = pairs(&mut rng, 4, 1.0);
        let scaled = |t: f64| {
            let q: Vec<MultiplierPair> =
                p.iter().map(|x| MultiplierPair { upsilon1: t * x.upsilon1, upsilon2: t * x.upsilon2 }).collect();
            recover_precoder(&s, &q).unwrap().w2.0
        };
        // limit: (rho^2 sum u I - sum u a a') w = -c sum u a
        let inst = &s[0];
        let rho = inst.delta * inst.q_gain();
        let u = flatten_pairs(&p);
        let normals = slot_normals(&s);
        let mut lim = DMatrix::identity(8, 8) * (rho * rho * u.iter().sum::<f64>());
        let mut rhs = DVector::zeros(8);
        for (a, &uj) in normals.iter().zip(&u) {
            lim.ger(-uj, a, a, 1.0);
            rhs.axpy(-inst.threshold() * uj, a, 1.0);
        }
        let limit = lim.lu().solve(&rhs).unwrap();
        let mut last = f64::INFINITY;
        for t in [1e2, 1e4, 1e6] {
            let err = (scaled(t) - &limit).norm() / limit.norm();
            assert!(err < last);
            last = err;
        }
        assert!(last < 1e-4);
        let (a, b) = (scaled(1.0), scaled(1.0 + 1e-7));
        assert!((a - b).norm() < 1e-4 * (1.0 + limit.norm()));
    }

    #[test]
    fn lagrangian_examples_and_gradients() {
        let s = slot(9, 4, 2, 10.0, 0.05);
        let zero = DVector::zeros(8);
        let none = vec![MultiplierPair { upsilon1: 0.0, upsilon2: 0.0 }; 2];
        let loss = lagrangian_loss(&[LagrangianSample { slot: &s, w2: &zero, pairs: &none }], 0.123).unwrap();
        assert_relative_eq!(loss.value, 0.123);
        let one = vec![MultiplierPair { upsilon1: 1.0, upsilon2: 0.0 }; 2];
        let loss = lagrangian_loss(&[LagrangianSample { slot: &s, w2: &zero, pairs: &one }], 0.0).unwrap();
        assert_relative_eq!(loss.value, -2.0 * s[0].threshold().powi(2), max_relative = 1e-12);
        assert!(lagrangian_loss(&[], 0.0).is_err());
    }

    #[test]
    fn lagrangian_gradients_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = stream_rng(seed, Stream::Init, 6);
            let s1 = slot(seed, 4, 3, 15.0, 0.03);
            let s2 = slot(seed + 100, 4, 3, 5.0, 0.03);
            let w1 = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
            let w2 = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
            let p1 = pairs(&mut rng, 3, 1.0);
            let p2 = pairs(&mut rng, 3, 1.0);
            let eval = |w1: &DVector<f64>, p1: &[MultiplierPair]| {
                lagrangian_loss(
                    &[
                        LagrangianSample { slot: &s1, w2: w1, pairs: p1 },
                        LagrangianSample { slot: &s2, w2: &w2, pairs: &p2 },
                    ],
                    0.0,
                )
                .unwrap()
            };
            let base = eval(&w1, &p1);
            let rel = |a: f64, b: f64| (a - b).abs() / (1e-6 + a.abs().max(b.abs()));
            let h = 1e-5;
            for i in 0..8 {
                let mut a = w1.clone();
                a[i] += h;
                let mut b = w1.clone();
                b[i] -= h;
                let num = (eval(&a, &p1).value - eval(&b, &p1).value) / (2.0 * h);
                assert!(rel(base.grad_w[0][i], num) <= 1e-5);
            }
            for i in 0..3 {
                let mut a = p1.clone();
                a[i].upsilon1 += h;
                let mut b = p1.clone();
                b[i].upsilon1 -= h;
                let num = (eval(&w1, &a).value - eval(&w1, &b).value) / (2.0 * h);
                assert!(rel(base.grad_pairs[0][i].upsilon1, num) <= 1e-5);
            }
        }
    }

    #[test]
    fn surrogate_and_recovery_gradients() {
        let mut rng = stream_rng(10, Stream::Init, 5);
        let f = SlotFeatures::from_slot(&slot(11, 4, 4, 10.0, 0.01)).unwrap();
        for _ in 0..10 {
            let u: Vec<f64> = (0..8).map(|_| rng.random_range(0.001..0.05)).collect();
            let loss = |u: &[f64]| {
                let w = solve_recovery(&f.normals, f.rho, u, 1.0).unwrap().w;
                rescaled_power(&f.normals, f.rho, &w).0 + penalty_power(&f.normals, f.rho, &w).0
            };
            let solve = solve_recovery(&f.normals, f.rho, &u, 1.0).unwrap();
            let g = rescaled_power(&f.normals, f.rho, &solve.w).1 + penalty_power(&f.normals, f.rho, &solve.w).1;
            let du = recovery_backward(&g, &solve, &f.normals, f.rho, 1.0);
            let h = 1e-7;
            for j in 0..8 {
                let mut a = u.clone();
                a[j] += h;
                let mut b = u.clone();
                b[j] -= h;
                let num = (loss(&a) - loss(&b)) / (2.0 * h);
                assert_relative_eq!(du[j], num, epsilon = 1e-4 * (1.0 + num.abs()), max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn rescaled_power_matches_threshold_scaling() {
        let s = slot(12, 4, 1, 10.0, 0.0);
        let f = SlotFeatures::from_slot(&s).unwrap();
        let w = -(s[0].normals()[0] + s[0].normals()[1]);
        let scaled = rescale_to_threshold(&s, &w).unwrap();
        let (value, _) = rescaled_power(&f.normals, f.rho, &w);
        let c = s[0].threshold();
        assert_relative_eq!(scaled.norm_squared(), value * c * c / (f.sigma * f.sigma), max_relative = 1e-12);
        assert!(crate::geometry::max_margin(&s, &scaled).abs() < 1e-9 * c);
        assert!(rescale_to_threshold(&s, &-w).is_none());
    }

    fn tiny_set(seed: u64, n: usize) -> TrainingSet {
        TrainingSet {
            channels: generate_channels(4, 4, n, seed).unwrap(),
            delta: 0.01,
            half_angle: std::f64::consts::FRAC_PI_4,
        }
    }

    #[test]
    fn ppu_objective_gradients_match_finite_differences() {
        let set = tiny_set(5, 12);
        let feats = set.epoch_features(0, 0).unwrap();
        let refs: Vec<&SlotFeatures> = feats.iter().collect();
        for objective in [Objective::RescaledPower, Objective::Lagrangian] {
            let mut model = build_model(&ModelConfig { ppu_bias_init: -1.0, ..ModelConfig::new(4, 4) }).unwrap();
            let w = model.puu_forward(&refs).unwrap();
            ppu_loss_grad(&mut model, &refs, &w, objective).unwrap();
            let grads: Vec<Vec<f64>> = model.ppu.params().iter().map(|p| p.grad.clone()).collect();
            let h = 1e-6;
            for (pi, g) in grads.iter().enumerate() {
                for idx in [0, g.len() / 2, g.len() - 1] {
                    let eval = |delta: f64| {
                        let mut m = model.clone();
                        m.ppu.params_mut()[pi].values[idx] += delta;
                        ppu_loss_grad(&mut m, &refs, &w, objective).unwrap()
                    };
                    let num = (eval(h) - eval(-h)) / (2.0 * h);
                    let err = (g[idx] - num).abs() / (1e-6 + g[idx].abs().max(num.abs()));
                    assert!(err < 1e-4, "{objective:?} param {pi} idx {idx}: {} vs {num}", g[idx]);
                }
            }
        }
    }

    #[test]
    fn zero_iterations_leave_model_unchanged() {
        let mut model = build_model(&ModelConfig::new(4, 4)).unwrap();
        let before = model.params().into_iter().cloned().collect::<Vec<_>>();
        let cfg = TrainConfig { puu_iters: 0, ppu_iters: 0, ..TrainConfig::default() };
        let mut trace = LossTrace::default();
        train(&mut model, &tiny_set(1, 10), &cfg, &mut trace).unwrap();
        assert!(trace.rows.is_empty());
        assert_eq!(model.params().into_iter().cloned().collect::<Vec<_>>(), before);
    }

    #[test]
    fn training_is_deterministic_and_inference_pure() {
        let cfg = TrainConfig { puu_iters: 1, ppu_iters: 2, epochs_per_iter: 1, batch: 10, ..TrainConfig::default() };
        let run = || {
            let mut model = build_model(&ModelConfig::new(4, 4)).unwrap();
            let mut trace = LossTrace::default();
            train(&mut model, &tiny_set(2, 20), &cfg, &mut trace).unwrap();
            (model, trace)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(ta.rows, tb.rows);
        assert_eq!(ta.rows.len(), 4);
        assert_eq!(ta.rows[3].stage, "ppu");
        let pa: Vec<u64> = a.params().iter().flat_map(|p| p.values.iter().map(|v| v.to_bits())).collect();
        let pb: Vec<u64> = b.params().iter().flat_map(|p| p.values.iter().map(|v| v.to_bits())).collect();
        assert_eq!(pa, pb);
        let s = slot(13, 4, 4, 20.0, 0.01);
        let x = a.infer(&s).unwrap();
        let y = a.infer(&s).unwrap();
        assert_eq!(x.w2, y.w2);
        assert!(x.pairs.iter().all(|p| p.upsilon1 > 0.0 && p.upsilon2 > 0.0));
        let mut csv = Vec::new();
        ta.write_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("iter,stage,loss,lr"));
    }

    #[test]
    fn training_trace_mostly_decreases() {
        let cfg = TrainConfig {
            puu_iters: 0,
            ppu_iters: 10,
            epochs_per_iter: 5,
            batch: 50,
            lr: 1e-2,
            resample_symbols: false,
            ..TrainConfig::default()
        };
        let mut model = build_model(&ModelConfig::new(4, 4)).unwrap();
        let mut trace = LossTrace::default();
        train(&mut model, &tiny_set(3, 200), &cfg, &mut trace).unwrap();
        let down = trace.rows.windows(2).filter(|w| w[1].loss <= w[0].loss).count();
        assert!(down * 10 >= 8 * (trace.rows.len() - 1), "{:?}", trace.rows);
    }

    #[test]
    fn quantized_network_matches_dense_quantized_reference() {
        for precision in [Precision::Binary, Precision::Ternary] {
            let mut model = build_model(&ModelConfig { precision, seed: 3, ..ModelConfig::new(4, 4) }).unwrap();
            let slots: Vec<Vec<CiInstance>> = (0..5).map(|i| slot(20 + i, 4, 4, 20.0, 0.01)).collect();
            let dense = model.infer_batch(&slots).unwrap();
            model.freeze().unwrap();
            let packed = model.infer_batch(&slots).unwrap();
            for (a, b) in dense.iter().zip(&packed) {
                assert!((&a.w2.0 - &b.w2.0).norm() <= 1e-10 * (1.0 + a.w2.0.norm()));
            }
        }
    }

    #[test]
    fn cancelled_symbols_give_infeasible_output() {
        let mut rng = stream_rng(14, Stream::Channel, 0);
        let h = draw_channel(4, 4, &mut rng).unwrap();
        let frame = SymbolFrame::from_indices(&Psk::qpsk(), &[0, 1, 2, 3]);
        assert!(symbols_cancel(&frame));
        let s = build_slot(&h, &frame, 10.0, 0.01, std::f64::consts::FRAC_PI_4).unwrap();
        assert!(SlotFeatures::from_slot(&s).is_err());
        let model = build_model(&ModelConfig::new(4, 4)).unwrap();
        let out = model.infer_batch(&[s, slot(15, 4, 4, 10.0, 0.01)]).unwrap();
        assert!(!out[0].feasible);
        assert_eq!(out[0].power, 0.0);
        assert!(out[1].power > 0.0);
    }

    #[test]
    fn memory_ratios_of_default_architecture() {
        let mut model = build_model(&ModelConfig::new(4, 4)).unwrap();
        assert_relative_eq!(model.memory_report().ratio_vs_fp32, 1.0);
        model.set_precision(Precision::Binary).unwrap();
        let b = model.memory_report();
        model.set_precision(Precision::Ternary).unwrap();
        let t = model.memory_report();
        assert!(b.ratio_vs_fp32 >= 15.0, "{b:?}");
        assert!(t.ratio_vs_fp32 >= 10.0, "{t:?}");
        assert!(b.megabytes < t.megabytes);
    }
}
