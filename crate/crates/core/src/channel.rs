//! Rayleigh channels, bounded CSI errors, PSK symbol frames and the rotated
//! real-valued channel representation.

use std::f64::consts::PI;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SlpError};

/// Tolerance on |d| - 1 accepted for a unit-modulus symbol.
const UNIT_MODULUS_TOL: f64 = 1e-9;

pub const DATASET_MAGIC: &[u8; 4] = b"SLPD";
pub const DATASET_VERSION: u32 = 1;

/// Independent random streams derived from one seed. Every sample index gets
/// its own ChaCha stream per domain, so draws are pure in (seed, index).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Channel,
    Symbols,
    CsiError,
    Sinr,
    Init,
    Shuffle,
}

impl Stream {
    fn salt(self) -> u64 {
        match self {
            Stream::Channel => 0x9e37_79b9_7f4a_7c15,
            Stream::Symbols => 0xbf58_476d_1ce4_e5b9,
            Stream::CsiError => 0x94d0_49bb_1331_11eb,
            Stream::Sinr => 0x2545_f491_4f6c_dd1d,
            Stream::Init => 0x6a09_e667_f3bc_c908,
            Stream::Shuffle => 0xbb67_ae85_84ca_a73b,
        }
    }
}

/// RNG for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.salt());
    rng.set_stream(index);
    rng
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// One K×M channel realization, row `i` holding user i's channel h_i.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    users: usize,
    antennas: usize,
    data: Vec<Complex64>,
}

impl ChannelMatrix {
    pub fn new(users: usize, antennas: usize, data: Vec<Complex64>) -> Result<Self> {
        if users == 0 || antennas == 0 {
            return Err(SlpError::Dimension(format!(
                "channel needs K >= 1 and M >= 1, got K={users}, M={antennas}"
            )));
        }
        if data.len() != users * antennas {
            return Err(SlpError::Dimension(format!(
                "expected {} coefficients, got {}",
                users * antennas,
                data.len()
            )));
        }
        Ok(Self {
            users,
            antennas,
            data,
        })
    }

    pub fn users(&self) -> usize {
        self.users
    }

    pub fn antennas(&self) -> usize {
        self.antennas
    }

    pub fn row(&self, user: usize) -> &[Complex64] {
        &self.data[user * self.antennas..(user + 1) * self.antennas]
    }

    pub fn coefficients(&self) -> &[Complex64] {
        &self.data
    }
}

/// A set of i.i.d. Rayleigh channel samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub antennas: usize,
    pub users: usize,
    pub seed: u64,
    pub samples: Vec<ChannelMatrix>,
}

impl ChannelSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Draw one K×M matrix of CN(0, 1) coefficients.
pub fn draw_channel<R: Rng + ?Sized>(
    users: usize,
    antennas: usize,
    rng: &mut R,
) -> Result<ChannelMatrix> {
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let data = (0..users * antennas)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * scale, im * scale)
        })
        .collect();
    ChannelMatrix::new(users, antennas, data)
}

/// `count` flat-fading Rayleigh samples; sample `n` depends only on `(seed, n)`.
pub fn generate_channels(antennas: usize, users: usize, count: usize, seed: u64) -> Result<ChannelSet> {
    if antennas == 0 || users == 0 {
        return Err(SlpError::Dimension(format!(
            "need M >= 1 and K >= 1, got M={antennas}, K={users}"
        )));
    }
    let samples = (0..count)
        .map(|n| draw_channel(users, antennas, &mut stream_rng(seed, Stream::Channel, n as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelSet {
        antennas,
        users,
        seed,
        samples,
    })
}

/// A CSI error realization bounded by `bound` in Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiError {
    pub error: Vec<Complex64>,
    pub bound: f64,
}

impl CsiError {
    pub fn norm(&self) -> f64 {
        self.error.iter().map(|e| e.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Uniform draw from the closed ball of radius `bound` in C^M (= R^{2M}).
    pub fn sample<R: Rng + ?Sized>(antennas: usize, bound: f64, rng: &mut R) -> Result<Self> {
        if !(bound >= 0.0) || !bound.is_finite() {
            return Err(SlpError::Parameter(format!(
                "CSI error bound must be finite and >= 0, got {bound}"
            )));
        }
        if antennas == 0 {
            return Err(SlpError::Dimension("CSI error needs M >= 1".into()));
        }
        let dim = 2 * antennas;
        let mut raw: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u: f64 = rng.random();
        let radius = bound * u.powf(1.0 / dim as f64);
        let scale = if norm > 0.0 { radius / norm } else { 0.0 };
        raw.iter_mut().for_each(|x| *x *= scale);
        let mut error: Vec<Complex64> = raw
            .chunks_exact(2)
            .map(|p| Complex64::new(p[0], p[1]))
            .collect();
        // rounding in the rescale can overshoot the sphere by an ulp
        loop {
            let n = error.iter().map(|e| e.norm_sqr()).sum::<f64>().sqrt();
            if n <= bound {
                break;
            }
            error.iter_mut().for_each(|e| *e *= 1.0 - f64::EPSILON);
        }
        Ok(Self { error, bound })
    }
}

/// Seeded convenience wrapper around [`CsiError::sample`].
pub fn sample_csi_error(antennas: usize, bound: f64, seed: u64) -> Result<CsiError> {
    CsiError::sample(antennas, bound, &mut stream_rng(seed, Stream::CsiError, 0))
}

/// Equiprobable M-PSK with phases pi/order + 2*pi*k/order. QPSK is order 4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psk {
    order: usize,
}

impl Psk {
    pub fn new(order: usize) -> Result<Self> {
        if order < 2 || !order.is_power_of_two() {
            return Err(SlpError::Parameter(format!(
                "PSK order must be a power of two >= 2, got {order}"
            )));
        }
        Ok(Self { order })
    }

    pub fn qpsk() -> Self {
        Self { order: 4 }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn phase(&self, index: usize) -> f64 {
        PI / self.order as f64 + 2.0 * PI * (index % self.order) as f64 / self.order as f64
    }

    /// Half-angle of the detection sector around each constellation point.
    pub fn half_angle(&self) -> f64 {
        PI / self.order as f64
    }

    /// Gray-coded symbol for a group of log2(order) bits, MSB first.
    pub fn map_bits(&self, bits: &[bool]) -> Result<usize> {
        let width = self.order.trailing_zeros() as usize;
        if bits.len() != width {
            return Err(SlpError::Dimension(format!(
                "{}-PSK maps {width} bits, got {}",
                self.order,
                bits.len()
            )));
        }
        let gray = bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
        // inverse Gray code: binary index whose Gray code is `gray`
        let mut index = gray;
        let mut shift = gray >> 1;
        while shift != 0 {
            index ^= shift;
            shift >>= 1;
        }
        Ok(index)
    }
}

/// Transmitted symbols of one slot, one per user.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolFrame {
    pub symbols: Vec<Complex64>,
    pub phases: Vec<f64>,
}

impl SymbolFrame {
    pub fn from_phases(phases: Vec<f64>) -> Self {
        let symbols = phases.iter().map(|&p| Complex64::from_polar(1.0, p)).collect();
        Self { symbols, phases }
    }

    pub fn from_indices(psk: &Psk, indices: &[usize]) -> Self {
        Self::from_phases(indices.iter().map(|&i| psk.phase(i)).collect())
    }

    pub fn random<R: Rng + ?Sized>(psk: &Psk, users: usize, rng: &mut R) -> Self {
        let indices: Vec<usize> = (0..users).map(|_| rng.random_range(0..psk.order())).collect();
        Self::from_indices(psk, &indices)
    }

    pub fn users(&self) -> usize {
        self.symbols.len()
    }

    fn check_unit_modulus(&self) -> Result<()> {
        for (index, d) in self.symbols.iter().enumerate() {
            let modulus = d.norm();
            if (modulus - 1.0).abs() > UNIT_MODULUS_TOL {
                return Err(SlpError::Modulation { index, modulus });
            }
        }
        Ok(())
    }
}

/// Rotated channel of `user`: h_i * sum_k exp(j(phi_k - phi_i)).
pub fn build_rotated_channel(
    row: &[Complex64],
    frame: &SymbolFrame,
    user: usize,
) -> Result<Vec<Complex64>> {
    frame.check_unit_modulus()?;
    if user >= frame.users() {
        return Err(SlpError::Dimension(format!(
            "user {user} out of range for a {}-user frame",
            frame.users()
        )));
    }
    let own = frame.symbols[user].conj();
    let rotation: Complex64 = frame.symbols.iter().map(|d| d * own).sum();
    Ok(row.iter().map(|h| h * rotation).collect())
}

/// Real stacking [Re(v); Im(v)] used for the rotated channel Psi.
pub fn stack_channel(v: &[Complex64]) -> Vec<f64> {
    v.iter().map(|z| z.re).chain(v.iter().map(|z| z.im)).collect()
}

/// Write a dataset file: `SLPD` header then N×K×M (re, im) f32 pairs.
pub fn write_dataset<W: Write>(mut out: W, set: &ChannelSet) -> Result<()> {
    out.write_all(DATASET_MAGIC)?;
    out.write_u32::<LittleEndian>(DATASET_VERSION)?;
    out.write_u32::<LittleEndian>(set.antennas as u32)?;
    out.write_u32::<LittleEndian>(set.users as u32)?;
    out.write_u64::<LittleEndian>(set.samples.len() as u64)?;
    out.write_u64::<LittleEndian>(set.seed)?;
    for sample in &set.samples {
        for h in sample.coefficients() {
            out.write_f32::<LittleEndian>(h.re as f32)?;
            out.write_f32::<LittleEndian>(h.im as f32)?;
        }
    }
    out.flush()?;
    Ok(())
}

const DATASET_HEADER_LEN: u64 = 4 + 4 + 4 + 4 + 8 + 8;

pub fn read_dataset<R: Read>(mut input: R) -> Result<ChannelSet> {
    let truncated = |offset: u64, what: &str| SlpError::Format {
        offset,
        message: format!("truncated dataset while reading {what}"),
    };
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| truncated(0, "magic"))?;
    if &magic != DATASET_MAGIC {
        return Err(SlpError::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected SLPD"),
        });
    }
    let version = input
        .read_u32::<LittleEndian>()
        .map_err(|_| truncated(4, "version"))?;
    if version != DATASET_VERSION {
        return Err(SlpError::Format {
            offset: 4,
            message: format!("unsupported dataset version {version}"),
        });
    }
    let antennas = input
        .read_u32::<LittleEndian>()
        .map_err(|_| truncated(8, "M"))? as usize;
    let users = input
        .read_u32::<LittleEndian>()
        .map_err(|_| truncated(12, "K"))? as usize;
    let count = input
        .read_u64::<LittleEndian>()
        .map_err(|_| truncated(16, "N"))?;
    let seed = input
        .read_u64::<LittleEndian>()
        .map_err(|_| truncated(24, "seed"))?;
    if antennas == 0 || users == 0 {
        return Err(SlpError::Format {
            offset: 8,
            message: format!("invalid dimensions M={antennas}, K={users}"),
        });
    }
    let per_sample = users * antennas;
    let mut samples = Vec::with_capacity(count.min(1 << 20) as usize);
    let mut offset = DATASET_HEADER_LEN;
    for _ in 0..count {
        let mut data = Vec::with_capacity(per_sample);
        for _ in 0..per_sample {
            let re = input
                .read_f32::<LittleEndian>()
                .map_err(|_| truncated(offset, "coefficients"))?;
            let im = input
                .read_f32::<LittleEndian>()
                .map_err(|_| truncated(offset + 4, "coefficients"))?;
            offset += 8;
            data.push(Complex64::new(re as f64, im as f64));
        }
        samples.push(ChannelMatrix::new(users, antennas, data)?);
    }
    Ok(ChannelSet {
        antennas,
        users,
        seed,
        samples,
    })
}
