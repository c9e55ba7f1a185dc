//! Monte-Carlo sweeps, latency benchmarks and memory reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::{generate_channels, stream_rng, Psk, Stream, SymbolFrame};
use crate::checkpoint::load_model_file;
use crate::error::{Result, SlpError};
use crate::geometry::{build_slot, max_margin, CiInstance};
use crate::ipm::{solve_slp, SolverOptions};
use crate::model::UnfoldedModel;
use crate::nn::Precision;

/// Largest worst-case margin still counted as satisfying the constraints.
pub const MARGIN_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ipm,
    DnetFp32,
    DnetBinary,
    DnetTernary,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ipm => "ipm",
            Method::DnetFp32 => "dnet_fp32",
            Method::DnetBinary => "dnet_binary",
            Method::DnetTernary => "dnet_ternary",
        }
    }

    pub fn precision(self) -> Option<Precision> {
        match self {
            Method::Ipm => None,
            Method::DnetFp32 => Some(Precision::Fp32),
            Method::DnetBinary => Some(Precision::Binary),
            Method::DnetTernary => Some(Precision::Ternary),
        }
    }
}

fn default_users() -> usize {
    4
}

fn default_half_angle() -> f64 {
    std::f64::consts::FRAC_PI_4
}

fn default_bound_snr() -> f64 {
    30.0
}

fn default_delta_sq() -> f64 {
    1e-4
}

fn default_warmup() -> usize {
    10
}

/// Evaluation plan, usually read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub snr_points: Vec<f64>,
    pub error_bounds: Vec<f64>,
    pub methods: Vec<Method>,
    pub samples: usize,
    pub seed: u64,
    #[serde(default = "default_users")]
    pub antennas: usize,
    #[serde(default = "default_users")]
    pub users: usize,
    #[serde(default = "default_half_angle")]
    pub half_angle: f64,
    /// `delta^2` used by the SINR sweep.
    #[serde(default = "default_delta_sq")]
    pub delta_sq: f64,
    /// SINR of the error-bound sweep in dB.
    #[serde(default = "default_bound_snr")]
    pub bound_snr_db: f64,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Checkpoint paths keyed by method name.
    #[serde(default)]
    pub models: std::collections::BTreeMap<String, PathBuf>,
}

impl SweepSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| SlpError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_points.is_empty() || self.error_bounds.is_empty() || self.methods.is_empty() {
            return Err(SlpError::Config("snr_points, error_bounds and methods must be non-empty".into()));
        }
        if self.samples == 0 {
            return Err(SlpError::Config("samples must be at least 1".into()));
        }
        if self.error_bounds.iter().any(|&d| !(d >= 0.0)) || !(self.delta_sq >= 0.0) {
            return Err(SlpError::Config("error bounds must be non-negative".into()));
        }
        if self.warmup < 10 {
            return Err(SlpError::Config("warmup must be at least 10 runs".into()));
        }
        Ok(())
    }
}

/// One row of a power sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub method: String,
    pub snr_db: f64,
    pub delta_sq: f64,
    /// Mean over samples meeting the constraints (0 when none do).
    pub mean_power: f64,
    pub feasibility_rate: f64,
    pub mean_time_us: f64,
    pub sample_count: usize,
    /// Samples without a precoder meeting the constraints.
    pub failures: usize,
}

/// Test slots: channels and symbols are fixed by the seed, only the
/// SINR target and bound vary across a sweep.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub channels: crate::channel::ChannelSet,
    pub frames: Vec<SymbolFrame>,
    pub half_angle: f64,
}

impl TestSet {
    pub fn generate(antennas: usize, users: usize, samples: usize, seed: u64, half_angle: f64) -> Result<Self> {
        let channels = generate_channels(antennas, users, samples, seed)?;
        let psk = Psk::qpsk();
        let frames = (0..samples)
            .map(|n| SymbolFrame::random(&psk, users, &mut stream_rng(seed, Stream::Symbols, n as u64)))
            .collect();
        Ok(Self { channels, frames, half_angle })
    }

    pub fn slots(&self, snr_db: f64, delta_sq: f64) -> Result<Vec<Vec<CiInstance>>> {
        let delta = delta_sq.sqrt();
        self.channels
            .samples
            .iter()
            .zip(&self.frames)
            .map(|(h, f)| build_slot(h, f, snr_db, delta, self.half_angle))
            .collect()
    }
}

/// Per-sample outcome of one method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    /// Power when the constraints hold within [`MARGIN_TOL`].
    pub power: Option<f64>,
    pub time_us: f64,
}

fn accepted(slot: &[CiInstance], w2: &nalgebra::DVector<f64>) -> Option<f64> {
    (max_margin(slot, w2) <= MARGIN_TOL).then(|| w2.norm_squared())
}

/// Run one method on every slot, one slot at a time.
pub fn run_method(method: Method, model: Option<&UnfoldedModel>, slots: &[Vec<CiInstance>]) -> Result<Vec<Outcome>> {
    let opts = SolverOptions::default();
    slots
        .iter()
        .map(|slot| {
            let start = Instant::now();
            let power = match (method, model) {
                (Method::Ipm, _) => solve_slp(slot, &opts).ok().and_then(|r| accepted(slot, &r.w2)),
                (_, Some(m)) => {
                    let out = m.infer(slot)?;
                    if out.feasible {
                        accepted(slot, &out.w2.0)
                    } else {
                        None
                    }
                }
                (_, None) => return Err(missing_model(method)),
            };
            Ok(Outcome { power, time_us: start.elapsed().as_secs_f64() * 1e6 })
        })
        .collect()
}

fn missing_model(method: Method) -> SlpError {
    SlpError::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("no checkpoint given for method {}", method.name()),
    ))
}

pub fn summarize(method: Method, snr_db: f64, delta_sq: f64, outcomes: &[Outcome]) -> ResultRow {
    let ok: Vec<f64> = outcomes.iter().filter_map(|o| o.power).collect();
    let n = outcomes.len();
    ResultRow {
        method: method.name().to_string(),
        snr_db,
        delta_sq,
        mean_power: if ok.is_empty() { 0.0 } else { ok.iter().sum::<f64>() / ok.len() as f64 },
        feasibility_rate: if n == 0 { 0.0 } else { ok.len() as f64 / n as f64 },
        mean_time_us: outcomes.iter().map(|o| o.time_us).sum::<f64>() / n.max(1) as f64,
        sample_count: n,
        failures: n - ok.len(),
    }
}

/// Learned models available to a sweep.
#[derive(Debug, Default)]
pub struct ModelSet {
    pub fp32: Option<UnfoldedModel>,
    pub binary: Option<UnfoldedModel>,
    pub ternary: Option<UnfoldedModel>,
}

impl ModelSet {
    pub fn get(&self, method: Method) -> Option<&UnfoldedModel> {
        match method {
            Method::Ipm => None,
            Method::DnetFp32 => self.fp32.as_ref(),
            Method::DnetBinary => self.binary.as_ref(),
            Method::DnetTernary => self.ternary.as_ref(),
        }
    }

    pub fn insert(&mut self, method: Method, model: UnfoldedModel) {
        match method {
            Method::Ipm => {}
            Method::DnetFp32 => self.fp32 = Some(model),
            Method::DnetBinary => self.binary = Some(model),
            Method::DnetTernary => self.ternary = Some(model),
        }
    }

    /// Load the checkpoints named in `spec` for its learned methods.
    pub fn load(spec: &SweepSpec, base: &Path) -> Result<Self> {
        let mut set = Self::default();
        for &method in &spec.methods {
            if method == Method::Ipm {
                continue;
            }
            let path = spec.models.get(method.name()).ok_or_else(|| missing_model(method))?;
            let path = if path.is_relative() { base.join(path) } else { path.clone() };
            set.insert(method, load_model_file(&path)?);
        }
        Ok(set)
    }

    fn require(&self, method: Method) -> Result<Option<&UnfoldedModel>> {
        match method {
            Method::Ipm => Ok(None),
            m => self.get(m).map(Some).ok_or_else(|| missing_model(m)),
        }
    }
}

fn sweep(spec: &SweepSpec, models: &ModelSet, points: &[(f64, f64)]) -> Result<Vec<ResultRow>> {
    let test = TestSet::generate(spec.antennas, spec.users, spec.samples, spec.seed, spec.half_angle)?;
    let mut rows = Vec::new();
    for &(snr, dsq) in points {
        let slots = test.slots(snr, dsq)?;
        for &method in &spec.methods {
            let outcomes = run_method(method, models.require(method)?, &slots)?;
            let row = summarize(method, snr, dsq, &outcomes);
            log::info!("{} at {snr} dB, delta^2 {dsq:e}: power {:.4e}, feasible {:.3}", row.method, row.mean_power, row.feasibility_rate);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Mean power per method and SINR point at `spec.delta_sq`.
pub fn sweep_power_vs_sinr(spec: &SweepSpec, models: &ModelSet) -> Result<Vec<ResultRow>> {
    let points: Vec<(f64, f64)> = spec.snr_points.iter().map(|&s| (s, spec.delta_sq)).collect();
    sweep(spec, models, &points)
}

/// Mean power per method and error bound at `spec.bound_snr_db`.
pub fn sweep_power_vs_errorbound(spec: &SweepSpec, models: &ModelSet) -> Result<Vec<ResultRow>> {
    let points: Vec<(f64, f64)> = spec.error_bounds.iter().map(|&d| (spec.bound_snr_db, d)).collect();
    sweep(spec, models, &points)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub method: String,
    pub median_us: f64,
    pub mean_us: f64,
    pub samples: usize,
}

/// Per-sample latency of each model with batch size 1, single-threaded.
pub fn benchmark_inference(models: &[(String, &UnfoldedModel)], slots: &[Vec<CiInstance>], warmup: usize) -> Result<Vec<TimingRow>> {
    if slots.is_empty() {
        return Err(SlpError::Parameter("benchmark needs at least one slot".into()));
    }
    let warmup = warmup.max(10);
    models
        .iter()
        .map(|(name, model)| {
            for i in 0..warmup {
                std::hint::black_box(model.infer(&slots[i % slots.len()])?);
            }
            let mut times = Vec::with_capacity(slots.len());
            for slot in slots {
                let start = Instant::now();
                std::hint::black_box(model.infer(std::hint::black_box(slot))?);
                times.push(start.elapsed().as_secs_f64() * 1e6);
            }
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            Ok(TimingRow { method: name.clone(), median_us: median(&mut times), mean_us: mean, samples: slots.len() })
        })
        .collect()
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryRow {
    pub method: String,
    pub fp_params: usize,
    pub quantized_params: usize,
    pub bits_per_quantized: usize,
    pub megabytes: f64,
    pub ratio_vs_fp32: f64,
}

pub fn memory_rows(models: &[(String, &UnfoldedModel)]) -> Vec<MemoryRow> {
    models
        .iter()
        .map(|(name, m)| {
            let r = m.memory_report();
            MemoryRow {
                method: name.clone(),
                fp_params: r.fp_params,
                quantized_params: r.quantized_params,
                bits_per_quantized: r.bits_per_quantized,
                megabytes: r.megabytes,
                ratio_vs_fp32: r.ratio_vs_fp32,
            }
        })
        .collect()
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(SlpError::Dimension("spearman needs two equal series of length >= 2".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let mean = (x.len() as f64 + 1.0) / 2.0;
    let (mut num, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        num += (a - mean) * (b - mean);
        sx += (a - mean) * (a - mean);
        sy += (b - mean) * (b - mean);
    }
    if sx == 0.0 || sy == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (sx * sy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Two-column plot files `<stem>_<method>.dat`, x from `x_of`.
pub fn write_dat(dir: &Path, stem: &str, rows: &[ResultRow], x_of: fn(&ResultRow) -> f64) -> Result<Vec<PathBuf>> {
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.dedup();
    methods.sort_unstable();
    methods.dedup();
    let mut written = Vec::new();
    for method in methods {
        let mut text = String::new();
        for r in rows.iter().filter(|r| r.method == method) {
            text.push_str(&format!("{:e} {:e}\n", x_of(r), r.mean_power));
        }
        let path = dir.join(format!("{stem}_{method}.dat"));
        fs::write(&path, text)?;
        written.push(path);
    }
    Ok(written)
}

/// Everything `evaluate` writes.
#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub sinr: Vec<ResultRow>,
    pub bound: Vec<ResultRow>,
    pub timing: Vec<TimingRow>,
    pub memory: Vec<MemoryRow>,
}

/// Run both sweeps, the benchmark and the memory report; write CSV and
/// `.dat` files into `out`.
pub fn evaluate(spec: &SweepSpec, models: &ModelSet, out: &Path) -> Result<EvaluationReport> {
    spec.validate()?;
    fs::create_dir_all(out)?;
    let sinr = sweep_power_vs_sinr(spec, models)?;
    let bound = sweep_power_vs_errorbound(spec, models)?;
    let learned: Vec<(String, &UnfoldedModel)> = spec
        .methods
        .iter()
        .filter_map(|&m| models.get(m).map(|model| (m.name().to_string(), model)))
        .collect();
    let test = TestSet::generate(spec.antennas, spec.users, spec.samples, spec.seed, spec.half_angle)?;
    let snr = spec.snr_points[spec.snr_points.len() / 2];
    let timing = if learned.is_empty() {
        Vec::new()
    } else {
        benchmark_inference(&learned, &test.slots(snr, spec.delta_sq)?, spec.warmup)?
    };
    let memory = memory_rows(&learned);
    write_csv(&out.join("power_vs_sinr.csv"), &sinr)?;
    write_csv(&out.join("power_vs_bound.csv"), &bound)?;
    write_csv(&out.join("timing.csv"), &timing)?;
    write_csv(&out.join("memory.csv"), &memory)?;
    write_dat(out, "power_vs_sinr", &sinr, |r| r.snr_db)?;
    write_dat(out, "power_vs_bound", &bound, |r| r.delta_sq)?;
    Ok(EvaluationReport { sinr, bound, timing, memory })
}
