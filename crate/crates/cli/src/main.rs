use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use slp_core::channel::{generate_channels, read_dataset, stream_rng, write_dataset, ChannelSet, Psk, Stream, SymbolFrame};
use slp_core::checkpoint::{load_model_file, save_model_file};
use slp_core::eval::{evaluate, ModelSet, SweepSpec};
use slp_core::geometry::build_slot;
use slp_core::ipm::{solve_slp, SolverOptions};
use slp_core::model::{build_model, train, LossTrace, ModelConfig, Objective, TrainConfig, TrainingSet};
use slp_core::nn::Precision;
use slp_core::SlpError;

#[derive(Parser)]
#[command(name = "slp", version, about = "Robust symbol-level precoding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Fp32,
    Binary,
    Ternary,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::Fp32 => Precision::Fp32,
            PrecisionArg::Binary => Precision::Binary,
            PrecisionArg::Ternary => Precision::Ternary,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BitsArg {
    Binary,
    Ternary,
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    RescaledPower,
    Lagrangian,
}

#[derive(Subcommand)]
enum Command {
    /// Draw Rayleigh channels and write a dataset file.
    GenerateData {
        #[arg(long, default_value_t = 4)]
        antennas: usize,
        #[arg(long, default_value_t = 4)]
        users: usize,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve every sample of a dataset with the interior-point baseline.
    Solve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20.0)]
        snr_db: f64,
        /// Squared CSI error bound.
        #[arg(long, default_value_t = 1e-4)]
        error_bound: f64,
        #[arg(long, default_value_t = std::f64::consts::FRAC_PI_4)]
        half_angle: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the unfolded network on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "fp32")]
        precision: PrecisionArg,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 15)]
        puu_iters: usize,
        #[arg(long, default_value_t = 10)]
        ppu_iters: usize,
        #[arg(long, default_value_t = 20)]
        epochs_per_iter: usize,
        #[arg(long, default_value_t = 200)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1e-4)]
        mu: f64,
        /// Squared CSI error bound.
        #[arg(long, default_value_t = 1e-4)]
        error_bound: f64,
        #[arg(long, default_value_t = std::f64::consts::FRAC_PI_4)]
        half_angle: f64,
        #[arg(long, value_enum, default_value = "rescaled-power")]
        objective: ObjectiveArg,
        /// Add sign activations after the PPU PReLUs.
        #[arg(long)]
        sign_activations: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Loss trace CSV (iter, stage, loss, lr).
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize a trained checkpoint's weights.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        bits: BitsArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run sweeps, timing and memory reports from a TOML spec.
    Evaluate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_dataset(path: &Path) -> Result<ChannelSet> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_dataset(BufReader::new(file))?)
}

#[derive(Serialize)]
struct SolveRow {
    sample_id: usize,
    snr_db: f64,
    power: f64,
    max_margin: f64,
    iters: usize,
}

fn solve(data: &Path, snr_db: f64, error_bound: f64, half_angle: f64, out: &Path) -> Result<()> {
    if !(error_bound >= 0.0) {
        bail!("error bound must be non-negative");
    }
    let set = load_dataset(data)?;
    let psk = Psk::qpsk();
    let opts = SolverOptions::default();
    let mut w = csv::Writer::from_path(out)?;
    let (mut solved, mut failed) = (0, 0);
    for (n, h) in set.samples.iter().enumerate() {
        let frame = SymbolFrame::random(&psk, set.users, &mut stream_rng(set.seed, Stream::Symbols, n as u64));
        let slot = build_slot(h, &frame, snr_db, error_bound.sqrt(), half_angle)?;
        let row = match solve_slp(&slot, &opts) {
            Ok(r) => {
                solved += 1;
                SolveRow {
                    sample_id: n,
                    snr_db,
                    power: r.power,
                    max_margin: slp_core::geometry::max_margin(&slot, &r.w2),
                    iters: r.iterations,
                }
            }
            Err(SlpError::Infeasible { max_margin }) => {
                failed += 1;
                SolveRow { sample_id: n, snr_db, power: f64::NAN, max_margin, iters: 0 }
            }
            Err(e) => return Err(e.into()),
        };
        w.serialize(row)?;
    }
    w.flush()?;
    log::info!("solved {solved}, infeasible {failed}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenerateData { antennas, users, count, seed, out } => {
            let set = generate_channels(antennas, users, count, seed)?;
            write_dataset(BufWriter::new(File::create(&out)?), &set)?;
            log::info!("wrote {count} samples to {}", out.display());
        }
        Command::Solve { data, snr_db, error_bound, half_angle, out } => {
            solve(&data, snr_db, error_bound, half_angle, &out)?;
        }
        Command::Train {
            data,
            precision,
            blocks,
            puu_iters,
            ppu_iters,
            epochs_per_iter,
            batch,
            lr,
            mu,
            error_bound,
            half_angle,
            objective,
            sign_activations,
            seed,
            trace,
            out,
        } => {
            let channels = load_dataset(&data)?;
            let config = ModelConfig {
                blocks,
                precision: precision.into(),
                half_angle,
                sign_activations,
                seed,
                ..ModelConfig::new(channels.antennas, channels.users)
            };
            let mut model = build_model(&config)?;
            let cfg = TrainConfig {
                puu_iters,
                ppu_iters,
                epochs_per_iter,
                batch,
                lr,
                mu,
                objective: match objective {
                    ObjectiveArg::RescaledPower => Objective::RescaledPower,
                    ObjectiveArg::Lagrangian => Objective::Lagrangian,
                },
                seed,
                ..TrainConfig::default()
            };
            let set = TrainingSet { channels, delta: error_bound.sqrt(), half_angle };
            let mut losses = LossTrace::default();
            let result = train(&mut model, &set, &cfg, &mut losses);
            if let Some(path) = &trace {
                losses.write_csv(File::create(path)?)?;
            }
            result?;
            model.freeze()?;
            save_model_file(&model, &out)?;
            log::info!("saved {} ({} parameters)", out.display(), model.parameter_count());
        }
        Command::Quantize { model, bits, out } => {
            let mut m = load_model_file(&model)?;
            m.set_precision(match bits {
                BitsArg::Binary => Precision::Binary,
                BitsArg::Ternary => Precision::Ternary,
            })?;
            m.freeze()?;
            save_model_file(&m, &out)?;
            let r = m.memory_report();
            log::info!("{:.4} MB, {:.2}x smaller than fp32", r.megabytes, r.ratio_vs_fp32);
        }
        Command::Evaluate { spec, out } => {
            let sweep = SweepSpec::from_file(&spec)?;
            let base = spec.parent().unwrap_or(Path::new("."));
            let models = ModelSet::load(&sweep, base)?;
            let report = evaluate(&sweep, &models, &out)?;
            for row in report.sinr.iter().chain(&report.bound) {
                println!(
                    "{:<13} snr {:>5.1} dB  delta^2 {:<8.1e} power {:>10.4e}  feasible {:.3}",
                    row.method, row.snr_db, row.delta_sq, row.mean_power, row.feasibility_rate
                );
            }
            for row in &report.timing {
                println!("{:<13} median {:>8.1} us  mean {:>8.1} us", row.method, row.median_us, row.mean_us);
            }
            for row in &report.memory {
                println!("{:<13} {:.5} MB  ratio {:.2}x", row.method, row.megabytes, row.ratio_vs_fp32);
            }
        }
    }
    Ok(())
}
