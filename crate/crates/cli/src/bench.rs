//! Wall-clock scaling of the particle filter and the exact GP.

use std::time::Instant;

use hsde::datagen::simulate_model;
use hsde::inducing::{MarkModel, WaitingTimeModel};
use hsde::oracle::cubic_cost_probe;
use hsde::sde::NoiseParams;
use hsde::smc::run_filter;
use hsde::{GaussianObsModel, ModelParams, ObsModel, ObservationSeries, TimeGrid};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::BenchConfig;
use crate::{io, CliError, CliResult};

const BENCH_DT: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub seconds: f64,
    pub method: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Log-log slope of filter time against grid length.
    pub smc_slope: Option<f64>,
    pub gp_slope: Option<f64>,
    /// Time ratio between the last and first particle counts.
    pub particle_ratio: Option<f64>,
}

/// Least-squares slope of `ln seconds` on `ln n`.
pub fn log_log_slope(points: &[(usize, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        points.iter().filter(|&&(n, s)| n > 1 && s > 0.0).map(|&(n, s)| ((n as f64).ln(), s.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// One-dimensional Gaussian model of the chirp experiment.
pub fn bench_params() -> hsde::Result<ModelParams<f64>> {
    ModelParams::new(
        ObsModel::Gaussian(GaussianObsModel::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 0.1))?),
        NoiseParams::uniform(1, 0.1, 1e-4),
        WaitingTimeModel::from_mean_std(10.0, 3.0)?,
        MarkModel::isotropic(1, 0.0, 1.0)?,
    )
}

fn bench_data(params: &ModelParams<f64>, steps: usize, seed: u64) -> hsde::Result<ObservationSeries<f64>> {
    let grid = TimeGrid::new(BENCH_DT, steps, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(simulate_model(params, &grid, true, &mut rng)?.obs)
}

fn time_filter(obs: &ObservationSeries<f64>, params: &ModelParams<f64>, cfg: &BenchConfig, u: usize) -> CliResult<f64> {
    let smc = cfg.smc(u);
    let mut best = f64::INFINITY;
    for _ in 0..cfg.repeats.max(1) {
        let start = Instant::now();
        let r = run_filter(obs, params, &smc)?;
        best = best.min(start.elapsed().as_secs_f64());
        std::hint::black_box(r);
    }
    Ok(best)
}

pub fn run(cfg: &BenchConfig) -> CliResult<BenchReport> {
    if cfg.smc_steps.is_empty() && cfg.particle_counts.is_empty() && cfg.gp_sizes.is_empty() {
        return Err(CliError::config("bench: nothing to time"));
    }
    let params = bench_params()?;
    let mut rows = Vec::new();
    let mut smc_pts = Vec::new();
    for &k in &cfg.smc_steps {
        let obs = bench_data(&params, k, cfg.seed)?;
        let s = time_filter(&obs, &params, cfg, cfg.smc_particles)?;
        smc_pts.push((k, s));
        rows.push(BenchRow { n: k, seconds: s, method: "smc_steps" });
    }
    let mut part_pts = Vec::new();
    if !cfg.particle_counts.is_empty() {
        let obs = bench_data(&params, cfg.particle_steps, cfg.seed)?;
        for &u in &cfg.particle_counts {
            let s = time_filter(&obs, &params, cfg, u)?;
            part_pts.push((u, s));
            rows.push(BenchRow { n: u, seconds: s, method: "smc_particles" });
        }
    }
    let mut gp_pts: Vec<(usize, f64)> = cfg.gp_sizes.iter().map(|&n| (n, f64::INFINITY)).collect();
    for _ in 0..cfg.repeats.max(1) {
        for (slot, (_, s)) in gp_pts.iter_mut().zip(cubic_cost_probe(&cfg.gp_sizes, cfg.seed)?) {
            slot.1 = slot.1.min(s);
        }
    }
    rows.extend(gp_pts.iter().map(|&(n, s)| BenchRow { n, seconds: s, method: "gp" }));
    let particle_ratio = match (part_pts.first(), part_pts.last()) {
        (Some(a), Some(b)) if part_pts.len() > 1 => Some(b.1 / a.1),
        _ => None,
    };
    Ok(BenchReport { rows, smc_slope: log_log_slope(&smc_pts), gp_slope: log_log_slope(&gp_pts), particle_ratio })
}

pub fn write_csv(path: &std::path::Path, rows: &[BenchRow]) -> CliResult<()> {
    io::write_with(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        for r in rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    })
}
