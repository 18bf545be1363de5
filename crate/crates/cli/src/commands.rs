//! `simulate`, `fit` and `eval`.

use std::path::{Path, PathBuf};

use hsde::datagen::{self, Truth};
use hsde::em::{self, EmFit};
use hsde::inducing::{InducingSequence, MarkModel, WaitingTimeModel};
use hsde::model::InitialState;
use hsde::obs::ObsKind;
use hsde::real::standard_normal;
use hsde::sde::NoiseParams;
use hsde::{GaussianObsModel, ModelParams, ObsModel, ObservationSeries, PointProcessObsModel, SmcResult, TimeGrid};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{self, DataSource, EvalConfig, FitConfig, Generator, InitSpec, SimulateConfig, SCHEMA};
use crate::metrics::{self, Metrics};
use crate::{io, CliError, CliResult};

/// Command-line values that replace top-level config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub iters: Option<usize>,
    pub no_update_all: bool,
}

impl Overrides {
    pub fn simulate(&self, c: &mut SimulateConfig) {
        if self.seed.is_some() {
            c.seed = self.seed;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
    }

    pub fn fit(&self, c: &mut FitConfig) {
        if self.seed.is_some() {
            c.seed = self.seed;
        }
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
        if let Some(n) = self.iters {
            c.em.iterations = n;
        }
        if self.no_update_all {
            c.em.update = em::UpdateFlags::none();
        }
    }

    pub fn eval(&self, c: &mut EvalConfig) {
        if self.seed.is_some() {
            c.seed = self.seed;
        }
        if let Some(o) = &self.out {
            c.out = Some(o.clone());
        }
    }

    pub fn bench(&self, c: &mut config::BenchConfig) {
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        if let Some(o) = &self.out {
            c.out = o.clone();
        }
    }
}

fn log_warnings(w: &[hsde::Warning]) {
    for w in w {
        log::warn!("{w}");
    }
}

/// Writes `obs.csv` and `truth.json` into the output directory.
pub fn simulate(cfg: &SimulateConfig) -> CliResult<Vec<PathBuf>> {
    let (obs, truth) = match cfg.generator.clone() {
        Generator::Chirp(mut s) => {
            s.seed = cfg.seed.unwrap_or(s.seed);
            let d = datagen::gen_chirp::<f64>(&s)?;
            let t = Truth::chirp(&d);
            (d.obs, t)
        }
        Generator::Lorenz(mut s) => {
            s.seed = cfg.seed.unwrap_or(s.seed);
            let d = datagen::gen_lorenz::<f64>(&s)?;
            let t = Truth::lorenz(&d);
            (d.obs, t)
        }
        Generator::Spikes(mut s) => {
            s.seed = cfg.seed.unwrap_or(s.seed);
            let d = datagen::gen_spikes::<f64>(&s)?;
            log_warnings(&d.warnings);
            let t = Truth::spikes(&d);
            (d.obs, t)
        }
        Generator::Model(m) => {
            let params = match (&m.params, &m.params_file) {
                (Some(v), None) => config::params_from_value(v, "generator.params")?,
                (None, Some(p)) => config::read_params(p)?,
                _ => return Err(CliError::config("generator: give exactly one of `params` and `params_file`")),
            };
            let grid = TimeGrid::new(m.dt, m.steps, m.origin)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.unwrap_or(m.seed));
            let d = datagen::simulate_model(&params, &grid, m.enforce_orderliness, &mut rng)?;
            log_warnings(&d.warnings);
            let t = Truth::model(&d, &params);
            (d.obs, t)
        }
    };
    io::ensure_dir(&cfg.out)?;
    let obs_path = cfg.out.join("obs.csv");
    let truth_path = cfg.out.join("truth.json");
    io::write_with(&obs_path, |w| obs.write_csv(w))?;
    io::write_text(&truth_path, &truth.to_json()?)?;
    Ok(vec![obs_path, truth_path])
}

fn load_trial(src: &DataSource) -> CliResult<ObservationSeries<f64>> {
    let r = match src {
        DataSource::Csv { path } => ObservationSeries::read_csv(io::open(path)?),
        DataSource::EventList { path, dt, t_start, t_end, neurons } => {
            ObservationSeries::from_event_list(io::open(path)?, *dt, *t_start, *t_end, *neurons)
        }
    };
    let path = match src {
        DataSource::Csv { path } | DataSource::EventList { path, .. } => path,
    };
    r.map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Loads every trial and applies the quiet-neuron filter. Returns the kept columns too.
pub fn load_trials(cfg: &FitConfig) -> CliResult<(Vec<ObservationSeries<f64>>, Vec<usize>)> {
    if cfg.data.is_empty() {
        return Err(CliError::config("data: at least one trial is required"));
    }
    let mut trials = cfg.data.iter().map(load_trial).collect::<CliResult<Vec<_>>>()?;
    let (kind, m) = (trials[0].kind(), trials[0].obs_dim());
    if trials.iter().any(|t| t.kind() != kind || t.obs_dim() != m) {
        return Err(CliError::config("data: trials differ in observation kind or width"));
    }
    let mut keep: Vec<usize> = (0..m).collect();
    if let Some(min) = cfg.min_spikes {
        if kind != ObsKind::Spikes {
            return Err(CliError::config("min_spikes applies to spike-count data only"));
        }
        keep.retain(|&j| {
            let total: u64 = trials.iter().flat_map(|t| (0..t.len()).map(move |r| t.count_row(r)[j] as u64)).sum();
            total > min
        });
        if keep.is_empty() {
            return Err(CliError::config(format!("no neuron has more than {min} spikes")));
        }
        trials = trials.iter().map(|t| t.select_columns(&keep)).collect::<hsde::Result<_>>()?;
    }
    Ok((trials, keep))
}

fn data_moments(trials: &[ObservationSeries<f64>]) -> (DMatrix<f64>, usize) {
    let m = trials[0].obs_dim();
    let rows: Vec<&[f64]> = trials.iter().flat_map(|t| (0..t.len()).map(move |r| t.real_row(r))).collect();
    let n = rows.len();
    let mut mean = vec![0.0; m];
    for r in &rows {
        for j in 0..m {
            mean[j] += r[j] / n as f64;
        }
    }
    let cov = DMatrix::from_fn(m, m, |i, j| {
        rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).sum::<f64>() / (n.max(2) - 1) as f64
    });
    (cov, n)
}

/// Leading principal directions scaled by their standard deviations, signs fixed.
fn principal_loadings(cov: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let m = cov.nrows();
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut w = DMatrix::zeros(m, d);
    for (c, &k) in order.iter().take(d).enumerate() {
        let v = eig.eigenvectors.column(k);
        let pivot = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        let s = eig.eigenvalues[k].max(0.0).sqrt() * pivot.signum();
        w.set_column(c, &(v * s));
    }
    w
}

fn check_rows(rows: &[Vec<f64>], m: usize, d: usize, what: &str) -> CliResult<DMatrix<f64>> {
    if rows.len() != m || rows.iter().any(|r| r.len() != d) {
        return Err(CliError::config(format!("init.{what}: expected {m} rows of {d} entries")));
    }
    Ok(hsde::linalg::from_rows(rows)?)
}

/// Builds starting parameters from the generic init keys and the data.
pub fn initial_params(spec: &InitSpec, trials: &[ObservationSeries<f64>], seed: u64) -> CliResult<ModelParams<f64>> {
    if let Some(p) = spec.explicit()? {
        return Ok(p);
    }
    let d = spec.latent_dim;
    if d == 0 {
        return Err(CliError::config("init.latent_dim must be >= 1"));
    }
    let m = trials[0].obs_dim();
    let obs = match trials[0].kind() {
        ObsKind::Gaussian => {
            let (cov, _) = data_moments(trials);
            let w = match &spec.loadings {
                Some(rows) => check_rows(rows, m, d, "loadings")?,
                None => principal_loadings(&cov, d),
            };
            let var = spec.obs_var.unwrap_or_else(|| (0.5 * cov.trace() / m as f64).max(1e-6));
            ObsModel::Gaussian(GaussianObsModel::new(w, DMatrix::identity(m, m) * var)?)
        }
        ObsKind::Spikes => {
            let w = match &spec.loadings {
                Some(rows) => check_rows(rows, m, d, "loadings")?,
                None => {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    DMatrix::from_fn(m, d, |_, _| spec.loading_scale * standard_normal::<f64, _>(&mut rng))
                }
            };
            let b = match &spec.baseline {
                Some(b) if b.len() == m => b.clone(),
                Some(b) => {
                    return Err(CliError::config(format!("init.baseline: expected {m} entries, got {}", b.len())))
                }
                None => {
                    let span: f64 = trials.iter().map(|t| t.len() as f64 * t.dt()).sum();
                    (0..m)
                        .map(|j| {
                            let n: u64 =
                                trials.iter().flat_map(|t| (0..t.len()).map(move |r| t.count_row(r)[j] as u64)).sum();
                            ((n as f64).max(0.5) / span).ln()
                        })
                        .collect()
                }
            };
            ObsModel::Spikes(PointProcessObsModel::new(w, b)?)
        }
    };
    let mut p = ModelParams::new(
        obs,
        NoiseParams::uniform(d, spec.sigma_x, spec.sigma_y),
        WaitingTimeModel::from_mean_std(spec.waiting_mean, spec.waiting_std)?,
        MarkModel::isotropic(d, spec.mark_mean, spec.mark_var)?,
    )?;
    if let Some(pr) = &spec.priors {
        p.priors = pr.clone();
    }
    p.initial = InitialState::isotropic(d, spec.x_std, spec.y_std);
    p.repulsion = spec.repulsion;
    p.validate()?;
    Ok(p)
}

#[derive(Serialize)]
struct WeightedSeq<'a> {
    weight: f64,
    sequence: &'a InducingSequence<f64>,
}

#[derive(Serialize)]
struct EventsFile<'a> {
    schema: u32,
    mean_event_count: f64,
    /// Expected number of events pinned in each observation bin.
    times: Vec<f64>,
    density: Vec<f64>,
    map: InducingSequence<f64>,
    sequences: Vec<WeightedSeq<'a>>,
}

/// Posterior expected event count per grid step `1..=K`.
pub fn event_density(res: &SmcResult<f64>) -> Vec<f64> {
    let k = res.grid.steps;
    let mut dens = vec![0.0; k];
    for ws in res.event_posterior() {
        for t in ws.sequence.event_times() {
            let s = res.grid.snap(t);
            if (1..=k).contains(&s) {
                dens[s - 1] += ws.weight;
            }
        }
    }
    dens
}

/// Plug-in observation mean per row: `W E[y]`, or the rate `exp(b + W E[y])` in Hz.
pub fn prediction_rows(res: &SmcResult<f64>, params: &ModelParams<f64>) -> Vec<Vec<f64>> {
    let post = res.smoothed().unwrap_or_else(|| res.posterior());
    (1..=res.grid.steps)
        .map(|k| {
            let y = post.y_mean_row(k);
            match &params.obs {
                ObsModel::Gaussian(g) => g.mean(y),
                ObsModel::Spikes(s) => s.log_rates(y).into_iter().map(f64::exp).collect(),
            }
        })
        .collect()
}

fn write_table(path: &Path, times: &[f64], rows: &[Vec<f64>]) -> CliResult<()> {
    io::write_with(path, |w| {
        let mut out = csv::Writer::from_writer(w);
        let m = rows.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=m).map(|j| format!("mean_{j}")));
        out.write_record(&header)?;
        for (t, r) in times.iter().zip(rows) {
            let mut rec = vec![t.to_string()];
            rec.extend(r.iter().map(|v| v.to_string()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    })
}

fn trial_name(stem: &str, ext: &str, t: usize, n: usize) -> String {
    if n == 1 {
        format!("{stem}.{ext}")
    } else {
        format!("{stem}_t{}.{ext}", t + 1)
    }
}

/// What `fit` reports on stdout.
#[derive(Debug, Clone, Serialize)]
pub struct FitSummary {
    pub iterations: usize,
    pub log_ml: Vec<f64>,
    pub event_counts: Vec<f64>,
    pub files: Vec<PathBuf>,
}

fn write_posteriors(cfg: &FitConfig, fit: &EmFit<f64>, files: &mut Vec<PathBuf>) -> CliResult<()> {
    let n = fit.posteriors.len();
    for (t, res) in fit.posteriors.iter().enumerate() {
        let grid = &res.grid;
        let post = res.smoothed().unwrap_or_else(|| res.posterior());
        for (stem, which) in [("summary", 'y'), ("summary_x", 'x')] {
            let p = cfg.out.join(trial_name(stem, "csv", t, n));
            io::write_with(&p, |w| post.write_csv(grid, which, w))?;
            files.push(p);
        }
        let times: Vec<f64> = (1..=grid.steps).map(|k| grid.time(k)).collect();
        let p = cfg.out.join(trial_name("prediction", "csv", t, n));
        write_table(&p, &times, &prediction_rows(res, &fit.posterior_params))?;
        files.push(p);

        let mut seqs = res.event_posterior();
        seqs.sort_by(|a, b| b.weight.total_cmp(&a.weight));
        seqs.truncate(cfg.events_top);
        let ev = EventsFile {
            schema: SCHEMA,
            mean_event_count: res.mean_event_count(),
            density: event_density(res),
            times,
            map: res.map_sequence(),
            sequences: seqs.iter().map(|s| WeightedSeq { weight: s.weight, sequence: &s.sequence }).collect(),
        };
        let p = cfg.out.join(trial_name("events", "json", t, n));
        io::write_json(&p, &ev)?;
        files.push(p);
    }
    Ok(())
}

/// Runs EM and writes `params.json`, `trace.json` and per-trial posterior files.
pub fn fit(cfg: &FitConfig) -> CliResult<FitSummary> {
    let (trials, keep) = load_trials(cfg)?;
    let mut em_cfg = cfg.em.clone();
    if let Some(s) = cfg.seed {
        em_cfg.smc.seed = s;
    }
    if cfg.threads.is_some() {
        em_cfg.smc.threads = cfg.threads;
    }
    let init = initial_params(&cfg.init, &trials, em_cfg.smc.seed)?;
    for t in &trials {
        init.obs.check_series(t)?;
    }
    io::ensure_dir(&cfg.out)?;
    let mut files = Vec::new();
    if cfg.min_spikes.is_some() {
        let p = cfg.out.join("neurons.json");
        let kept: Vec<usize> = keep.iter().map(|j| j + 1).collect();
        io::write_json(&p, &serde_json::json!({ "schema": SCHEMA, "kept": kept }))?;
        files.push(p);
    }
    let trace_path = cfg.out.join("trace.json");
    let fit = match em::fit_trials(&trials, &init, &em_cfg) {
        Ok(f) => f,
        Err(fail) => {
            io::write_text(&trace_path, &fail.trace.to_json()?)?;
            return Err(CliError::from(fail.error));
        }
    };
    let params_path = cfg.out.join("params.json");
    io::write_text(&params_path, &fit.params.to_json()?)?;
    io::write_text(&trace_path, &fit.trace.to_json()?)?;
    files.push(params_path);
    files.push(trace_path);
    write_posteriors(cfg, &fit, &mut files)?;
    Ok(FitSummary {
        iterations: fit.trace.iterations.len(),
        log_ml: fit.posteriors.iter().map(|r| r.log_marginal_likelihood).collect(),
        event_counts: fit.posteriors.iter().map(|r| r.mean_event_count()).collect(),
        files,
    })
}

pub fn eval(cfg: &EvalConfig) -> CliResult<Metrics> {
    let truth = metrics::load_table(&cfg.truth)?;
    let est = metrics::load_table(&cfg.estimate)?;
    let m = metrics::evaluate(&truth, &est)?;
    if let Some(p) = &cfg.out {
        io::write_json(p, &m)?;
    }
    Ok(m)
}
