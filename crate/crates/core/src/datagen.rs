//! Synthetic data: noisy chirp, projected Lorenz trajectories, latent-driven
//! Poisson spike trains and forward draws of the full model.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::inducing::{InducingSequence, MarkModel, WaitingTimeModel};
use crate::model::{ModelParams, SCHEMA_VERSION};
use crate::obs::{ObsModel, ObservationSeries, PointProcessObsModel};
use crate::real::{standard_normal, uniform01, Real};
use crate::sde::{sample_covering_sequence, simulate_path, LatentPath, NoiseParams, TimeGrid};

/// Largest RK4 step, in Lorenz time units.
pub const LORENZ_MAX_STEP: f64 = 1e-3;

fn sample_times<T: Real>(n: usize, rate: f64) -> (Vec<T>, T) {
    let dt = 1.0 / rate;
    ((1..=n).map(|k| T::lit(k as f64 * dt)).collect(), T::lit(dt))
}

fn sample_count(duration: f64, rate: f64) -> usize {
    (duration * rate).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChirpSpec {
    pub duration: f64,
    pub sample_rate: f64,
    pub f0: f64,
    pub f1: f64,
    pub amplitude: f64,
    pub noise_var: f64,
    pub seed: u64,
}

impl Default for ChirpSpec {
    fn default() -> Self {
        Self { duration: 250.0, sample_rate: 2.0, f0: 0.005, f1: 0.05, amplitude: 1.0, noise_var: 0.1, seed: 0 }
    }
}

impl ChirpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.sample_rate > 0.0) {
            return Err(Error::InvalidParameter("chirp duration and sample rate must be > 0".into()));
        }
        if !(self.f0 > 0.0 && self.f1 >= self.f0) {
            return Err(Error::InvalidParameter("chirp needs f1 >= f0 > 0".into()));
        }
        if !(self.noise_var >= 0.0) {
            return Err(Error::InvalidParameter("noise variance must be >= 0".into()));
        }
        Ok(())
    }

    /// Phase in cycles of the linear sweep at time `t`.
    pub fn phase(&self, t: f64) -> f64 {
        self.f0 * t + 0.5 * (self.f1 - self.f0) * t * t / self.duration
    }

    pub fn clean(&self, t: f64) -> f64 {
        self.amplitude * (std::f64::consts::TAU * self.phase(t)).cos()
    }
}

#[derive(Debug, Clone)]
pub struct ChirpData<T: Real> {
    pub obs: ObservationSeries<T>,
    /// Noise-free signal at the observation times.
    pub clean: Vec<T>,
}

pub fn gen_chirp<T: Real>(spec: &ChirpSpec) -> Result<ChirpData<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = sample_count(spec.duration, spec.sample_rate);
    let (times, dt) = sample_times::<T>(n, spec.sample_rate);
    let sd = spec.noise_var.sqrt();
    let clean: Vec<T> = times.iter().map(|&t| T::lit(spec.clean(t.as_f64()))).collect();
    let values =
        clean.iter().map(|&c| if sd > 0.0 { c + T::lit(sd) * standard_normal::<T, _>(&mut rng) } else { c }).collect();
    Ok(ChirpData { obs: ObservationSeries::real(times, dt, 1, values)?, clean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LorenzSpec {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    pub x0: [f64; 3],
    pub duration: f64,
    pub sample_rate: f64,
    /// Lorenz time units elapsed per second of observation time.
    pub time_scale: f64,
    pub obs_dim: usize,
    /// Isotropic observation noise variance.
    pub noise_var: f64,
    pub seed: u64,
}

impl Default for LorenzSpec {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            x0: [-8.0, 7.0, 27.0],
            duration: 50.0,
            sample_rate: 10.0,
            time_scale: 0.1,
            obs_dim: 10,
            noise_var: 1.0,
            seed: 0,
        }
    }
}

impl LorenzSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.duration > 0.0 && self.time_scale > 0.0) {
            return Err(Error::InvalidParameter("Lorenz duration, sample rate and time scale must be > 0".into()));
        }
        if self.obs_dim < 3 {
            return Err(Error::InvalidParameter(format!("Lorenz projection needs M >= 3, got {}", self.obs_dim)));
        }
        if !(self.noise_var >= 0.0) {
            return Err(Error::InvalidParameter("noise variance must be >= 0".into()));
        }
        Ok(())
    }

    pub fn derivative(&self, s: &[f64; 3]) -> [f64; 3] {
        [self.sigma * (s[1] - s[0]), s[0] * (self.rho - s[2]) - s[1], s[0] * s[1] - self.beta * s[2]]
    }

    pub fn rk4_step(&self, s: &[f64; 3], h: f64) -> [f64; 3] {
        let add = |a: &[f64; 3], b: &[f64; 3], c: f64| [a[0] + c * b[0], a[1] + c * b[1], a[2] + c * b[2]];
        let k1 = self.derivative(s);
        let k2 = self.derivative(&add(s, &k1, 0.5 * h));
        let k3 = self.derivative(&add(s, &k2, 0.5 * h));
        let k4 = self.derivative(&add(s, &k3, h));
        std::array::from_fn(|i| s[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
    }

    /// States at `n + 1` sample times starting from `x0`, integrated with
    /// `substeps` RK4 steps per sample.
    pub fn integrate(&self, n: usize, substeps: usize) -> Result<Vec<[f64; 3]>> {
        let h = self.time_scale / self.sample_rate / substeps as f64;
        let mut s = self.x0;
        let mut out = Vec::with_capacity(n + 1);
        out.push(s);
        for k in 1..=n {
            for _ in 0..substeps {
                s = self.rk4_step(&s, h);
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "Lorenz state", step: k });
            }
            out.push(s);
        }
        Ok(out)
    }

    pub fn substeps(&self) -> usize {
        (self.time_scale / self.sample_rate / LORENZ_MAX_STEP).ceil().max(1.0) as usize
    }
}

#[derive(Debug, Clone)]
pub struct LorenzData<T: Real> {
    /// Lorenz state at each observation time.
    pub latent: Vec<[T; 3]>,
    /// Lorenz state at the grid origin.
    pub initial: [T; 3],
    pub projection: DMatrix<T>,
    pub obs: ObservationSeries<T>,
}

pub fn gen_lorenz<T: Real>(spec: &LorenzSpec) -> Result<LorenzData<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = sample_count(spec.duration, spec.sample_rate);
    let states = spec.integrate(n, spec.substeps())?;
    let m = spec.obs_dim;
    let projection = DMatrix::<f64>::from_fn(m, 3, |_, _| standard_normal::<f64, _>(&mut rng));
    let sd = spec.noise_var.sqrt();
    let mut values = Vec::with_capacity(n * m);
    for s in &states[1..] {
        for i in 0..m {
            let mut v = (0..3).map(|j| projection[(i, j)] * s[j]).sum::<f64>();
            if sd > 0.0 {
                v += sd * standard_normal::<f64, _>(&mut rng);
            }
            values.push(T::lit(v));
        }
    }
    let (times, dt) = sample_times::<T>(n, spec.sample_rate);
    let conv = |s: &[f64; 3]| s.map(T::lit);
    Ok(LorenzData {
        latent: states[1..].iter().map(conv).collect(),
        initial: conv(&states[0]),
        projection: projection.map(T::lit),
        obs: ObservationSeries::real(times, dt, m, values)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpikeSpec {
    pub neurons: usize,
    pub duration: f64,
    pub dt: f64,
    pub latent_dim: usize,
    /// Standard deviation of the loading entries.
    pub loading_scale: f64,
    /// Baseline rates (Hz) are drawn log-uniformly from this range.
    pub baseline_range: [f64; 2],
    pub waiting_mean: f64,
    pub waiting_std: f64,
    pub mark_std: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub seed: u64,
}

impl Default for SpikeSpec {
    fn default() -> Self {
        Self {
            neurons: 20,
            duration: 3.0,
            dt: 0.005,
            latent_dim: 2,
            loading_scale: 1.0,
            baseline_range: [5.0, 30.0],
            waiting_mean: 0.4,
            waiting_std: 0.1,
            mark_std: 1.5,
            sigma_x: 0.5,
            sigma_y: 0.01,
            seed: 0,
        }
    }
}

impl SpikeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.duration > 0.0) {
            return Err(Error::InvalidParameter("spike dt and duration must be > 0".into()));
        }
        if self.neurons == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidParameter("need at least one neuron and one latent dimension".into()));
        }
        let [lo, hi] = self.baseline_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidParameter("baseline rates must be > 0 with hi >= lo".into()));
        }
        if !(self.waiting_mean > 0.0 && self.waiting_std > 0.0 && self.mark_std > 0.0) {
            return Err(Error::InvalidParameter("waiting-time and mark scales must be > 0".into()));
        }
        if !(self.loading_scale >= 0.0 && self.sigma_x >= 0.0 && self.sigma_y >= 0.0) {
            return Err(Error::InvalidParameter("loading scale and noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SpikeData<T: Real> {
    pub obs: ObservationSeries<T>,
    pub grid: TimeGrid<T>,
    pub path: LatentPath<T>,
    pub sequence: InducingSequence<T>,
    pub model: PointProcessObsModel<T>,
    pub warnings: Vec<Warning>,
}

pub fn gen_spikes<T: Real>(spec: &SpikeSpec) -> Result<SpikeData<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.latent_dim;
    let steps = sample_count(spec.duration, 1.0 / spec.dt);
    let grid = TimeGrid::new(T::lit(spec.dt), steps, T::zero())?;
    let wt = WaitingTimeModel::from_mean_std(T::lit(spec.waiting_mean), T::lit(spec.waiting_std))?;
    let mk = MarkModel::isotropic(d, T::zero(), T::lit(spec.mark_std * spec.mark_std))?;
    let sequence = sample_covering_sequence(&wt, &mk, &grid, true, &mut rng)?;
    let noise = NoiseParams::uniform(d, T::lit(spec.sigma_x), T::lit(spec.sigma_y));
    let x0 = sequence.points[0].mark.clone();
    let path = simulate_path(&sequence, &grid, &noise, &x0, &vec![T::zero(); d], &mut rng)?;
    let w = DMatrix::from_fn(spec.neurons, d, |_, _| T::lit(spec.loading_scale) * standard_normal::<T, _>(&mut rng));
    let [lo, hi] = spec.baseline_range;
    let b = (0..spec.neurons).map(|_| T::lit(lo.ln() + (hi.ln() - lo.ln()) * uniform01::<f64, _>(&mut rng))).collect();
    let model = PointProcessObsModel::new(w, b)?;
    let (obs, warnings) = ObsModel::Spikes(model.clone()).simulate_series(&path, &grid, &mut rng)?;
    Ok(SpikeData { obs, grid, path, sequence, model, warnings })
}

/// Neurons with more than `min_spikes` spikes in total.
pub fn active_neurons<T: Real>(obs: &ObservationSeries<T>, min_spikes: u64) -> Vec<usize> {
    (0..obs.obs_dim())
        .filter(|&j| {
            let total: u64 = (0..obs.len()).map(|r| obs.count_row(r)[j] as u64).sum();
            total > min_spikes
        })
        .collect()
}

/// A forward draw of the full hierarchical model.
#[derive(Debug, Clone)]
pub struct ModelDraw<T: Real> {
    pub sequence: InducingSequence<T>,
    pub path: LatentPath<T>,
    pub obs: ObservationSeries<T>,
    pub warnings: Vec<Warning>,
}

pub fn simulate_model<T: Real, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    grid: &TimeGrid<T>,
    enforce_orderliness: bool,
    rng: &mut R,
) -> Result<ModelDraw<T>> {
    params.validate()?;
    let d = params.latent_dim();
    let sequence = sample_covering_sequence(&params.waiting_time, &params.marks, grid, enforce_orderliness, rng)?;
    let mut x0 = vec![T::zero(); d];
    let mut y0 = vec![T::zero(); d];
    params.initial.sample_into(rng, &mut x0, &mut y0);
    let path = simulate_path(&sequence, grid, &params.noise, &x0, &y0, rng)?;
    let (obs, warnings) = params.obs.simulate_series(&path, grid, rng)?;
    Ok(ModelDraw { sequence, path, obs, warnings })
}

/// Ground truth written next to generated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Truth {
    pub schema: u32,
    pub generator: String,
    pub times: Vec<f64>,
    /// Latent state at each observation time, one row per observation.
    pub latent: Vec<Vec<f64>>,
    /// Noise-free observation mean, when defined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loadings: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<InducingSequence<f64>>,
}

fn rows_f64<T: Real>(m: &DMatrix<T>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)].as_f64()).collect()).collect()
}

fn sequence_f64<T: Real>(s: &InducingSequence<T>) -> InducingSequence<f64> {
    InducingSequence {
        origin: s.origin.as_f64(),
        points: s
            .points
            .iter()
            .map(|p| crate::inducing::InducingPoint {
                tau: p.tau.as_f64(),
                mark: p.mark.iter().map(|v| v.as_f64()).collect(),
            })
            .collect(),
    }
}

fn path_rows<T: Real>(path: &LatentPath<T>, y: bool) -> Vec<Vec<f64>> {
    (1..=path.steps())
        .map(|k| {
            let v = if y { path.y(k) } else { path.x(k) };
            v.iter().map(|a| a.as_f64()).collect()
        })
        .collect()
}

impl Truth {
    fn base<T: Real>(generator: &str, obs: &ObservationSeries<T>, latent: Vec<Vec<f64>>) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            generator: generator.into(),
            times: obs.times().iter().map(|t| t.as_f64()).collect(),
            latent,
            clean: None,
            x: None,
            loadings: None,
            baseline: None,
            events: None,
        }
    }

    pub fn chirp<T: Real>(d: &ChirpData<T>) -> Self {
        let clean: Vec<Vec<f64>> = d.clean.iter().map(|c| vec![c.as_f64()]).collect();
        let mut t = Self::base("chirp", &d.obs, clean.clone());
        t.clean = Some(clean);
        t
    }

    pub fn lorenz<T: Real>(d: &LorenzData<T>) -> Self {
        let latent: Vec<Vec<f64>> = d.latent.iter().map(|s| s.iter().map(|v| v.as_f64()).collect()).collect();
        let clean = latent
            .iter()
            .map(|s| {
                (0..d.projection.nrows()).map(|i| (0..3).map(|j| d.projection[(i, j)].as_f64() * s[j]).sum()).collect()
            })
            .collect();
        let mut t = Self::base("lorenz", &d.obs, latent);
        t.clean = Some(clean);
        t.loadings = Some(rows_f64(&d.projection));
        t
    }

    pub fn spikes<T: Real>(d: &SpikeData<T>) -> Self {
        let mut t = Self::base("spikes", &d.obs, path_rows(&d.path, true));
        t.x = Some(path_rows(&d.path, false));
        t.loadings = Some(rows_f64(d.model.w()));
        t.baseline = Some(d.model.b().iter().map(|b| b.as_f64().exp()).collect());
        t.events = Some(sequence_f64(&d.sequence));
        t
    }

    pub fn model<T: Real>(d: &ModelDraw<T>, params: &ModelParams<T>) -> Self {
        let mut t = Self::base("model", &d.obs, path_rows(&d.path, true));
        t.x = Some(path_rows(&d.path, false));
        t.events = Some(sequence_f64(&d.sequence));
        let clean = (1..=d.path.steps())
            .map(|k| match &params.obs {
                ObsModel::Gaussian(g) => g.mean(d.path.y(k)).iter().map(|v| v.as_f64()).collect(),
                ObsModel::Spikes(s) => s.log_rates(d.path.y(k)).iter().map(|v| v.as_f64().exp()).collect(),
            })
            .collect();
        t.clean = Some(clean);
        match &params.obs {
            ObsModel::Gaussian(g) => t.loadings = Some(rows_f64(g.w())),
            ObsModel::Spikes(s) => {
                t.loadings = Some(rows_f64(s.w()));
                t.baseline = Some(s.b().iter().map(|b| b.as_f64().exp()).collect());
            }
        }
        t
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        if t.schema != SCHEMA_VERSION {
            return Err(Error::Input(format!("unsupported schema {}", t.schema)));
        }
        Ok(t)
    }
}
