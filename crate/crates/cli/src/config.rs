//! Run configurations, one JSON document per command.

use std::path::{Path, PathBuf};

use hsde::datagen::{ChirpSpec, LorenzSpec, SpikeSpec};
use hsde::em::EmConfig;
use hsde::inducing::{PriorHyperparams, RepulsionParams};
use hsde::smc::{SmcConfig, Storage};
use hsde::ModelParams;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const SCHEMA: u32 = 1;

fn default_out() -> PathBuf {
    PathBuf::from(".")
}

/// `simulate`: draw a data set and its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub schema: u32,
    /// Replaces the generator's own seed when set.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub generator: Generator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    Chirp(ChirpSpec),
    Lorenz(LorenzSpec),
    Spikes(SpikeSpec),
    Model(ModelSim),
}

/// Forward draw of the full hierarchical model on a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSim {
    /// Inline parameters; exclusive with `params_file`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamsValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_file: Option<PathBuf>,
    pub steps: usize,
    pub dt: f64,
    #[serde(default)]
    pub origin: f64,
    #[serde(default = "yes")]
    pub enforce_orderliness: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

/// Parameters kept as raw JSON so that the config stays comparable.
pub type ParamsValue = serde_json::Value;

/// `fit`: EM on one or more trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub schema: u32,
    /// Replaces `em.smc.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Replaces `em.smc.threads` when set.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// One entry per trial.
    pub data: Vec<DataSource>,
    /// Keep only neurons with more than this many spikes over all trials.
    #[serde(default)]
    pub min_spikes: Option<u64>,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub em: EmConfig,
    /// Number of highest-weight event sequences written to `events.json`.
    #[serde(default = "default_events_top")]
    pub events_top: usize,
}

fn default_events_top() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Observation CSV, `t,z1..zM` or `t,n1..nM`.
    Csv { path: PathBuf },
    /// Spike times `neuron_id,time_s`, binned on `[t_start, t_end)`.
    EventList {
        path: PathBuf,
        dt: f64,
        t_start: f64,
        t_end: f64,
        #[serde(default)]
        neurons: Option<usize>,
    },
}

/// Starting parameters: either a complete parameter file or the generic keys below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params_file: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<ParamsValue>,
    pub latent_dim: usize,
    /// Loading rows, `M x D`. Gaussian default: leading principal directions.
    pub loadings: Option<Vec<Vec<f64>>>,
    /// Isotropic Gaussian noise variance; default half the mean data variance.
    pub obs_var: Option<f64>,
    /// Spike baselines in log Hz; default the log empirical rates.
    pub baseline: Option<Vec<f64>>,
    /// Std of random spike loadings when `loadings` is absent.
    pub loading_scale: f64,
    pub waiting_mean: f64,
    pub waiting_std: f64,
    pub mark_mean: f64,
    pub mark_var: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub x_std: f64,
    pub y_std: f64,
    pub priors: Option<PriorHyperparams<f64>>,
    pub repulsion: Option<RepulsionParams<f64>>,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            params_file: None,
            params: None,
            latent_dim: 1,
            loadings: None,
            obs_var: None,
            baseline: None,
            loading_scale: 0.1,
            waiting_mean: 40.0,
            waiting_std: 8.94,
            mark_mean: 0.0,
            mark_var: 1.0,
            sigma_x: 0.1,
            sigma_y: 1e-4,
            x_std: 1.0,
            y_std: 1.0,
            priors: None,
            repulsion: None,
        }
    }
}

impl InitSpec {
    /// A complete parameter set given inline or by file, if any.
    pub fn explicit(&self) -> Result<Option<ModelParams<f64>>, CliError> {
        let generic = Self { params_file: None, params: None, ..self.clone() };
        let given = self.params_file.is_some() as u8 + self.params.is_some() as u8;
        if given == 0 {
            return Ok(None);
        }
        if given > 1 || generic != Self::default() {
            return Err(CliError::config("init: `params` and `params_file` exclude every other init key"));
        }
        let p = match (&self.params, &self.params_file) {
            (Some(v), _) => params_from_value(v, "init.params")?,
            (_, Some(path)) => read_params(path)?,
            _ => unreachable!(),
        };
        Ok(Some(p))
    }
}

pub fn params_from_value(v: &serde_json::Value, what: &str) -> Result<ModelParams<f64>, CliError> {
    ModelParams::deserialize(v).map_err(|e| CliError::config(format!("{what}: {e}")))
}

pub fn read_params(path: &Path) -> Result<ModelParams<f64>, CliError> {
    let text = crate::io::read_text(path)?;
    parse_json(&text, &path.display().to_string())
}

/// `eval`: compare an estimate against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub schema: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    pub truth: Table,
    pub estimate: Table,
    /// Metrics file; stdout only when absent.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// A time-indexed table: a truth JSON or a CSV with a `t` column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table {
    pub path: PathBuf,
    /// Truth JSON field (`latent`, `clean` or `x`); default `latent`.
    #[serde(default)]
    pub field: Option<String>,
    /// CSV columns; default the `mean_*` columns, else every column but `t`.
    #[serde(default)]
    pub columns: Option<Vec<String>>,
}

/// `bench`: wall-clock scaling of the filter and of the exact GP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub schema: u32,
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    /// Grid lengths for the filter-vs-length sweep.
    pub smc_steps: Vec<usize>,
    pub smc_particles: usize,
    /// Particle counts for the filter-vs-particles sweep.
    pub particle_counts: Vec<usize>,
    pub particle_steps: usize,
    pub gp_sizes: Vec<usize>,
    /// Timings are the minimum over this many runs.
    pub repeats: usize,
    pub storage: Storage,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA,
            seed: 0,
            threads: None,
            out: PathBuf::from("bench.csv"),
            smc_steps: vec![250, 500, 1000, 2000, 4000],
            smc_particles: 1000,
            particle_counts: vec![1000, 2000],
            particle_steps: 1000,
            gp_sizes: vec![500, 1000, 2000, 4000],
            repeats: 3,
            storage: Storage::FullPath,
        }
    }
}

impl BenchConfig {
    pub fn smc(&self, particles: usize) -> SmcConfig {
        SmcConfig { particles, seed: self.seed, storage: self.storage, threads: self.threads, ..SmcConfig::default() }
    }
}

/// Parses JSON, reporting the path of the offending field.
pub fn parse_json<C: DeserializeOwned>(text: &str, source: &str) -> Result<C, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::config(format!("{source}: at `{path}`: {}", e.inner()))
    })
}

pub fn load<C: DeserializeOwned + HasSchema>(path: &Path) -> Result<C, CliError> {
    let text = crate::io::read_text(path)?;
    let cfg: C = parse_json(&text, &path.display().to_string())?;
    if cfg.schema() != SCHEMA {
        return Err(CliError::config(format!(
            "{}: at `schema`: unsupported version {} (expected {SCHEMA})",
            path.display(),
            cfg.schema()
        )));
    }
    Ok(cfg)
}

pub trait HasSchema {
    fn schema(&self) -> u32;
}

macro_rules! has_schema {
    ($($t:ty),*) => {$(
        impl HasSchema for $t {
            fn schema(&self) -> u32 {
                self.schema
            }
        }
    )*};
}

has_schema!(SimulateConfig, FitConfig, EvalConfig, BenchConfig);

pub const SIMULATE_KEYS: &str = "\
simulate config keys:
  schema                 integer, must be 1
  seed                   integer, optional; replaces the generator seed
  out                    directory for obs.csv and truth.json (default \".\")
  generator.kind         \"chirp\" | \"lorenz\" | \"spikes\" | \"model\"
  kind = chirp (all optional)
    duration             seconds (250)
    sample_rate          Hz (2)
    f0, f1               linear sweep start and end frequency, Hz (0.005, 0.05)
    amplitude            (1)
    noise_var            observation noise variance (0.1)
    seed                 integer (0)
  kind = lorenz (all optional)
    sigma, rho, beta     Lorenz constants (10, 28, 8/3)
    x0                   [x, y, z] initial state ([-8, 7, 27])
    duration             seconds (50)
    sample_rate          Hz (10)
    time_scale           Lorenz time units per second (0.1)
    obs_dim              projected dimension (10)
    noise_var            isotropic observation noise variance (1)
    seed                 integer (0)
  kind = spikes (all optional)
    neurons              (20)
    duration             seconds (3)
    dt                   bin width, seconds (0.005)
    latent_dim           (2)
    loading_scale        std of loading entries (1)
    baseline_range       [lo, hi] Hz, log-uniform baselines ([5, 30])
    waiting_mean         mean waiting time, seconds (0.4)
    waiting_std          waiting-time std, seconds (0.1)
    mark_std             mark std (1.5)
    sigma_x, sigma_y     diffusion scales (0.5, 0.01)
    seed                 integer (0)
  kind = model
    params               inline parameter object (params.json schema)
    params_file          path to a params.json; exclusive with params
    steps                number of grid steps
    dt                   bin width, seconds
    origin               grid origin, seconds (0)
    enforce_orderliness  reject waiting times <= dt (true)
    seed                 integer (0)
";

pub const FIT_KEYS: &str = "\
fit config keys:
  schema                 integer, must be 1
  seed                   integer, optional; replaces em.smc.seed
  threads                integer, optional; replaces em.smc.threads
  out                    output directory (default \".\")
  data                   list of trials, each one of
    {format: \"csv\", path}
    {format: \"event_list\", path, dt, t_start, t_end, neurons (optional)}
  min_spikes             integer, optional; drop neurons with at most this many spikes
  events_top             sequences kept in events.json (100)
  init                   starting parameters (all optional)
    params_file          path to a params.json; excludes every other init key
    params               inline parameter object; excludes every other init key
    latent_dim           (1)
    loadings             M x D rows; Gaussian default from principal directions
    obs_var              isotropic Gaussian noise variance (half the data variance)
    baseline             spike log-rates (log empirical rates)
    loading_scale        std of random spike loadings (0.1)
    waiting_mean         (40)
    waiting_std          (8.94)
    mark_mean, mark_var  isotropic mark law (0, 1)
    sigma_x, sigma_y     diffusion scales (0.1, 1e-4)
    x_std, y_std         initial-state stds (1, 1)
    priors               hyperparameters (weak); when given, all three of
      marks              {mu0, mean_scale, nu, psi} normal-inverse-Wishart
      shape              {family: flat | gamma (shape, rate) | exponential (rate)
                          | log_normal (mu, sigma2)}
      rate               {family: flat | gamma (shape, rate) | inv_gamma (shape, scale)}
    repulsion            {strength, window} (none)
  em (all optional)
    iterations           (20)
    diagonal_r           restrict R to a diagonal (false)
    step_size            spike-loading Newton step (1)
    max_inner_iters      spike-loading Newton iterations (100)
    update.observation   learn W, R or loadings, baselines (true)
    update.waiting_time  learn the Gamma waiting time (true)
    update.marks         learn the mark law (true)
    update.sigma_x       learn sigma_x (false)
    smc.particles        (1000)
    smc.proposal         {kind: \"bootstrap\"} | {kind: \"guided\", blend}
    smc.resampling       \"systematic\" | \"multinomial\"
    smc.ess_threshold    resample below this fraction (0.5)
    smc.seed             integer (0)
    smc.storage          \"full_path\" (required by fit) | \"filtered_summary\"
    smc.enforce_orderliness  (true)
    smc.threads          integer, optional
    smc.memory_cap_bytes path storage cap
";

pub const EVAL_KEYS: &str = "\
eval config keys:
  schema                 integer, must be 1
  seed                   integer, optional; unused
  truth, estimate        tables, each
    path                 truth JSON or CSV with a `t` column
    field                truth JSON field: latent | clean | x (latent)
    columns              CSV columns (the mean_* columns, else all but t)
  out                    metrics JSON path, optional
";

pub const BENCH_KEYS: &str = "\
bench config keys (all optional):
  schema                 integer, must be 1
  seed                   integer (0)
  threads                integer, optional
  out                    CSV path (bench.csv)
  smc_steps              grid lengths ([250, 500, 1000, 2000, 4000])
  smc_particles          particles for the length sweep (1000)
  particle_counts        particle counts ([1000, 2000])
  particle_steps         grid length for the particle sweep (1000)
  gp_sizes               GP training sizes ([500, 1000, 2000, 4000])
  repeats                timings are the minimum of this many runs (3)
  storage                \"full_path\" | \"filtered_summary\"
";

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(v: &serde_json::Value, prefix: &str, out: &mut Vec<String>) {
        if let serde_json::Value::Object(m) = v {
            for (k, child) in m {
                out.push(k.clone());
                keys(child, &format!("{prefix}{k}."), out);
            }
        }
    }

    fn assert_listed(v: serde_json::Value, help: &str) {
        let mut all = Vec::new();
        keys(&v, "", &mut all);
        for k in all {
            assert!(help.contains(&k), "key `{k}` missing from help");
        }
    }

    #[test]
    fn help_lists_every_key() {
        let fit = FitConfig {
            schema: 1,
            seed: Some(1),
            threads: Some(1),
            out: default_out(),
            data: vec![],
            min_spikes: Some(0),
            init: InitSpec {
                obs_var: Some(1.0),
                priors: Some(PriorHyperparams::weak(1)),
                repulsion: Some(RepulsionParams::new(1.0, 3).unwrap()),
                ..InitSpec::default()
            },
            em: EmConfig::default(),
            events_top: 1,
        };
        assert_listed(serde_json::to_value(&fit).unwrap(), FIT_KEYS);
        assert_listed(serde_json::to_value(BenchConfig::default()).unwrap(), BENCH_KEYS);
        for g in [
            Generator::Chirp(ChirpSpec::default()),
            Generator::Lorenz(LorenzSpec::default()),
            Generator::Spikes(SpikeSpec::default()),
        ] {
            let c = SimulateConfig { schema: 1, seed: Some(0), out: default_out(), generator: g };
            assert_listed(serde_json::to_value(&c).unwrap(), SIMULATE_KEYS);
        }
        let t = Table { path: "a".into(), field: Some("x".into()), columns: Some(vec![]) };
        let e = EvalConfig { schema: 1, seed: None, truth: t.clone(), estimate: t, out: None };
        assert_listed(serde_json::to_value(&e).unwrap(), EVAL_KEYS);
    }

    #[test]
    fn unknown_keys_are_reported_with_their_path() {
        let text = r#"{"schema": 1, "generator": {"kind": "chirp", "duraton": 3}}"#;
        let err = parse_json::<SimulateConfig>(text, "c.json").unwrap_err().to_string();
        assert!(err.contains("duraton"), "{err}");
        let text = r#"{"schema": 1, "data": [], "em": {"smc": {"particles": "many"}}}"#;
        let err = parse_json::<FitConfig>(text, "c.json").unwrap_err().to_string();
        assert!(err.contains("em.smc.particles"), "{err}");
    }

    #[test]
    fn init_sources_are_exclusive() {
        let i = InitSpec { params_file: Some("p.json".into()), latent_dim: 2, ..InitSpec::default() };
        assert!(i.explicit().is_err());
        assert!(InitSpec::default().explicit().unwrap().is_none());
    }
}
