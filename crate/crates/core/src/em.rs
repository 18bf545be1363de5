//! Expectation-maximisation: particle E-step, closed-form and MAP M-step.
//!
//! Expectations are taken under the final filter weights over the stored
//! particle paths. A stored state's weight is the summed final weight of its
//! descendants, so every weighted sum below runs over live genealogy nodes.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::inducing::{MarkModel, NiwPrior, PriorHyperparams, RatePrior, WaitingTimeModel};
use crate::linalg;
use crate::model::ModelParams;
use crate::obs::{GaussianObsModel, ObsModel, ObservationSeries, PointProcessObsModel};
use crate::real::Real;
use crate::sde::{bridge_coefficients, gaussian_diag_logpdf, integrator_transition_logpdf, is_pinned_step, TimeGrid};
use crate::smc::{run_filter_with, EventSource, Genealogy, RunOptions, SmcConfig, SmcResult, Storage, NO_EVENT};

pub const ALPHA_CAP: f64 = 1e3;
pub const RATE_FLOOR: f64 = 1e-6;
pub const SIGMA_X_FLOOR: f64 = 1e-12;
/// Ridge added to a near-singular regression Gram matrix, relative to its mean diagonal.
pub const RIDGE_SCALE: f64 = 1e-8;
/// Standard deviation of the zero-mean Gaussian prior on spike loadings `w`.
pub const LOADING_PRIOR_STD: f64 = 10.0;
const ALPHA_MIN: f64 = 1e-4;
const MAX_HALVINGS: usize = 20;
const GRAD_TOL: f64 = 1e-6;

/// Which parameter groups the M-step updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateFlags {
    /// `W, R` for Gaussian data, `w, b` for spikes.
    pub observation: bool,
    pub waiting_time: bool,
    pub marks: bool,
    pub sigma_x: bool,
}

impl Default for UpdateFlags {
    fn default() -> Self {
        Self { observation: true, waiting_time: true, marks: true, sigma_x: false }
    }
}

impl UpdateFlags {
    pub fn none() -> Self {
        Self { observation: false, waiting_time: false, marks: false, sigma_x: false }
    }

    pub fn any(&self) -> bool {
        self.observation || self.waiting_time || self.marks || self.sigma_x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub iterations: usize,
    pub smc: SmcConfig,
    pub update: UpdateFlags,
    /// Restrict `R` to a diagonal matrix.
    pub diagonal_r: bool,
    /// Initial step length of the damped Newton ascent for spike loadings.
    pub step_size: f64,
    /// Iteration cap of the spike-loading ascent.
    pub max_inner_iters: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            smc: SmcConfig::default(),
            update: UpdateFlags::default(),
            diagonal_r: false,
            step_size: 1.0,
            max_inner_iters: 100,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        self.smc.validate()?;
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("EM needs at least one iteration".into()));
        }
        if self.smc.storage != Storage::FullPath {
            return Err(Error::InvalidParameter("EM needs full path storage".into()));
        }
        if !(self.step_size > 0.0 && self.step_size <= 1.0) {
            return Err(Error::InvalidParameter(format!("step size must lie in (0, 1], got {}", self.step_size)));
        }
        if self.max_inner_iters == 0 {
            return Err(Error::InvalidParameter("max_inner_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// One trial's E-step output with the data it was filtered on.
#[derive(Debug, Clone, Copy)]
pub struct TrialEnsemble<'a, T: Real> {
    pub result: &'a SmcResult<T>,
    pub obs: &'a ObservationSeries<T>,
}

/// Weighted view of one ensemble.
struct Weighted<'a, T: Real> {
    res: &'a SmcResult<T>,
    g: &'a Genealogy<T>,
    obs: &'a ObservationSeries<T>,
    grid: TimeGrid<T>,
    node_w: Vec<T>,
    event_w: Vec<T>,
}

impl<'a, T: Real> Weighted<'a, T> {
    fn new(e: &TrialEnsemble<'a, T>) -> Result<Self> {
        let res = e.result;
        if res.particles() == 0 {
            return Err(Error::InvalidParameter("empty ensemble".into()));
        }
        let g = res.genealogy.as_ref().ok_or_else(|| Error::InvalidParameter("ensemble has no stored paths".into()))?;
        Ok(Self {
            res,
            g,
            obs: e.obs,
            grid: res.grid,
            node_w: g.node_weights(&res.weights),
            event_w: res.events.event_weights(&res.heads, &res.weights),
        })
    }

    fn u_n(&self) -> usize {
        self.g.particles()
    }

    fn steps(&self) -> usize {
        self.g.steps()
    }

    /// Particles alive at step `k` with their weights.
    fn live(&self, k: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let u_n = self.u_n();
        self.node_w[k * u_n..(k + 1) * u_n].iter().enumerate().filter(|(_, &w)| w > T::zero()).map(|(u, &w)| (u, w))
    }

    /// Pending event time, mark and previous event time of the transition into step `k`.
    fn bridge_target(&self, k: usize, u: usize) -> (T, &[T], T) {
        let ev = &self.res.events;
        let e = self.g.pending(k, u);
        let node = ev.node(e);
        let prev_time = if node.prev == NO_EVENT { self.grid.origin } else { self.grid.time(ev.node(node.prev).step) };
        (self.grid.time(node.step), ev.mark(e), prev_time)
    }

    fn events(&self) -> impl Iterator<Item = (u32, T)> + '_ {
        self.event_w.iter().enumerate().filter(|(_, &w)| w > T::zero()).map(|(e, &w)| (e as u32, w))
    }
}

fn weigh<'a, T: Real>(trials: &[TrialEnsemble<'a, T>]) -> Result<Vec<Weighted<'a, T>>> {
    if trials.is_empty() {
        return Err(Error::InvalidParameter("empty ensemble".into()));
    }
    trials.iter().map(Weighted::new).collect()
}

/// Bridge log-density of `x_next` from `x_k`, mirroring the filter's step.
#[allow(clippy::too_many_arguments)]
fn bridge_logpdf<T: Real>(
    x_next: &[T],
    x_k: &[T],
    k: usize,
    grid: &TimeGrid<T>,
    next_time: T,
    mark: &[T],
    prev_time: T,
    sigma_x: &[T],
) -> T {
    if is_pinned_step(k, grid, next_time) {
        return gaussian_diag_logpdf(x_next, mark, &vec![T::zero(); mark.len()]);
    }
    let (frac, factor) = bridge_coefficients(grid.time(k), next_time, prev_time, grid.dt);
    let mean: Vec<T> = x_k.iter().zip(mark).map(|(&x, &m)| x + (m - x) * frac).collect();
    let var: Vec<T> = sigma_x.iter().map(|&s| s * s * factor * grid.dt).collect();
    gaussian_diag_logpdf(x_next, &mean, &var)
}

/// Terms of the expected complete-data log-likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct QTerms<T: Real> {
    pub initial: T,
    pub observation: T,
    pub integrator: T,
    pub bridge: T,
    pub waiting_times: T,
    pub marks: T,
    /// Parameter priors, counted once.
    pub priors: T,
}

impl<T: Real> QTerms<T> {
    fn zero() -> Self {
        Self {
            initial: T::zero(),
            observation: T::zero(),
            integrator: T::zero(),
            bridge: T::zero(),
            waiting_times: T::zero(),
            marks: T::zero(),
            priors: T::zero(),
        }
    }

    pub fn total(&self) -> T {
        self.initial + self.observation + self.integrator + self.bridge + self.waiting_times + self.marks + self.priors
    }
}

/// Log-density of the parameter priors.
pub fn log_prior<T: Real>(params: &ModelParams<T>) -> Result<T> {
    let pr = &params.priors;
    let mut lp = pr.shape.log_pdf(params.waiting_time.alpha())
        + pr.rate.log_pdf(params.waiting_time.rate())
        + pr.marks.log_pdf(params.marks.mu(), params.marks.sigma())?;
    if let ObsModel::Spikes(m) = &params.obs {
        lp += loading_log_prior(m.w().as_slice());
    }
    Ok(lp)
}

fn loading_log_prior<T: Real>(w: &[T]) -> T {
    let var = T::lit(LOADING_PRIOR_STD * LOADING_PRIOR_STD);
    let c = -T::lit(0.5) * (T::two_pi() * var).ln();
    w.iter().map(|&v| c - v * v / (T::lit(2.0) * var)).sum()
}

/// Expected complete-data log-likelihood of `params` under the ensemble.
pub fn q_function<T: Real>(trials: &[TrialEnsemble<'_, T>], params: &ModelParams<T>) -> Result<QTerms<T>> {
    let ws = weigh(trials)?;
    let mut q = QTerms::zero();
    for w in &ws {
        let t = trial_q(w, params);
        q.initial += t.initial;
        q.observation += t.observation;
        q.integrator += t.integrator;
        q.bridge += t.bridge;
        q.waiting_times += t.waiting_times;
        q.marks += t.marks;
    }
    q.priors = log_prior(params)?;
    Ok(q)
}

fn trial_q<T: Real>(w: &Weighted<'_, T>, params: &ModelParams<T>) -> QTerms<T> {
    let g = w.g;
    let mut q = QTerms::zero();
    q.initial = w.live(0).map(|(u, wu)| wu * params.initial.log_pdf(g.x(0, u), g.y(0, u))).sum();
    let per_step: Vec<[T; 3]> = (1..=w.steps())
        .into_par_iter()
        .map(|k| {
            let mut acc = [T::zero(); 3];
            for (u, wu) in w.live(k) {
                let a = g.ancestor(k, u);
                let (next_time, mark, prev_time) = w.bridge_target(k, u);
                acc[0] += wu * params.obs.loglik_row(w.obs, k - 1, g.y(k, u));
                acc[1] += wu
                    * integrator_transition_logpdf(
                        g.y(k, u),
                        g.y(k - 1, a),
                        g.x(k - 1, a),
                        w.grid.dt,
                        &params.noise.sigma_y,
                    );
                acc[2] += wu
                    * bridge_logpdf(
                        g.x(k, u),
                        g.x(k - 1, a),
                        k - 1,
                        &w.grid,
                        next_time,
                        mark,
                        prev_time,
                        &params.noise.sigma_x,
                    );
            }
            acc
        })
        .collect();
    for s in per_step {
        q.observation += s[0];
        q.integrator += s[1];
        q.bridge += s[2];
    }
    let ev = &w.res.events;
    for (e, we) in w.events() {
        q.waiting_times += we * params.waiting_time.log_pdf(ev.node(e).tau);
        q.marks += we * params.marks.log_pdf(ev.mark(e));
    }
    q
}

/// Weighted second moments for the `z ~ W y` regression.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionStats<T: Real> {
    pub weight: T,
    pub yy: DMatrix<T>,
    pub zy: DMatrix<T>,
    pub zz: DMatrix<T>,
}

impl<T: Real> RegressionStats<T> {
    pub fn new(obs_dim: usize, latent_dim: usize) -> Self {
        Self {
            weight: T::zero(),
            yy: DMatrix::zeros(latent_dim, latent_dim),
            zy: DMatrix::zeros(obs_dim, latent_dim),
            zz: DMatrix::zeros(obs_dim, obs_dim),
        }
    }

    pub fn push(&mut self, z: &[T], y: &[T], w: T) {
        self.weight += w;
        for i in 0..y.len() {
            for j in 0..y.len() {
                self.yy[(i, j)] += w * y[i] * y[j];
            }
        }
        for i in 0..z.len() {
            for j in 0..y.len() {
                self.zy[(i, j)] += w * z[i] * y[j];
            }
            for j in 0..z.len() {
                self.zz[(i, j)] += w * z[i] * z[j];
            }
        }
    }

    pub fn merge(&mut self, o: &Self) {
        self.weight += o.weight;
        self.yy += &o.yy;
        self.zy += &o.zy;
        self.zz += &o.zz;
    }
}

pub fn regression_stats<T: Real>(trials: &[TrialEnsemble<'_, T>]) -> Result<RegressionStats<T>> {
    let ws = weigh(trials)?;
    let d = ws[0].g.dim();
    let m = ws[0].obs.obs_dim();
    let mut total = RegressionStats::new(m, d);
    for w in &ws {
        let parts: Vec<RegressionStats<T>> = (1..=w.steps())
            .into_par_iter()
            .map(|k| {
                let mut s = RegressionStats::new(m, d);
                let z = w.obs.real_row(k - 1);
                for (u, wu) in w.live(k) {
                    s.push(z, w.g.y(k, u), wu);
                }
                s
            })
            .collect();
        for p in &parts {
            total.merge(p);
        }
    }
    Ok(total)
}

/// Closed-form weighted least squares for `W` and the residual covariance `R`.
pub fn update_observation<T: Real>(
    stats: &RegressionStats<T>,
    diagonal_r: bool,
) -> Result<(GaussianObsModel<T>, Vec<Warning>)> {
    if !(stats.weight > T::zero()) {
        return Err(Error::InvalidParameter("regression has no weight".into()));
    }
    let d = stats.yy.nrows();
    let m = stats.zz.nrows();
    let mut warnings = Vec::new();
    let yy = (&stats.yy + stats.yy.transpose()) * T::lit(0.5);
    let mean_diag = yy.trace() / T::from_count(d);
    let chol_ok = |a: &DMatrix<T>| {
        a.clone().cholesky().filter(|c| {
            let l = c.l_dirty();
            (0..d).all(|i| l[(i, i)] * l[(i, i)] > T::lit(1e-12) * mean_diag)
        })
    };
    let chol = match chol_ok(&yy) {
        Some(c) => c,
        None => {
            let ridge = T::lit(RIDGE_SCALE) * if mean_diag > T::zero() { mean_diag } else { T::one() };
            warnings.push(Warning::SingularGram { ridge: ridge.as_f64() });
            let reg = &yy + DMatrix::identity(d, d) * ridge;
            reg.cholesky().ok_or_else(|| Error::NotPositiveDefinite("regression Gram matrix".into()))?
        }
    };
    // W = Szy Syy^{-1}
    let w = chol.solve(&stats.zy.transpose()).transpose();
    let wzy = &w * stats.zy.transpose();
    let mut r = (&stats.zz - &wzy - wzy.transpose() + &w * &yy * w.transpose()) / stats.weight;
    r = (&r + r.transpose()) * T::lit(0.5);
    if diagonal_r {
        r = DMatrix::from_diagonal(&r.diagonal());
    }
    let scale = (stats.zz.trace() / (stats.weight * T::from_count(m))).max(T::one());
    let floor = T::lit(1e-12) * scale;
    let (r, raised) = linalg::floor_spd(&r, floor);
    if raised {
        warnings.push(Warning::CovarianceFloored { floor: floor.as_f64() });
    }
    Ok((GaussianObsModel::new(w, r)?, warnings))
}

/// Weighted `(y, counts)` pairs of the spike regression.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeSamples<T: Real> {
    pub dim: usize,
    pub neurons: usize,
    pub dt: T,
    pub ys: Vec<T>,
    pub weights: Vec<T>,
    pub counts: Vec<u32>,
}

impl<T: Real> SpikeSamples<T> {
    pub fn new(dim: usize, neurons: usize, dt: T) -> Self {
        Self { dim, neurons, dt, ys: Vec::new(), weights: Vec::new(), counts: Vec::new() }
    }

    pub fn push(&mut self, y: &[T], counts: &[u32], w: T) {
        self.ys.extend_from_slice(y);
        self.counts.extend_from_slice(counts);
        self.weights.push(w);
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

pub fn spike_samples<T: Real>(trials: &[TrialEnsemble<'_, T>]) -> Result<SpikeSamples<T>> {
    let ws = weigh(trials)?;
    let dt = ws[0].obs.dt();
    if ws.iter().any(|w| w.obs.dt() != dt) {
        return Err(Error::Input("all trials must share the bin width".into()));
    }
    let mut s = SpikeSamples::new(ws[0].g.dim(), ws[0].obs.obs_dim(), dt);
    for w in &ws {
        for k in 1..=w.steps() {
            let c = w.obs.count_row(k - 1);
            for (u, wu) in w.live(k) {
                s.push(w.g.y(k, u), c, wu);
            }
        }
    }
    Ok(s)
}

/// Penalised Poisson objective of one neuron at `theta = (w_1..w_D, b)`, with
/// its gradient and Hessian. The data-only `log n!` and `n log dt` terms are omitted.
pub fn spike_objective<T: Real>(s: &SpikeSamples<T>, neuron: usize, theta: &[T]) -> (T, DVector<T>, DMatrix<T>) {
    let d = s.dim;
    let p = d + 1;
    let inv_var = T::one() / T::lit(LOADING_PRIOR_STD * LOADING_PRIOR_STD);
    let mut f = T::zero();
    let mut g = DVector::zeros(p);
    let mut h = DMatrix::zeros(p, p);
    let mut x = vec![T::one(); p];
    for i in 0..s.len() {
        let y = &s.ys[i * d..(i + 1) * d];
        x[..d].copy_from_slice(y);
        let eta = (0..p).map(|j| theta[j] * x[j]).sum::<T>();
        let c = T::from_count(s.counts[i * s.neurons + neuron] as usize);
        let wi = s.weights[i];
        let mu = eta.exp() * s.dt;
        f += wi * (c * eta - mu);
        for a in 0..p {
            g[a] += wi * (c - mu) * x[a];
            for b in 0..=a {
                h[(a, b)] -= wi * mu * x[a] * x[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            h[(b, a)] = h[(a, b)];
        }
    }
    for j in 0..d {
        f -= T::lit(0.5) * theta[j] * theta[j] * inv_var;
        g[j] -= theta[j] * inv_var;
        h[(j, j)] -= inv_var;
    }
    (f, g, h)
}

/// Result of one neuron's ascent.
#[derive(Debug, Clone, PartialEq)]
pub struct AscentReport {
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Damped Newton ascent on [`spike_objective`]; halves the step on any decrease.
pub fn ascend_neuron<T: Real>(
    s: &SpikeSamples<T>,
    neuron: usize,
    theta0: &[T],
    step_size: f64,
    max_iters: usize,
) -> Result<(Vec<T>, AscentReport)> {
    let mut theta = theta0.to_vec();
    let (mut f, mut g, mut h) = spike_objective(s, neuron, &theta);
    let mut iters = 0;
    while iters < max_iters {
        let gn = g.norm();
        if gn.as_f64() < GRAD_TOL {
            return Ok((theta, AscentReport { iterations: iters, grad_norm: gn.as_f64(), converged: true }));
        }
        let neg_h = -&h;
        let dir = match neg_h.cholesky() {
            Some(c) => c.solve(&g),
            None => g.clone(),
        };
        let mut t = T::lit(step_size);
        let mut accepted = None;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<T> = theta.iter().zip(dir.iter()).map(|(&a, &b)| a + t * b).collect();
            let (fc, gc, hc) = spike_objective(s, neuron, &cand);
            if fc.is_finite() && fc >= f {
                accepted = Some((cand, fc, gc, hc));
                break;
            }
            t *= T::lit(0.5);
        }
        iters += 1;
        match accepted {
            Some((c, fc, gc, hc)) => {
                theta = c;
                f = fc;
                g = gc;
                h = hc;
            }
            None => {
                // no increase along a Newton direction: stationary to working precision
                let gn = g.norm().as_f64();
                if gn <= 1e-4 * (1.0 + f.abs().as_f64()) {
                    return Ok((theta, AscentReport { iterations: iters, grad_norm: gn, converged: true }));
                }
                return Err(Error::Divergence(format!(
                    "spike loading ascent for neuron {neuron} failed after {MAX_HALVINGS} step halvings"
                )));
            }
        }
    }
    let gn = g.norm().as_f64();
    Ok((theta, AscentReport { iterations: iters, grad_norm: gn, converged: gn < GRAD_TOL }))
}

/// Per-neuron ascent of the penalised Poisson regression.
pub fn update_spike_loadings<T: Real>(
    s: &SpikeSamples<T>,
    current: &PointProcessObsModel<T>,
    step_size: f64,
    max_iters: usize,
) -> Result<(PointProcessObsModel<T>, Vec<AscentReport>)> {
    let d = s.dim;
    let out: Vec<Result<(Vec<T>, AscentReport)>> = (0..s.neurons)
        .into_par_iter()
        .map(|m| {
            let mut theta: Vec<T> = (0..d).map(|j| current.w()[(m, j)]).collect();
            theta.push(current.b()[m]);
            ascend_neuron(s, m, &theta, step_size, max_iters)
        })
        .collect();
    let mut w = DMatrix::zeros(s.neurons, d);
    let mut b = vec![T::zero(); s.neurons];
    let mut reports = Vec::with_capacity(s.neurons);
    for (m, r) in out.into_iter().enumerate() {
        let (theta, rep) = r?;
        for j in 0..d {
            w[(m, j)] = theta[j];
        }
        b[m] = theta[d];
        reports.push(rep);
    }
    Ok((PointProcessObsModel::new(w, b)?, reports))
}

/// Weighted waiting-time and mark statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EventStats<T: Real> {
    /// Effective event count `sum w`.
    pub n_eff: T,
    pub sum_tau: T,
    pub sum_log_tau: T,
    pub sum_mark: DVector<T>,
    pub sum_mark_outer: DMatrix<T>,
}

impl<T: Real> EventStats<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            n_eff: T::zero(),
            sum_tau: T::zero(),
            sum_log_tau: T::zero(),
            sum_mark: DVector::zeros(dim),
            sum_mark_outer: DMatrix::zeros(dim, dim),
        }
    }

    pub fn push(&mut self, tau: T, mark: &[T], w: T) {
        self.n_eff += w;
        self.sum_tau += w * tau;
        self.sum_log_tau += w * tau.ln();
        let m = DVector::from_column_slice(mark);
        self.sum_mark += &m * w;
        self.sum_mark_outer += &m * m.transpose() * w;
    }
}

pub fn event_stats<T: Real>(trials: &[TrialEnsemble<'_, T>]) -> Result<EventStats<T>> {
    let ws = weigh(trials)?;
    let mut s = EventStats::new(ws[0].g.dim());
    for w in &ws {
        let ev = &w.res.events;
        for (e, we) in w.events() {
            s.push(ev.node(e).tau, ev.mark(e), we);
        }
    }
    Ok(s)
}

/// Rate maximising the waiting-time objective at fixed shape.
fn profile_rate<T: Real>(s: &EventStats<T>, prior: &RatePrior<T>, alpha: T) -> T {
    let na = s.n_eff * alpha;
    let l = match *prior {
        RatePrior::Flat => na / s.sum_tau,
        RatePrior::Gamma { shape, rate } => (shape - T::one() + na) / (rate + s.sum_tau),
        RatePrior::InvGamma { shape, scale } => {
            let bq = na - shape - T::one();
            (bq + (bq * bq + T::lit(4.0) * s.sum_tau * scale).sqrt()) / (T::lit(2.0) * s.sum_tau)
        }
    };
    if l.is_finite() {
        l.max(T::lit(RATE_FLOOR))
    } else {
        T::lit(RATE_FLOOR)
    }
}

/// Weighted Gamma log-likelihood plus shape and rate log-priors at
/// `(log alpha, log rate)`, with its gradient in those coordinates.
pub fn waiting_time_objective<T: Real>(
    s: &EventStats<T>,
    priors: &PriorHyperparams<T>,
    log_alpha: T,
    log_rate: T,
) -> (T, [T; 2]) {
    let a = log_alpha.exp();
    let l = log_rate.exp();
    let n = s.n_eff;
    let f = n * (a * log_rate - a.log_gamma()) + (a - T::one()) * s.sum_log_tau - l * s.sum_tau
        + priors.shape.log_pdf(a)
        + priors.rate.log_pdf(l);
    let ga = a * (n * (log_rate - a.digamma()) + s.sum_log_tau + priors.shape.d_log_pdf(a));
    let gl = l * (n * a / l - s.sum_tau + priors.rate.d_log_pdf(l));
    (f, [ga, gl])
}

/// MAP update of the Gamma waiting-time law.
pub fn update_waiting_time<T: Real>(
    s: &EventStats<T>,
    priors: &PriorHyperparams<T>,
    current: &WaitingTimeModel<T>,
) -> Result<(WaitingTimeModel<T>, Vec<Warning>)> {
    if s.n_eff < T::lit(2.0) || !(s.sum_tau > T::zero()) {
        let alpha = priors.shape.mode().unwrap_or(current.alpha()).min(T::lit(ALPHA_CAP));
        let rate = priors.rate.mode().unwrap_or(current.rate()).max(T::lit(RATE_FLOOR));
        return Ok((WaitingTimeModel::new(alpha, rate)?, vec![Warning::FewEvents { n_eff: s.n_eff.as_f64() }]));
    }
    // derivative of the profile objective in alpha (envelope theorem)
    let slope = |a: T| {
        let l = profile_rate(s, &priors.rate, a);
        s.n_eff * (l.ln() - a.digamma()) + s.sum_log_tau + priors.shape.d_log_pdf(a)
    };
    let (mut lo, mut hi) = (T::lit(ALPHA_MIN).ln(), T::lit(ALPHA_CAP).ln());
    let alpha = if slope(T::lit(ALPHA_CAP)) >= T::zero() {
        T::lit(ALPHA_CAP)
    } else if slope(T::lit(ALPHA_MIN)) <= T::zero() {
        T::lit(ALPHA_MIN)
    } else {
        for _ in 0..200 {
            let mid = T::lit(0.5) * (lo + hi);
            if slope(mid.exp()) > T::zero() {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < T::lit(1e-14) {
                break;
            }
        }
        (T::lit(0.5) * (lo + hi)).exp()
    };
    let rate = profile_rate(s, &priors.rate, alpha);
    let cand = WaitingTimeModel::new(alpha, rate)?;
    let value = |m: &WaitingTimeModel<T>| waiting_time_objective(s, priors, m.alpha().ln(), m.rate().ln()).0;
    if value(&cand) >= value(current) {
        Ok((cand, Vec::new()))
    } else {
        Ok((*current, Vec::new()))
    }
}

/// Joint posterior mode of the Normal–Inverse-Wishart update.
pub fn update_marks<T: Real>(s: &EventStats<T>, prior: &NiwPrior<T>) -> Result<MarkModel<T>> {
    let d = prior.dim();
    let n = s.n_eff;
    if !(n > T::zero()) {
        let (mu, sigma) = prior.mode();
        return MarkModel::new(mu, sigma);
    }
    let kappa0 = prior.kappa();
    let mu0 = DVector::from_column_slice(&prior.mu0);
    let mbar = &s.sum_mark / n;
    let scatter = &s.sum_mark_outer - &mbar * mbar.transpose() * n;
    let kn = kappa0 + n;
    let mu = (&mu0 * kappa0 + &mbar * n) / kn;
    let diff = &mbar - &mu0;
    let psi_n = prior.psi_matrix() + scatter + &diff * diff.transpose() * (kappa0 * n / kn);
    let sigma = psi_n / (prior.nu + n + T::from_count(d) + T::lit(2.0));
    let sigma = (&sigma + sigma.transpose()) * T::lit(0.5);
    MarkModel::new(mu, sigma)
}

/// Weighted squared standardised bridge residuals per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeResidualStats<T: Real> {
    pub weight: T,
    pub sum_sq: Vec<T>,
}

pub fn bridge_residual_stats<T: Real>(trials: &[TrialEnsemble<'_, T>]) -> Result<BridgeResidualStats<T>> {
    let ws = weigh(trials)?;
    let d = ws[0].g.dim();
    let mut out = BridgeResidualStats { weight: T::zero(), sum_sq: vec![T::zero(); d] };
    for w in &ws {
        let parts: Vec<(T, Vec<T>)> = (1..=w.steps())
            .into_par_iter()
            .map(|k| {
                let mut wt = T::zero();
                let mut ss = vec![T::zero(); d];
                for (u, wu) in w.live(k) {
                    let (next_time, mark, prev_time) = w.bridge_target(k, u);
                    if is_pinned_step(k - 1, &w.grid, next_time) {
                        continue;
                    }
                    let (frac, factor) = bridge_coefficients(w.grid.time(k - 1), next_time, prev_time, w.grid.dt);
                    if !(factor > T::zero()) {
                        continue;
                    }
                    let sd = (factor * w.grid.dt).sqrt();
                    let xk = w.g.x(k - 1, w.g.ancestor(k, u));
                    let xn = w.g.x(k, u);
                    for j in 0..d {
                        let r = (xn[j] - (xk[j] + (mark[j] - xk[j]) * frac)) / sd;
                        ss[j] += wu * r * r;
                    }
                    wt += wu;
                }
                (wt, ss)
            })
            .collect();
        for (wt, ss) in parts {
            out.weight += wt;
            for j in 0..d {
                out.sum_sq[j] += ss[j];
            }
        }
    }
    Ok(out)
}

/// Closed-form `sigma_x` from bridge residuals; `None` without stochastic steps.
pub fn update_sigma_x<T: Real>(s: &BridgeResidualStats<T>) -> Option<Vec<T>> {
    (s.weight > T::zero()).then(|| s.sum_sq.iter().map(|&v| (v / s.weight).sqrt().max(T::lit(SIGMA_X_FLOOR))).collect())
}

/// Applies every enabled update to `params` using the given ensemble.
pub fn m_step<T: Real>(
    trials: &[TrialEnsemble<'_, T>],
    params: &ModelParams<T>,
    cfg: &EmConfig,
) -> Result<(ModelParams<T>, Vec<Warning>)> {
    let mut next = params.clone();
    let mut warnings = Vec::new();
    let flags = cfg.update;
    if flags.observation {
        match &params.obs {
            ObsModel::Gaussian(_) => {
                let (g, w) = update_observation(&regression_stats(trials)?, cfg.diagonal_r)?;
                next.obs = ObsModel::Gaussian(g);
                warnings.extend(w);
            }
            ObsModel::Spikes(cur) => {
                let (m, _) = update_spike_loadings(&spike_samples(trials)?, cur, cfg.step_size, cfg.max_inner_iters)?;
                next.obs = ObsModel::Spikes(m);
            }
        }
    }
    if flags.waiting_time || flags.marks {
        let es = event_stats(trials)?;
        if flags.waiting_time {
            let (wt, w) = update_waiting_time(&es, &params.priors, &params.waiting_time)?;
            next.waiting_time = wt;
            warnings.extend(w);
        }
        if flags.marks {
            next.marks = update_marks(&es, &params.priors.marks)?;
        }
    }
    if flags.sigma_x {
        match update_sigma_x(&bridge_residual_stats(trials)?) {
            Some(s) => next.noise.sigma_x = s,
            None => warnings.push(Warning::NoBridgeSteps),
        }
    }
    next.validate()?;
    Ok((next, warnings))
}

/// Diagnostics of one EM iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct IterationRecord<T: Real> {
    pub iteration: usize,
    /// Log-marginal likelihood estimate summed over trials.
    pub log_ml: T,
    pub log_ml_per_trial: Vec<T>,
    /// Posterior mean number of events inside each trial's grid.
    pub event_counts: Vec<T>,
    pub min_ess: T,
    pub resample_count: usize,
    pub q_before: QTerms<T>,
    pub q_after: QTerms<T>,
    /// Parameters after this iteration's M-step.
    pub params: ModelParams<T>,
    pub warnings: Vec<Warning>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct EmTrace<T: Real> {
    pub schema: u32,
    pub iterations: Vec<IterationRecord<T>>,
    /// Message of the error that stopped the run, if any.
    pub failure: Option<String>,
}

impl<T: Real> EmTrace<T> {
    fn new() -> Self {
        Self { schema: crate::model::SCHEMA_VERSION, iterations: Vec::new(), failure: None }
    }

    pub fn log_ml(&self) -> Vec<T> {
        self.iterations.iter().map(|r| r.log_ml).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Output of a completed fit.
#[derive(Debug, Clone)]
pub struct EmFit<T: Real> {
    pub params: ModelParams<T>,
    pub trace: EmTrace<T>,
    /// E-step ensembles of the last iteration, one per trial.
    pub posteriors: Vec<SmcResult<T>>,
    /// Parameters the last E-step ran under.
    pub posterior_params: ModelParams<T>,
}

/// A fit stopped by an error, with everything recorded up to that point.
#[derive(Debug)]
pub struct EmFailure<T: Real> {
    pub error: Error,
    pub params: ModelParams<T>,
    pub trace: EmTrace<T>,
}

impl<T: Real> std::fmt::Display for EmFailure<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EM stopped after {} iterations: {}", self.trace.iterations.len(), self.error)
    }
}

pub type FitResult<T> = std::result::Result<EmFit<T>, Box<EmFailure<T>>>;

pub fn fit<T: Real>(obs: &ObservationSeries<T>, init: &ModelParams<T>, cfg: &EmConfig) -> FitResult<T> {
    fit_trials(std::slice::from_ref(obs), init, cfg)
}

/// EM over several trials sharing parameters, each with its own events.
pub fn fit_trials<T: Real>(trials: &[ObservationSeries<T>], init: &ModelParams<T>, cfg: &EmConfig) -> FitResult<T> {
    let fail = |error: Error, params: &ModelParams<T>, mut trace: EmTrace<T>| {
        trace.failure = Some(error.to_string());
        Box::new(EmFailure { error, params: params.clone(), trace })
    };
    if let Err(e) = cfg.validate().and_then(|_| init.validate()) {
        return Err(fail(e, init, EmTrace::new()));
    }
    if trials.is_empty() {
        return Err(fail(Error::Input("no trials to fit".into()), init, EmTrace::new()));
    }
    match cfg.smc.threads {
        Some(n) => {
            let pool = match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(p) => p,
                Err(e) => return Err(fail(Error::InvalidParameter(format!("thread pool: {e}")), init, EmTrace::new())),
            };
            let mut inner = cfg.clone();
            inner.smc.threads = None;
            pool.install(|| em_loop(trials, init, &inner))
        }
        None => em_loop(trials, init, cfg),
    }
}

fn em_loop<T: Real>(trials: &[ObservationSeries<T>], init: &ModelParams<T>, cfg: &EmConfig) -> FitResult<T> {
    let mut params = init.clone();
    let mut trace = EmTrace::new();
    let mut posteriors = Vec::new();
    let mut posterior_params = init.clone();
    for it in 0..cfg.iterations {
        match em_iteration(trials, &params, cfg, it) {
            Ok((next, record, res)) => {
                log::info!(
                    "iteration {}: log-ML {:.4}, events {:.2}",
                    it + 1,
                    record.log_ml,
                    record.event_counts.iter().copied().sum::<T>()
                );
                posterior_params = std::mem::replace(&mut params, next);
                trace.iterations.push(record);
                posteriors = res;
            }
            Err(error) => {
                trace.failure = Some(error.to_string());
                return Err(Box::new(EmFailure { error, params, trace }));
            }
        }
    }
    Ok(EmFit { params, trace, posteriors, posterior_params })
}

type IterationOutput<T> = (ModelParams<T>, IterationRecord<T>, Vec<SmcResult<T>>);

fn em_iteration<T: Real>(
    trials: &[ObservationSeries<T>],
    params: &ModelParams<T>,
    cfg: &EmConfig,
    it: usize,
) -> Result<IterationOutput<T>> {
    let results = trials
        .iter()
        .enumerate()
        .map(|(t, obs)| {
            let opts = RunOptions { events: EventSource::Birth, trial: t as u64, iteration: it as u64 };
            run_filter_with(obs, params, &cfg.smc, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let ens: Vec<TrialEnsemble<'_, T>> =
        results.iter().zip(trials).map(|(result, obs)| TrialEnsemble { result, obs }).collect();
    let q_before = q_function(&ens, params)?;
    let (next, warnings) = if cfg.update.any() { m_step(&ens, params, cfg)? } else { (params.clone(), Vec::new()) };
    let q_after = if cfg.update.any() { q_function(&ens, &next)? } else { q_before };
    let record = IterationRecord {
        iteration: it + 1,
        log_ml: results.iter().map(|r| r.log_marginal_likelihood).sum(),
        log_ml_per_trial: results.iter().map(|r| r.log_marginal_likelihood).collect(),
        event_counts: results.iter().map(|r| r.mean_event_count()).collect(),
        min_ess: results.iter().flat_map(|r| r.ess.iter().copied()).fold(T::infinity(), |a, b| a.min(b)),
        resample_count: results.iter().map(|r| r.resample_count).sum(),
        q_before,
        q_after,
        params: next.clone(),
        warnings,
    };
    Ok((next, record, results))
}
