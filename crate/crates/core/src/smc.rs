//! Sequential Monte Carlo over inducing events and latent paths.
//!
//! Each particle carries its own inducing sequence. At every step a particle
//! first draws new events until one lies beyond the current step, then advances
//! `(x, y)` one step, and is weighted by the observation. Paths are kept as a
//! genealogy (per-step states plus ancestor links) so that resampling never
//! copies histories.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inducing::{sample_waiting_time, sample_waiting_time_repulsive, InducingPoint, InducingSequence};
use crate::linalg;
use crate::model::ModelParams;
use crate::obs::{ObsModel, ObservationSeries};
use crate::real::{log_sum_exp, standard_normal, uniform01, Real};
use crate::sde::{bridge_step_into, gaussian_diag_logpdf, integrator_step_into, TimeGrid};

pub const NO_EVENT: u32 = u32::MAX;

/// Default cap on genealogy storage, in bytes.
pub const DEFAULT_MEMORY_CAP: usize = 2 << 30;

const RESAMPLE_STREAM: u64 = 0xFFFF_FFFF;
const WORDS_PER_STEP: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProposalKind {
    Bootstrap,
    /// Gaussian proposal for `y` whose mean moves a fraction `blend` toward the
    /// locally optimal linear-Gaussian update. Gaussian observations only.
    Guided {
        blend: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingScheme {
    Systematic,
    Multinomial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Storage {
    /// Keep every step of every particle so that full paths can be traced.
    FullPath,
    /// Keep only running summaries.
    FilteredSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmcConfig {
    pub particles: usize,
    pub proposal: ProposalKind,
    pub resampling: ResamplingScheme,
    pub ess_threshold: f64,
    pub seed: u64,
    pub storage: Storage,
    /// Reject waiting times at or below the bin width.
    pub enforce_orderliness: bool,
    /// Worker threads; `None` uses the global pool.
    pub threads: Option<usize>,
    pub memory_cap_bytes: usize,
}

impl Default for SmcConfig {
    fn default() -> Self {
        Self {
            particles: 1000,
            proposal: ProposalKind::Bootstrap,
            resampling: ResamplingScheme::Systematic,
            ess_threshold: 0.5,
            seed: 0,
            storage: Storage::FullPath,
            enforce_orderliness: true,
            threads: None,
            memory_cap_bytes: DEFAULT_MEMORY_CAP,
        }
    }
}

impl SmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particles < 2 || self.particles >= u32::MAX as usize {
            return Err(Error::InvalidParameter(format!("particle count must be >= 2, got {}", self.particles)));
        }
        if !(self.ess_threshold > 0.0 && self.ess_threshold <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "ess_threshold must lie in (0, 1], got {}",
                self.ess_threshold
            )));
        }
        if let ProposalKind::Guided { blend } = self.proposal {
            if !(0.0..=1.0).contains(&blend) {
                return Err(Error::InvalidParameter(format!("guided blend must lie in [0, 1], got {blend}")));
            }
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidParameter("threads must be >= 1".into()));
        }
        Ok(())
    }
}

/// Where the inducing events come from.
#[derive(Debug, Clone, Copy)]
pub enum EventSource<'a, T: Real> {
    /// Each particle draws its own events from the current waiting-time and mark laws.
    Birth,
    /// Every particle follows the given sequence.
    Fixed(&'a InducingSequence<T>),
}

/// Selects the random streams of one filter run.
#[derive(Debug, Clone, Copy)]
pub struct RunOptions<'a, T: Real> {
    pub events: EventSource<'a, T>,
    /// Trial index in multi-trial fits.
    pub trial: u64,
    /// EM iteration, so that successive E-steps use fresh randomness.
    pub iteration: u64,
}

impl<T: Real> Default for RunOptions<'_, T> {
    fn default() -> Self {
        Self { events: EventSource::Birth, trial: 0, iteration: 0 }
    }
}

/// One inducing event as stored by the filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventNode<T: Real> {
    pub tau: T,
    /// Absolute event time.
    pub time: T,
    /// Grid step the event is pinned to.
    pub step: usize,
    /// Previous event in the same particle's sequence.
    pub prev: u32,
}

/// Shared store of all events ever born; particles reference their newest event
/// and sequences are recovered by following `prev` links.
#[derive(Debug, Clone, Default)]
pub struct EventArena<T: Real> {
    nodes: Vec<EventNode<T>>,
    marks: Vec<T>,
    dim: usize,
}

impl<T: Real> EventArena<T> {
    fn new(dim: usize) -> Self {
        Self { nodes: Vec::new(), marks: Vec::new(), dim }
    }

    fn push(&mut self, node: EventNode<T>, mark: &[T]) -> u32 {
        self.nodes.push(node);
        self.marks.extend_from_slice(mark);
        (self.nodes.len() - 1) as u32
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: u32) -> &EventNode<T> {
        &self.nodes[id as usize]
    }

    pub fn mark(&self, id: u32) -> &[T] {
        let i = id as usize * self.dim;
        &self.marks[i..i + self.dim]
    }

    /// Event ids from the first event up to `id`.
    pub fn chain(&self, id: u32) -> Vec<u32> {
        let mut out = Vec::new();
        let mut cur = id;
        while cur != NO_EVENT {
            out.push(cur);
            cur = self.nodes[cur as usize].prev;
        }
        out.reverse();
        out
    }

    pub fn sequence(&self, id: u32, origin: T) -> InducingSequence<T> {
        let points = self
            .chain(id)
            .into_iter()
            .map(|e| InducingPoint { tau: self.node(e).tau, mark: self.mark(e).to_vec() })
            .collect();
        InducingSequence { origin, points }
    }

    /// Total weight of the particles whose sequences contain each event.
    pub fn event_weights(&self, heads: &[u32], weights: &[T]) -> Vec<T> {
        let mut w = vec![T::zero(); self.nodes.len()];
        for (&h, &wu) in heads.iter().zip(weights) {
            if h != NO_EVENT {
                w[h as usize] += wu;
            }
        }
        for id in (0..self.nodes.len()).rev() {
            let p = self.nodes[id].prev;
            if p != NO_EVENT {
                let v = w[id];
                w[p as usize] += v;
            }
        }
        w
    }
}

/// Per-step particle states with ancestor links.
#[derive(Debug, Clone)]
pub struct Genealogy<T: Real> {
    particles: usize,
    dim: usize,
    steps: usize,
    x: Vec<T>,
    y: Vec<T>,
    ancestor: Vec<u32>,
    pending: Vec<u32>,
}

impl<T: Real> Genealogy<T> {
    pub fn particles(&self) -> usize {
        self.particles
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn x(&self, k: usize, u: usize) -> &[T] {
        let i = (k * self.particles + u) * self.dim;
        &self.x[i..i + self.dim]
    }

    #[inline]
    pub fn y(&self, k: usize, u: usize) -> &[T] {
        let i = (k * self.particles + u) * self.dim;
        &self.y[i..i + self.dim]
    }

    /// Parent (at step `k - 1`) of particle `u` at step `k >= 1`.
    #[inline]
    pub fn ancestor(&self, k: usize, u: usize) -> usize {
        self.ancestor[(k - 1) * self.particles + u] as usize
    }

    /// Event targeted by the transition into step `k >= 1` of particle `u`.
    #[inline]
    pub fn pending(&self, k: usize, u: usize) -> u32 {
        self.pending[(k - 1) * self.particles + u]
    }

    /// Marginal weight of every stored state under the final weights:
    /// the summed final weight of its descendants.
    pub fn node_weights(&self, final_weights: &[T]) -> Vec<T> {
        let u_n = self.particles;
        let mut w = vec![T::zero(); (self.steps + 1) * u_n];
        w[self.steps * u_n..].copy_from_slice(final_weights);
        for k in (1..=self.steps).rev() {
            for u in 0..u_n {
                let v = w[k * u_n + u];
                if v > T::zero() {
                    let a = self.ancestor(k, u);
                    w[(k - 1) * u_n + a] += v;
                }
            }
        }
        w
    }

    /// Particle indices along the lineage of final particle `u`, from step 0.
    pub fn lineage(&self, u: usize) -> Vec<usize> {
        let mut idx = vec![0; self.steps + 1];
        let mut cur = u;
        for k in (0..=self.steps).rev() {
            idx[k] = cur;
            if k > 0 {
                cur = self.ancestor(k, cur);
            }
        }
        idx
    }
}

/// Weighted mean and central 90% band of `x` and `y` at each step, rows `0..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PosteriorSummary<T: Real> {
    pub dim: usize,
    pub x_mean: Vec<T>,
    pub x_lo: Vec<T>,
    pub x_hi: Vec<T>,
    pub y_mean: Vec<T>,
    pub y_lo: Vec<T>,
    pub y_hi: Vec<T>,
}

pub const BAND_LO: f64 = 0.05;
pub const BAND_HI: f64 = 0.95;

impl<T: Real> PosteriorSummary<T> {
    fn with_capacity(dim: usize, rows: usize) -> Self {
        let v = || Vec::with_capacity(rows * dim);
        Self { dim, x_mean: v(), x_lo: v(), x_hi: v(), y_mean: v(), y_lo: v(), y_hi: v() }
    }

    pub fn rows(&self) -> usize {
        self.x_mean.len() / self.dim.max(1)
    }

    pub fn x_mean_row(&self, k: usize) -> &[T] {
        &self.x_mean[k * self.dim..(k + 1) * self.dim]
    }

    pub fn y_mean_row(&self, k: usize) -> &[T] {
        &self.y_mean[k * self.dim..(k + 1) * self.dim]
    }

    /// Series of coordinate `d` of the `y` mean.
    pub fn y_mean_series(&self, d: usize) -> Vec<T> {
        self.y_mean.iter().skip(d).step_by(self.dim).copied().collect()
    }

    pub fn x_mean_series(&self, d: usize) -> Vec<T> {
        self.x_mean.iter().skip(d).step_by(self.dim).copied().collect()
    }

    /// Appends one step from `(value, weight)` pairs per dimension.
    fn push_step(&mut self, xs: &[Vec<(T, T)>], ys: &[Vec<(T, T)>], bands: bool) {
        for (pairs, mean, lo, hi) in [
            (xs, &mut self.x_mean, &mut self.x_lo, &mut self.x_hi),
            (ys, &mut self.y_mean, &mut self.y_lo, &mut self.y_hi),
        ] {
            for p in pairs {
                let m = weighted_mean(p);
                mean.push(m);
                if bands {
                    let mut s = p.clone();
                    let (l, h) = weighted_band(&mut s);
                    lo.push(l.min(m));
                    hi.push(h.max(m));
                } else {
                    lo.push(m);
                    hi.push(m);
                }
            }
        }
    }

    /// Writes `t,mean_1..,lo_1..,hi_1..` for `x` (`which = 'x'`) or `y`.
    pub fn write_csv<W: std::io::Write>(&self, grid: &TimeGrid<T>, which: char, out: W) -> Result<()> {
        let (mean, lo, hi) =
            if which == 'x' { (&self.x_mean, &self.x_lo, &self.x_hi) } else { (&self.y_mean, &self.y_lo, &self.y_hi) };
        let mut w = csv::Writer::from_writer(out);
        let d = self.dim;
        let mut header = vec!["t".to_string()];
        for name in ["mean", "lo", "hi"] {
            header.extend((1..=d).map(|j| format!("{name}_{j}")));
        }
        w.write_record(&header)?;
        for k in 0..self.rows() {
            let mut rec = vec![grid.time(k).to_string()];
            for v in [mean, lo, hi] {
                rec.extend(v[k * d..(k + 1) * d].iter().map(|x| x.to_string()));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn weighted_mean<T: Real>(p: &[(T, T)]) -> T {
    let tw: T = p.iter().map(|&(_, w)| w).sum();
    p.iter().map(|&(v, w)| v * w).sum::<T>() / tw
}

fn weighted_band<T: Real>(p: &mut [(T, T)]) -> (T, T) {
    p.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let tw: T = p.iter().map(|&(_, w)| w).sum();
    let (lo_t, hi_t) = (T::lit(BAND_LO) * tw, T::lit(BAND_HI) * tw);
    let mut acc = T::zero();
    let (mut lo, mut hi) = (p[0].0, p[p.len() - 1].0);
    let mut lo_set = false;
    for &(v, w) in p.iter() {
        acc += w;
        if !lo_set && acc >= lo_t {
            lo = v;
            lo_set = true;
        }
        if acc >= hi_t {
            hi = v;
            break;
        }
    }
    (lo, hi)
}

/// One inducing sequence of the posterior with its total weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct WeightedSequence<T: Real> {
    pub weight: T,
    pub sequence: InducingSequence<T>,
}

/// Output of one filter run.
#[derive(Debug, Clone)]
pub struct SmcResult<T: Real> {
    pub grid: TimeGrid<T>,
    pub log_marginal_likelihood: T,
    /// Per-step contributions to the log-marginal likelihood.
    pub log_ml_increments: Vec<T>,
    /// Effective sample size after weighting, per step `1..=K`.
    pub ess: Vec<T>,
    pub resample_count: usize,
    pub filtered: PosteriorSummary<T>,
    /// Normalised final weights.
    pub weights: Vec<T>,
    /// Newest event of each final particle.
    pub heads: Vec<u32>,
    pub events: EventArena<T>,
    pub genealogy: Option<Genealogy<T>>,
    pub final_x: Vec<T>,
    pub final_y: Vec<T>,
}

impl<T: Real> SmcResult<T> {
    pub fn particles(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.filtered.dim
    }

    /// Posterior summary of the whole path under the final weights.
    pub fn smoothed(&self) -> Option<PosteriorSummary<T>> {
        let g = self.genealogy.as_ref()?;
        let nw = g.node_weights(&self.weights);
        let u_n = g.particles;
        let d = g.dim;
        let mut s = PosteriorSummary::with_capacity(d, g.steps + 1);
        for k in 0..=g.steps {
            let alive: Vec<usize> = (0..u_n).filter(|&u| nw[k * u_n + u] > T::zero()).collect();
            let w_at = |u: usize| nw[k * u_n + u];
            let xs: Vec<Vec<(T, T)>> =
                (0..d).map(|j| alive.iter().map(|&u| (g.x(k, u)[j], w_at(u))).collect()).collect();
            let ys: Vec<Vec<(T, T)>> =
                (0..d).map(|j| alive.iter().map(|&u| (g.y(k, u)[j], w_at(u))).collect()).collect();
            s.push_step(&xs, &ys, true);
        }
        Some(s)
    }

    /// Smoothed summary when paths were stored, filtered otherwise.
    pub fn posterior(&self) -> PosteriorSummary<T> {
        self.smoothed().unwrap_or_else(|| self.filtered.clone())
    }

    /// Distinct inducing sequences of the final particles with their summed weights.
    pub fn event_posterior(&self) -> Vec<WeightedSequence<T>> {
        let mut by_head: Vec<(u32, T)> = Vec::new();
        let mut order: Vec<usize> = (0..self.heads.len()).collect();
        order.sort_by_key(|&u| self.heads[u]);
        for u in order {
            let h = self.heads[u];
            match by_head.last_mut() {
                Some((last, w)) if *last == h => *w += self.weights[u],
                _ => by_head.push((h, self.weights[u])),
            }
        }
        by_head
            .into_iter()
            .filter(|&(_, w)| w > T::zero())
            .map(|(h, w)| WeightedSequence {
                weight: w,
                sequence: if h == NO_EVENT {
                    InducingSequence::empty(self.grid.origin)
                } else {
                    self.events.sequence(h, self.grid.origin)
                },
            })
            .collect()
    }

    /// Posterior mean number of events pinned inside the grid (`step <= K`).
    pub fn mean_event_count(&self) -> T {
        self.heads
            .iter()
            .zip(&self.weights)
            .map(|(&h, &w)| {
                let n = if h == NO_EVENT {
                    0
                } else {
                    self.events.chain(h).into_iter().filter(|&e| self.events.node(e).step <= self.grid.steps).count()
                };
                w * T::from_count(n)
            })
            .sum()
    }

    /// Event sequence of the heaviest final particle.
    pub fn map_sequence(&self) -> InducingSequence<T> {
        let best = (0..self.weights.len())
            .max_by(|&a, &b| self.weights[a].partial_cmp(&self.weights[b]).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap_or(0);
        match self.heads[best] {
            NO_EVENT => InducingSequence::empty(self.grid.origin),
            h => self.events.sequence(h, self.grid.origin),
        }
    }
}

/// Effective sample size `1 / sum(w^2)` of normalised weights.
pub fn effective_sample_size<T: Real>(weights: &[T]) -> T {
    T::one() / weights.iter().map(|&w| w * w).sum::<T>()
}

/// Offspring parent indices for normalised `weights`.
pub fn resample<T: Real, R: Rng + ?Sized>(weights: &[T], scheme: ResamplingScheme, rng: &mut R) -> Result<Vec<usize>> {
    let n = weights.len();
    let total: T = weights.iter().copied().sum();
    if n == 0 || (total - T::one()).abs() > T::lit(1e-6) || weights.iter().any(|&w| !(w >= T::zero())) {
        return Err(Error::ContractViolation(format!("resampling weights must be normalised, sum = {total}")));
    }
    let nf = T::from_count(n);
    let positions: Vec<T> = match scheme {
        ResamplingScheme::Systematic => {
            let u0: T = uniform01(rng);
            (0..n).map(|i| (T::from_count(i) + u0) / nf).collect()
        }
        ResamplingScheme::Multinomial => {
            let mut u: Vec<T> = (0..n).map(|_| uniform01::<T, _>(rng)).collect();
            u.sort_by(|a, b| a.partial_cmp(b).expect("uniforms are finite"));
            u
        }
    };
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut j = 0;
    for p in positions {
        let p = p * total;
        while p >= cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    Ok(out)
}

/// Precomputed quantities of the guided proposal.
#[derive(Debug, Clone)]
struct Guided<T: Real> {
    blend: T,
    gain: DMatrix<T>,
    w: DMatrix<T>,
    prior_var: Vec<T>,
    cov_lower: DMatrix<T>,
    cov_log_det: T,
}

impl<T: Real> Guided<T> {
    fn new(params: &ModelParams<T>, dt: T, blend: f64) -> Result<Self> {
        let ObsModel::Gaussian(g) = &params.obs else {
            return Err(Error::InvalidParameter("the guided proposal needs Gaussian observations".into()));
        };
        if params.noise.sigma_y.iter().any(|&s| !(s > T::zero())) {
            return Err(Error::InvalidParameter("the guided proposal needs sigma_y > 0".into()));
        }
        let prior_var: Vec<T> = params.noise.sigma_y.iter().map(|&s| s * s * dt).collect();
        let p = DMatrix::from_diagonal(&DVector::from_column_slice(&prior_var));
        let w = g.w().clone();
        let s = &w * &p * w.transpose() + g.r();
        let ls = linalg::cholesky_lower(&s, "innovation covariance")?;
        // gain = P W^T S^{-1}
        let pwt = &p * w.transpose();
        let sol = ls
            .solve_lower_triangular(&pwt.transpose())
            .and_then(|v| ls.transpose().solve_upper_triangular(&v))
            .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?;
        let gain = sol.transpose();
        let post = &p - &gain * &w * &p;
        let b = T::lit(blend);
        let cov = &p * (T::one() - b) + post * b;
        let cov = (&cov + cov.transpose()) * T::lit(0.5);
        let cov_lower = linalg::cholesky_lower(&cov, "guided proposal covariance")?;
        let cov_log_det = linalg::log_det_from_lower(&cov_lower);
        Ok(Self { blend: b, gain, w, prior_var, cov_lower, cov_log_det })
    }

    /// Draws `y` and returns `log p(y | prior) - log q(y)`.
    fn propose<R: Rng + ?Sized>(&self, y_k: &[T], x_k: &[T], dt: T, z: &[T], rng: &mut R, out: &mut [T]) -> T {
        let d = y_k.len();
        let mu: Vec<T> = (0..d).map(|j| y_k[j] + x_k[j] * dt).collect();
        let muv = DVector::from_column_slice(&mu);
        let innov = DVector::from_column_slice(z) - &self.w * &muv;
        let mean = &muv + (&self.gain * innov) * self.blend;
        let eta = DVector::from_fn(d, |_, _| standard_normal::<T, _>(rng));
        let y = &mean + &self.cov_lower * &eta;
        out.copy_from_slice(y.as_slice());
        let r = &y - &mean;
        let quad = linalg::mahalanobis_sq(&self.cov_lower, &r);
        let log_q = -T::lit(0.5) * (quad + self.cov_log_det + T::from_count(d) * T::two_pi().ln());
        gaussian_diag_logpdf(out, &mu, &self.prior_var) - log_q
    }
}

/// State of one particle before a transition.
#[derive(Debug, Clone, Copy)]
pub struct StepInput<'a, T: Real> {
    pub k: usize,
    pub x: &'a [T],
    pub y: &'a [T],
    pub next_time: T,
    pub next_mark: &'a [T],
    pub prev_time: T,
}

/// A proposed transition and its incremental log-weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposed<T: Real> {
    pub x: Vec<T>,
    pub y: Vec<T>,
    pub log_weight: T,
}

/// Proposes `(x_{k+1}, y_{k+1})` and weights it against observation row `k`.
pub fn propose_step<T: Real, R: Rng + ?Sized>(
    input: StepInput<'_, T>,
    obs: &ObservationSeries<T>,
    params: &ModelParams<T>,
    proposal: ProposalKind,
    rng: &mut R,
) -> Result<Proposed<T>> {
    let grid = obs.grid();
    let guided = match proposal {
        ProposalKind::Bootstrap => None,
        ProposalKind::Guided { blend } => Some(Guided::new(params, grid.dt, blend)?),
    };
    let d = input.x.len();
    let mut x = vec![T::zero(); d];
    let mut y = vec![T::zero(); d];
    let lw = transition(&input, &grid, obs, params, guided.as_ref(), rng, &mut x, &mut y);
    Ok(Proposed { x, y, log_weight: lw })
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn transition<T: Real, R: Rng + ?Sized>(
    s: &StepInput<'_, T>,
    grid: &TimeGrid<T>,
    obs: &ObservationSeries<T>,
    params: &ModelParams<T>,
    guided: Option<&Guided<T>>,
    rng: &mut R,
    x_out: &mut [T],
    y_out: &mut [T],
) -> T {
    let extra = match guided {
        None => {
            integrator_step_into(s.y, s.x, grid.dt, &params.noise.sigma_y, rng, y_out);
            T::zero()
        }
        Some(g) => g.propose(s.y, s.x, grid.dt, obs.real_row(s.k), rng, y_out),
    };
    bridge_step_into(s.x, s.k, grid, s.next_time, s.next_mark, s.prev_time, &params.noise.sigma_x, rng, x_out);
    params.obs.loglik_row(obs, s.k, y_out) + extra
}

struct Birth<T> {
    tau: T,
    time: T,
    step: usize,
    mark: Vec<T>,
}

/// Log-weight increment, births and the event-chain head of one particle.
type StepOutcome<T> = (T, Vec<Birth<T>>, u32);

fn particle_rng(base: &ChaCha8Rng, stream: u64, step: usize) -> ChaCha8Rng {
    let mut r = base.clone();
    r.set_stream(stream);
    r.set_word_pos((step as u128) << WORDS_PER_STEP);
    r
}

/// Bytes of path storage a run will need.
pub fn storage_bytes<T: Real>(particles: usize, steps: usize, dim: usize, storage: Storage) -> usize {
    match storage {
        Storage::FullPath => (steps + 1) * particles * dim * 2 * std::mem::size_of::<T>() + steps * particles * 8,
        Storage::FilteredSummary => 2 * particles * dim * 2 * std::mem::size_of::<T>(),
    }
}

/// Runs the filter with event birth.
pub fn run_filter<T: Real>(
    obs: &ObservationSeries<T>,
    params: &ModelParams<T>,
    cfg: &SmcConfig,
) -> Result<SmcResult<T>> {
    run_filter_with(obs, params, cfg, RunOptions::default())
}

/// Runs the filter with every particle following the same fixed event sequence.
pub fn run_filter_fixed_events<T: Real>(
    obs: &ObservationSeries<T>,
    params: &ModelParams<T>,
    cfg: &SmcConfig,
    events: &InducingSequence<T>,
) -> Result<SmcResult<T>> {
    run_filter_with(obs, params, cfg, RunOptions { events: EventSource::Fixed(events), ..RunOptions::default() })
}

pub fn run_filter_with<T: Real>(
    obs: &ObservationSeries<T>,
    params: &ModelParams<T>,
    cfg: &SmcConfig,
    opts: RunOptions<'_, T>,
) -> Result<SmcResult<T>> {
    cfg.validate()?;
    params.validate()?;
    params.obs.check_series(obs)?;
    match cfg.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
            pool.install(|| filter_impl(obs, params, cfg, opts))
        }
        None => filter_impl(obs, params, cfg, opts),
    }
}

fn filter_impl<T: Real>(
    obs: &ObservationSeries<T>,
    params: &ModelParams<T>,
    cfg: &SmcConfig,
    opts: RunOptions<'_, T>,
) -> Result<SmcResult<T>> {
    let grid = obs.grid();
    let k_n = grid.steps;
    let u_n = cfg.particles;
    let d = params.latent_dim();
    let full = cfg.storage == Storage::FullPath;
    let needed = storage_bytes::<T>(u_n, k_n, d, cfg.storage);
    if needed > cfg.memory_cap_bytes {
        return Err(Error::MemoryCap { needed, cap: cfg.memory_cap_bytes });
    }
    let guided = match cfg.proposal {
        ProposalKind::Bootstrap => None,
        ProposalKind::Guided { blend } => Some(Guided::new(params, grid.dt, blend)?),
    };

    let mut arena = EventArena::new(d);
    let fixed_count = match opts.events {
        EventSource::Birth => None,
        EventSource::Fixed(seq) => {
            seq.validate()?;
            if seq.dim().is_some_and(|sd| sd != d) {
                return Err(Error::Dimension { what: "fixed event marks", expected: d, got: seq.dim().unwrap_or(0) });
            }
            let mut prev = NO_EVENT;
            for (p, t) in seq.points.iter().zip(seq.event_times()) {
                prev = arena.push(EventNode { tau: p.tau, time: t, step: grid.snap(t), prev }, &p.mark);
            }
            Some(arena.len())
        }
    };

    let base = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stream_base = (opts.trial << 48) | ((opts.iteration & 0xFFFF) << 32);
    let mut master = particle_rng(&base, stream_base | RESAMPLE_STREAM, 0);

    let layer = u_n * d;
    let mut x_cur = vec![T::zero(); layer];
    let mut y_cur = vec![T::zero(); layer];
    x_cur.par_chunks_mut(d).zip(y_cur.par_chunks_mut(d)).enumerate().for_each(|(u, (x, y))| {
        let mut rng = particle_rng(&base, stream_base | u as u64, 0);
        params.initial.sample_into(&mut rng, x, y);
    });
    let mut genealogy = full.then(|| Genealogy {
        particles: u_n,
        dim: d,
        steps: k_n,
        x: Vec::with_capacity((k_n + 1) * layer),
        y: Vec::with_capacity((k_n + 1) * layer),
        ancestor: Vec::with_capacity(k_n * u_n),
        pending: Vec::with_capacity(k_n * u_n),
    });
    if let Some(g) = genealogy.as_mut() {
        g.x.extend_from_slice(&x_cur);
        g.y.extend_from_slice(&y_cur);
    }

    let mut filtered = PosteriorSummary::with_capacity(d, k_n + 1);
    let bands = !full;
    let uniform = T::one() / T::from_count(u_n);
    {
        let pairs = |v: &[T]| -> Vec<Vec<(T, T)>> {
            (0..d).map(|j| (0..u_n).map(|u| (v[u * d + j], uniform)).collect()).collect()
        };
        filtered.push_step(&pairs(&x_cur), &pairs(&y_cur), bands);
    }

    let mut heads = vec![NO_EVENT; u_n];
    let mut parents: Vec<u32> = (0..u_n as u32).collect();
    let log_uniform = -T::from_count(u_n).ln();
    let mut carry = vec![log_uniform; u_n];
    let mut x_next = vec![T::zero(); layer];
    let mut y_next = vec![T::zero(); layer];
    let mut log_ml = T::zero();
    let mut increments = Vec::with_capacity(k_n);
    let mut ess_trace = Vec::with_capacity(k_n);
    let mut resample_count = 0;
    let mut weights = vec![uniform; u_n];
    let mut logw = vec![T::zero(); u_n];

    let min_gap = cfg.enforce_orderliness.then_some(grid.dt);

    for k in 0..k_n {
        let arena_ref = &arena;
        let heads_ref = &heads;
        let parents_ref = &parents;
        let x_ref = &x_cur;
        let y_ref = &y_cur;
        let guided_ref = guided.as_ref();
        let outs: Vec<Result<StepOutcome<T>>> = x_next
            .par_chunks_mut(d)
            .zip(y_next.par_chunks_mut(d))
            .enumerate()
            .map(|(u, (xo, yo))| {
                let p = parents_ref[u] as usize;
                let mut rng = particle_rng(&base, stream_base | u as u64, k + 1);
                let mut head = heads_ref[p];
                let mut births: Vec<Birth<T>> = Vec::new();
                // advance to the first event strictly after step k
                loop {
                    let (last_time, last_step) = match births.last() {
                        Some(b) => (b.time, Some(b.step)),
                        None if head != NO_EVENT => {
                            let n = arena_ref.node(head);
                            (n.time, Some(n.step))
                        }
                        None => (grid.origin, None),
                    };
                    if last_step.is_some_and(|s| s > k) {
                        break;
                    }
                    match fixed_count {
                        Some(n_fixed) => {
                            let next = if head == NO_EVENT { 0 } else { head as usize + 1 };
                            if next >= n_fixed {
                                return Err(Error::SequenceExhausted {
                                    last_event: last_time.as_f64(),
                                    grid_end: grid.end().as_f64(),
                                });
                            }
                            head = next as u32;
                        }
                        None => {
                            let tau = match &params.repulsion {
                                None => sample_waiting_time(&params.waiting_time, min_gap, &mut rng)?,
                                Some(rep) => {
                                    let prev = recent_taus(arena_ref, head, &births, rep.window);
                                    sample_waiting_time_repulsive(&params.waiting_time, rep, &prev, min_gap, &mut rng)?
                                }
                            };
                            let time = last_time + tau;
                            let step = grid.snap(time);
                            births.push(Birth { tau, time, step, mark: params.marks.sample(&mut rng) });
                        }
                    }
                }
                let (next_time, next_mark, prev_time): (T, &[T], T) = match births.len() {
                    0 => {
                        let n = arena_ref.node(head);
                        let prev_time =
                            if n.prev == NO_EVENT { grid.origin } else { grid.time(arena_ref.node(n.prev).step) };
                        (grid.time(n.step), arena_ref.mark(head), prev_time)
                    }
                    nb => {
                        let b = &births[nb - 1];
                        let prev_time = if nb >= 2 {
                            grid.time(births[nb - 2].step)
                        } else if head != NO_EVENT {
                            grid.time(arena_ref.node(head).step)
                        } else {
                            grid.origin
                        };
                        (grid.time(b.step), &b.mark[..], prev_time)
                    }
                };
                let input = StepInput {
                    k,
                    x: &x_ref[p * d..(p + 1) * d],
                    y: &y_ref[p * d..(p + 1) * d],
                    next_time,
                    next_mark,
                    prev_time,
                };
                let lw = transition(&input, &grid, obs, params, guided_ref, &mut rng, xo, yo);
                Ok((lw, births, head))
            })
            .collect();

        let mut new_heads = vec![NO_EVENT; u_n];
        let mut incr = vec![T::zero(); u_n];
        for (u, out) in outs.into_iter().enumerate() {
            let (lw, births, mut head) = out?;
            for b in births {
                head = arena.push(EventNode { tau: b.tau, time: b.time, step: b.step, prev: head }, &b.mark);
            }
            new_heads[u] = head;
            incr[u] = lw;
        }

        for u in 0..u_n {
            logw[u] = carry[u] + incr[u];
        }
        let inc = log_sum_exp(&logw);
        if !inc.is_finite() {
            return Err(Error::DegenerateFilter { step: k + 1 });
        }
        log_ml += inc;
        increments.push(inc);
        for u in 0..u_n {
            logw[u] -= inc;
            weights[u] = logw[u].exp();
        }
        let ess = effective_sample_size(&weights);
        ess_trace.push(ess);

        if let Some(g) = genealogy.as_mut() {
            g.x.extend_from_slice(&x_next);
            g.y.extend_from_slice(&y_next);
            g.ancestor.extend_from_slice(&parents);
            g.pending.extend_from_slice(&new_heads);
        }
        {
            let pairs = |v: &[T]| -> Vec<Vec<(T, T)>> {
                (0..d)
                    .map(|j| (0..u_n).filter(|&u| weights[u] > T::zero()).map(|u| (v[u * d + j], weights[u])).collect())
                    .collect()
            };
            filtered.push_step(&pairs(&x_next), &pairs(&y_next), bands);
        }

        std::mem::swap(&mut x_cur, &mut x_next);
        std::mem::swap(&mut y_cur, &mut y_next);
        heads = new_heads;

        let last = k + 1 == k_n;
        if !last && ess < T::lit(cfg.ess_threshold) * T::from_count(u_n) {
            let total: T = weights.iter().copied().sum();
            let normalised: Vec<T> = weights.iter().map(|&w| w / total).collect();
            master.set_word_pos(((k + 1) as u128) << WORDS_PER_STEP);
            let idx = resample(&normalised, cfg.resampling, &mut master)?;
            parents = idx.into_iter().map(|i| i as u32).collect();
            carry.iter_mut().for_each(|c| *c = log_uniform);
            resample_count += 1;
        } else {
            parents.iter_mut().enumerate().for_each(|(u, p)| *p = u as u32);
            carry.copy_from_slice(&logw);
        }
    }

    Ok(SmcResult {
        grid,
        log_marginal_likelihood: log_ml,
        log_ml_increments: increments,
        ess: ess_trace,
        resample_count,
        filtered,
        weights,
        heads,
        events: arena,
        genealogy,
        final_x: x_cur,
        final_y: y_cur,
    })
}

fn recent_taus<T: Real>(arena: &EventArena<T>, head: u32, births: &[Birth<T>], window: usize) -> Vec<T> {
    let mut out: Vec<T> = births.iter().rev().take(window).map(|b| b.tau).collect();
    let mut cur = head;
    while out.len() < window && cur != NO_EVENT {
        let n = arena.node(cur);
        out.push(n.tau);
        cur = n.prev;
    }
    out.reverse();
    out
}
