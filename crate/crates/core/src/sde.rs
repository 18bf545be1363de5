//! Discrete-time dynamics of the two latent SDE layers.
//!
//! `x` is a Brownian bridge pinned to the marks of the inducing events and `y`
//! integrates `x`:
//!
//! ```text
//! x[k+1] = x[k] + (m - x[k]) / (t_next - t_k) * dt + sqrt(b_k * dt) * w,   w ~ N(0, sigma_x^2)
//! y[k+1] = y[k] + x[k] * dt + sqrt(dt) * v,                                   v ~ N(0, sigma_y^2)
//! b_k    = (t_next - t_k) (t_k - t_prev) / (t_next - t_prev)
//! ```
//!
//! A step whose target lands within half a bin of the pending event is pinned:
//! `x` is set to the mark and the event is consumed.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inducing::{sample_waiting_time, InducingPoint, InducingSequence, MarkModel, WaitingTimeModel};
use crate::real::{standard_normal, Real};

/// Uniform sampling grid `origin + k * dt`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct TimeGrid<T: Real> {
    pub dt: T,
    pub steps: usize,
    pub origin: T,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(dt: T, steps: usize, origin: T) -> Result<Self> {
        if !(dt > T::zero()) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("grid dt must be > 0, got {dt}")));
        }
        if steps == 0 {
            return Err(Error::InvalidParameter("grid needs at least one step".into()));
        }
        Ok(Self { dt, steps, origin })
    }

    #[inline]
    pub fn time(&self, k: usize) -> T {
        self.origin + T::from_count(k) * self.dt
    }

    pub fn end(&self) -> T {
        self.time(self.steps)
    }

    /// Nearest grid index of an absolute time (clamped at zero).
    pub fn snap(&self, t: T) -> usize {
        let r = ((t - self.origin) / self.dt).round();
        if r <= T::zero() {
            0
        } else {
            r.as_f64() as usize
        }
    }
}

/// Per-dimension noise scales of the bridge (`sigma_x`) and integrator (`sigma_y`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct NoiseParams<T: Real> {
    pub sigma_x: Vec<T>,
    pub sigma_y: Vec<T>,
}

impl<T: Real> NoiseParams<T> {
    pub fn new(sigma_x: Vec<T>, sigma_y: Vec<T>) -> Result<Self> {
        let n = Self { sigma_x, sigma_y };
        n.validate()?;
        Ok(n)
    }

    pub fn uniform(dim: usize, sigma_x: T, sigma_y: T) -> Self {
        Self { sigma_x: vec![sigma_x; dim], sigma_y: vec![sigma_y; dim] }
    }

    pub fn dim(&self) -> usize {
        self.sigma_x.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_x.len() != self.sigma_y.len() {
            return Err(Error::Dimension { what: "sigma_y", expected: self.sigma_x.len(), got: self.sigma_y.len() });
        }
        if self.sigma_x.iter().chain(&self.sigma_y).any(|&s| !(s >= T::zero()) || !s.is_finite()) {
            return Err(Error::InvalidParameter("noise scales must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// The event the bridge is currently heading for.
#[derive(Debug, Clone, Copy)]
pub struct PendingEvent<'a, T: Real> {
    /// Absolute event time.
    pub time: T,
    pub mark: &'a [T],
}

/// Trajectories of both latent layers on a grid, stored row-major `(steps + 1) x dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LatentPath<T: Real> {
    dim: usize,
    x: Vec<T>,
    y: Vec<T>,
}

impl<T: Real> LatentPath<T> {
    pub fn zeros(steps: usize, dim: usize) -> Self {
        Self { dim, x: vec![T::zero(); (steps + 1) * dim], y: vec![T::zero(); (steps + 1) * dim] }
    }

    pub fn from_rows(x: Vec<Vec<T>>, y: Vec<Vec<T>>) -> Result<Self> {
        let dim = x.first().map_or(0, |r| r.len());
        if x.len() != y.len() || x.iter().chain(&y).any(|r| r.len() != dim) {
            return Err(Error::Input("x and y rows must share length and dimension".into()));
        }
        Ok(Self { dim, x: x.concat(), y: y.concat() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of transitions, one less than the number of stored states.
    pub fn steps(&self) -> usize {
        self.x.len() / self.dim.max(1) - 1
    }

    pub fn x(&self, k: usize) -> &[T] {
        &self.x[k * self.dim..(k + 1) * self.dim]
    }

    pub fn y(&self, k: usize) -> &[T] {
        &self.y[k * self.dim..(k + 1) * self.dim]
    }

    pub fn x_mut(&mut self, k: usize) -> &mut [T] {
        &mut self.x[k * self.dim..(k + 1) * self.dim]
    }

    pub fn y_mut(&mut self, k: usize) -> &mut [T] {
        &mut self.y[k * self.dim..(k + 1) * self.dim]
    }

    /// Coordinate `d` of `x` over all steps.
    pub fn x_series(&self, d: usize) -> Vec<T> {
        self.x.iter().skip(d).step_by(self.dim).copied().collect()
    }

    pub fn y_series(&self, d: usize) -> Vec<T> {
        self.y.iter().skip(d).step_by(self.dim).copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.y).all(|v| v.is_finite())
    }

    /// Writes `t,x1..xD,y1..yD`, one row per grid step.
    pub fn write_csv<W: Write>(&self, grid: &TimeGrid<T>, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|d| format!("x{d}")));
        header.extend((1..=self.dim).map(|d| format!("y{d}")));
        w.write_record(&header)?;
        for k in 0..=self.steps() {
            let mut rec = vec![grid.time(k).to_string()];
            rec.extend(self.x(k).iter().map(|v| v.to_string()));
            rec.extend(self.y(k).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// True when the step from `k` to `k + 1` lands on the pending event.
#[inline]
pub fn is_pinned_step<T: Real>(k: usize, grid: &TimeGrid<T>, next_time: T) -> bool {
    next_time - grid.time(k + 1) < grid.dt * T::lit(0.5)
}

/// Drift fraction `dt / (t_next - t_k)` and bridge factor `b_k` for step `k`.
#[inline]
pub fn bridge_coefficients<T: Real>(t_k: T, next_time: T, prev_time: T, dt: T) -> (T, T) {
    let remaining = next_time - t_k;
    let span = next_time - prev_time;
    let factor = if span > T::zero() { (remaining * (t_k - prev_time) / span).max(T::zero()) } else { T::zero() };
    (dt / remaining, factor)
}

/// Conditional mean and per-dimension variance of one bridge transition.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeMoments<T: Real> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub pinned: bool,
}

fn check_bridge_contract<T: Real>(k: usize, grid: &TimeGrid<T>, next_time: T, prev_time: T) -> Result<()> {
    let t_k = grid.time(k);
    if !(next_time > t_k) {
        return Err(Error::ContractViolation(format!(
            "step {k} at t = {t_k} is not before the pending event at {next_time}; advance the event first"
        )));
    }
    if !(next_time > prev_time) {
        return Err(Error::ContractViolation("event times must increase".into()));
    }
    Ok(())
}

pub fn bridge_moments<T: Real>(
    x_k: &[T],
    k: usize,
    grid: &TimeGrid<T>,
    next: PendingEvent<'_, T>,
    prev_time: T,
    noise: &NoiseParams<T>,
) -> Result<BridgeMoments<T>> {
    check_bridge_contract(k, grid, next.time, prev_time)?;
    if is_pinned_step(k, grid, next.time) {
        return Ok(BridgeMoments { mean: next.mark.to_vec(), var: vec![T::zero(); x_k.len()], pinned: true });
    }
    let (frac, factor) = bridge_coefficients(grid.time(k), next.time, prev_time, grid.dt);
    let mean = x_k.iter().zip(next.mark).map(|(&x, &m)| x + (m - x) * frac).collect();
    let var = noise.sigma_x.iter().map(|&s| s * s * factor * grid.dt).collect();
    Ok(BridgeMoments { mean, var, pinned: false })
}

/// One Euler–Maruyama bridge step, writing into `out`. Returns whether the step pinned.
/// The contract (`t_k < t_next`) is the caller's responsibility.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn bridge_step_into<T: Real, R: Rng + ?Sized>(
    x_k: &[T],
    k: usize,
    grid: &TimeGrid<T>,
    next_time: T,
    mark: &[T],
    prev_time: T,
    sigma_x: &[T],
    rng: &mut R,
    out: &mut [T],
) -> bool {
    if is_pinned_step(k, grid, next_time) {
        out.copy_from_slice(mark);
        return true;
    }
    let (frac, factor) = bridge_coefficients(grid.time(k), next_time, prev_time, grid.dt);
    let scale = (factor * grid.dt).sqrt();
    for d in 0..out.len() {
        let mut v = x_k[d] + (mark[d] - x_k[d]) * frac;
        if sigma_x[d] > T::zero() && scale > T::zero() {
            v += sigma_x[d] * scale * standard_normal::<T, _>(rng);
        }
        out[d] = v;
    }
    false
}

/// One bridge step from `x_k` toward the pending event.
pub fn bridge_step<T: Real, R: Rng + ?Sized>(
    x_k: &[T],
    k: usize,
    grid: &TimeGrid<T>,
    next: PendingEvent<'_, T>,
    prev_time: T,
    noise: &NoiseParams<T>,
    rng: &mut R,
) -> Result<Vec<T>> {
    check_bridge_contract(k, grid, next.time, prev_time)?;
    let mut out = vec![T::zero(); x_k.len()];
    bridge_step_into(x_k, k, grid, next.time, next.mark, prev_time, &noise.sigma_x, rng, &mut out);
    Ok(out)
}

/// Log-density of one bridge transition. Pinned or zero-variance steps are point
/// masses: `0` at the deterministic target and `-inf` elsewhere.
pub fn bridge_transition_logpdf<T: Real>(
    x_next: &[T],
    x_k: &[T],
    k: usize,
    grid: &TimeGrid<T>,
    next: PendingEvent<'_, T>,
    prev_time: T,
    noise: &NoiseParams<T>,
) -> Result<T> {
    let m = bridge_moments(x_k, k, grid, next, prev_time, noise)?;
    Ok(gaussian_diag_logpdf(x_next, &m.mean, &m.var))
}

/// Diagonal Gaussian log-density treating zero-variance coordinates as point masses.
pub fn gaussian_diag_logpdf<T: Real>(x: &[T], mean: &[T], var: &[T]) -> T {
    let half = T::lit(0.5);
    let mut acc = T::zero();
    for d in 0..x.len() {
        let r = x[d] - mean[d];
        if var[d] > T::zero() {
            acc -= half * ((T::two_pi() * var[d]).ln() + r * r / var[d]);
        } else if r != T::zero() {
            return T::neg_infinity();
        }
    }
    acc
}

#[inline]
pub(crate) fn integrator_step_into<T: Real, R: Rng + ?Sized>(
    y_k: &[T],
    x_k: &[T],
    dt: T,
    sigma_y: &[T],
    rng: &mut R,
    out: &mut [T],
) {
    let sq = dt.sqrt();
    for d in 0..out.len() {
        let mut v = y_k[d] + x_k[d] * dt;
        if sigma_y[d] > T::zero() {
            v += sq * sigma_y[d] * standard_normal::<T, _>(rng);
        }
        out[d] = v;
    }
}

/// `y[k+1] = y[k] + x[k] dt + sqrt(dt) v`, `v ~ N(0, diag(sigma_y^2))`.
pub fn integrator_step<T: Real, R: Rng + ?Sized>(
    y_k: &[T],
    x_k: &[T],
    grid: &TimeGrid<T>,
    noise: &NoiseParams<T>,
    rng: &mut R,
) -> Vec<T> {
    let mut out = vec![T::zero(); y_k.len()];
    integrator_step_into(y_k, x_k, grid.dt, &noise.sigma_y, rng, &mut out);
    out
}

/// Log-density of one integrator transition.
pub fn integrator_transition_logpdf<T: Real>(y_next: &[T], y_k: &[T], x_k: &[T], dt: T, sigma_y: &[T]) -> T {
    let mean: Vec<T> = y_k.iter().zip(x_k).map(|(&y, &x)| y + x * dt).collect();
    let var: Vec<T> = sigma_y.iter().map(|&s| s * s * dt).collect();
    gaussian_diag_logpdf(y_next, &mean, &var)
}

/// Event times snapped to grid steps, as used by the discrete dynamics.
pub fn snapped_event_steps<T: Real>(seq: &InducingSequence<T>, grid: &TimeGrid<T>) -> Vec<usize> {
    seq.event_times().into_iter().map(|t| grid.snap(t)).collect()
}

/// Forward simulation of both layers driven by a fixed inducing sequence.
pub fn simulate_path<T: Real, R: Rng + ?Sized>(
    seq: &InducingSequence<T>,
    grid: &TimeGrid<T>,
    noise: &NoiseParams<T>,
    x0: &[T],
    y0: &[T],
    rng: &mut R,
) -> Result<LatentPath<T>> {
    let dim = x0.len();
    if y0.len() != dim {
        return Err(Error::Dimension { what: "y0", expected: dim, got: y0.len() });
    }
    if noise.dim() != dim {
        return Err(Error::Dimension { what: "noise", expected: dim, got: noise.dim() });
    }
    if let Some(d) = seq.dim() {
        if d != dim {
            return Err(Error::Dimension { what: "marks", expected: dim, got: d });
        }
    }
    seq.validate()?;
    let steps = snapped_event_steps(seq, grid);
    let last = steps.last().copied().unwrap_or(0);
    if seq.is_empty() || last < grid.steps {
        return Err(Error::SequenceExhausted { last_event: seq.last_time().as_f64(), grid_end: grid.end().as_f64() });
    }
    let mut prev_step = 0usize;
    for (i, &s) in steps.iter().enumerate() {
        if s <= prev_step {
            return Err(Error::Domain(format!(
                "event {i} shares a grid bin with its predecessor; orderliness requires tau > dt"
            )));
        }
        prev_step = s;
    }

    let mut path = LatentPath::zeros(grid.steps, dim);
    path.x_mut(0).copy_from_slice(x0);
    path.y_mut(0).copy_from_slice(y0);
    let mut next = 0usize;
    let mut prev_time = grid.origin;
    let mut xb = vec![T::zero(); dim];
    let mut yb = vec![T::zero(); dim];
    for k in 0..grid.steps {
        while steps[next] <= k {
            prev_time = grid.time(steps[next]);
            next += 1;
        }
        let next_time = grid.time(steps[next]);
        integrator_step_into(path.y(k), path.x(k), grid.dt, &noise.sigma_y, rng, &mut yb);
        bridge_step_into(
            path.x(k),
            k,
            grid,
            next_time,
            &seq.points[next].mark,
            prev_time,
            &noise.sigma_x,
            rng,
            &mut xb,
        );
        path.x_mut(k + 1).copy_from_slice(&xb);
        path.y_mut(k + 1).copy_from_slice(&yb);
    }
    Ok(path)
}

/// Draws a renewal sequence from `origin` until an event lands at or beyond the grid end.
pub fn sample_covering_sequence<T: Real, R: Rng + ?Sized>(
    wt: &WaitingTimeModel<T>,
    mk: &MarkModel<T>,
    grid: &TimeGrid<T>,
    enforce_orderliness: bool,
    rng: &mut R,
) -> Result<InducingSequence<T>> {
    let min_gap = enforce_orderliness.then_some(grid.dt);
    let mut t = grid.origin;
    let mut points = Vec::new();
    while grid.snap(t) < grid.steps || points.is_empty() {
        let tau = sample_waiting_time(wt, min_gap, rng)?;
        t += tau;
        points.push(InducingPoint { tau, mark: mk.sample(rng) });
    }
    InducingSequence::new(grid.origin, points)
}
