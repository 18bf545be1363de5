//! Observation models linking the integrator layer `y` to data.
//!
//! Continuous series use `z = W y + e`, `e ~ N(0, R)`. Spike counts use
//! independent Poisson bins with rate `exp(w_m . y + b_m)`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::linalg::{self, Gaussian};
use crate::real::{poisson_variate, standard_normal, Real};
use crate::sde::{LatentPath, TimeGrid};

/// Expected count per bin above which bins are reported as too coarse.
pub const COARSE_BIN_COUNT: f64 = 20.0;

/// Linear-Gaussian read-out `z = W y + e`, `e ~ N(0, R)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "GaussianRepr<T>", into = "GaussianRepr<T>")]
pub struct GaussianObsModel<T: Real> {
    w: DMatrix<T>,
    noise: Gaussian<T>,
    w_flat: Vec<T>,
    lower_flat: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
struct GaussianRepr<T: Real> {
    w: Vec<Vec<T>>,
    r: Vec<Vec<T>>,
}

impl<T: Real> TryFrom<GaussianRepr<T>> for GaussianObsModel<T> {
    type Error = Error;
    fn try_from(r: GaussianRepr<T>) -> Result<Self> {
        Self::new(linalg::from_rows(&r.w)?, linalg::from_rows(&r.r)?)
    }
}

impl<T: Real> From<GaussianObsModel<T>> for GaussianRepr<T> {
    fn from(m: GaussianObsModel<T>) -> Self {
        GaussianRepr { w: linalg::to_rows(&m.w), r: linalg::to_rows(m.noise.cov()) }
    }
}

impl<T: Real> GaussianObsModel<T> {
    pub fn new(w: DMatrix<T>, r: DMatrix<T>) -> Result<Self> {
        if r.nrows() != w.nrows() {
            return Err(Error::Dimension { what: "R", expected: w.nrows(), got: r.nrows() });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("W has non-finite entries".into()));
        }
        let noise = Gaussian::new(DVector::zeros(w.nrows()), r)?;
        let w_flat = row_major(&w);
        let lower_flat = row_major(noise.lower());
        Ok(Self { w, noise, w_flat, lower_flat })
    }

    pub fn w(&self) -> &DMatrix<T> {
        &self.w
    }

    pub fn r(&self) -> &DMatrix<T> {
        self.noise.cov()
    }

    pub fn r_lower(&self) -> &DMatrix<T> {
        self.noise.lower()
    }

    pub fn obs_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    /// `W y` as a plain vector.
    pub fn mean(&self, y: &[T]) -> Vec<T> {
        let d = self.latent_dim();
        self.w_flat.chunks_exact(d).map(|row| row.iter().zip(y).map(|(&a, &b)| a * b).sum()).collect()
    }

    /// `log N(z; W y, R)`.
    pub fn loglik(&self, z: &[T], y: &[T]) -> T {
        let m = self.obs_dim();
        let d = self.latent_dim();
        let mut v = Vec::with_capacity(m);
        let mut quad = T::zero();
        for i in 0..m {
            let wy: T = self.w_flat[i * d..(i + 1) * d].iter().zip(y).map(|(&a, &b)| a * b).sum();
            let mut r = z[i] - wy;
            let row = &self.lower_flat[i * m..i * m + i];
            for (j, &l) in row.iter().enumerate() {
                r -= l * v[j];
            }
            let vi = r / self.lower_flat[i * m + i];
            quad += vi * vi;
            v.push(vi);
        }
        -T::lit(0.5) * (quad + self.noise.log_det() + T::from_count(m) * T::two_pi().ln())
    }

    pub fn sample<R: Rng + ?Sized>(&self, y: &[T], rng: &mut R) -> Vec<T> {
        let m = self.obs_dim();
        let eta: Vec<T> = (0..m).map(|_| standard_normal(rng)).collect();
        let mut out = self.mean(y);
        for i in 0..m {
            for j in 0..=i {
                out[i] += self.lower_flat[i * m + j] * eta[j];
            }
        }
        out
    }
}

fn row_major<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

/// Poisson spike model with log-link rates `exp(W y + b)` in spikes per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "PointRepr<T>", into = "PointRepr<T>")]
pub struct PointProcessObsModel<T: Real> {
    w: DMatrix<T>,
    b: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
struct PointRepr<T: Real> {
    w: Vec<Vec<T>>,
    b: Vec<T>,
}

impl<T: Real> TryFrom<PointRepr<T>> for PointProcessObsModel<T> {
    type Error = Error;
    fn try_from(r: PointRepr<T>) -> Result<Self> {
        Self::new(linalg::from_rows(&r.w)?, r.b)
    }
}

impl<T: Real> From<PointProcessObsModel<T>> for PointRepr<T> {
    fn from(m: PointProcessObsModel<T>) -> Self {
        PointRepr { w: linalg::to_rows(&m.w), b: m.b }
    }
}

impl<T: Real> PointProcessObsModel<T> {
    pub fn new(w: DMatrix<T>, b: Vec<T>) -> Result<Self> {
        if b.len() != w.nrows() {
            return Err(Error::Dimension { what: "b", expected: w.nrows(), got: b.len() });
        }
        if w.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("spike loadings must be finite".into()));
        }
        Ok(Self { w, b })
    }

    pub fn w(&self) -> &DMatrix<T> {
        &self.w
    }

    pub fn b(&self) -> &[T] {
        &self.b
    }

    pub fn obs_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    /// `w_m . y + b_m` for every neuron.
    pub fn log_rates(&self, y: &[T]) -> Vec<T> {
        (0..self.obs_dim()).map(|m| (0..y.len()).map(|d| self.w[(m, d)] * y[d]).sum::<T>() + self.b[m]).collect()
    }

    /// Poisson log-likelihood of one bin of counts, including `-log n!`.
    pub fn loglik(&self, n: &[u32], y: &[T], dt: T) -> T {
        self.accumulate(n, y, dt, true)
    }

    /// As [`loglik`](Self::loglik) without the data-only `log n!` terms.
    pub fn loglik_without_factorials(&self, n: &[u32], y: &[T], dt: T) -> T {
        self.accumulate(n, y, dt, false)
    }

    #[inline]
    fn accumulate(&self, n: &[u32], y: &[T], dt: T, factorials: bool) -> T {
        let ldt = dt.ln();
        let d = self.latent_dim();
        let mut acc = T::zero();
        for m in 0..self.obs_dim() {
            let mut eta = self.b[m];
            for (j, &yj) in y.iter().enumerate().take(d) {
                eta += self.w[(m, j)] * yj;
            }
            let c = T::from_count(n[m] as usize);
            let mut term = c * (eta + ldt) - eta.exp() * dt;
            if factorials {
                term -= log_factorial::<T>(n[m]);
            }
            acc += term;
        }
        acc
    }

    pub fn sample<R: Rng + ?Sized>(&self, y: &[T], dt: T, rng: &mut R) -> Vec<u32> {
        self.log_rates(y).into_iter().map(|eta| poisson_variate(eta.exp() * dt, rng) as u32).collect()
    }
}

pub fn log_factorial<T: Real>(n: u32) -> T {
    if n < 2 {
        return T::zero();
    }
    T::from_count(n as usize + 1).log_gamma()
}

/// `log N(z; W y, R)`.
pub fn gaussian_loglik<T: Real>(z: &[T], y: &[T], model: &GaussianObsModel<T>) -> T {
    model.loglik(z, y)
}

/// Poisson log-likelihood of counts `n` in a bin of width `dt`.
pub fn spike_loglik<T: Real>(n: &[i64], y: &[T], model: &PointProcessObsModel<T>, dt: T) -> Result<T> {
    if !(dt > T::zero()) {
        return Err(Error::InvalidParameter(format!("bin width must be > 0, got {dt}")));
    }
    let counts = n
        .iter()
        .map(|&c| u32::try_from(c).map_err(|_| Error::Domain(format!("spike count {c} is negative"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(model.loglik(&counts, y, dt))
}

/// Either observation model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real", tag = "kind", rename_all = "snake_case")]
pub enum ObsModel<T: Real> {
    Gaussian(GaussianObsModel<T>),
    Spikes(PointProcessObsModel<T>),
}

/// One simulated observation row.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsRow<T: Real> {
    Real(Vec<T>),
    Counts(Vec<u32>),
}

impl<T: Real> ObsModel<T> {
    pub fn obs_dim(&self) -> usize {
        match self {
            ObsModel::Gaussian(m) => m.obs_dim(),
            ObsModel::Spikes(m) => m.obs_dim(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            ObsModel::Gaussian(m) => m.latent_dim(),
            ObsModel::Spikes(m) => m.latent_dim(),
        }
    }

    pub fn kind(&self) -> ObsKind {
        match self {
            ObsModel::Gaussian(_) => ObsKind::Gaussian,
            ObsModel::Spikes(_) => ObsKind::Spikes,
        }
    }

    /// Log-likelihood of data row `row` (grid step `row + 1`) given `y`.
    #[inline]
    pub fn loglik_row(&self, series: &ObservationSeries<T>, row: usize, y: &[T]) -> T {
        match (self, &series.data) {
            (ObsModel::Gaussian(m), ObsData::Real { .. }) => m.loglik(series.real_row(row), y),
            (ObsModel::Spikes(m), ObsData::Counts { .. }) => {
                m.loglik_without_factorials(series.count_row(row), y, series.dt) - series.log_factorials[row]
            }
            _ => T::neg_infinity(),
        }
    }

    pub fn check_series(&self, series: &ObservationSeries<T>) -> Result<()> {
        if self.kind() != series.kind() {
            return Err(Error::Input(format!(
                "observation model is {:?} but the data are {:?}",
                self.kind(),
                series.kind()
            )));
        }
        if self.obs_dim() != series.obs_dim() {
            return Err(Error::Dimension {
                what: "observation columns",
                expected: self.obs_dim(),
                got: series.obs_dim(),
            });
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, y: &[T], dt: T, rng: &mut R) -> ObsRow<T> {
        sample_observation(y, self, dt, rng)
    }

    /// Draws a full data set from a latent path, one row per grid step after the first.
    pub fn simulate_series<R: Rng + ?Sized>(
        &self,
        path: &LatentPath<T>,
        grid: &TimeGrid<T>,
        rng: &mut R,
    ) -> Result<(ObservationSeries<T>, Vec<Warning>)> {
        let times: Vec<T> = (1..=grid.steps).map(|k| grid.time(k)).collect();
        let mut warnings = Vec::new();
        match self {
            ObsModel::Gaussian(m) => {
                let mut values = Vec::with_capacity(grid.steps * m.obs_dim());
                for k in 1..=grid.steps {
                    values.extend(m.sample(path.y(k), rng));
                }
                Ok((ObservationSeries::real(times, grid.dt, m.obs_dim(), values)?, warnings))
            }
            ObsModel::Spikes(m) => {
                let mut counts = Vec::with_capacity(grid.steps * m.obs_dim());
                let mut max_mean = 0.0f64;
                for k in 1..=grid.steps {
                    for eta in m.log_rates(path.y(k)) {
                        max_mean = max_mean.max((eta.exp() * grid.dt).as_f64());
                    }
                    counts.extend(m.sample(path.y(k), grid.dt, rng));
                }
                if max_mean > COARSE_BIN_COUNT {
                    warnings.push(Warning::CoarseBins { max_rate_dt: max_mean });
                }
                Ok((ObservationSeries::counts(times, grid.dt, m.obs_dim(), counts)?, warnings))
            }
        }
    }
}

/// Draws one observation row given `y`.
pub fn sample_observation<T: Real, R: Rng + ?Sized>(y: &[T], model: &ObsModel<T>, dt: T, rng: &mut R) -> ObsRow<T> {
    match model {
        ObsModel::Gaussian(m) => ObsRow::Real(m.sample(y, rng)),
        ObsModel::Spikes(m) => ObsRow::Counts(m.sample(y, dt, rng)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsKind {
    Gaussian,
    Spikes,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObsData<T> {
    Real { m: usize, values: Vec<T> },
    Counts { m: usize, counts: Vec<u32> },
}

/// Observations on a uniform grid. Row `r` sits at `times[r]`, which is grid step `r + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries<T: Real> {
    times: Vec<T>,
    dt: T,
    data: ObsData<T>,
    log_factorials: Vec<T>,
}

impl<T: Real> ObservationSeries<T> {
    pub fn real(times: Vec<T>, dt: T, m: usize, values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("observations must be finite".into()));
        }
        Self::build(times, dt, ObsData::Real { m, values })
    }

    pub fn counts(times: Vec<T>, dt: T, m: usize, counts: Vec<u32>) -> Result<Self> {
        Self::build(times, dt, ObsData::Counts { m, counts })
    }

    fn build(times: Vec<T>, dt: T, data: ObsData<T>) -> Result<Self> {
        if !(dt > T::zero()) {
            return Err(Error::InvalidParameter(format!("bin width must be > 0, got {dt}")));
        }
        if times.is_empty() {
            return Err(Error::Input("observation series is empty".into()));
        }
        let (m, len) = match &data {
            ObsData::Real { m, values } => (*m, values.len()),
            ObsData::Counts { m, counts } => (*m, counts.len()),
        };
        if m == 0 || len != m * times.len() {
            return Err(Error::Dimension { what: "observation values", expected: m * times.len(), got: len });
        }
        let tol = dt * T::lit(1e-6) + T::lit(1e-9);
        for (i, w) in times.windows(2).enumerate() {
            if ((w[1] - w[0]) - dt).abs() > tol + T::default_epsilon() * T::lit(16.0) * w[1].abs() {
                return Err(Error::Input(format!("row {} breaks the uniform spacing dt = {dt}", i + 1)));
            }
        }
        let log_factorials = match &data {
            ObsData::Real { .. } => Vec::new(),
            ObsData::Counts { m, counts } => {
                counts.chunks_exact(*m).map(|row| row.iter().map(|&c| log_factorial::<T>(c)).sum()).collect()
            }
        };
        Ok(Self { times, dt, data, log_factorials })
    }

    pub fn kind(&self) -> ObsKind {
        match self.data {
            ObsData::Real { .. } => ObsKind::Gaussian,
            ObsData::Counts { .. } => ObsKind::Spikes,
        }
    }

    pub fn data(&self) -> &ObsData<T> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        match self.data {
            ObsData::Real { m, .. } | ObsData::Counts { m, .. } => m,
        }
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    /// The grid whose steps `1..=K` carry the rows.
    pub fn grid(&self) -> TimeGrid<T> {
        TimeGrid { dt: self.dt, steps: self.len(), origin: self.times[0] - self.dt }
    }

    pub fn real_row(&self, r: usize) -> &[T] {
        match &self.data {
            ObsData::Real { m, values } => &values[r * m..(r + 1) * m],
            ObsData::Counts { .. } => panic!("real_row on a count series"),
        }
    }

    pub fn count_row(&self, r: usize) -> &[u32] {
        match &self.data {
            ObsData::Counts { m, counts } => &counts[r * m..(r + 1) * m],
            ObsData::Real { .. } => panic!("count_row on a real series"),
        }
    }

    /// Column `j` as reals, counts converted.
    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.len())
            .map(|r| match &self.data {
                ObsData::Real { m, values } => values[r * m + j],
                ObsData::Counts { m, counts } => T::from_count(counts[r * m + j] as usize),
            })
            .collect()
    }

    /// Writes `t,z1..zM` or `t,n1..nM`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let prefix = match self.kind() {
            ObsKind::Gaussian => "z",
            ObsKind::Spikes => "n",
        };
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.obs_dim()).map(|j| format!("{prefix}{j}")));
        w.write_record(&header)?;
        for r in 0..self.len() {
            let mut rec = vec![self.times[r].to_string()];
            match self.kind() {
                ObsKind::Gaussian => rec.extend(self.real_row(r).iter().map(|v| v.to_string())),
                ObsKind::Spikes => rec.extend(self.count_row(r).iter().map(|v| v.to_string())),
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads an observation CSV. The kind follows the column prefix (`z` or `n`);
    /// the bin width is the spacing of the `t` column.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("t") || header.len() < 2 {
            return Err(Error::Input("observation CSV must start with a `t` column and have data columns".into()));
        }
        let spikes = match header.get(1).and_then(|h| h.chars().next()) {
            Some('z') => false,
            Some('n') => true,
            _ => return Err(Error::Input("data columns must be named z1..zM or n1..nM".into())),
        };
        let m = header.len() - 1;
        let mut times = Vec::new();
        let mut values = Vec::new();
        let mut counts = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| Error::Input(format!("row {}: `{s}` is not a number", i + 1)))
            };
            times.push(T::lit(parse(&rec[0])?));
            for s in rec.iter().skip(1) {
                if spikes {
                    let c = s
                        .parse::<u32>()
                        .map_err(|_| Error::Input(format!("row {}: `{s}` is not a non-negative count", i + 1)))?;
                    counts.push(c);
                } else {
                    values.push(T::lit(parse(s)?));
                }
            }
        }
        if times.len() < 2 {
            return Err(Error::Input("need at least two rows to infer the bin width".into()));
        }
        let dt = times[1] - times[0];
        if spikes {
            Self::counts(times, dt, m, counts)
        } else {
            Self::real(times, dt, m, values)
        }
    }

    /// Bins an event list `neuron_id,time_s` into counts on `[t_start, t_end)`.
    /// Row `r` covers `[t_start + r dt, t_start + (r + 1) dt)` and is stamped at its right edge.
    pub fn from_event_list<R: Read>(input: R, dt: T, t_start: T, t_end: T, n_neurons: Option<usize>) -> Result<Self> {
        if !(dt > T::zero()) || !(t_end > t_start) {
            return Err(Error::InvalidParameter("need dt > 0 and t_end > t_start".into()));
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
        let header = rdr.headers()?.clone();
        if header.len() != 2 || &header[0] != "neuron_id" || &header[1] != "time_s" {
            return Err(Error::Input("event list header must be `neuron_id,time_s`".into()));
        }
        let mut events = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let id: usize =
                rec[0].parse().map_err(|_| Error::Input(format!("row {}: bad neuron id `{}`", i + 1, &rec[0])))?;
            let t: f64 = rec[1].parse().map_err(|_| Error::Input(format!("row {}: bad time `{}`", i + 1, &rec[1])))?;
            events.push((id, T::lit(t)));
        }
        let m = match n_neurons {
            Some(m) => m,
            None => events.iter().map(|e| e.0 + 1).max().unwrap_or(0),
        };
        if m == 0 {
            return Err(Error::Input("event list names no neurons".into()));
        }
        let k = ((t_end - t_start) / dt).ceil().as_f64() as usize;
        let mut counts = vec![0u32; k * m];
        for (id, t) in events {
            if id >= m {
                return Err(Error::Input(format!("neuron id {id} outside 0..{m}")));
            }
            if t < t_start || t >= t_end {
                continue;
            }
            let r = (((t - t_start) / dt).floor().as_f64() as usize).min(k - 1);
            counts[r * m + id] += 1;
        }
        let times = (1..=k).map(|r| t_start + T::from_count(r) * dt).collect();
        Self::counts(times, dt, m, counts)
    }

    /// Keeps the columns listed in `keep`, in order.
    pub fn select_columns(&self, keep: &[usize]) -> Result<Self> {
        let m = self.obs_dim();
        if keep.is_empty() || keep.iter().any(|&j| j >= m) {
            return Err(Error::Input("column selection out of range or empty".into()));
        }
        match &self.data {
            ObsData::Real { values, .. } => {
                let v = values.chunks_exact(m).flat_map(|row| keep.iter().map(move |&j| row[j])).collect();
                Self::real(self.times.clone(), self.dt, keep.len(), v)
            }
            ObsData::Counts { counts, .. } => {
                let c = counts.chunks_exact(m).flat_map(|row| keep.iter().map(move |&j| row[j])).collect();
                Self::counts(self.times.clone(), self.dt, keep.len(), c)
            }
        }
    }
}
