//! Reference computations used to check the filter and as baselines:
//! an exact Kalman filter for the model with known events, and exact GP regression.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::inducing::InducingSequence;
use crate::linalg;
use crate::model::ModelParams;
use crate::obs::{ObsData, ObsModel, ObservationSeries};
use crate::real::{standard_normal, Real};
use crate::sde::{bridge_coefficients, is_pinned_step, snapped_event_steps, TimeGrid};

/// One time-varying transition `s' = A s + c + N(0, Q)`.
#[derive(Debug, Clone)]
pub struct LinearTransition<T: Real> {
    pub a: DMatrix<T>,
    pub c: DVector<T>,
    pub q: DMatrix<T>,
}

/// Linear-Gaussian state space with observation `z = H s + N(0, R)` at steps `1..=K`.
#[derive(Debug, Clone)]
pub struct LinearGaussianSSM<T: Real> {
    pub transitions: Vec<LinearTransition<T>>,
    pub h: DMatrix<T>,
    pub r: DMatrix<T>,
    pub m0: DVector<T>,
    pub p0: DMatrix<T>,
}

impl<T: Real> LinearGaussianSSM<T> {
    /// The model with the inducing events fixed, on the stacked state `(x, y)`.
    pub fn from_fixed_events(seq: &InducingSequence<T>, params: &ModelParams<T>, grid: &TimeGrid<T>) -> Result<Self> {
        let ObsModel::Gaussian(g) = &params.obs else {
            return Err(Error::InvalidParameter("the Kalman oracle covers Gaussian observations only".into()));
        };
        seq.validate()?;
        let d = params.latent_dim();
        let steps = snapped_event_steps(seq, grid);
        if steps.last().is_none_or(|&s| s < grid.steps) {
            return Err(Error::SequenceExhausted {
                last_event: seq.last_time().as_f64(),
                grid_end: grid.end().as_f64(),
            });
        }
        let dt = grid.dt;
        let mut transitions = Vec::with_capacity(grid.steps);
        let mut next = 0;
        let mut prev_time = grid.origin;
        for k in 0..grid.steps {
            while steps[next] <= k {
                prev_time = grid.time(steps[next]);
                next += 1;
            }
            let next_time = grid.time(steps[next]);
            let mark = &seq.points[next].mark;
            let mut a = DMatrix::zeros(2 * d, 2 * d);
            let mut c = DVector::zeros(2 * d);
            let mut q = DMatrix::zeros(2 * d, 2 * d);
            let pinned = is_pinned_step(k, grid, next_time);
            let (frac, factor) = bridge_coefficients(grid.time(k), next_time, prev_time, dt);
            for j in 0..d {
                if pinned {
                    c[j] = mark[j];
                } else {
                    a[(j, j)] = T::one() - frac;
                    c[j] = frac * mark[j];
                    let s = params.noise.sigma_x[j];
                    q[(j, j)] = s * s * factor * dt;
                }
                a[(d + j, j)] = dt;
                a[(d + j, d + j)] = T::one();
                let s = params.noise.sigma_y[j];
                q[(d + j, d + j)] = s * s * dt;
            }
            transitions.push(LinearTransition { a, c, q });
        }
        let mut h = DMatrix::zeros(g.obs_dim(), 2 * d);
        h.columns_mut(d, d).copy_from(g.w());
        let init = &params.initial;
        let m0 = DVector::from_iterator(2 * d, init.x_mean.iter().chain(&init.y_mean).copied());
        let p0 = DMatrix::from_diagonal(&DVector::from_iterator(
            2 * d,
            init.x_std.iter().chain(&init.y_std).map(|&s| s * s),
        ));
        Ok(Self { transitions, h, r: g.r().clone(), m0, p0 })
    }

    pub fn state_dim(&self) -> usize {
        self.m0.len()
    }
}

#[derive(Debug, Clone)]
pub struct KalmanOutput<T: Real> {
    /// Filtered means for steps `0..=K`.
    pub means: Vec<DVector<T>>,
    pub covs: Vec<DMatrix<T>>,
    pub log_marginal_likelihood: T,
    /// Per-step predictive log-densities.
    pub increments: Vec<T>,
}

/// Forward Kalman recursion with Joseph-form covariance updates.
pub fn kalman_filter<T: Real>(ssm: &LinearGaussianSSM<T>, obs: &ObservationSeries<T>) -> Result<KalmanOutput<T>> {
    let ObsData::Real { m, .. } = obs.data() else {
        return Err(Error::Input("the Kalman oracle needs real-valued observations".into()));
    };
    if *m != ssm.h.nrows() || obs.len() != ssm.transitions.len() {
        return Err(Error::Dimension { what: "observations", expected: ssm.transitions.len(), got: obs.len() });
    }
    let n = ssm.state_dim();
    let eye = DMatrix::<T>::identity(n, n);
    let mut mean = ssm.m0.clone();
    let mut cov = ssm.p0.clone();
    let mut means = vec![mean.clone()];
    let mut covs = vec![cov.clone()];
    let mut increments = Vec::with_capacity(obs.len());
    let half = T::lit(0.5);
    let ln2pi = T::two_pi().ln();
    for (k, tr) in ssm.transitions.iter().enumerate() {
        mean = &tr.a * &mean + &tr.c;
        cov = &tr.a * &cov * tr.a.transpose() + &tr.q;
        cov = (&cov + cov.transpose()) * half;
        let z = DVector::from_column_slice(obs.real_row(k));
        let innov = z - &ssm.h * &mean;
        let s = &ssm.h * &cov * ssm.h.transpose() + &ssm.r;
        let s = (&s + s.transpose()) * half;
        let ls = linalg::cholesky_lower(&s, "innovation covariance")?;
        let quad = linalg::mahalanobis_sq(&ls, &innov);
        let inc = -half * (quad + linalg::log_det_from_lower(&ls) + T::from_count(innov.len()) * ln2pi);
        increments.push(inc);
        // gain = P H^T S^{-1}
        let pht = &cov * ssm.h.transpose();
        let gain_t = ls
            .solve_lower_triangular(&pht.transpose())
            .and_then(|v| ls.transpose().solve_upper_triangular(&v))
            .ok_or_else(|| Error::NotPositiveDefinite("innovation covariance".into()))?;
        let gain = gain_t.transpose();
        mean += &gain * innov;
        let ikh = &eye - &gain * &ssm.h;
        cov = &ikh * &cov * ikh.transpose() + &gain * &ssm.r * gain.transpose();
        cov = (&cov + cov.transpose()) * half;
        if cov.diagonal().iter().any(|&v| v < -T::lit(1e-9) || !v.is_finite()) {
            return Err(Error::NotPositiveDefinite(format!("filtered covariance at step {}", k + 1)));
        }
        means.push(mean.clone());
        covs.push(cov.clone());
    }
    let log_ml = increments.iter().copied().sum();
    Ok(KalmanOutput { means, covs, log_marginal_likelihood: log_ml, increments })
}

/// Squared-exponential kernel GP with Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(bound = "T: Real")]
pub struct GpModel<T: Real> {
    pub length_scale: T,
    pub signal_var: T,
    pub noise_var: T,
}

impl<T: Real> GpModel<T> {
    pub fn new(length_scale: T, signal_var: T, noise_var: T) -> Result<Self> {
        if !(length_scale > T::zero() && signal_var > T::zero() && noise_var >= T::zero()) {
            return Err(Error::InvalidParameter("GP needs length scale > 0, signal variance > 0, noise >= 0".into()));
        }
        Ok(Self { length_scale, signal_var, noise_var })
    }

    #[inline]
    pub fn kernel(&self, a: T, b: T) -> T {
        let r = (a - b) / self.length_scale;
        (self.signal_var * (-T::lit(0.5) * r * r).exp()).flush_tiny()
    }

    fn gram(&self, t: &[T]) -> DMatrix<T> {
        let n = t.len();
        DMatrix::from_fn(n, n, |i, j| {
            let k = self.kernel(t[i], t[j]);
            if i == j {
                k + self.noise_var
            } else {
                k
            }
        })
    }

    /// Lower Cholesky factor of the noisy Gram matrix, retrying once with jitter.
    fn factor(&self, t: &[T]) -> Result<DMatrix<T>> {
        let mut g = self.gram(t);
        if let Some(l) = cholesky_in_place(g.clone()) {
            return Ok(l);
        }
        let jitter = T::lit(1e-8) * self.signal_var;
        for i in 0..t.len() {
            g[(i, i)] += jitter;
        }
        cholesky_in_place(g).ok_or_else(|| Error::NotPositiveDefinite("GP kernel matrix after jitter".into()))
    }
}

const CHOLESKY_BLOCK: usize = 32;

/// Blocked Cholesky on column-major storage; returns the lower factor.
/// Each panel of columns is factored left-looking, then the trailing matrix
/// receives the panel's rank update one column at a time.
pub fn cholesky_in_place<T: Real>(mut a: DMatrix<T>) -> Option<DMatrix<T>> {
    let n = a.nrows();
    let mut jb = 0;
    while jb < n {
        let je = (jb + CHOLESKY_BLOCK).min(n);
        for j in jb..je {
            column_update(&mut a, jb, j, j);
            let d = a[(j, j)];
            if !(d > T::zero()) {
                return None;
            }
            let djj = d.sqrt();
            let inv = T::one() / djj;
            a[(j, j)] = djj;
            for i in j + 1..n {
                a[(i, j)] = (a[(i, j)] * inv).flush_tiny();
            }
        }
        for j in je..n {
            column_update(&mut a, jb, je, j);
        }
        jb = je;
    }
    for j in 0..n {
        for i in 0..j {
            a[(i, j)] = T::zero();
        }
    }
    Some(a)
}

/// `a[j.., j] -= sum_{k in kb..ke} a[j, k] a[j.., k]` for `ke <= j`.
fn column_update<T: Real>(a: &mut DMatrix<T>, kb: usize, ke: usize, j: usize) {
    let n = a.nrows();
    let data = a.as_mut_slice();
    let (lo, hi) = data.split_at_mut(j * n);
    let dst = &mut hi[j..n];
    let col = |k: usize| &lo[k * n + j..(k + 1) * n];
    let coef = |k: usize| lo[k * n + j];
    let mut k = kb;
    while k + 4 <= ke {
        let (c0, c1, c2, c3) = (coef(k), coef(k + 1), coef(k + 2), coef(k + 3));
        let (s0, s1, s2, s3) = (col(k), col(k + 1), col(k + 2), col(k + 3));
        for ((((d, &a0), &a1), &a2), &a3) in dst.iter_mut().zip(s0).zip(s1).zip(s2).zip(s3) {
            *d -= a0 * c0 + a1 * c1 + a2 * c2 + a3 * c3;
        }
        k += 4;
    }
    while k < ke {
        let c = coef(k);
        for (d, &s) in dst.iter_mut().zip(col(k)) {
            *d -= s * c;
        }
        k += 1;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpPrediction<T: Real> {
    pub mean: Vec<T>,
    /// Latent-function variance (without observation noise).
    pub var: Vec<T>,
}

/// Exact GP posterior at `query` given training data.
pub fn gp_fit_predict<T: Real>(model: &GpModel<T>, t: &[T], y: &[T], query: &[T]) -> Result<GpPrediction<T>> {
    if t.len() != y.len() || t.is_empty() {
        return Err(Error::Input("GP training inputs and targets must be non-empty and aligned".into()));
    }
    let l = model.factor(t)?;
    let alpha = linalg::chol_solve(&l, &DVector::from_column_slice(y));
    let mut mean = Vec::with_capacity(query.len());
    let mut var = Vec::with_capacity(query.len());
    for &q in query {
        let kq = DVector::from_iterator(t.len(), t.iter().map(|&ti| model.kernel(q, ti)));
        mean.push(kq.dot(&alpha));
        let v = l.solve_lower_triangular(&kq).expect("factor has a positive diagonal");
        var.push((model.signal_var - v.dot(&v)).max(T::zero()));
    }
    Ok(GpPrediction { mean, var })
}

/// Log marginal likelihood of the training data.
pub fn gp_log_marginal<T: Real>(model: &GpModel<T>, t: &[T], y: &[T]) -> Result<T> {
    let l = model.factor(t)?;
    let yv = DVector::from_column_slice(y);
    let quad = linalg::mahalanobis_sq(&l, &yv);
    Ok(-T::lit(0.5) * (quad + linalg::log_det_from_lower(&l) + T::from_count(t.len()) * T::two_pi().ln()))
}

/// Candidate values for the marginal-likelihood grid search.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GpGrid {
    pub length_scales: Vec<f64>,
    pub signal_vars: Vec<f64>,
    pub noise_vars: Vec<f64>,
}

impl GpGrid {
    /// Log-spaced defaults scaled to the data's time span and variance.
    pub fn for_data(span: f64, var: f64) -> Self {
        let logspace = |lo: f64, hi: f64, n: usize| -> Vec<f64> {
            (0..n).map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (n - 1) as f64).exp()).collect()
        };
        let var = var.max(1e-12);
        Self {
            length_scales: logspace(span * 1e-3, span, 40),
            signal_vars: logspace(var * 0.1, var * 10.0, 12),
            noise_vars: logspace(var * 1e-4, var, 12),
        }
    }
}

/// Maximises the marginal likelihood over the grid.
pub fn gp_grid_search<T: Real>(t: &[T], y: &[T], grid: &GpGrid) -> Result<(GpModel<T>, T)> {
    let mut best: Option<(GpModel<T>, T)> = None;
    for &l in &grid.length_scales {
        for &s in &grid.signal_vars {
            for &n in &grid.noise_vars {
                let m = GpModel::new(T::lit(l), T::lit(s), T::lit(n))?;
                let Ok(lml) = gp_log_marginal(&m, t, y) else { continue };
                if best.as_ref().is_none_or(|b| lml > b.1) {
                    best = Some((m, lml));
                }
            }
        }
    }
    best.ok_or_else(|| Error::NotPositiveDefinite("no grid point gave a valid kernel matrix".into()))
}

/// Wall-clock seconds of an exact GP fit-and-predict at each training size.
pub fn cubic_cost_probe(sizes: &[usize], seed: u64) -> Result<Vec<(usize, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = GpModel::new(1.0f64, 1.0, 0.1)?;
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let t: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
        let y: Vec<f64> = t.iter().map(|&v| v.sin() + 0.3 * standard_normal::<f64, _>(&mut rng)).collect();
        let query: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 + 0.025).collect();
        let start = Instant::now();
        let p = gp_fit_predict(&model, &t, &y, &query)?;
        std::hint::black_box(p);
        out.push((n, start.elapsed().as_secs_f64()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inducing::{MarkModel, WaitingTimeModel};
    use crate::model::InitialState;
    use crate::obs::GaussianObsModel;
    use crate::sde::{simulate_path, NoiseParams};

    fn scalar_ssm(q: f64, r: f64, p0: f64) -> LinearGaussianSSM<f64> {
        LinearGaussianSSM {
            transitions: vec![LinearTransition {
                a: DMatrix::identity(1, 1),
                c: DVector::zeros(1),
                q: DMatrix::from_element(1, 1, q),
            }],
            h: DMatrix::identity(1, 1),
            r: DMatrix::from_element(1, 1, r),
            m0: DVector::from_element(1, 2.0),
            p0: DMatrix::from_element(1, 1, p0),
        }
    }

    #[test]
    fn scalar_update_is_precision_weighted() {
        let ssm = scalar_ssm(0.0, 0.5, 2.0);
        let obs = ObservationSeries::real(vec![1.0], 1.0, 1, vec![4.0]).unwrap();
        let out = kalman_filter(&ssm, &obs).unwrap();
        let expected = (2.0 / 2.0 + 4.0 / 0.5) / (1.0 / 2.0 + 1.0 / 0.5);
        assert!((out.means[1][0] - expected).abs() < 1e-12);
        assert!((out.covs[1][(0, 0)] - 1.0 / (0.5 + 2.0)).abs() < 1e-12);
        let pred = statrs::distribution::Normal::new(2.0, 2.5f64.sqrt()).unwrap();
        use statrs::distribution::Continuous;
        assert!((out.log_marginal_likelihood - pred.ln_pdf(4.0)).abs() < 1e-12);
    }

    #[test]
    fn noiseless_limit_reproduces_recursion() {
        let grid = TimeGrid::new(0.1, 50, 0.0).unwrap();
        let seq = InducingSequence::from_times(0.0, &[1.3, 2.9, 5.0], vec![vec![1.0], vec![-2.0], vec![0.5]]).unwrap();
        let mut params = ModelParams::new(
            ObsModel::Gaussian(
                GaussianObsModel::new(DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)).unwrap(),
            ),
            NoiseParams::uniform(1, 0.0, 0.0),
            WaitingTimeModel::new(2.0, 1.0).unwrap(),
            MarkModel::isotropic(1, 0.0, 1.0).unwrap(),
        )
        .unwrap();
        params.initial = InitialState { x_mean: vec![0.4], x_std: vec![0.0], y_mean: vec![-0.1], y_std: vec![0.0] };
        let ssm = LinearGaussianSSM::from_fixed_events(&seq, &params, &grid).unwrap();
        let obs = ObservationSeries::real((1..=50).map(|k| k as f64 * 0.1).collect(), 0.1, 1, vec![0.0; 50]).unwrap();
        let out = kalman_filter(&ssm, &obs).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let path = simulate_path(&seq, &grid, &params.noise, &[0.4], &[-0.1], &mut r).unwrap();
        for k in 0..=50 {
            assert!((out.means[k][0] - path.x(k)[0]).abs() < 1e-12, "x at {k}");
            assert!((out.means[k][1] - path.y(k)[0]).abs() < 1e-12, "y at {k}");
        }
    }

    #[test]
    fn log_ml_is_sum_of_predictive_terms() {
        let ssm = LinearGaussianSSM {
            transitions: (0..5)
                .map(|_| LinearTransition {
                    a: DMatrix::from_element(1, 1, 0.9),
                    c: DVector::from_element(1, 0.1),
                    q: DMatrix::from_element(1, 1, 0.3),
                })
                .collect(),
            h: DMatrix::from_element(1, 1, 2.0),
            r: DMatrix::from_element(1, 1, 0.4),
            m0: DVector::zeros(1),
            p0: DMatrix::identity(1, 1),
        };
        let obs =
            ObservationSeries::real(vec![1.0, 2.0, 3.0, 4.0, 5.0], 1.0, 1, vec![0.5, -0.2, 1.1, 0.3, 0.0]).unwrap();
        let out = kalman_filter(&ssm, &obs).unwrap();
        let sum: f64 = out.increments.iter().sum();
        assert_eq!(sum, out.log_marginal_likelihood);
    }

    #[test]
    fn gp_interpolates_and_reverts() {
        let m = GpModel::new(1.0f64, 2.0, 0.0).unwrap();
        let t = [0.0, 1.5, 3.0, 4.5];
        let y = [0.3, -1.0, 0.8, 0.1];
        let p = gp_fit_predict(&m, &t, &y, &[1.5, 100.0]).unwrap();
        assert!((p.mean[0] + 1.0).abs() < 1e-8);
        assert!(p.mean[1].abs() < 1e-12);
        assert!((p.var[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn own_cholesky_matches_nalgebra() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let b = DMatrix::<f64>::from_fn(30, 30, |_, _| standard_normal(&mut r));
        let a = &b * b.transpose() + DMatrix::identity(30, 30);
        let mine = cholesky_in_place(a.clone()).unwrap();
        let reference = a.cholesky().unwrap().l();
        assert!((mine - reference).abs().max() < 1e-10);
        assert!(cholesky_in_place(-DMatrix::<f64>::identity(3, 3)).is_none());
    }
}
