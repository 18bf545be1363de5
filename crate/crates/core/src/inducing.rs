//! Marked point process over inducing points.
//!
//! Events arrive as a renewal process with Gamma waiting times (shape `alpha`,
//! rate `lambda`) and carry Gaussian marks. An optional repulsive joint prior
//! penalises waiting times that sit close to their recent predecessors.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::linalg::{self, Gaussian};
use crate::real::{gamma_variate, log_sum_exp, uniform01, Real};

/// Cap on rejection draws when enforcing one event per bin.
pub const ORDERLINESS_MAX_ATTEMPTS: usize = 10_000;

/// Log-density assigned to coincident waiting times under repulsion.
pub const REPULSION_LOG_FLOOR: f64 = -1e9;

/// One event of the inducing process: waiting time since the previous event and its mark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct InducingPoint<T: Real> {
    pub tau: T,
    pub mark: Vec<T>,
}

/// Ordered event–mark pairs anchored at an absolute origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct InducingSequence<T: Real> {
    pub origin: T,
    pub points: Vec<InducingPoint<T>>,
}

impl<T: Real> InducingSequence<T> {
    pub fn new(origin: T, points: Vec<InducingPoint<T>>) -> Result<Self> {
        let seq = Self { origin, points };
        seq.validate()?;
        Ok(seq)
    }

    pub fn empty(origin: T) -> Self {
        Self { origin, points: Vec::new() }
    }

    /// Builds a sequence from absolute event times.
    pub fn from_times(origin: T, times: &[T], marks: Vec<Vec<T>>) -> Result<Self> {
        if times.len() != marks.len() {
            return Err(Error::Dimension { what: "marks", expected: times.len(), got: marks.len() });
        }
        let mut prev = origin;
        let points = times
            .iter()
            .zip(marks)
            .map(|(&t, mark)| {
                let p = InducingPoint { tau: t - prev, mark };
                prev = t;
                p
            })
            .collect();
        Self::new(origin, points)
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dim();
        for (i, p) in self.points.iter().enumerate() {
            if !(p.tau > T::zero()) || !p.tau.is_finite() {
                return Err(Error::Domain(format!("waiting time {i} is {} (must be > 0)", p.tau)));
            }
            if Some(p.mark.len()) != dim {
                return Err(Error::Dimension { what: "mark", expected: dim.unwrap_or(0), got: p.mark.len() });
            }
            if p.mark.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!("mark {i} is not finite")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(|p| p.mark.len())
    }

    /// Absolute event times `origin + cumsum(tau)`.
    pub fn event_times(&self) -> Vec<T> {
        let mut t = self.origin;
        self.points
            .iter()
            .map(|p| {
                t += p.tau;
                t
            })
            .collect()
    }

    pub fn last_time(&self) -> T {
        self.origin + self.points.iter().map(|p| p.tau).sum::<T>()
    }

    /// Appends `other`, whose waiting times continue from this sequence's last event.
    pub fn concat(&self, other: &Self) -> Self {
        let mut points = self.points.clone();
        points.extend(other.points.iter().cloned());
        Self { origin: self.origin, points }
    }

    pub fn taus(&self) -> Vec<T> {
        self.points.iter().map(|p| p.tau).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let seq: Self = serde_json::from_str(s)?;
        seq.validate()?;
        Ok(seq)
    }
}

/// Gamma waiting-time law with shape `alpha` and rate `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "WaitingTimeRepr<T>")]
pub struct WaitingTimeModel<T: Real> {
    alpha: T,
    #[serde(rename = "rate")]
    lambda: T,
}

#[derive(Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
struct WaitingTimeRepr<T: Real> {
    alpha: T,
    rate: T,
}

impl<T: Real> TryFrom<WaitingTimeRepr<T>> for WaitingTimeModel<T> {
    type Error = Error;
    fn try_from(r: WaitingTimeRepr<T>) -> Result<Self> {
        Self::new(r.alpha, r.rate)
    }
}

impl<T: Real> WaitingTimeModel<T> {
    pub fn new(alpha: T, lambda: T) -> Result<Self> {
        if !(alpha > T::zero() && alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma shape must be > 0, got {alpha}")));
        }
        if !(lambda > T::zero() && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("gamma rate must be > 0, got {lambda}")));
        }
        Ok(Self { alpha, lambda })
    }

    /// Moment-matched model with the given mean and standard deviation.
    pub fn from_mean_std(mean: T, std: T) -> Result<Self> {
        let var = std * std;
        Self::new(mean * mean / var, mean / var)
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn rate(&self) -> T {
        self.lambda
    }

    pub fn mean(&self) -> T {
        self.alpha / self.lambda
    }

    pub fn variance(&self) -> T {
        self.alpha / (self.lambda * self.lambda)
    }

    /// Gamma log-pdf; `-inf` outside the support.
    pub fn log_pdf(&self, tau: T) -> T {
        if !(tau > T::zero()) {
            return T::neg_infinity();
        }
        self.alpha * self.lambda.ln() - self.alpha.log_gamma() + (self.alpha - T::one()) * tau.ln() - self.lambda * tau
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> T {
        gamma_variate(self.alpha, self.lambda, rng)
    }
}

/// Draws a waiting time. With `min_gap` set, draws at or below it are rejected so
/// that at most one event falls in any bin of that width.
pub fn sample_waiting_time<T: Real, R: Rng + ?Sized>(
    model: &WaitingTimeModel<T>,
    min_gap: Option<T>,
    rng: &mut R,
) -> Result<T> {
    let Some(gap) = min_gap else {
        return Ok(model.sample(rng));
    };
    for _ in 0..ORDERLINESS_MAX_ATTEMPTS {
        let tau = model.sample(rng);
        if tau.is_finite() && tau > gap {
            return Ok(tau);
        }
    }
    Err(Error::IncompatibleBinSize { dt_min: gap.as_f64(), attempts: ORDERLINESS_MAX_ATTEMPTS })
}

/// Multivariate normal mark law.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "MarkRepr<T>", into = "MarkRepr<T>")]
pub struct MarkModel<T: Real> {
    gaussian: Gaussian<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
struct MarkRepr<T: Real> {
    mu: Vec<T>,
    sigma: Vec<Vec<T>>,
}

impl<T: Real> TryFrom<MarkRepr<T>> for MarkModel<T> {
    type Error = Error;
    fn try_from(r: MarkRepr<T>) -> Result<Self> {
        Self::new(DVector::from_vec(r.mu), linalg::from_rows(&r.sigma)?)
    }
}

impl<T: Real> From<MarkModel<T>> for MarkRepr<T> {
    fn from(m: MarkModel<T>) -> Self {
        MarkRepr { mu: m.mu().iter().copied().collect(), sigma: linalg::to_rows(m.sigma()) }
    }
}

impl<T: Real> MarkModel<T> {
    /// Fails unless `sigma` is symmetric positive definite.
    pub fn new(mu: DVector<T>, sigma: DMatrix<T>) -> Result<Self> {
        Ok(Self { gaussian: Gaussian::new(mu, sigma)? })
    }

    pub fn isotropic(dim: usize, mean: T, var: T) -> Result<Self> {
        Self::new(DVector::from_element(dim, mean), DMatrix::from_diagonal_element(dim, dim, var))
    }

    pub fn dim(&self) -> usize {
        self.gaussian.dim()
    }

    pub fn mu(&self) -> &DVector<T> {
        self.gaussian.mean()
    }

    pub fn sigma(&self) -> &DMatrix<T> {
        self.gaussian.cov()
    }

    pub fn log_pdf(&self, m: &[T]) -> T {
        self.gaussian.log_pdf(m)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        self.gaussian.sample(rng)
    }
}

pub fn sample_mark<T: Real, R: Rng + ?Sized>(model: &MarkModel<T>, rng: &mut R) -> Vec<T> {
    model.sample(rng)
}

/// Log-density of a sequence under independent Gamma waiting times and Gaussian marks.
pub fn log_density_sequence<T: Real>(
    seq: &InducingSequence<T>,
    wt: &WaitingTimeModel<T>,
    mk: &MarkModel<T>,
) -> Result<T> {
    let mut acc = T::zero();
    for (i, p) in seq.points.iter().enumerate() {
        if !(p.tau > T::zero()) {
            return Err(Error::Domain(format!("waiting time {i} is {} (must be > 0)", p.tau)));
        }
        if p.mark.len() != mk.dim() {
            return Err(Error::Dimension { what: "mark", expected: mk.dim(), got: p.mark.len() });
        }
        acc += wt.log_pdf(p.tau) + mk.log_pdf(&p.mark);
    }
    Ok(acc)
}

/// Strength and reach of the repulsive waiting-time prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct RepulsionParams<T: Real> {
    /// Repulsion strength in seconds squared.
    pub strength: T,
    /// Number of preceding waiting times each one interacts with.
    pub window: usize,
}

impl<T: Real> RepulsionParams<T> {
    pub const DEFAULT_WINDOW: usize = 3;

    pub fn new(strength: T, window: usize) -> Result<Self> {
        if !(strength > T::zero()) || !strength.is_finite() {
            return Err(Error::InvalidParameter("repulsion strength must be > 0".into()));
        }
        if window == 0 {
            return Err(Error::InvalidParameter("repulsion window must be >= 1".into()));
        }
        Ok(Self { strength, window })
    }
}

fn pair_term<T: Real>(a: T, b: T, strength: T) -> Option<T> {
    let d = (a - b).abs();
    if d == T::zero() {
        return None;
    }
    Some(-(T::one() + strength / (d * d)).ln())
}

/// Sum of pairwise repulsion log-factors inside the window, or `None` if two
/// interacting waiting times coincide.
fn repulsion_log_factor<T: Real>(taus: &[T], rep: &RepulsionParams<T>) -> Option<T> {
    let mut acc = T::zero();
    for i in 1..taus.len() {
        for j in i.saturating_sub(rep.window)..i {
            acc += pair_term(taus[i], taus[j], rep.strength)?;
        }
    }
    Some(acc)
}

/// Unnormalised log-density of waiting times under the repulsive prior.
/// Coincident interacting pairs give [`REPULSION_LOG_FLOOR`].
pub fn log_density_repulsive<T: Real>(taus: &[T], wt: &WaitingTimeModel<T>, rep: &RepulsionParams<T>) -> Result<T> {
    if let Some(i) = taus.iter().position(|&t| !(t > T::zero())) {
        return Err(Error::Domain(format!("waiting time {i} must be > 0")));
    }
    let base: T = taus.iter().map(|&t| wt.log_pdf(t)).sum();
    match repulsion_log_factor(taus, rep) {
        Some(r) => Ok((base + r).max(T::lit(REPULSION_LOG_FLOOR))),
        None => Ok(T::lit(REPULSION_LOG_FLOOR)),
    }
}

/// A joint draw from the repulsive prior by self-normalised importance sampling.
#[derive(Debug, Clone)]
pub struct RepulsiveDraw<T: Real> {
    pub taus: Vec<T>,
    /// Effective sample size of the proposal pool.
    pub ess: T,
    pub warning: Option<Warning>,
}

/// Samples `n` waiting times jointly from the repulsive prior. Proposals are
/// independent Gamma vectors weighted by the repulsion factor; one is returned
/// by resampling.
pub fn sample_repulsive<T: Real, R: Rng + ?Sized>(
    n: usize,
    wt: &WaitingTimeModel<T>,
    rep: &RepulsionParams<T>,
    n_proposals: usize,
    rng: &mut R,
) -> Result<RepulsiveDraw<T>> {
    if n_proposals < 100 {
        return Err(Error::InvalidParameter(format!("at least 100 proposals are required, got {n_proposals}")));
    }
    let mut pool = Vec::with_capacity(n_proposals);
    let mut logw = Vec::with_capacity(n_proposals);
    for _ in 0..n_proposals {
        let taus: Vec<T> = (0..n).map(|_| wt.sample(rng)).collect();
        logw.push(repulsion_log_factor(&taus, rep).unwrap_or(T::neg_infinity()));
        pool.push(taus);
    }
    let lse = log_sum_exp(&logw);
    if !lse.is_finite() {
        return Err(Error::Domain("all repulsive proposals have zero weight".into()));
    }
    let w: Vec<T> = logw.iter().map(|&l| (l - lse).exp()).collect();
    let ess = T::one() / w.iter().map(|&v| v * v).sum::<T>();
    let u: T = uniform01(rng);
    let mut acc = T::zero();
    let mut pick = n_proposals - 1;
    for (i, &wi) in w.iter().enumerate() {
        acc += wi;
        if u < acc {
            pick = i;
            break;
        }
    }
    let warning = (ess < T::lit(10.0)).then(|| Warning::LowProposalEss { ess: ess.as_f64() });
    Ok(RepulsiveDraw { taus: pool.swap_remove(pick), ess, warning })
}

/// Draws one waiting time conditioned on the most recent `previous` ones under the
/// repulsive prior. The repulsion factor is at most one, so accepting a Gamma draw
/// with that probability samples the conditional exactly.
pub fn sample_waiting_time_repulsive<T: Real, R: Rng + ?Sized>(
    model: &WaitingTimeModel<T>,
    rep: &RepulsionParams<T>,
    previous: &[T],
    min_gap: Option<T>,
    rng: &mut R,
) -> Result<T> {
    let recent = &previous[previous.len().saturating_sub(rep.window)..];
    for _ in 0..ORDERLINESS_MAX_ATTEMPTS {
        let tau = sample_waiting_time(model, min_gap, rng)?;
        let log_accept =
            recent.iter().map(|&p| pair_term(tau, p, rep.strength)).try_fold(T::zero(), |a, t| t.map(|t| a + t));
        if let Some(la) = log_accept {
            if uniform01::<T, _>(rng) < la.exp() {
                return Ok(tau);
            }
        }
    }
    Err(Error::IncompatibleBinSize { dt_min: min_gap.map_or(0.0, |g| g.as_f64()), attempts: ORDERLINESS_MAX_ATTEMPTS })
}

/// Adjacent gaps of `n` sorted uniforms on `[0, horizon]`.
pub fn order_statistics_gap_sample<T: Real, R: Rng + ?Sized>(n: usize, horizon: T, rng: &mut R) -> Vec<T> {
    let mut u: Vec<T> = (0..n).map(|_| uniform01::<T, _>(rng) * horizon).collect();
    u.sort_by(|a, b| a.partial_cmp(b).expect("uniform draws are finite"));
    u.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Normal–Inverse-Wishart prior on the mark mean and covariance:
/// `Sigma ~ IW(nu, psi)`, `mu | Sigma ~ N(mu0, mean_scale * Sigma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct NiwPrior<T: Real> {
    pub mu0: Vec<T>,
    pub mean_scale: T,
    pub nu: T,
    pub psi: Vec<Vec<T>>,
}

impl<T: Real> NiwPrior<T> {
    pub fn new(mu0: Vec<T>, mean_scale: T, nu: T, psi: Vec<Vec<T>>) -> Result<Self> {
        let p = Self { mu0, mean_scale, nu, psi };
        p.validate()?;
        Ok(p)
    }

    /// Weak default centred at the origin with `nu = D + 2` and identity scale.
    pub fn weak(dim: usize) -> Self {
        let psi = linalg::to_rows(&DMatrix::<T>::identity(dim, dim));
        Self { mu0: vec![T::zero(); dim], mean_scale: T::lit(1e3), nu: T::from_count(dim + 2), psi }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mu0.len();
        if !(self.mean_scale > T::zero()) {
            return Err(Error::InvalidParameter("NIW mean scale must be > 0".into()));
        }
        if !(self.nu > T::from_count(d) - T::one()) {
            return Err(Error::InvalidParameter(format!("NIW nu must exceed D - 1 = {}", d as i64 - 1)));
        }
        let psi = linalg::from_rows(&self.psi)?;
        if psi.nrows() != d {
            return Err(Error::Dimension { what: "NIW psi", expected: d, got: psi.nrows() });
        }
        linalg::cholesky_lower(&psi, "NIW psi")?;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn psi_matrix(&self) -> DMatrix<T> {
        linalg::from_rows(&self.psi).expect("validated at construction")
    }

    /// Prior pseudo-count on the mean, the reciprocal of `mean_scale`.
    pub fn kappa(&self) -> T {
        T::one() / self.mean_scale
    }

    /// Joint mode `(mu0, psi / (nu + D + 2))`.
    pub fn mode(&self) -> (DVector<T>, DMatrix<T>) {
        let d = T::from_count(self.dim());
        (DVector::from_column_slice(&self.mu0), self.psi_matrix() / (self.nu + d + T::lit(2.0)))
    }

    /// Joint log-density of `(mu, sigma)`.
    pub fn log_pdf(&self, mu: &DVector<T>, sigma: &DMatrix<T>) -> Result<T> {
        let d = self.dim();
        let df = T::from_count(d);
        let half = T::lit(0.5);
        let l = linalg::cholesky_lower(sigma, "mark covariance")?;
        let log_det_sigma = linalg::log_det_from_lower(&l);
        let psi = self.psi_matrix();
        let lpsi = linalg::cholesky_lower(&psi, "NIW psi")?;
        let log_det_psi = linalg::log_det_from_lower(&lpsi);
        let sigma_inv = sigma.clone().cholesky().expect("checked above").inverse();
        let trace = (&psi * sigma_inv).trace();
        let log_iw = half * self.nu * log_det_psi
            - half * self.nu * df * T::lit(2.0).ln()
            - linalg::ln_multigamma(half * self.nu, d)
            - half * (self.nu + df + T::one()) * log_det_sigma
            - half * trace;
        let r = mu - DVector::from_column_slice(&self.mu0);
        let scaled = sigma * self.mean_scale;
        let log_n = Gaussian::new(DVector::zeros(d), scaled)?.log_pdf(r.as_slice());
        Ok(log_iw + log_n)
    }
}

/// Prior family on the Gamma shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShapePrior<T: Real> {
    Flat,
    Gamma { shape: T, rate: T },
    Exponential { rate: T },
    LogNormal { mu: T, sigma2: T },
}

impl<T: Real> ShapePrior<T> {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ShapePrior::Flat => true,
            ShapePrior::Gamma { shape, rate } => shape > T::zero() && rate > T::zero(),
            ShapePrior::Exponential { rate } => rate > T::zero(),
            ShapePrior::LogNormal { sigma2, .. } => sigma2 > T::zero(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid shape prior {self:?}")))
        }
    }

    pub fn log_pdf(&self, a: T) -> T {
        let half = T::lit(0.5);
        match *self {
            ShapePrior::Flat => T::zero(),
            ShapePrior::Gamma { shape, rate } => {
                shape * rate.ln() - shape.log_gamma() + (shape - T::one()) * a.ln() - rate * a
            }
            ShapePrior::Exponential { rate } => rate.ln() - rate * a,
            ShapePrior::LogNormal { mu, sigma2 } => {
                let z = a.ln() - mu;
                -a.ln() - half * (T::two_pi() * sigma2).ln() - z * z / (T::lit(2.0) * sigma2)
            }
        }
    }

    /// Derivative of [`Self::log_pdf`] with respect to `a`.
    pub fn d_log_pdf(&self, a: T) -> T {
        match *self {
            ShapePrior::Flat => T::zero(),
            ShapePrior::Gamma { shape, rate } => (shape - T::one()) / a - rate,
            ShapePrior::Exponential { rate } => -rate,
            ShapePrior::LogNormal { mu, sigma2 } => -(T::one() + (a.ln() - mu) / sigma2) / a,
        }
    }

    /// Mode when it is positive and finite.
    pub fn mode(&self) -> Option<T> {
        match *self {
            ShapePrior::Gamma { shape, rate } if shape > T::one() => Some((shape - T::one()) / rate),
            ShapePrior::LogNormal { mu, sigma2 } => Some((mu - sigma2).exp()),
            _ => None,
        }
    }
}

/// Prior family on the Gamma rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum RatePrior<T: Real> {
    Flat,
    Gamma { shape: T, rate: T },
    InvGamma { shape: T, scale: T },
}

impl<T: Real> RatePrior<T> {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            RatePrior::Flat => true,
            RatePrior::Gamma { shape, rate } => shape > T::zero() && rate > T::zero(),
            RatePrior::InvGamma { shape, scale } => shape > T::zero() && scale > T::zero(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid rate prior {self:?}")))
        }
    }

    pub fn log_pdf(&self, l: T) -> T {
        match *self {
            RatePrior::Flat => T::zero(),
            RatePrior::Gamma { shape, rate } => {
                shape * rate.ln() - shape.log_gamma() + (shape - T::one()) * l.ln() - rate * l
            }
            RatePrior::InvGamma { shape, scale } => {
                shape * scale.ln() - shape.log_gamma() - (shape + T::one()) * l.ln() - scale / l
            }
        }
    }

    pub fn d_log_pdf(&self, l: T) -> T {
        match *self {
            RatePrior::Flat => T::zero(),
            RatePrior::Gamma { shape, rate } => (shape - T::one()) / l - rate,
            RatePrior::InvGamma { shape, scale } => -(shape + T::one()) / l + scale / (l * l),
        }
    }

    pub fn mode(&self) -> Option<T> {
        match *self {
            RatePrior::Gamma { shape, rate } if shape > T::one() => Some((shape - T::one()) / rate),
            RatePrior::InvGamma { shape, scale } => Some(scale / (shape + T::one())),
            _ => None,
        }
    }
}

/// Hyperparameters of the priors on the mark and waiting-time parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct PriorHyperparams<T: Real> {
    pub marks: NiwPrior<T>,
    pub shape: ShapePrior<T>,
    pub rate: RatePrior<T>,
}

impl<T: Real> PriorHyperparams<T> {
    /// Weak defaults: NIW centred at zero, `Gamma(1, 1e-3)` on both shape and rate.
    pub fn weak(dim: usize) -> Self {
        Self {
            marks: NiwPrior::weak(dim),
            shape: ShapePrior::Gamma { shape: T::one(), rate: T::lit(1e-3) },
            rate: RatePrior::Gamma { shape: T::one(), rate: T::lit(1e-3) },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.marks.validate()?;
        self.shape.validate()?;
        self.rate.validate()
    }
}
