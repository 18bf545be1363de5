//! Full parameter set of the hierarchical model and its JSON form.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inducing::{MarkModel, PriorHyperparams, RepulsionParams, WaitingTimeModel};
use crate::obs::ObsModel;
use crate::real::{standard_normal, Real};
use crate::sde::NoiseParams;

pub const SCHEMA_VERSION: u32 = 1;

/// Independent Gaussian priors on the initial states `x_0` and `y_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct InitialState<T: Real> {
    pub x_mean: Vec<T>,
    pub x_std: Vec<T>,
    pub y_mean: Vec<T>,
    pub y_std: Vec<T>,
}

impl<T: Real> InitialState<T> {
    pub fn standard(dim: usize) -> Self {
        Self::isotropic(dim, T::one(), T::one())
    }

    pub fn isotropic(dim: usize, x_std: T, y_std: T) -> Self {
        Self {
            x_mean: vec![T::zero(); dim],
            x_std: vec![x_std; dim],
            y_mean: vec![T::zero(); dim],
            y_std: vec![y_std; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.x_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (what, v) in [("x_std", &self.x_std), ("y_mean", &self.y_mean), ("y_std", &self.y_std)] {
            if v.len() != d {
                return Err(Error::Dimension { what, expected: d, got: v.len() });
            }
        }
        if self.x_std.iter().chain(&self.y_std).any(|&s| !(s >= T::zero())) {
            return Err(Error::InvalidParameter("initial standard deviations must be >= 0".into()));
        }
        Ok(())
    }

    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, x: &mut [T], y: &mut [T]) {
        for d in 0..self.dim() {
            x[d] = self.x_mean[d] + self.x_std[d] * draw_if(self.x_std[d], rng);
        }
        for d in 0..self.dim() {
            y[d] = self.y_mean[d] + self.y_std[d] * draw_if(self.y_std[d], rng);
        }
    }

    /// `log p(x_0) + log p(y_0)`; zero-std coordinates are point masses.
    pub fn log_pdf(&self, x: &[T], y: &[T]) -> T {
        let var = |s: &[T]| s.iter().map(|&v| v * v).collect::<Vec<T>>();
        crate::sde::gaussian_diag_logpdf(x, &self.x_mean, &var(&self.x_std))
            + crate::sde::gaussian_diag_logpdf(y, &self.y_mean, &var(&self.y_std))
    }
}

fn draw_if<T: Real, R: Rng + ?Sized>(std: T, rng: &mut R) -> T {
    if std > T::zero() {
        standard_normal(rng)
    } else {
        T::zero()
    }
}

/// Everything the filter and the learner need to know about the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Real", try_from = "ParamsRepr<T>", into = "ParamsRepr<T>")]
pub struct ModelParams<T: Real> {
    pub obs: ObsModel<T>,
    pub noise: NoiseParams<T>,
    pub waiting_time: WaitingTimeModel<T>,
    pub marks: MarkModel<T>,
    pub priors: PriorHyperparams<T>,
    pub initial: InitialState<T>,
    pub repulsion: Option<RepulsionParams<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
struct ParamsRepr<T: Real> {
    schema: u32,
    obs: ObsModel<T>,
    noise: NoiseParams<T>,
    waiting_time: WaitingTimeModel<T>,
    marks: MarkModel<T>,
    priors: PriorHyperparams<T>,
    initial: InitialState<T>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    repulsion: Option<RepulsionParams<T>>,
}

impl<T: Real> TryFrom<ParamsRepr<T>> for ModelParams<T> {
    type Error = Error;
    fn try_from(r: ParamsRepr<T>) -> Result<Self> {
        if r.schema != SCHEMA_VERSION {
            return Err(Error::Input(format!("unsupported schema {} (expected {SCHEMA_VERSION})", r.schema)));
        }
        let p = ModelParams {
            obs: r.obs,
            noise: r.noise,
            waiting_time: r.waiting_time,
            marks: r.marks,
            priors: r.priors,
            initial: r.initial,
            repulsion: r.repulsion,
        };
        p.validate()?;
        Ok(p)
    }
}

impl<T: Real> From<ModelParams<T>> for ParamsRepr<T> {
    fn from(p: ModelParams<T>) -> Self {
        ParamsRepr {
            schema: SCHEMA_VERSION,
            obs: p.obs,
            noise: p.noise,
            waiting_time: p.waiting_time,
            marks: p.marks,
            priors: p.priors,
            initial: p.initial,
            repulsion: p.repulsion,
        }
    }
}

impl<T: Real> ModelParams<T> {
    /// Assembles a parameter set with weak priors and standard initial states.
    pub fn new(
        obs: ObsModel<T>,
        noise: NoiseParams<T>,
        waiting_time: WaitingTimeModel<T>,
        marks: MarkModel<T>,
    ) -> Result<Self> {
        let dim = obs.latent_dim();
        let p = Self {
            obs,
            noise,
            waiting_time,
            marks,
            priors: PriorHyperparams::weak(dim),
            initial: InitialState::standard(dim),
            repulsion: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn latent_dim(&self) -> usize {
        self.obs.latent_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.latent_dim();
        self.noise.validate()?;
        self.priors.validate()?;
        self.initial.validate()?;
        for (what, got) in [
            ("noise", self.noise.dim()),
            ("marks", self.marks.dim()),
            ("mark prior", self.priors.marks.dim()),
            ("initial state", self.initial.dim()),
        ] {
            if got != d {
                return Err(Error::Dimension { what, expected: d, got });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inducing::{RatePrior, ShapePrior};
    use crate::linalg;
    use crate::obs::{GaussianObsModel, PointProcessObsModel};
    use nalgebra::DMatrix;

    fn gaussian_params() -> ModelParams<f64> {
        let w = linalg::from_rows(&[vec![0.3, -1.1], vec![0.1 + 0.2, 2.0 / 3.0]]).unwrap();
        let r = linalg::from_rows(&[vec![0.1, 0.01], vec![0.01, 0.2]]).unwrap();
        let mut p = ModelParams::new(
            ObsModel::Gaussian(GaussianObsModel::new(w, r).unwrap()),
            NoiseParams::uniform(2, 0.1, 1e-4),
            WaitingTimeModel::from_mean_std(40.0, 8.94).unwrap(),
            MarkModel::isotropic(2, 0.0, 1.0 / 3.0).unwrap(),
        )
        .unwrap();
        p.priors.shape = ShapePrior::LogNormal { mu: 1.0, sigma2: 0.5 };
        p.priors.rate = RatePrior::InvGamma { shape: 3.0, scale: 0.7 };
        p
    }

    #[test]
    fn json_round_trip_is_byte_identical() {
        let p = gaussian_params();
        let a = p.to_json().unwrap();
        let b = ModelParams::<f64>::from_json(&a).unwrap().to_json().unwrap();
        assert_eq!(a, b);
        assert!(a.contains("\"schema\": 1"));

        let s = ModelParams::new(
            ObsModel::Spikes(PointProcessObsModel::new(DMatrix::from_element(3, 2, 0.1), vec![1.0, 2.0, 3.0]).unwrap()),
            NoiseParams::uniform(2, 0.5, 0.01),
            WaitingTimeModel::new(2.0, 7.0).unwrap(),
            MarkModel::isotropic(2, 0.0, 1.0).unwrap(),
        )
        .unwrap();
        let a = s.to_json().unwrap();
        assert_eq!(ModelParams::<f64>::from_json(&a).unwrap().to_json().unwrap(), a);
    }

    #[test]
    fn rejects_unknown_keys_and_schema() {
        let a = gaussian_params().to_json().unwrap();
        let bad = a.replacen("\"schema\": 1", "\"schema\": 2", 1);
        assert!(ModelParams::<f64>::from_json(&bad).is_err());
        let extra = a.replacen("{", "{\"bogus\": 0,", 1);
        assert!(ModelParams::<f64>::from_json(&extra).is_err());
    }

    #[test]
    fn dimension_checks() {
        let mut p = gaussian_params();
        p.noise = NoiseParams::uniform(3, 0.1, 0.1);
        assert!(matches!(p.validate(), Err(Error::Dimension { what: "noise", .. })));
    }

    #[test]
    fn initial_density_point_mass() {
        let s = InitialState::<f64>::isotropic(1, 0.0, 1.0);
        assert_eq!(s.log_pdf(&[0.1], &[0.0]), f64::NEG_INFINITY);
        let lp = s.log_pdf(&[0.0], &[0.0]);
        assert!((lp + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }
}
