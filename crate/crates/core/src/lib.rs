//! Leave-one-out risk estimation with stability profiles and concentration
//! bounds for the estimation error.

pub mod bounds;
pub mod data;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod loo;
pub mod rng;
pub mod stability;
pub mod validation;

pub use data::{DataGenerator, Dataset, DeletedView, Observation, ObsRef, Sample};
pub use error::{Error, Result};
pub use estimator::{loss_eval, Axis, Estimator, Fitted, Loss};
pub use loo::{loo_fast, loo_naive, risk_oracle, LooMethod, LooResult, RiskOracleResult};
pub use stability::{fit_envelope, grad_analytic, grad_fd, DataGradient, EnvelopeFit, StabilityProfile};
pub use bounds::{bound_data_dependent, bound_main, bound_simplified, BoundSpec, Growth, RestrictionSet, TailBound};
