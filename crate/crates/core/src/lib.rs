//! Latent-variable exposure models with a longitudinal outcome, fitted by
//! joint maximum likelihood or by two-stage estimating equations with
//! sandwich variance estimates.

pub mod cli;
pub mod config;
pub mod cov;
pub mod data;
pub mod error;
pub mod exposure;
pub mod inference;
pub mod io;
pub mod joint;
pub mod linalg;
pub mod moments;
pub mod optim;
pub mod outcome;
pub mod params;
pub mod report;
pub mod scalar;
pub mod sim;
pub mod spec;

pub use config::ModelConfig;
pub use cov::CovStructure;
pub use data::{Dataset, SubjectData};
pub use error::{Error, Result};
pub use outcome::Scheme;
pub use params::{ExposureParams, ParamLayout, ParamVector};
pub use report::{fit_model, FitResult, Method};
pub use scalar::Scalar;
pub use sim::SimDesign;
pub use spec::{DeltaCov, Entry, ModelSpec, PsiCov};

/// Default floating-point type for estimation.
pub type Real = f64;
/// Forward-mode dual number used for exact parameter derivatives.
pub type Dual = num_dual::Dual64;

/// Exposure-model matrices at double precision.
pub type ExposureParamsF64 = params::ExposureParams<Real>;
/// Exposure moments at double precision.
pub type Moments = moments::ExposureMoments<Real>;
/// Exposure moments carrying one directional derivative.
pub type DualMoments = moments::ExposureMoments<Dual>;
/// Per-pattern conditional factor at double precision.
pub type PatternFactorF64 = moments::PatternFactor<Real>;
