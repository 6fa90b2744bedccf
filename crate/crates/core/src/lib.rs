//! Gaussian mixture models as a value type for uncertain quantities.
//!
//! [`GmmParams`] is the currency of every operation: closed-form algebra
//! (convolution, fusion, mixing, marginalization, conditioning, `L²`
//! distance), seeded sampling, EM fitting with model selection, mixture
//! reduction, and the measurement-system workflow built on conditioning.
//!
//! ```
//! use gmix::{algebra, GmmParams};
//!
//! let a = GmmParams::univariate(&[(0.5, -1.0, 0.2), (0.5, 1.0, 0.2)]).unwrap();
//! let b = GmmParams::univariate(&[(1.0, 3.0, 0.1)]).unwrap();
//! let sum = algebra::convolve(&a, &b).unwrap();
//! let m = sum.moments();
//! assert!((m.mean[0] - 3.0).abs() < 1e-12);
//! ```

// Guards are written as `!(x > 0.0)` on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algebra;
pub mod error;
pub mod fitting;
pub mod gmm;
pub mod measurement;
pub mod numeric;
pub mod reduction;
pub mod sampling;
pub mod stats;

pub use error::{ErrorCategory, GmmError, Result};
pub use fitting::{em_fit, select_model, Criterion, Dataset, EmConfig, FitReport, ModelSelection};
pub use gmm::{param_count, validate, Block, BlockIndex, GaussianComponent, GmmParams, MomentSummary, RawMixture, Violation};
pub use measurement::{CurveSpec, MeasurementModel, QualityRegion};
pub use reduction::{reduce, ReductionReport};
pub use sampling::{SampleBatch, SeededStream};
