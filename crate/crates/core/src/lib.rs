//! Code-graph denoising for programming knowledge tracing.
//!
//! A frozen recurrent backbone reads a learner's submissions. The adaptor
//! builds a similarity graph over the submitted codes, drops isolated codes
//! unrelated to their question, clusters the rest into core and weak
//! submissions and corrects each knowledge state with a role prompt.
//!
//! The differentiable core is generic over [`numerics::Scalar`]; the aliases
//! below fix the concrete scalar used by training and evaluation.

pub mod adaptor;
pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod denoise;
pub mod encoder;
pub mod experiment;
pub mod graph;
pub mod kmeans;
pub mod metrics;
pub mod numerics;
pub mod synth;
pub mod trainer;

/// Scalar used by every non-generic entry point.
pub type Real = f64;
pub type Params = numerics::ParamStore<Real>;
pub type Grads = numerics::ParamGrads<Real>;
/// Forward-mode scalar used for Hessian-vector products.
pub type DualReal = numerics::Dual<Real>;

pub use data::{Dataset, EncodedSequence, LearnerSequence, SolutionBank, SubmissionRecord};
pub use denoise::{annotate, Annotation, DenoiseConfig, Role};
pub use experiment::{run_experiment, ExperimentConfig, Report};
pub use metrics::Metrics;
pub use trainer::{coda_evaluate, tune_coda, TuneConfig};
