//! Learning LQR controllers from rich nonlinear observations.

pub mod config;
pub mod control;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod matrix_csv;
pub mod phase1;
pub mod phase2;
pub mod phase3;
pub mod pipeline;
pub mod regress;
pub mod rng;
pub mod sim;

pub use config::ExperimentConfig;
pub use control::{solve_dare, DareSolution, StabilityCert, WitnessKind};
pub use error::{Error, Result, Stage};
pub use eval::{align_decoder, estimate_cost, Alignment, CostEstimate};
pub use matrix_csv::MatrixBundle;
pub use phase1::{Phase1Config, Phase1Output};
pub use phase2::SysIdEstimates;
pub use phase3::{compute_policy, LearnedPolicy, Phase3Config, Phase3Output};
pub use pipeline::{run_pipeline, EvalReport, PipelineResult};
pub use regress::{DecoderClass, FittedRegressor, StructuredClass};
pub use sim::{make_benchmark_instance, BenchmarkInstance, Decoder, DecoderRef, EmissionModel, Policy, PolicyDef, SystemSpec, Trajectory};
