//! Ground-truth latent system, emissions, policies and rollouts.

pub mod catalog;
pub mod emission;
pub mod policy;
pub mod rollout;
pub mod system;

pub use catalog::{make_benchmark_instance, BenchmarkInstance, ParameterBounds};
pub use emission::{Decoder, DecoderRef, Emission, EmissionFamily, EmissionModel};
pub use policy::{Policy, PolicyDef, PolicyKind, PolicyRun};
pub use rollout::{rollout, rollout_with, step, RolloutOptions, Trajectory};
pub use system::SystemSpec;
