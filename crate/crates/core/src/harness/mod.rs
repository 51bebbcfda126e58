//! Evaluation, loss surfaces, cost checks, configuration and the
//! end-to-end experiment runner behind the CLI.

pub mod config;
pub mod eval;
pub mod experiment;
pub mod ledger_check;
pub mod surface;

pub use config::{AttackKind, AttackSpec, ExperimentConfig};
pub use eval::{evaluate, EvalReport, ReportRow};
pub use experiment::{run_experiment, run_experiment_in, Manifest, RunArtifacts};
pub use ledger_check::{expected_backward, ledger_assert};
pub use surface::{loss_surface, Direction, SurfaceGrid};
