//! Synthetic person-search world and a vector-level trainer for the filter
//! objectives.
//!
//! Raw person and scene features come from [`generate_world`]; the trainable
//! part is a pair of linear heads plus the fusion normalisation
//! ([`TrainableParams`]). [`train_gfn`] runs plain gradient descent on the
//! re-id loss plus the selected filter loss, and [`evaluate_toy`] scores
//! queries from held-out scenes with and without the filter.

mod params;
mod toy;
mod train;
mod world;

pub use params::{ParamGrads, TrainableParams};
pub use toy::{evaluate_toy, held_out_scenes, run_toy, toy_tasks, ToyInputs, ToyReport, ToyRun, ToyRunConfig};
pub use train::{
    build_problem, curve_to_csv, gradient_audit, max_relative_error, numeric_gradient, refresh_lut, step_loss,
    train_gfn, BatchProblem, EpochLoss, GradAudit, StepLoss, TrainOptions, TrainOutcome, AUDIT_STEP,
    AUDIT_TOLERANCE,
};
pub use world::{generate_world, SynthConfig, SynthWorld};
