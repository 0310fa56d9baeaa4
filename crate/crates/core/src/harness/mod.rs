//! Experiment driver: configuration, single edits, batch and hyperparameter
//! sweeps, and the self-check suite behind `pmedit verify`.

mod config;
mod run;
pub mod verify;

pub use config::{ExperimentConfig, LayerSpec};
pub use run::{
    run_edit, sweep_batch, sweep_batch_on, sweep_hparam, sweep_hparam_on, BatchOutcome, EditRun, HparamReport,
    Observation, Params, SweepReport, Workbench,
};
