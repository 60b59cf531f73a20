//! Readout fidelity experiments, the closed-form bounds they are compared
//! against, and the built-in scenario presets.

mod bounds;
mod run;
mod scenario;

pub use bounds::{
    binomial_infidelity_interval, fidelity_bound_zero_noise, thermal_transition_matrix, BinomialInterval, ThermalConfig,
    DEFAULT_LEVEL,
};
pub use run::{
    config_digest, run_calibration_failure, run_fidelity_experiment, run_scenario, sweep_csv, write_outputs,
    CalibrationFailure, ExperimentResults, FidelityReport, Manifest, ManifestPoint, ParameterDeviation, PointResult,
    TrainedModel, HMM_TRAIN_ID, THRESHOLD_TRAIN_ID,
};
pub use scenario::{
    default_init, default_training, preset, scenario_catalog, Method, ReadoutModel, Recipe, Scenario, ScenarioPoint,
    SweepAxis, SweepParameter, PSB_RATES,
};
