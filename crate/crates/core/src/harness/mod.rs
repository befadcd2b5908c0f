//! Experiment driver: scenarios, configs, seeded runs, sweeps and Pareto fronts.

pub mod config;
pub mod pareto;
pub mod run;
pub mod scenario;

pub use config::{Algorithm, AlgorithmConfig, ExperimentConfig, ScenarioSpec};
pub use pareto::{mark_front, pareto_from_files, ParetoPoint};
pub use run::{load_sweep, read_metrics, run_experiment, run_many, Manifest};
pub use scenario::{generate_scenario, Scenario, ScenarioParams, TrainablePolicy};
