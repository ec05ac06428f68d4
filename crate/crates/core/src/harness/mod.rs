//! Experiment harness: reference recordings, role evaluation, attacks,
//! sweeps and figure-shaped reports.

pub mod attack;
pub mod config;
pub mod data;
pub mod report;
pub mod run;

pub use attack::{combine_views, run_attack, EveObservation};
pub use config::{AttackStrategy, ExperimentConfig, PsiSource};
pub use data::{reference_samples, Recorder, SampleId};
pub use report::{bundle_checks, report, Bundle, Check, Report};
pub use run::{run_experiment, Lab, ResultRow, RunSummary};
