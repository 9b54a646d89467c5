//! Command implementations behind the `mmt` binary.

pub mod analysis;
pub mod config;
pub mod prepare;
pub mod run;

pub use analysis::{cmd_bleu, cmd_probe, cmd_sweep, probe_csv, ProbeRow};
pub use config::ExperimentConfig;
pub use prepare::{cmd_prepare, PrepareReport, Prepared};
pub use run::{cmd_retrieve, cmd_train, cmd_translate, RetrieveReport, TrainReport, TranslateRequest};
