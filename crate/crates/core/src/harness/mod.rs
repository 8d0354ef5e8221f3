//! Run configuration, checkpoints, result records and the commands behind
//! the CLI.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod experiment;
pub mod pipeline;
pub mod results;

pub use checkpoint::Checkpoint;
pub use commands::{
    cmd_adapt, cmd_calibrate, cmd_eval, cmd_gen_data, cmd_pretrain, cmd_sweep, cmd_train_source, load_experiment,
    Layout,
};
pub use config::{
    DataConfig, IngestData, ModelSection, QaCalibration, RunConfig, SchemeKind, SyntheticData, TaskKind, TrainSection,
};
pub use experiment::Experiment;
pub use pipeline::{decode_span, Corpora, Evaluation, Setup};
pub use results::{config_hash, Metrics, ResultsRecord};

#[cfg(test)]
mod tests;
