//! Configuration, datasets, checkpoints, synthetic populations, training,
//! registration and exports.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod export;
pub mod register;
pub mod synth;
pub mod train;

pub use checkpoint::ModelCheckpoint;
pub use config::{PipelineConfig, SyntheticSpec};
pub use dataset::Dataset;
pub use export::ExportTarget;
pub use register::{Registrar, Registration};
pub use train::{initialise, iterate, run, train};
