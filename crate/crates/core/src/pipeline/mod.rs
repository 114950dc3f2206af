//! End-to-end tracking: data, model assembly, tracking and training.

pub mod data;
pub mod model;
pub mod synthetic;
pub mod tracker;
pub mod train;

pub use data::{read_dataset, read_sequence, write_dataset, write_sequence, Frame, Sequence};
pub use model::{ForwardPass, Model, ModelInput};
pub use synthetic::{generate_synthetic_sequence, Motion, ShapeKind, SyntheticSet, SyntheticSpec};
pub use tracker::{crop_search_region, track_sequence, TrackResult, TrackStep, TrackerState};
pub use train::{make_pair, train, train_model, StepRecord, Trained, TrainingPair};

use crate::config::DataSource;
use crate::error::Result;

/// Loads or generates the sequences named by `source`.
pub fn load_sequences(source: &DataSource) -> Result<Vec<Sequence>> {
    match source {
        DataSource::Synthetic(set) => set.generate(),
        DataSource::Directory { path } => read_dataset(path),
    }
}
