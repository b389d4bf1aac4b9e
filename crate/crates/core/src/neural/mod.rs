//! Stacked GRU networks with exact gradients.
//!
//! The batched engine runs every sample of a batch through each layer in
//! lock-step (time-major buffers), caches the activations, and replays them
//! backwards for parameter and input gradients.

mod adam;
mod checkpoint;
mod kernels;
mod model;
mod params;
mod samples;
mod train;

pub use adam::AdamState;
pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, load_checkpoint_file, save_checkpoint, save_checkpoint_file,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use model::{CellKind, Direction, Normalization, RecurrentModel, Topology, DEFAULT_HIDDEN, DEFAULT_WINDOW};
pub use params::{gru_cell_forward, ArrayInfo, GruLayerParams, Params};
pub use samples::{SampleSource, WindowSample};
pub use train::{evaluate_mse, split_indices, train, HistoryEntry, TrainConfig, TrainHistory};
