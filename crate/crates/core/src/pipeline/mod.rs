//! Training, sliding-window inference and checkpoints.

mod checkpoint;
mod train;
mod window;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{evaluate, normalize, train, LogEntry, Start, TrainConfig, TrainOutcome};
pub use window::{
    gaussian_profile, gaussian_window, sliding_infer, tile_origins, NetPredictor, SlidingWindow, TilePredictor, DEFAULT_OVERLAP,
    DEFAULT_SIGMA_SCALE,
};
