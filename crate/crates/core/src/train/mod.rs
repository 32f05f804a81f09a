//! Synthetic data, encoders, optimizer and the training loop.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod files;
pub mod optim;
mod run;

pub use checkpoint::Checkpoint;
pub use data::{generate_synthetic, PairedSplit, SyntheticDataset, SyntheticDatasetSpec};
pub use encoder::{Dense, EncoderCache, EncoderGrads, EncoderModel, InitScale};
pub use files::{load_dataset, save_dataset};
pub use optim::{AdamState, AdamW};
pub use run::{
    encode_split, encoder_seed, train_run, EpochLoss, EvalRecord, StepOutcome, TrainConfig,
    TrainOutput, TrainState, TrainingHistory,
};
