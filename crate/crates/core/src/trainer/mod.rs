//! Small image classifiers trained with and without periodic weight
//! sharing.

mod data;
mod network;
mod optim;
mod train;

pub use data::{
    augment_translate, build_batch, load_idx, read_idx_images, read_idx_labels, translate, translated_shapes,
    write_idx_images, write_idx_labels, Batch, Dataset, Normalization, ShapesConfig, Splits, MAX_SHAPE_CLASSES,
};
pub use network::{Arch, BatchResult, Gradients, Layer, LayerStack, StackSpec};
pub use optim::{Optimizer, OptimizerConfig};
pub use train::{train, train_seeded, EpochMetrics, SharingEvent, SharingMode, TrainConfig, TrainHistory};
