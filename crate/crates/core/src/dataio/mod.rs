//! Dataset ingestion, input encoding, checkpoints and mask export.

pub mod checkpoint;
pub mod encode;
pub mod export;
pub mod idx;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use encode::{encode_input, resize_bilinear, Dataset};
pub use export::{export_mask, MaskFormat};
pub use idx::{encode_idx, load_idx, LabeledImageSet};
