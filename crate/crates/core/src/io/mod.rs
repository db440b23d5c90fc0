//! Checkpoints, raster images and on-disk datasets.

mod checkpoint;
mod dataset;
mod raster;

pub use checkpoint::{
    config_sidecar, decode_checkpoint, encode_checkpoint, load_checkpoint, load_model, load_tensors, read_checkpoint,
    save_checkpoint, save_model, LoadMode, LoadReport, StoredTensor, MAGIC, VERSION,
};
pub use dataset::{DatasetManifest, IMAGE_DIR, MASK_DIR};
pub use raster::{
    image_tensor, load_image, load_mask, read_raster, save_image, save_mask, Raster, RasterKind,
};
