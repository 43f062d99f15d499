//! Image ingestion, preprocessing, manifests and the synthetic corpus.

pub mod image;
pub mod manifest;
pub mod synth;

pub use image::{
    decode_pnm, encode_pnm, load_any, load_image, load_preprocessed, normalize, preprocess,
    read_tensor_file, resize_bilinear, save_image, write_tensor_file, FloatImage, LoadedImage,
    RawImage, RawTensor, TensorData,
};
pub use manifest::{
    batch_iter, batch_order, load_records, make_splits, stack_batch, DatasetManifest, ImageRecord,
    ManifestRecord, Split, SplitCounts,
};
pub use synth::{synth_generate, SynthKind, ANOMALY_LABEL, NORMAL_LABEL};
