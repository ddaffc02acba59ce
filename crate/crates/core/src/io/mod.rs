// SPDX-License-Identifier: Apache-2.0

//! Model, image and analysis-artifact files.

pub mod export;
pub mod image;
pub mod model_format;

pub use export::{export_signed_map, preview_pgm, preview_samples, ExportedMap, Sidecar};
pub use image::{decode_image, encode_8bit, encode_netpbm, encode_pfm, load_image, save_image};
pub use model_format::{
    default_blob_path, load_model, manifest_to_string, model_from_parts, model_to_parts, parse_manifest,
    save_model, ModelManifest,
};
