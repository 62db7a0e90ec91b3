//! Data preparation: image IO, label combination, pair stitching, manifests
//! and the synthetic two-arm scene generator.

mod image;
mod labels;
mod manifest;
pub mod netpbm;
pub mod scene;

pub use image::{ImageBuffer, PairedSample};
pub use labels::{combine_labels, split_pair, stitch_pair, LabelCoding, BINARY_THRESHOLD};
pub use manifest::{
    build_manifest, prepare_dataset, synth_dataset, DatasetManifest, FilePattern, ManifestEntry, ManifestFormat,
    PrepareRequest,
};
pub use netpbm::{read_netpbm, write_netpbm};
pub use scene::{generate_scene, CapsuleRecord, Scene, SceneConfig};
