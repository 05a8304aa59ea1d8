//! On-disk formats shared with the extraction adapter.
//!
//! * `GTEN` tensor containers (see [`container`])
//! * binary PGM masks and heatmaps (see [`pgm`])
//! * JSON-lines sample manifests (see [`manifest`])
//! * dump bundle directories (see [`bundle`])

pub mod bundle;
pub mod container;
pub mod manifest;
pub mod pgm;

pub use bundle::{
    load_bundle, load_sample_bundle, write_bundle, AttentionBlock, BundleMeta, DumpBundle,
    FeatureDump, FeatureRef,
};
pub use container::{
    read_tensor, read_tensor_file, write_tensor, write_tensor_file, DType, Tensor,
};
pub use manifest::{read_manifest, write_manifest, Manifest, SampleManifest};
pub use pgm::{
    read_mask_pgm, read_mask_pgm_file, write_gray_pgm, write_mask_pgm, write_mask_pgm_file,
};
