//! Run configuration shared by every pipeline entry point.

use serde::{Deserialize, Serialize};

use crate::attention::{BlockSelection, DEFAULT_EPS};
use crate::error::{Error, Result};

/// Threshold on the refined map when proposing prototype regions.
pub const DEFAULT_TAU: f64 = 0.8;
/// Threshold used when an attention map is binarized directly into a mask.
pub const ABLATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsamplePath {
    /// Upsample the two prototype-similarity grids.
    #[default]
    Similarity,
    /// Upsample all feature channels, then take inner products.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    #[default]
    Ram,
    Cam,
}

/// Known backbones and their default feature block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelFamily {
    /// 32 blocks, features from block 20.
    Flux2Klein,
    /// 57 blocks, features from block 40.
    Step1xEdit,
}

impl ModelFamily {
    pub fn depth(self) -> usize {
        match self {
            ModelFamily::Flux2Klein => 32,
            ModelFamily::Step1xEdit => 57,
        }
    }

    pub fn default_feature_block(self) -> usize {
        match self {
            ModelFamily::Flux2Klein => 20,
            ModelFamily::Step1xEdit => 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub tau: f64,
    pub attention_blocks: BlockSelection,
    /// Feature block `l'`; `None` takes the block of the bundle's primary feature dump.
    pub feature_block: Option<usize>,
    /// Timestep the attention dumps must come from.
    pub attention_timestep: u32,
    /// Timestep of the feature dump to use.
    pub feature_timestep: u32,
    /// Skip prototype classification and threshold the attention map directly.
    pub binarize_only: bool,
    pub binarize_threshold: f64,
    pub attention_map: MapKind,
    pub upsample_path: UpsamplePath,
    pub eps: f64,
    /// Thread count; 0 picks the hardware default. Never affects results, so
    /// it is left out of report echoes.
    #[serde(skip)]
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            attention_blocks: BlockSelection::All,
            feature_block: None,
            attention_timestep: 0,
            feature_timestep: 0,
            binarize_only: false,
            binarize_threshold: ABLATION_THRESHOLD,
            attention_map: MapKind::Ram,
            upsample_path: UpsamplePath::Similarity,
            eps: DEFAULT_EPS,
            workers: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if !(self.binarize_threshold >= 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config(format!(
                "binarize threshold must lie in [0, 1), got {}",
                self.binarize_threshold
            )));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!(
                "eps must be finite and >= 0, got {}",
                self.eps
            )));
        }
        if let BlockSelection::Explicit(idx) = &self.attention_blocks {
            if idx.is_empty() {
                return Err(Error::Config("empty block selection".into()));
            }
        }
        Ok(())
    }

    /// The CAM-only ablation: threshold the coarse map at 0.5.
    pub fn cam_binarize(&self) -> Self {
        Self {
            binarize_only: true,
            attention_map: MapKind::Cam,
            ..self.clone()
        }
    }

    /// The RAM-only ablation: threshold the refined map at 0.5.
    pub fn ram_binarize(&self) -> Self {
        Self {
            binarize_only: true,
            attention_map: MapKind::Ram,
            ..self.clone()
        }
    }
}
