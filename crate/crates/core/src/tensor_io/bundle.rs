//! Dump bundles: one sample's attention submatrices and feature maps.
//!
//! Directory layout:
//!
//! ```text
//! <bundle>/meta.json
//! <bundle>/block_<i>.avp.gten     image-to-prompt attention  [N_v x N_p]
//! <bundle>/block_<i>.avv.gten     image-to-image attention   [N_v x N_v]
//! <bundle>/feature.gten           features at (feature_timestep, feature_block)  [N_v x D]
//! <bundle>/<file>                 optional extra feature dumps listed in meta.json
//! ```
//!
//! Token index `k` maps to grid cell `(k / N_w, k % N_w)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::{read_tensor_file, write_tensor_file, Tensor};
use super::manifest::SampleManifest;
use crate::error::{Error, Result};
use crate::grid::{Grid, Matrix};

pub const META_FILE: &str = "meta.json";
pub const FEATURE_FILE: &str = "feature.gten";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureRef {
    pub block: usize,
    pub timestep: u32,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub grid: Grid,
    pub n_prompt: usize,
    pub image_size: Grid,
    pub blocks: Vec<usize>,
    #[serde(default)]
    pub attention_timestep: u32,
    pub feature_block: usize,
    #[serde(default)]
    pub feature_timestep: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_features: Vec<FeatureRef>,
    /// Named block subsets such as `shallow` and `deep`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub presets: BTreeMap<String, Vec<usize>>,
    /// Whether prompt columns include padding/special tokens; set by the adapter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_includes_padding: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub index: usize,
    /// `[N_v x N_p]`
    pub attn_vp: Matrix,
    /// `[N_v x N_v]`
    pub attn_vv: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub block: usize,
    pub timestep: u32,
    /// `[N_v x D]`
    pub data: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DumpBundle {
    pub grid: Grid,
    pub n_prompt: usize,
    pub image_size: Grid,
    pub attention_timestep: u32,
    pub blocks: Vec<AttentionBlock>,
    pub feature: FeatureDump,
    pub extra_features: Vec<FeatureDump>,
    pub presets: BTreeMap<String, Vec<usize>>,
    pub prompt_includes_padding: Option<bool>,
    pub instruction: Option<String>,
}

fn check_finite(m: &Matrix, context: impl Fn() -> String) -> Result<()> {
    if m.as_slice().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(context()))
    }
}

fn check_nonnegative(m: &Matrix, context: impl Fn() -> String) -> Result<()> {
    check_finite(m, &context)?;
    for r in 0..m.rows() {
        if let Some(c) = m.row(r).iter().position(|&v| v < 0.0) {
            return Err(Error::NegativeAttention {
                context: context(),
                row: r,
                col: c,
                value: m.get(r, c),
            });
        }
    }
    Ok(())
}

impl DumpBundle {
    pub fn n_tokens(&self) -> usize {
        self.grid.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature.data.cols()
    }

    pub fn block_indices(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.index).collect()
    }

    pub fn block(&self, index: usize) -> Option<&AttentionBlock> {
        self.blocks.iter().find(|b| b.index == index)
    }

    /// All feature dumps, primary first.
    pub fn features(&self) -> impl Iterator<Item = &FeatureDump> {
        std::iter::once(&self.feature).chain(self.extra_features.iter())
    }

    pub fn feature_at(&self, timestep: u32, block: usize) -> Option<&FeatureDump> {
        self.features()
            .find(|f| f.timestep == timestep && f.block == block)
    }

    /// Checks every structural invariant. Called by the loaders.
    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Validation(format!("empty token grid {}", self.grid)));
        }
        if self.n_prompt == 0 {
            return Err(Error::Validation("n_prompt must be at least 1".into()));
        }
        if self.image_size.height < self.grid.height || self.image_size.width < self.grid.width {
            return Err(Error::Validation(format!(
                "image size {} is smaller than token grid {}",
                self.image_size, self.grid
            )));
        }
        if self.blocks.is_empty() {
            return Err(Error::EmptyBlocks);
        }
        let indices = self.block_indices();
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::BlockOrder(indices));
        }
        let n_v = self.n_tokens();
        for b in &self.blocks {
            let vp = &b.attn_vp;
            if vp.rows() != n_v || vp.cols() != self.n_prompt {
                return Err(Error::shape(
                    format!("block {} attn_vp (N_v = {})", b.index, n_v),
                    format!("{}x{}", n_v, self.n_prompt),
                    format!("{}x{}", vp.rows(), vp.cols()),
                ));
            }
            let vv = &b.attn_vv;
            if vv.rows() != n_v || vv.cols() != n_v {
                return Err(Error::shape(
                    format!("block {} attn_vv (N_v = {})", b.index, n_v),
                    format!("{n_v}x{n_v}"),
                    format!("{}x{}", vv.rows(), vv.cols()),
                ));
            }
            check_nonnegative(vp, || format!("block {} attn_vp", b.index))?;
            check_nonnegative(vv, || format!("block {} attn_vv", b.index))?;
        }
        let dim = self.feature_dim();
        let mut seen = Vec::new();
        for f in self.features() {
            if f.data.rows() != n_v || f.data.cols() != dim || dim == 0 {
                return Err(Error::shape(
                    format!("feature (t={}, l={})", f.timestep, f.block),
                    format!("{n_v}x{dim}"),
                    format!("{}x{}", f.data.rows(), f.data.cols()),
                ));
            }
            check_finite(&f.data, || {
                format!("feature (t={}, l={})", f.timestep, f.block)
            })?;
            if seen.contains(&(f.timestep, f.block)) {
                return Err(Error::Validation(format!(
                    "duplicate feature dump (t={}, l={})",
                    f.timestep, f.block
                )));
            }
            seen.push((f.timestep, f.block));
        }
        for (name, idx) in &self.presets {
            if idx.is_empty() || idx.iter().any(|i| !indices.contains(i)) {
                return Err(Error::Validation(format!(
                    "preset {name:?} = {idx:?} is not a non-empty subset of blocks {indices:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> BundleMeta {
        BundleMeta {
            grid: self.grid,
            n_prompt: self.n_prompt,
            image_size: self.image_size,
            blocks: self.block_indices(),
            attention_timestep: self.attention_timestep,
            feature_block: self.feature.block,
            feature_timestep: self.feature.timestep,
            extra_features: self
                .extra_features
                .iter()
                .map(|f| FeatureRef {
                    block: f.block,
                    timestep: f.timestep,
                    file: extra_feature_file(f.timestep, f.block),
                })
                .collect(),
            presets: self.presets.clone(),
            prompt_includes_padding: self.prompt_includes_padding,
            instruction: self.instruction.clone(),
        }
    }
}

pub fn avp_file(block: usize) -> String {
    format!("block_{block}.avp.gten")
}

pub fn avv_file(block: usize) -> String {
    format!("block_{block}.avv.gten")
}

pub fn extra_feature_file(timestep: u32, block: usize) -> String {
    format!("feature_t{timestep}_l{block}.gten")
}

fn load_matrix(path: &Path) -> Result<Matrix> {
    let t = read_tensor_file(path)?;
    if t.shape().len() != 2 {
        return Err(Error::shape(
            path.display().to_string(),
            "rank-2 tensor",
            format!("shape {:?}", t.shape()),
        ));
    }
    t.into_matrix()
}

/// Loads and validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<DumpBundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::file(&meta_path, e))?;
    let meta: BundleMeta = serde_json::from_str(&text).map_err(|source| Error::Json {
        context: meta_path.display().to_string(),
        source,
    })?;
    if meta.blocks.is_empty() {
        return Err(Error::EmptyBlocks);
    }
    if meta.blocks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::BlockOrder(meta.blocks));
    }
    let blocks = meta
        .blocks
        .iter()
        .map(|&index| {
            Ok(AttentionBlock {
                index,
                attn_vp: load_matrix(&dir.join(avp_file(index)))?,
                attn_vv: load_matrix(&dir.join(avv_file(index)))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let feature = FeatureDump {
        block: meta.feature_block,
        timestep: meta.feature_timestep,
        data: load_matrix(&dir.join(FEATURE_FILE))?,
    };
    let extra_features = meta
        .extra_features
        .iter()
        .map(|r| {
            Ok(FeatureDump {
                block: r.block,
                timestep: r.timestep,
                data: load_matrix(&dir.join(&r.file))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let bundle = DumpBundle {
        grid: meta.grid,
        n_prompt: meta.n_prompt,
        image_size: meta.image_size,
        attention_timestep: meta.attention_timestep,
        blocks,
        feature,
        extra_features,
        presets: meta.presets,
        prompt_includes_padding: meta.prompt_includes_padding,
        instruction: meta.instruction,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Loads the bundle named by a (resolved) manifest entry and checks its image size.
pub fn load_sample_bundle(entry: &SampleManifest) -> Result<DumpBundle> {
    let bundle = load_bundle(&entry.bundle_path)?;
    if bundle.image_size != entry.image_size {
        return Err(Error::Validation(format!(
            "sample {}: bundle image size {} differs from manifest {}",
            entry.sample_id, bundle.image_size, entry.image_size
        )));
    }
    Ok(bundle)
}

/// Writes `bundle` into `dir`, creating it if needed. The bundle is validated first.
pub fn write_bundle(bundle: &DumpBundle, dir: impl AsRef<Path>) -> Result<PathBuf> {
    bundle.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let meta = serde_json::to_string_pretty(&bundle.meta()).map_err(|source| Error::Json {
        context: "bundle meta".into(),
        source,
    })?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, meta + "\n").map_err(|e| Error::file(&meta_path, e))?;
    for b in &bundle.blocks {
        write_tensor_file(&Tensor::from(&b.attn_vp), dir.join(avp_file(b.index)))?;
        write_tensor_file(&Tensor::from(&b.attn_vv), dir.join(avv_file(b.index)))?;
    }
    write_tensor_file(&Tensor::from(&bundle.feature.data), dir.join(FEATURE_FILE))?;
    for f in &bundle.extra_features {
        write_tensor_file(
            &Tensor::from(&f.data),
            dir.join(extra_feature_file(f.timestep, f.block)),
        )?;
    }
    Ok(dir.to_path_buf())
}
