//! JSON-lines sample manifests.
//!
//! One object per line with keys `sample_id`, `expression`, `bundle_path`,
//! `gt_mask_path` (nullable) and `image_size` (`[H, W]`). Relative paths are
//! resolved against the manifest's directory.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub sample_id: String,
    pub expression: String,
    pub bundle_path: PathBuf,
    pub gt_mask_path: Option<PathBuf>,
    pub image_size: Grid,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub base_dir: PathBuf,
    pub entries: Vec<SampleManifest>,
}

impl Manifest {
    pub fn bundle_dir(&self, entry: &SampleManifest) -> PathBuf {
        self.base_dir.join(&entry.bundle_path)
    }

    pub fn gt_path(&self, entry: &SampleManifest) -> Option<PathBuf> {
        entry.gt_mask_path.as_ref().map(|p| self.base_dir.join(p))
    }

    /// Copy of the manifest with every path made absolute-or-base-relative.
    pub fn resolved(&self) -> Vec<SampleManifest> {
        self.entries
            .iter()
            .map(|e| SampleManifest {
                bundle_path: self.bundle_dir(e),
                gt_mask_path: self.gt_path(e),
                ..e.clone()
            })
            .collect()
    }
}

pub fn parse_manifest(text: &str, base_dir: impl Into<PathBuf>) -> Result<Manifest> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let entry: SampleManifest = serde_json::from_str(line).map_err(|source| Error::Json {
            context: format!("manifest line {}", lineno + 1),
            source,
        })?;
        if !seen.insert(entry.sample_id.clone()) {
            return Err(Error::Validation(format!(
                "duplicate sample_id {:?} on manifest line {}",
                entry.sample_id,
                lineno + 1
            )));
        }
        entries.push(entry);
    }
    Ok(Manifest {
        base_dir: base_dir.into(),
        entries,
    })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, base)
}

pub fn write_manifest<W: Write>(entries: &[SampleManifest], mut sink: W) -> Result<()> {
    for e in entries {
        let line = serde_json::to_string(e).map_err(|source| Error::Json {
            context: format!("manifest entry {}", e.sample_id),
            source,
        })?;
        writeln!(sink, "{line}").map_err(|source| Error::Io { offset: 0, source })?;
    }
    Ok(())
}
