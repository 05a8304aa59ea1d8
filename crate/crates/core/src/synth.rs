//! Planted bundles with known ground truth.
//!
//! A [`PlantSpec`] fixes a token grid, a target object made of rectangles and
//! the statistics of the attention and feature dumps. [`generate`] turns it
//! into a [`DumpBundle`] plus the pixel-level ground-truth mask:
//!
//! * features are unit vectors near one of two cluster means separated by an
//!   angle `feat_separation`, perturbed by `feat_noise`, then multiplied by a
//!   random positive magnitude so the pipeline has to normalize them;
//! * image-to-prompt attention gives the attended part of the object (the
//!   first `partial_coverage` fraction of its tokens in raster order)
//!   `attn_snr` times the mean row mass of every other token;
//! * image-to-image affinity is the identity, uniform, or object-coherent.
//!   The object-coherent mode mixes a region term (each token spreads half of
//!   its affinity evenly over its own region) with a spatial-locality term
//!   (the other half over nearby tokens by a Gaussian kernel), so propagation
//!   fills the whole object but also bleeds across its border.
//!
//! All randomness comes from ChaCha20 (`rand_chacha`), seeded with
//! `seed_from_u64(spec.seed)`; each quantity draws from its own stream
//! (`set_stream`), listed in [`streams`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, Matrix};
use crate::par;
use crate::tensor_io::{
    write_bundle, write_mask_pgm_file, AttentionBlock, DumpBundle, FeatureDump, SampleManifest,
};

/// Identifier stored with every spec.
pub const GENERATOR: &str = "chacha20";

/// Stream ids for [`ChaCha20Rng::set_stream`].
pub mod streams {
    pub const CLUSTER_MEANS: u64 = 0;
    pub const FEATURES: u64 = 1;
    pub const SHAPES: u64 = 2;
    /// Extra feature dump `k` uses `EXTRA_FEATURES + k`.
    pub const EXTRA_FEATURES: u64 = 16;
    /// Block `b` uses `ATTENTION + 2 b` for attn_vp and `ATTENTION + 2 b + 1` for attn_vv.
    pub const ATTENTION: u64 = 1024;
}

/// Share of each object-coherent affinity row spread over the token's region.
const REGION_SHARE: f64 = 0.5;
/// Affinity between tokens of different regions, relative to the region term.
const CROSS_REGION: f64 = 0.02;
/// Gaussian length scale of the locality term, in tokens.
const LOCALITY_SCALE: f64 = 1.5;

/// Axis-aligned rectangle in token units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.top && r < self.top + self.height && c >= self.left && c < self.left + self.width
    }

    fn fits(&self, grid: Grid) -> bool {
        self.height > 0
            && self.width > 0
            && self.top + self.height <= grid.height
            && self.left + self.width <= grid.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AffinityMode {
    #[default]
    Identity,
    ObjectCoherent,
    Uniform,
}

/// An additional feature dump at another `(timestep, block)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureCell {
    pub timestep: u32,
    pub block: usize,
    pub feat_separation: f64,
    pub feat_noise: f64,
}

fn default_generator() -> String {
    GENERATOR.to_owned()
}

fn default_blocks() -> usize {
    2
}

fn default_feature_block() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub grid: Grid,
    pub image_size: Grid,
    pub n_prompt: usize,
    pub feature_dim: usize,
    #[serde(default = "default_blocks")]
    pub n_blocks: usize,
    pub shape: Vec<Rect>,
    #[serde(default)]
    pub distractor: Vec<Rect>,
    pub attn_snr: f64,
    /// Angle between the two cluster means, radians.
    pub feat_separation: f64,
    pub feat_noise: f64,
    pub affinity_mode: AffinityMode,
    pub partial_coverage: f64,
    #[serde(default = "default_feature_block")]
    pub feature_block: usize,
    #[serde(default)]
    pub extra_features: Vec<FeatureCell>,
    pub seed: u64,
    #[serde(default = "default_generator")]
    pub generator: String,
}

impl PlantSpec {
    /// A 16x16-token, 128x128-pixel plant with a single rectangle.
    pub fn example(seed: u64) -> Self {
        Self {
            grid: Grid::new(16, 16),
            image_size: Grid::new(128, 128),
            n_prompt: 8,
            feature_dim: 32,
            n_blocks: 2,
            shape: vec![Rect {
                top: 4,
                left: 5,
                height: 6,
                width: 7,
            }],
            distractor: vec![],
            attn_snr: 10.0,
            feat_separation: std::f64::consts::PI,
            feat_noise: 0.1,
            affinity_mode: AffinityMode::Identity,
            partial_coverage: 1.0,
            feature_block: default_feature_block(),
            extra_features: vec![],
            seed,
            generator: default_generator(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.generator != GENERATOR {
            return bad(format!("unknown generator {:?}", self.generator));
        }
        if self.grid.len() < 2 {
            return bad(format!("grid {} needs at least two tokens", self.grid));
        }
        if self.image_size.height < self.grid.height || self.image_size.width < self.grid.width {
            return bad(format!(
                "image {} smaller than grid {}",
                self.image_size, self.grid
            ));
        }
        if self.n_prompt == 0 || self.n_blocks == 0 {
            return bad("n_prompt and n_blocks must be positive".into());
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2".into());
        }
        if self.shape.is_empty() {
            return bad("planted shape has no rectangles".into());
        }
        if let Some(r) = self
            .shape
            .iter()
            .chain(&self.distractor)
            .find(|r| !r.fits(self.grid))
        {
            return bad(format!("rectangle {r:?} exceeds grid {}", self.grid));
        }
        if !(self.attn_snr >= 1.0 && self.attn_snr.is_finite()) {
            return bad(format!("attn_snr must be >= 1, got {}", self.attn_snr));
        }
        if !(self.partial_coverage > 0.0 && self.partial_coverage <= 1.0) {
            return bad(format!(
                "partial_coverage must lie in (0, 1], got {}",
                self.partial_coverage
            ));
        }
        let check_feat = |sep: f64, noise: f64| -> Result<()> {
            if !(sep >= 0.0 && sep.is_finite() && noise >= 0.0 && noise.is_finite()) {
                return bad(format!("invalid feature separation {sep} / noise {noise}"));
            }
            Ok(())
        };
        check_feat(self.feat_separation, self.feat_noise)?;
        for cell in &self.extra_features {
            check_feat(cell.feat_separation, cell.feat_noise)?;
            if cell.timestep == 0 && cell.block == self.feature_block {
                return bad("extra feature cell duplicates the primary dump".into());
            }
        }
        Ok(())
    }

    /// Per-token region: 0 background, 1 target, 2 distractor.
    pub fn regions(&self) -> Vec<u8> {
        let g = self.grid;
        let mut out = vec![0u8; g.len()];
        for r in 0..g.height {
            for c in 0..g.width {
                if self.shape.iter().any(|s| s.contains(r, c)) {
                    out[g.index(r, c)] = 1;
                } else if self.distractor.iter().any(|s| s.contains(r, c)) {
                    out[g.index(r, c)] = 2;
                }
            }
        }
        out
    }

    /// Target tokens that receive boosted prompt attention.
    pub fn attended(&self) -> Vec<bool> {
        let regions = self.regions();
        let n_obj = regions.iter().filter(|&&r| r == 1).count();
        let keep = ((self.partial_coverage * n_obj as f64).ceil() as usize).clamp(1, n_obj);
        let mut seen = 0;
        regions
            .iter()
            .map(|&r| {
                if r == 1 && seen < keep {
                    seen += 1;
                    true
                } else {
                    false
                }
            })
            .collect()
    }

    /// The target rasterized at image resolution, pixel centres mapped to tokens.
    pub fn ground_truth(&self) -> Mask {
        let (img, g) = (self.image_size, self.grid);
        let regions = self.regions();
        Mask::from_fn(img, |y, x| {
            let r = (((y as f64 + 0.5) * g.height as f64 / img.height as f64) as usize)
                .min(g.height - 1);
            let c =
                (((x as f64 + 0.5) * g.width as f64 / img.width as f64) as usize).min(g.width - 1);
            regions[g.index(r, c)] == 1
        })
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_vec(rng: &mut ChaCha20Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Two unit vectors at angle `separation`: (background, foreground).
fn cluster_means(seed: u64, dim: usize, separation: f64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = rng_for(seed, streams::CLUSTER_MEANS);
    let mut u = normal_vec(&mut rng, dim);
    normalize(&mut u);
    let mut w = normal_vec(&mut rng, dim);
    let proj: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
    w.iter_mut().zip(&u).for_each(|(x, a)| *x -= proj * a);
    normalize(&mut w);
    let fg = u
        .iter()
        .zip(&w)
        .map(|(a, b)| separation.cos() * a + separation.sin() * b)
        .collect();
    (u, fg)
}

fn features(spec: &PlantSpec, stream: u64, separation: f64, noise: f64) -> Matrix {
    let dim = spec.feature_dim;
    let (bg_mean, fg_mean) = cluster_means(spec.seed, dim, separation);
    let regions = spec.regions();
    let mut rng = rng_for(spec.seed, stream);
    let scale = noise / (dim as f64).sqrt();
    let mut data = Vec::with_capacity(regions.len() * dim);
    for &region in &regions {
        let mean = if region == 0 { &bg_mean } else { &fg_mean };
        let mut v: Vec<f64> = mean
            .iter()
            .map(|m| m + scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        normalize(&mut v);
        let magnitude = rng.random_range(0.5..2.0);
        data.extend(v.iter().map(|x| (x * magnitude) as f32));
    }
    Matrix::new(regions.len(), dim, data).expect("sized by construction")
}

fn prompt_attention(spec: &PlantSpec, attended: &[bool], stream: u64) -> Matrix {
    let mut rng = rng_for(spec.seed, stream);
    let n_p = spec.n_prompt;
    let mut data = Vec::with_capacity(attended.len() * n_p);
    for &hot in attended {
        let level = if hot { spec.attn_snr } else { 1.0 };
        let mass = 0.05 * level * rng.random_range(0.5..1.5);
        let weights: Vec<f64> = (0..n_p).map(|_| rng.random_range(0.05..1.05)).collect();
        let total: f64 = weights.iter().sum();
        data.extend(weights.iter().map(|w| (mass * w / total) as f32));
    }
    Matrix::new(attended.len(), n_p, data).expect("sized by construction")
}

fn affinity(spec: &PlantSpec, regions: &[u8], stream: u64) -> Matrix {
    let n = regions.len();
    match spec.affinity_mode {
        AffinityMode::Identity => Matrix::identity(n),
        AffinityMode::Uniform => Matrix::new(n, n, vec![1.0 / n as f32; n * n]).expect("square"),
        AffinityMode::ObjectCoherent => {
            let g = spec.grid;
            let mut sizes = [0usize; 3];
            regions.iter().for_each(|&r| sizes[r as usize] += 1);
            let mut rng = rng_for(spec.seed, stream);
            let jitter: Vec<f64> = (0..n * n).map(|_| rng.random_range(0.5..1.5)).collect();
            let two_s2 = 2.0 * LOCALITY_SCALE * LOCALITY_SCALE;
            let mut out = Matrix::zeros(n, n);
            par::fill_rows(out.as_mut_slice(), n, |i, row| {
                let (ri, ci) = ((i / g.width) as f64, (i % g.width) as f64);
                let kernel: Vec<f64> = (0..n)
                    .map(|j| {
                        let (rj, cj) = ((j / g.width) as f64, (j % g.width) as f64);
                        let d2 = (ri - rj).powi(2) + (ci - cj).powi(2);
                        (-d2 / two_s2).exp()
                    })
                    .collect();
                let kernel_total: f64 = kernel.iter().sum();
                let own = regions[i];
                let own_size = sizes[own as usize] as f64;
                for (j, a) in row.iter_mut().enumerate() {
                    let region = if regions[j] == own {
                        1.0 / own_size
                    } else {
                        CROSS_REGION / n as f64
                    };
                    let local = kernel[j] / kernel_total;
                    let v = REGION_SHARE * region + (1.0 - REGION_SHARE) * local;
                    *a = (v * jitter[i * n + j]) as f32;
                }
            });
            out
        }
    }
}

/// Builds the bundle and ground truth for `spec`. Pure in `spec`.
pub fn generate(spec: &PlantSpec) -> Result<(DumpBundle, Mask)> {
    spec.validate()?;
    let regions = spec.regions();
    let attended = spec.attended();
    let blocks = (0..spec.n_blocks)
        .map(|b| {
            let base = streams::ATTENTION + 2 * b as u64;
            AttentionBlock {
                index: b,
                attn_vp: prompt_attention(spec, &attended, base),
                attn_vv: affinity(spec, &regions, base + 1),
            }
        })
        .collect();
    let feature = FeatureDump {
        block: spec.feature_block,
        timestep: 0,
        data: features(
            spec,
            streams::FEATURES,
            spec.feat_separation,
            spec.feat_noise,
        ),
    };
    let extra_features = spec
        .extra_features
        .iter()
        .enumerate()
        .map(|(k, cell)| FeatureDump {
            block: cell.block,
            timestep: cell.timestep,
            data: features(
                spec,
                streams::EXTRA_FEATURES + k as u64,
                cell.feat_separation,
                cell.feat_noise,
            ),
        })
        .collect();
    let mut presets = BTreeMap::new();
    if spec.n_blocks >= 2 {
        let half = spec.n_blocks / 2;
        presets.insert("shallow".to_owned(), (0..half).collect());
        presets.insert("deep".to_owned(), (half..spec.n_blocks).collect());
    }
    let bundle = DumpBundle {
        grid: spec.grid,
        n_prompt: spec.n_prompt,
        image_size: spec.image_size,
        attention_timestep: 0,
        blocks,
        feature,
        extra_features,
        presets,
        prompt_includes_padding: Some(false),
        instruction: Some(crate::harness::build_instruction(PLANT_EXPRESSION)?),
    };
    bundle.validate()?;
    Ok((bundle, spec.ground_truth()))
}

/// Referring expression written into synthetic manifests.
pub const PLANT_EXPRESSION: &str = "planted object";

/// Draws random object layouts for a family of plants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSampler {
    pub min_size: usize,
    pub max_size: usize,
    /// Rectangles per object are drawn from `1..=max_parts`.
    pub max_parts: usize,
}

/// A reproducible set of plants sharing one template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub name: String,
    pub count: usize,
    pub base_seed: u64,
    pub objects: ObjectSampler,
    /// `shape` is replaced per sample; `seed` is `base_seed + i`.
    pub template: PlantSpec,
}

impl SuiteSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|source| Error::Json {
            context: "suite spec".into(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    /// A suite shipped with the crate: `ablation`, `recovery-full` or `recovery-partial`.
    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "ablation" => include_str!("../suites/ablation.json"),
            "recovery-full" => include_str!("../suites/recovery_full.json"),
            "recovery-partial" => include_str!("../suites/recovery_partial.json"),
            other => return Err(Error::Config(format!("unknown builtin suite {other:?}"))),
        };
        Self::from_json(text)
    }

    pub fn plants(&self) -> Result<Vec<PlantSpec>> {
        let o = &self.objects;
        let g = self.template.grid;
        if o.min_size == 0
            || o.min_size > o.max_size
            || o.max_size > g.height.min(g.width)
            || o.max_parts == 0
        {
            return Err(Error::Config(format!(
                "invalid object sampler {o:?} for grid {g}"
            )));
        }
        Ok((0..self.count)
            .map(|i| {
                let seed = self.base_seed.wrapping_add(i as u64);
                let mut rng = rng_for(seed, streams::SHAPES);
                let parts = rng.random_range(1..=o.max_parts);
                let shape = (0..parts)
                    .map(|_| {
                        let height = rng.random_range(o.min_size..=o.max_size);
                        let width = rng.random_range(o.min_size..=o.max_size);
                        Rect {
                            top: rng.random_range(0..=g.height - height),
                            left: rng.random_range(0..=g.width - width),
                            height,
                            width,
                        }
                    })
                    .collect();
                PlantSpec {
                    shape,
                    seed,
                    ..self.template.clone()
                }
            })
            .collect())
    }
}

/// Writes `plants` as bundle directories, PGM masks and a manifest under `out`.
///
/// Returns the manifest entries, with paths relative to `out`.
pub fn write_plants(
    plants: &[PlantSpec],
    out: impl AsRef<Path>,
    prefix: &str,
) -> Result<Vec<SampleManifest>> {
    let out = out.as_ref();
    let masks = out.join("masks");
    fs::create_dir_all(&masks).map_err(|e| Error::file(&masks, e))?;
    let entries = par::map_ordered(
        &plants.iter().enumerate().collect::<Vec<_>>(),
        |&(i, spec)| {
            let id = format!("{prefix}{i:04}");
            let (bundle, gt) = generate(spec)?;
            let bundle_rel = PathBuf::from("bundles").join(&id);
            let mask_rel = PathBuf::from("masks").join(format!("{id}.pgm"));
            write_bundle(&bundle, out.join(&bundle_rel))?;
            write_mask_pgm_file(&gt, out.join(&mask_rel))?;
            Ok(SampleManifest {
                sample_id: id,
                expression: PLANT_EXPRESSION.to_owned(),
                bundle_path: bundle_rel,
                gt_mask_path: Some(mask_rel),
                image_size: spec.image_size,
            })
        },
    );
    let entries = entries.into_iter().collect::<Result<Vec<_>>>()?;
    let manifest = out.join("manifest.jsonl");
    let f = fs::File::create(&manifest).map_err(|e| Error::file(&manifest, e))?;
    crate::tensor_io::write_manifest(&entries, std::io::BufWriter::new(f))?;
    Ok(entries)
}
