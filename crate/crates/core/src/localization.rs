//! From a refined attention map and one feature map to a pixel mask.
//!
//! The refined map is thresholded into a token-level proposal, the proposal
//! splits the unit-normalized features into foreground and background
//! prototypes by masked averaging, and every pixel takes the class whose
//! prototype has the larger inner product with the bilinearly upsampled
//! feature at that pixel.

use crate::attention::{aggregate_cam, aggregate_ram, SpatialMap};
use crate::config::{MapKind, RunConfig, UpsamplePath};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, Matrix};
use crate::par;
use crate::tensor_io::{DumpBundle, FeatureDump};

/// Rows with an L2 norm below this are zeroed instead of normalized.
pub const MIN_FEATURE_NORM: f64 = 1e-12;

/// Thresholds `map` with a strict `>` and repairs single-class results.
///
/// If nothing exceeds `tau` the first maximal token is switched on; if
/// everything does, the first minimal token is switched off.
pub fn binarize(map: &SpatialMap, tau: f64) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
    }
    let values = map.values();
    if values.len() < 2 {
        return Err(Error::Validation(
            "a proposal needs at least two tokens to hold both classes".into(),
        ));
    }
    let mut mask = Mask::from_values(
        map.grid(),
        values.iter().map(|&v| u8::from(v > tau)).collect(),
    )?;
    let on = mask.count_ones();
    if on == 0 {
        let mut best = 0;
        for (i, &v) in values.iter().enumerate() {
            if v > values[best] {
                best = i;
            }
        }
        mask.set(best, true);
    } else if on == values.len() {
        let mut worst = 0;
        for (i, &v) in values.iter().enumerate() {
            if v < values[worst] {
                worst = i;
            }
        }
        mask.set(worst, false);
    }
    Ok(mask)
}

/// Unit-norm features laid out token-major: `values[k * dim + d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFeatures {
    grid: Grid,
    dim: usize,
    values: Vec<f64>,
    zero_rows: Vec<usize>,
}

impl NormalizedFeatures {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn token(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    /// Tokens whose raw norm was too small to normalize.
    pub fn zero_rows(&self) -> &[usize] {
        &self.zero_rows
    }
}

pub fn l2_normalize_features(feature: &Matrix, grid: Grid) -> Result<NormalizedFeatures> {
    if feature.rows() != grid.len() {
        return Err(Error::shape(
            format!("feature rows for grid {grid}"),
            grid.len(),
            feature.rows(),
        ));
    }
    if feature.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("feature map".into()));
    }
    let dim = feature.cols();
    let mut values = Vec::with_capacity(feature.rows() * dim);
    let mut zero_rows = Vec::new();
    for k in 0..feature.rows() {
        let row = feature.row(k);
        let norm = row
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm < MIN_FEATURE_NORM {
            zero_rows.push(k);
            values.extend(std::iter::repeat_n(0.0, dim));
        } else {
            values.extend(row.iter().map(|&v| f64::from(v) / norm));
        }
    }
    Ok(NormalizedFeatures {
        grid,
        dim,
        values,
        zero_rows,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypePair {
    pub fg: Vec<f64>,
    pub bg: Vec<f64>,
}

/// Masked averages of the normalized features; not re-normalized.
pub fn compute_prototypes(features: &NormalizedFeatures, mask: &Mask) -> Result<PrototypePair> {
    if mask.grid() != features.grid {
        return Err(Error::shape("prototype mask", features.grid, mask.grid()));
    }
    let dim = features.dim;
    let mut fg = vec![0.0; dim];
    let mut bg = vec![0.0; dim];
    let (mut n_fg, mut n_bg) = (0usize, 0usize);
    for k in 0..features.grid.len() {
        let (acc, n) = if mask.at(k) {
            (&mut fg, &mut n_fg)
        } else {
            (&mut bg, &mut n_bg)
        };
        for (a, &x) in acc.iter_mut().zip(features.token(k)) {
            *a += x;
        }
        *n += 1;
    }
    if n_fg == 0 || n_bg == 0 {
        return Err(Error::SingleClass(format!(
            "prototype mask has {n_fg} foreground and {n_bg} background tokens"
        )));
    }
    fg.iter_mut().for_each(|v| *v /= n_fg as f64);
    bg.iter_mut().for_each(|v| *v /= n_bg as f64);
    Ok(PrototypePair { fg, bg })
}

/// Per-axis source taps for half-pixel-centre bilinear resampling.
#[derive(Debug, Clone)]
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl AxisTaps {
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let last = (src - 1) as f64;
        let mut taps = AxisTaps {
            lo: Vec::with_capacity(dst),
            hi: Vec::with_capacity(dst),
            frac: Vec::with_capacity(dst),
        };
        for x in 0..dst {
            let s = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = s.floor();
            let lo_i = lo as usize;
            taps.lo.push(lo_i);
            taps.hi.push((lo_i + 1).min(src - 1));
            taps.frac.push(s - lo);
        }
        taps
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

struct Resampler {
    src: Grid,
    channels: usize,
    rows: AxisTaps,
    cols: AxisTaps,
}

impl Resampler {
    fn new(src: Grid, channels: usize, target: Grid) -> Result<Self> {
        if src.is_empty() || channels == 0 {
            return Err(Error::Config(format!(
                "cannot resample an empty {src} grid with {channels} channels"
            )));
        }
        if target.height < src.height || target.width < src.width {
            return Err(Error::Config(format!(
                "upsampling target {target} is smaller than source {src}"
            )));
        }
        Ok(Self {
            src,
            channels,
            rows: AxisTaps::new(src.height, target.height),
            cols: AxisTaps::new(src.width, target.width),
        })
    }

    /// Writes output row `y` (`target.width * channels` values) into `out`.
    fn row(&self, data: &[f64], y: usize, out: &mut [f64]) {
        let c = self.channels;
        let w = self.src.width;
        let (r0, r1, fy) = (self.rows.lo[y], self.rows.hi[y], self.rows.frac[y]);
        for (x, px) in out.chunks_mut(c).enumerate() {
            let (c0, c1, fx) = (self.cols.lo[x], self.cols.hi[x], self.cols.frac[x]);
            let p00 = &data[(r0 * w + c0) * c..][..c];
            let p01 = &data[(r0 * w + c1) * c..][..c];
            let p10 = &data[(r1 * w + c0) * c..][..c];
            let p11 = &data[(r1 * w + c1) * c..][..c];
            for ch in 0..c {
                let top = lerp(p00[ch], p01[ch], fx);
                let bottom = lerp(p10[ch], p11[ch], fx);
                px[ch] = lerp(top, bottom, fy);
            }
        }
    }
}

/// Bilinear upsampling with half-pixel-centre alignment, channel-last.
///
/// Source coordinate for output `x` is `(x + 0.5) * src / dst - 0.5`, clamped
/// to the source extent; rows likewise.
pub fn upsample_bilinear(
    data: &[f64],
    grid: Grid,
    channels: usize,
    target: Grid,
) -> Result<Vec<f64>> {
    if data.len() != grid.len() * channels {
        return Err(Error::shape(
            "upsample input",
            grid.len() * channels,
            data.len(),
        ));
    }
    let rs = Resampler::new(grid, channels, target)?;
    let mut out = vec![0.0; target.len() * channels];
    par::fill_rows(&mut out, target.width * channels, |y, row| {
        rs.row(data, y, row)
    });
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-pixel argmax between the two prototypes; ties go to background.
pub fn classify(
    features: &NormalizedFeatures,
    prototypes: &PrototypePair,
    target: Grid,
    path: UpsamplePath,
) -> Result<Mask> {
    let dim = features.dim;
    if prototypes.fg.len() != dim || prototypes.bg.len() != dim {
        return Err(Error::shape(
            "prototype dimension",
            dim,
            format!("{}/{}", prototypes.fg.len(), prototypes.bg.len()),
        ));
    }
    let grid = features.grid;
    let rs_width = target.width;
    let mut labels = vec![0u8; target.len()];
    match path {
        UpsamplePath::Similarity => {
            let mut sims = Vec::with_capacity(grid.len() * 2);
            for k in 0..grid.len() {
                let f = features.token(k);
                sims.push(dot(&prototypes.fg, f));
                sims.push(dot(&prototypes.bg, f));
            }
            let rs = Resampler::new(grid, 2, target)?;
            par::fill_rows(&mut labels, rs_width, |y, out| {
                let mut row = vec![0.0; rs_width * 2];
                rs.row(&sims, y, &mut row);
                for (label, s) in out.iter_mut().zip(row.chunks_exact(2)) {
                    *label = u8::from(s[0] > s[1]);
                }
            });
        }
        UpsamplePath::Full => {
            let rs = Resampler::new(grid, dim, target)?;
            par::fill_rows(&mut labels, rs_width, |y, out| {
                let mut row = vec![0.0; rs_width * dim];
                rs.row(&features.values, y, &mut row);
                for (label, f) in out.iter_mut().zip(row.chunks_exact(dim)) {
                    *label = u8::from(dot(&prototypes.fg, f) > dot(&prototypes.bg, f));
                }
            });
        }
    }
    Mask::from_values(target, labels)
}

/// Thresholds an attention map after upsampling it to `target`.
///
/// This is the attention-only ablation; no single-class repair is applied.
pub fn binarize_upsampled(map: &SpatialMap, target: Grid, threshold: f64) -> Result<Mask> {
    let up = upsample_bilinear(map.values(), map.grid(), 1, target)?;
    Mask::from_values(
        target,
        up.iter().map(|&v| u8::from(v > threshold)).collect(),
    )
}

/// Picks the feature dump named by `config`.
pub fn select_feature<'a>(bundle: &'a DumpBundle, config: &RunConfig) -> Result<&'a FeatureDump> {
    let block = config.feature_block.unwrap_or(bundle.feature.block);
    bundle
        .feature_at(config.feature_timestep, block)
        .ok_or_else(|| {
            Error::Config(format!(
                "bundle has no feature dump for timestep {} block {}",
                config.feature_timestep, block
            ))
        })
}

/// Attention map named by `config.attention_map`.
pub fn attention_map(bundle: &DumpBundle, config: &RunConfig) -> Result<SpatialMap> {
    if bundle.attention_timestep != config.attention_timestep {
        return Err(Error::Config(format!(
            "bundle attention is from timestep {}, config asks for {}",
            bundle.attention_timestep, config.attention_timestep
        )));
    }
    match config.attention_map {
        MapKind::Ram => aggregate_ram(bundle, &config.attention_blocks, config.eps),
        MapKind::Cam => aggregate_cam(bundle, &config.attention_blocks),
    }
}

#[derive(Debug, Clone)]
pub struct Segmentation {
    pub mask: Mask,
    pub attention: SpatialMap,
    /// Token proposal; absent in binarize-only mode.
    pub proposal: Option<Mask>,
    pub prototypes: Option<PrototypePair>,
    pub zero_feature_rows: usize,
}

/// Full pipeline for one bundle.
pub fn segment(bundle: &DumpBundle, config: &RunConfig) -> Result<Segmentation> {
    config.validate()?;
    let attention = attention_map(bundle, config)?;
    segment_with_attention(bundle, attention, config)
}

/// Pipeline from an already computed attention map onward.
pub fn segment_with_attention(
    bundle: &DumpBundle,
    attention: SpatialMap,
    config: &RunConfig,
) -> Result<Segmentation> {
    if attention.grid() != bundle.grid {
        return Err(Error::shape("attention map", bundle.grid, attention.grid()));
    }
    if config.binarize_only {
        let mask = binarize_upsampled(&attention, bundle.image_size, config.binarize_threshold)?;
        return Ok(Segmentation {
            mask,
            attention,
            proposal: None,
            prototypes: None,
            zero_feature_rows: 0,
        });
    }
    let proposal = binarize(&attention, config.tau)?;
    let feature = select_feature(bundle, config)?;
    let features = l2_normalize_features(&feature.data, bundle.grid)?;
    let prototypes = compute_prototypes(&features, &proposal)?;
    let mask = classify(
        &features,
        &prototypes,
        bundle.image_size,
        config.upsample_path,
    )?;
    Ok(Segmentation {
        mask,
        attention,
        proposal: Some(proposal),
        prototypes: Some(prototypes),
        zero_feature_rows: features.zero_rows().len(),
    })
}
