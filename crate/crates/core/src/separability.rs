//! Foreground/background separability of token features.
//!
//! The score is an isotropic two-class Fisher ratio
//! `J = |mu_fg - mu_bg|^2 / (var_fg + var_bg)` where each variance is the mean
//! squared distance of a class's features to its class mean.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask, Matrix};
use crate::localization::l2_normalize_features;
use crate::par;

/// A ground-truth mask reduced to the token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenReduction {
    pub mask: Mask,
    /// Either the source mask or its reduction holds only one class.
    pub single_class: bool,
}

/// Length of the overlap of two half-open integer intervals.
fn overlap(a0: u64, a1: u64, b0: u64, b1: u64) -> u64 {
    a1.min(b1).saturating_sub(a0.max(b0))
}

/// Reduces a pixel mask to `grid` by area fraction.
///
/// Token `(i, j)` covers the pixel rectangle `[i H/N_h, (i+1) H/N_h) x
/// [j W/N_w, (j+1) W/N_w)` and is foreground iff strictly more than half of
/// that area is foreground. Computed in exact integer arithmetic.
pub fn mask_to_grid(gt: &Mask, grid: Grid) -> Result<TokenReduction> {
    let img = gt.grid();
    if grid.is_empty() || img.height < grid.height || img.width < grid.width {
        return Err(Error::Config(format!(
            "cannot reduce a {img} mask to a {grid} grid"
        )));
    }
    let (h, w) = (img.height as u64, img.width as u64);
    let (nh, nw) = (grid.height as u64, grid.width as u64);
    // In scaled units the token cell spans H (rows) by W (cols) and a pixel
    // spans N_h by N_w.
    let cell_area = u128::from(h) * u128::from(w);
    let mask = Mask::from_fn(grid, |i, j| {
        let (ti0, ti1) = (i as u64 * h, (i as u64 + 1) * h);
        let (tj0, tj1) = (j as u64 * w, (j as u64 + 1) * w);
        let y0 = (ti0 / nh) as usize;
        let y1 = (ti1.div_ceil(nh) as usize).min(img.height);
        let x0 = (tj0 / nw) as usize;
        let x1 = (tj1.div_ceil(nw) as usize).min(img.width);
        let mut fg: u128 = 0;
        for y in y0..y1 {
            let oy = overlap(ti0, ti1, y as u64 * nh, (y as u64 + 1) * nh);
            if oy == 0 {
                continue;
            }
            for x in x0..x1 {
                if gt.get(y, x) {
                    let ox = overlap(tj0, tj1, x as u64 * nw, (x as u64 + 1) * nw);
                    fg += u128::from(oy) * u128::from(ox);
                }
            }
        }
        2 * fg > cell_area
    });
    let single_class = gt.is_single_class() || mask.is_single_class();
    Ok(TokenReduction { mask, single_class })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats {
    pub mean_fg: Vec<f64>,
    pub mean_bg: Vec<f64>,
    pub var_fg: f64,
    pub var_bg: f64,
    pub count_fg: usize,
    pub count_bg: usize,
}

#[derive(Debug, Clone)]
struct Running {
    n: usize,
    mean: Vec<f64>,
    m2: f64,
}

impl Running {
    fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: 0.0,
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for (m, &v) in self.mean.iter_mut().zip(x) {
            let delta = v - *m;
            *m += delta / n;
            self.m2 += delta * (v - *m);
        }
    }

    fn variance(&self) -> f64 {
        (self.m2 / self.n as f64).max(0.0)
    }
}

/// Class means and variances of token-major `features` (`dim` values per token).
pub fn class_stats(features: &[f64], dim: usize, mask: &Mask) -> Result<ClassStats> {
    let n = mask.grid().len();
    if dim == 0 || features.len() != n * dim {
        return Err(Error::shape(
            "class_stats features",
            format!("{n} tokens x {dim}"),
            features.len(),
        ));
    }
    let mut fg = Running::new(dim);
    let mut bg = Running::new(dim);
    for (k, x) in features.chunks_exact(dim).enumerate() {
        if mask.at(k) {
            fg.push(x);
        } else {
            bg.push(x);
        }
    }
    if fg.n == 0 || bg.n == 0 {
        return Err(Error::SingleClass(format!(
            "{} foreground and {} background tokens",
            fg.n, bg.n
        )));
    }
    Ok(ClassStats {
        var_fg: fg.variance(),
        var_bg: bg.variance(),
        count_fg: fg.n,
        count_bg: bg.n,
        mean_fg: fg.mean,
        mean_bg: bg.mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FisherScore {
    Finite(f64),
    /// Distinct means with zero spread in both classes.
    Infinite,
}

impl FisherScore {
    pub fn finite(self) -> Option<f64> {
        match self {
            FisherScore::Finite(v) => Some(v),
            FisherScore::Infinite => None,
        }
    }
}

pub fn fisher_score(stats: &ClassStats) -> FisherScore {
    let between: f64 = stats
        .mean_fg
        .iter()
        .zip(&stats.mean_bg)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if between == 0.0 {
        return FisherScore::Finite(0.0);
    }
    let within = stats.var_fg + stats.var_bg;
    if within == 0.0 {
        FisherScore::Infinite
    } else {
        FisherScore::Finite(between / within)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordFlag {
    Ok,
    SingleClass,
    Infinite,
}

impl RecordFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordFlag::Ok => "ok",
            RecordFlag::SingleClass => "single-class",
            RecordFlag::Infinite => "infinite",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparabilityRecord {
    pub sample_id: String,
    pub timestep: u32,
    pub block: usize,
    pub score: Option<f64>,
    pub flag: RecordFlag,
}

/// J for one feature dump against a pixel-level ground truth.
///
/// Features are L2-normalized before the statistics are taken.
pub fn feature_separability(
    feature: &Matrix,
    grid: Grid,
    gt: &Mask,
) -> Result<(Option<f64>, RecordFlag)> {
    let reduced = mask_to_grid(gt, grid)?;
    if reduced.single_class {
        return Ok((None, RecordFlag::SingleClass));
    }
    let normalized = l2_normalize_features(feature, grid)?;
    let stats = class_stats(normalized.values(), normalized.dim(), &reduced.mask)?;
    Ok(match fisher_score(&stats) {
        FisherScore::Finite(j) => (Some(j), RecordFlag::Ok),
        FisherScore::Infinite => (None, RecordFlag::Infinite),
    })
}

/// One `(sample, t, l)` cell to score.
#[derive(Debug, Clone, Copy)]
pub struct SeparabilityCell<'a> {
    pub sample_id: &'a str,
    pub timestep: u32,
    pub block: usize,
    pub feature: &'a Matrix,
    pub grid: Grid,
    pub gt: &'a Mask,
}

/// Scores every cell; output order matches input order.
pub fn score_cells(cells: &[SeparabilityCell<'_>]) -> Result<Vec<SeparabilityRecord>> {
    par::map_ordered(cells, |c| {
        let (score, flag) = feature_separability(c.feature, c.grid, c.gt)?;
        Ok(SeparabilityRecord {
            sample_id: c.sample_id.to_owned(),
            timestep: c.timestep,
            block: c.block,
            score,
            flag,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Some(Self {
            min: sorted[0],
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
            max: sorted[sorted.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub timestep: u32,
    pub block: usize,
    pub count: usize,
    pub single_class: usize,
    pub infinite: usize,
    /// `None` marks an empty cell: no finite score to summarize.
    pub stats: Option<BoxStats>,
}

/// Box-plot statistics per `(t, l)`, ordered by timestep then block.
pub fn summarize(records: &[SeparabilityRecord]) -> Vec<CellSummary> {
    let mut cells: BTreeMap<(u32, usize), Vec<&SeparabilityRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.timestep, r.block)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((timestep, block), rs)| {
            let scores: Vec<f64> = rs.iter().filter_map(|r| r.score).collect();
            CellSummary {
                timestep,
                block,
                count: scores.len(),
                single_class: rs
                    .iter()
                    .filter(|r| r.flag == RecordFlag::SingleClass)
                    .count(),
                infinite: rs.iter().filter(|r| r.flag == RecordFlag::Infinite).count(),
                stats: BoxStats::from_values(&scores),
            }
        })
        .collect()
}
