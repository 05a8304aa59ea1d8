//! Coarse and refined attention maps.
//!
//! The coarse map (CAM) is the prompt attention mass each image token
//! receives, summed over the selected blocks and min-max normalized. The
//! refined map (RAM) first diffuses each block's mass one step along the
//! row-normalized image-to-image affinity, i.e. a random-walk transition
//! `T = D(A 1)^-1 A`, before the same sum and normalization.
//!
//! `T` is never materialized: [`transition_apply`] computes `T v` directly
//! from the affinity rows.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Matrix};
use crate::par;
use crate::tensor_io::{AttentionBlock, DumpBundle};

/// Stabilizer for transition row sums.
pub const DEFAULT_EPS: f64 = 1e-8;

/// A real-valued token-grid map with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialMap {
    grid: Grid,
    values: Vec<f64>,
}

impl SpatialMap {
    /// Wraps values that are already normalized to `[0, 1]`.
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::shape("spatial map", grid.len(), values.len()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(
                "spatial map values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[self.grid.index(row, col)]
    }

    /// 8-bit greyscale rendering, `round(v * 255)`.
    pub fn to_gray(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// `(m - min) / (max - min)`; a constant map becomes all zeros.
pub fn minmax_normalize(grid: Grid, values: Vec<f64>) -> Result<SpatialMap> {
    if values.len() != grid.len() {
        return Err(Error::shape("spatial map", grid.len(), values.len()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("spatial map before normalization".into()));
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let values = if range > 0.0 && range.is_finite() {
        values.into_iter().map(|v| (v - lo) / range).collect()
    } else if range > 0.0 {
        // Range overflowed f64; rescale before subtracting.
        let (lo, hi) = (lo / 2.0, hi / 2.0);
        values
            .into_iter()
            .map(|v| ((v / 2.0 - lo) / (hi - lo)).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; values.len()]
    };
    Ok(SpatialMap { grid, values })
}

/// Which attention blocks contribute to a map.
///
/// `shallow` and `deep` are resolved through the bundle's `presets`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum BlockSelection {
    #[default]
    All,
    Shallow,
    Deep,
    Explicit(Vec<usize>),
}

impl BlockSelection {
    pub fn resolve<'a>(&self, bundle: &'a DumpBundle) -> Result<Vec<&'a AttentionBlock>> {
        let indices: Vec<usize> =
            match self {
                BlockSelection::All => return Ok(bundle.blocks.iter().collect()),
                BlockSelection::Shallow | BlockSelection::Deep => {
                    let name = self.to_string();
                    bundle.presets.get(&name).cloned().ok_or_else(|| {
                        Error::Config(format!("bundle defines no {name:?} preset"))
                    })?
                }
                BlockSelection::Explicit(idx) => idx.clone(),
            };
        if indices.is_empty() {
            return Err(Error::Config("empty block selection".into()));
        }
        let mut sorted = indices;
        sorted.sort_unstable();
        sorted.dedup();
        sorted
            .into_iter()
            .map(|i| {
                bundle
                    .block(i)
                    .ok_or_else(|| Error::Config(format!("block {i} is not in the bundle")))
            })
            .collect()
    }
}

impl fmt::Display for BlockSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockSelection::All => f.write_str("all"),
            BlockSelection::Shallow => f.write_str("shallow"),
            BlockSelection::Deep => f.write_str("deep"),
            BlockSelection::Explicit(idx) => {
                let parts: Vec<String> = idx.iter().map(usize::to_string).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

impl FromStr for BlockSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "all" => Ok(BlockSelection::All),
            "shallow" => Ok(BlockSelection::Shallow),
            "deep" => Ok(BlockSelection::Deep),
            "" => Err(Error::Config("empty block selection".into())),
            list => list
                .split(',')
                .map(|p| {
                    p.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad block index {p:?}")))
                })
                .collect::<Result<Vec<_>>>()
                .map(BlockSelection::Explicit),
        }
    }
}

impl Serialize for BlockSelection {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockSelection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Attention mass per image token, `A_vp 1`.
pub fn prompt_mass(attn_vp: &Matrix) -> Vec<f64> {
    attn_vp.row_sums()
}

/// Computes `T v` for `T = D(A 1)^-1 A` without building `T`.
///
/// Row `i` yields `(A v)_i / max(rowsum_i, eps)`; a row with zero total
/// affinity yields 0.
pub fn transition_apply(attn_vv: &Matrix, v: &[f64], eps: f64) -> Result<Vec<f64>> {
    let n = attn_vv.rows();
    if attn_vv.cols() != n {
        return Err(Error::shape(
            "affinity matrix",
            "square",
            format!("{}x{}", n, attn_vv.cols()),
        ));
    }
    if v.len() != n {
        return Err(Error::shape("transition input", n, v.len()));
    }
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Config(format!(
            "eps must be finite and >= 0, got {eps}"
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("transition input".into()));
    }
    let rows: Vec<Result<f64>> = par::map_indices(n, |i| {
        let row = attn_vv.row(i);
        let mut mass = 0.0f64;
        let mut acc = 0.0f64;
        for (j, (&a, &x)) in row.iter().zip(v).enumerate() {
            if a.is_nan() {
                return Err(Error::Numeric(format!("affinity row {i}")));
            }
            if a < 0.0 {
                return Err(Error::NegativeAttention {
                    context: "affinity matrix".into(),
                    row: i,
                    col: j,
                    value: a,
                });
            }
            let a = f64::from(a);
            mass += a;
            acc += a * x;
        }
        let denom = mass.max(eps);
        Ok(if denom > 0.0 { acc / denom } else { 0.0 })
    });
    rows.into_iter().collect()
}

fn sum_blocks(grid: Grid, contributions: Vec<Result<Vec<f64>>>) -> Result<SpatialMap> {
    let mut total = vec![0.0f64; grid.len()];
    // Fixed block order keeps the reduction reproducible.
    for c in contributions {
        for (t, x) in total.iter_mut().zip(c?) {
            *t += x;
        }
    }
    minmax_normalize(grid, total)
}

/// Coarse attention map over the selected blocks.
pub fn aggregate_cam(bundle: &DumpBundle, selection: &BlockSelection) -> Result<SpatialMap> {
    let blocks = selection.resolve(bundle)?;
    let contributions = par::map_ordered(&blocks, |b| Ok(prompt_mass(&b.attn_vp)));
    sum_blocks(bundle.grid, contributions)
}

/// Refined attention map over the selected blocks.
pub fn aggregate_ram(
    bundle: &DumpBundle,
    selection: &BlockSelection,
    eps: f64,
) -> Result<SpatialMap> {
    let blocks = selection.resolve(bundle)?;
    let contributions = par::map_ordered(&blocks, |b| {
        transition_apply(&b.attn_vv, &prompt_mass(&b.attn_vp), eps)
    });
    sum_blocks(bundle.grid, contributions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_io::FeatureDump;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn bundle(blocks: Vec<(Matrix, Matrix)>, grid: Grid, n_prompt: usize) -> DumpBundle {
        DumpBundle {
            grid,
            n_prompt,
            image_size: grid,
            attention_timestep: 0,
            blocks: blocks
                .into_iter()
                .enumerate()
                .map(|(index, (attn_vp, attn_vv))| AttentionBlock {
                    index,
                    attn_vp,
                    attn_vv,
                })
                .collect(),
            feature: FeatureDump {
                block: 0,
                timestep: 0,
                data: Matrix::zeros(grid.len(), 1),
            },
            extra_features: vec![],
            presets: BTreeMap::new(),
            prompt_includes_padding: None,
            instruction: None,
        }
    }

    /// attn_vp whose rows sum to `mass`, split unevenly over two prompt tokens.
    fn vp_with_mass(mass: &[f32]) -> Matrix {
        Matrix::from_fn(mass.len(), 2, |r, c| {
            if c == 0 {
                mass[r] * 0.25
            } else {
                mass[r] * 0.75
            }
        })
    }

    #[test]
    fn normalize_constant_is_zero() {
        let m = minmax_normalize(Grid::new(2, 2), vec![2.0; 4]).unwrap();
        assert_eq!(m.values(), &[0.0; 4]);
    }

    #[test]
    fn normalize_direct_formula() {
        let m = minmax_normalize(Grid::new(2, 2), vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(m.values(), &[0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn normalize_rejects_nan() {
        assert!(matches!(
            minmax_normalize(Grid::new(1, 2), vec![0.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            minmax_normalize(Grid::new(1, 2), vec![0.0, f64::INFINITY]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn normalize_handles_huge_range() {
        let m = minmax_normalize(Grid::new(1, 3), vec![-f64::MAX, 0.0, f64::MAX]).unwrap();
        assert_eq!(m.values()[0], 0.0);
        assert_eq!(m.values()[2], 1.0);
        assert!((m.values()[1] - 0.5).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalize_preserves_order(values in prop::collection::vec(-1e6f64..1e6, 64)) {
            let m = minmax_normalize(Grid::new(8, 8), values.clone()).unwrap();
            let out = m.values();
            let distinct = values.iter().any(|&v| v != values[0]);
            if distinct {
                prop_assert_eq!(out.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
                prop_assert_eq!(out.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
            }
            for i in 0..64 {
                prop_assert!((0.0..=1.0).contains(&out[i]));
                for j in 0..64 {
                    if values[i] < values[j] {
                        prop_assert!(out[i] <= out[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn cam_single_hot_token() {
        let vp = Matrix::new(4, 2, vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let b = bundle(vec![(vp, Matrix::identity(4))], Grid::new(2, 2), 2);
        let cam = aggregate_cam(&b, &BlockSelection::All).unwrap();
        assert_eq!(cam.values(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn cam_two_identical_blocks() {
        let vp = vp_with_mass(&[3.0, 1.0, 0.0, 2.0]);
        let one = bundle(vec![(vp.clone(), Matrix::identity(4))], Grid::new(2, 2), 2);
        let two = bundle(
            vec![(vp.clone(), Matrix::identity(4)), (vp, Matrix::identity(4))],
            Grid::new(2, 2),
            2,
        );
        assert_eq!(
            aggregate_cam(&one, &BlockSelection::All).unwrap(),
            aggregate_cam(&two, &BlockSelection::All).unwrap()
        );
    }

    #[test]
    fn cam_sums_blocks_before_normalizing() {
        // Raw sums [4, 2, 2, 2]: the three-way tie sits at the minimum.
        let a = vp_with_mass(&[3.0, 1.0, 0.0, 2.0]);
        let b = vp_with_mass(&[1.0, 1.0, 2.0, 0.0]);
        let bun = bundle(
            vec![(a, Matrix::identity(4)), (b, Matrix::identity(4))],
            Grid::new(2, 2),
            2,
        );
        let cam = aggregate_cam(&bun, &BlockSelection::All).unwrap();
        assert_eq!(cam.values(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn explicit_selection() {
        let a = vp_with_mass(&[1.0, 0.0, 0.0, 0.0]);
        let b = vp_with_mass(&[0.0, 0.0, 0.0, 1.0]);
        let bun = bundle(
            vec![(a, Matrix::identity(4)), (b, Matrix::identity(4))],
            Grid::new(2, 2),
            2,
        );
        let cam = aggregate_cam(&bun, &"1".parse().unwrap()).unwrap();
        assert_eq!(cam.values(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            aggregate_cam(&bun, &BlockSelection::Explicit(vec![])),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            aggregate_cam(&bun, &BlockSelection::Explicit(vec![7])),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            aggregate_cam(&bun, &BlockSelection::Deep),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn presets_resolve() {
        let a = vp_with_mass(&[1.0, 0.0, 0.0, 0.0]);
        let b = vp_with_mass(&[0.0, 0.0, 0.0, 1.0]);
        let mut bun = bundle(
            vec![(a, Matrix::identity(4)), (b, Matrix::identity(4))],
            Grid::new(2, 2),
            2,
        );
        bun.presets.insert("shallow".into(), vec![0]);
        bun.presets.insert("deep".into(), vec![1]);
        let s = aggregate_cam(&bun, &BlockSelection::Shallow).unwrap();
        let d = aggregate_cam(&bun, &BlockSelection::Deep).unwrap();
        assert_eq!(s.values(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(d.values(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn selection_parsing() {
        assert_eq!(
            "all".parse::<BlockSelection>().unwrap(),
            BlockSelection::All
        );
        assert_eq!(
            "3, 1,2".parse::<BlockSelection>().unwrap(),
            BlockSelection::Explicit(vec![3, 1, 2])
        );
        assert!("x".parse::<BlockSelection>().is_err());
        let json = serde_json::to_string(&BlockSelection::Explicit(vec![1, 4])).unwrap();
        assert_eq!(json, "\"1,4\"");
        assert_eq!(
            serde_json::from_str::<BlockSelection>(&json).unwrap(),
            BlockSelection::Explicit(vec![1, 4])
        );
    }

    #[test]
    fn transition_identity_is_exact() {
        let v = vec![0.3, -2.5, 7.25, 1e-9];
        assert_eq!(transition_apply(&Matrix::identity(4), &v, 0.0).unwrap(), v);
        assert_eq!(
            transition_apply(&Matrix::identity(4), &v, DEFAULT_EPS).unwrap(),
            v
        );
    }

    #[test]
    fn transition_uniform_averages() {
        let ones = Matrix::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(
            transition_apply(&ones, &[2.0, 0.0], 0.0).unwrap(),
            vec![1.0, 1.0]
        );
    }

    #[test]
    fn transition_zero_row_propagates_zero() {
        let a = Matrix::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(
            transition_apply(&a, &[4.0, 2.0], 0.0).unwrap(),
            vec![0.0, 3.0]
        );
        assert_eq!(
            transition_apply(&a, &[4.0, 2.0], DEFAULT_EPS).unwrap(),
            vec![0.0, 3.0]
        );
    }

    #[test]
    fn transition_rejects_negative() {
        let a = Matrix::new(2, 2, vec![1.0, -0.1, 0.0, 1.0]).unwrap();
        assert!(matches!(
            transition_apply(&a, &[1.0, 1.0], 0.0),
            Err(Error::NegativeAttention { row: 0, col: 1, .. })
        ));
    }

    #[test]
    fn transition_rows_are_stochastic() {
        let n = 5;
        let a = Matrix::from_fn(n, n, |r, c| ((r * 7 + c * 3) % 5) as f32 * 0.37);
        let mut row_sums = vec![0.0; n];
        for j in 0..n {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            let col = transition_apply(&a, &e, DEFAULT_EPS).unwrap();
            for (s, x) in row_sums.iter_mut().zip(col) {
                *s += x;
            }
        }
        for (i, s) in row_sums.iter().enumerate() {
            assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
        }
    }

    #[test]
    fn ram_identity_equals_cam() {
        let a = vp_with_mass(&[0.3, 1.7, 0.2, 2.0]);
        let b = vp_with_mass(&[1.1, 0.4, 2.2, 0.0]);
        let bun = bundle(
            vec![(a, Matrix::identity(4)), (b, Matrix::identity(4))],
            Grid::new(2, 2),
            2,
        );
        assert_eq!(
            aggregate_ram(&bun, &BlockSelection::All, DEFAULT_EPS).unwrap(),
            aggregate_cam(&bun, &BlockSelection::All).unwrap()
        );
    }

    #[test]
    fn ram_uniform_affinity_is_degenerate() {
        let vp = vp_with_mass(&[0.3, 1.7, 0.2, 2.0]);
        let bun = bundle(
            vec![(vp, Matrix::new(4, 4, vec![0.25; 16]).unwrap())],
            Grid::new(2, 2),
            2,
        );
        let ram = aggregate_ram(&bun, &BlockSelection::All, DEFAULT_EPS).unwrap();
        assert_eq!(ram.values(), &[0.0; 4]);
    }

    #[test]
    fn gray_rendering() {
        let m = minmax_normalize(Grid::new(1, 3), vec![0.0, 1.0, 2.0]).unwrap();
        assert_eq!(m.to_gray(), vec![0, 128, 255]);
    }
}
