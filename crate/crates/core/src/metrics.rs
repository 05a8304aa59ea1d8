//! Intersection over union and its two dataset aggregates.
//!
//! oIoU divides summed intersections by summed unions, so large objects
//! weigh more; mIoU averages per-sample IoU.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::Mask;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouRecord {
    #[serde(skip)]
    pub sample_id: String,
    pub intersection: u64,
    pub union: u64,
    pub iou: f64,
    /// Both masks empty; `iou` is 1 by convention.
    pub empty_union: bool,
}

pub fn iou(sample_id: &str, pred: &Mask, gt: &Mask) -> Result<IouRecord> {
    if pred.grid() != gt.grid() {
        return Err(Error::Validation(format!(
            "prediction is {} but ground truth is {}",
            pred.grid(),
            gt.grid()
        )));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        inter += u64::from(p & g);
        union += u64::from(p | g);
    }
    Ok(IouRecord {
        sample_id: sample_id.to_owned(),
        intersection: inter,
        union,
        iou: if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        },
        empty_union: union == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub oiou: f64,
    pub miou: f64,
    pub samples: usize,
}

/// oIoU and mIoU over `records`.
///
/// Per-sample values are averaged in sorted order with a running mean, so
/// the result does not depend on record order and identical records average
/// to exactly their common value.
pub fn aggregate(records: &[IouRecord]) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(Error::Validation(
            "cannot aggregate zero IoU records".into(),
        ));
    }
    let inter: u128 = records.iter().map(|r| u128::from(r.intersection)).sum();
    let union: u128 = records.iter().map(|r| u128::from(r.union)).sum();
    let oiou = if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    };
    let mut ious: Vec<f64> = records.iter().map(|r| r.iou).collect();
    ious.sort_by(f64::total_cmp);
    let mut miou = 0.0;
    for (k, &x) in ious.iter().enumerate() {
        miou += (x - miou) / (k + 1) as f64;
    }
    Ok(Aggregate {
        oiou,
        miou,
        samples: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use proptest::prelude::*;

    fn rec(i: u64, u: u64) -> IouRecord {
        IouRecord {
            sample_id: String::new(),
            intersection: i,
            union: u,
            iou: i as f64 / u as f64,
            empty_union: false,
        }
    }

    #[test]
    fn perfect_and_disjoint() {
        let a = Mask::from_fn(Grid::new(4, 4), |r, c| r < 2 && c < 2);
        let b = Mask::from_fn(Grid::new(4, 4), |r, c| r >= 2 && c >= 2);
        assert_eq!(iou("s", &a, &a).unwrap().iou, 1.0);
        assert_eq!(iou("s", &a, &b).unwrap().iou, 0.0);
    }

    #[test]
    fn left_half_vs_top_half_is_one_third() {
        for n in [2usize, 4, 10] {
            let left = Mask::from_fn(Grid::new(n, n), |_, c| c < n / 2);
            let top = Mask::from_fn(Grid::new(n, n), |r, _| r < n / 2);
            let r = iou("s", &left, &top).unwrap();
            assert_eq!(r.intersection as usize, n * n / 4);
            assert_eq!(r.union as usize, 3 * n * n / 4);
            assert_eq!(r.iou, 1.0 / 3.0);
        }
    }

    #[test]
    fn empty_union_convention() {
        let z = Mask::zeros(Grid::new(2, 2));
        let r = iou("s", &z, &z).unwrap();
        assert_eq!(r.iou, 1.0);
        assert!(r.empty_union);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            iou(
                "s",
                &Mask::zeros(Grid::new(2, 2)),
                &Mask::zeros(Grid::new(2, 3))
            ),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn hand_computed_aggregate() {
        let a = aggregate(&[rec(1, 2), rec(3, 4)]).unwrap();
        assert_eq!(a.oiou, 4.0 / 6.0);
        assert_eq!(a.miou, 0.625);
    }

    #[test]
    fn single_record() {
        let a = aggregate(&[rec(2, 7)]).unwrap();
        assert_eq!(a.oiou, 2.0 / 7.0);
        assert_eq!(a.miou, 2.0 / 7.0);
    }

    #[test]
    fn size_weighting() {
        let a = aggregate(&[rec(10_000, 10_000), rec(0, 10)]).unwrap();
        assert!(a.oiou > a.miou);
        assert!((a.oiou - 10_000.0 / 10_010.0).abs() < 1e-15);
        assert_eq!(a.miou, 0.5);
    }

    #[test]
    fn empty_input() {
        assert!(aggregate(&[]).is_err());
    }

    proptest! {
        #[test]
        fn aggregates_are_bounded_and_order_free(
            pairs in prop::collection::vec((0u64..500, 1u64..500), 1..40),
            rot in 0usize..40,
        ) {
            let records: Vec<IouRecord> = pairs
                .iter()
                .map(|&(i, extra)| rec(i, i + extra))
                .collect();
            let a = aggregate(&records).unwrap();
            prop_assert!((0.0..=1.0).contains(&a.oiou));
            prop_assert!((0.0..=1.0).contains(&a.miou));
            let mut shuffled = records.clone();
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            prop_assert_eq!(aggregate(&shuffled).unwrap(), a);
        }

        #[test]
        fn identical_records_average_exactly(i in 0u64..1000, extra in 1u64..1000, n in 1usize..200) {
            let records = vec![rec(i, i + extra); n];
            let a = aggregate(&records).unwrap();
            prop_assert_eq!(a.miou, records[0].iou);
        }

        #[test]
        fn equal_unions_make_aggregates_agree(is in prop::collection::vec(0u64..=64, 1..30)) {
            let records: Vec<IouRecord> = is.iter().map(|&i| rec(i, 64)).collect();
            let a = aggregate(&records).unwrap();
            prop_assert!((a.oiou - a.miou).abs() < 1e-12);
        }
    }
}
