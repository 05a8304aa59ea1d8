use editground::config::RunConfig;
use editground::localization::segment;
use editground::metrics::iou;
use editground::separability::{feature_separability, BoxStats};
use editground::synth::{generate, AffinityMode, PlantSpec};

const SEEDS: u64 = 50;

fn mean_iou(make: impl Fn(u64) -> PlantSpec) -> f64 {
    (0..SEEDS)
        .map(|s| {
            let (bundle, gt) = generate(&make(s)).unwrap();
            let seg = segment(&bundle, &RunConfig::default()).unwrap();
            iou("t", &seg.mask, &gt).unwrap().iou
        })
        .sum::<f64>()
        / SEEDS as f64
}

fn strictly_increasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[0] < w[1])
}

#[test]
fn mean_iou_grows_with_feature_separation() {
    let values: Vec<f64> = [0.2, 0.5, 1.0]
        .iter()
        .map(|&delta| {
            mean_iou(|s| PlantSpec {
                feat_separation: delta,
                feat_noise: 1.0,
                ..PlantSpec::example(s)
            })
        })
        .collect();
    assert!(strictly_increasing(&values), "{values:?}");
}

#[test]
fn mean_iou_grows_with_attention_snr() {
    let values: Vec<f64> = [1.0, 1.2, 2.0]
        .iter()
        .map(|&snr| {
            mean_iou(|s| PlantSpec {
                attn_snr: snr,
                affinity_mode: AffinityMode::ObjectCoherent,
                partial_coverage: 0.5,
                ..PlantSpec::example(s)
            })
        })
        .collect();
    assert!(strictly_increasing(&values), "{values:?}");
}

#[test]
fn median_separability_grows_with_feature_separation() {
    let medians: Vec<f64> = [0.5, 1.0, 2.0]
        .iter()
        .map(|&delta| {
            let scores: Vec<f64> = (0..SEEDS)
                .map(|s| {
                    let spec = PlantSpec {
                        feat_separation: delta,
                        feat_noise: 1.0,
                        ..PlantSpec::example(s)
                    };
                    let (bundle, gt) = generate(&spec).unwrap();
                    feature_separability(&bundle.feature.data, bundle.grid, &gt)
                        .unwrap()
                        .0
                        .unwrap()
                })
                .collect();
            BoxStats::from_values(&scores).unwrap().median
        })
        .collect();
    assert!(strictly_increasing(&medians), "{medians:?}");
}
