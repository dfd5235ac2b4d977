use metaseg_core::metrics::{miou, ConfusionMatrix};
use metaseg_core::LabelMap;
use proptest::prelude::*;

/// Per-class IoU by direct pixel set counting.
fn brute_force(pred: &[u8], gt: &[u8], k: u8, ignore: u8) -> (Vec<Option<f64>>, f64) {
    let mut ious = Vec::new();
    for c in 0..k {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore {
                continue;
            }
            if p == c && g == c {
                inter += 1;
            }
            if p == c || g == c {
                union += 1;
            }
        }
        ious.push((union > 0).then(|| inter as f64 / union as f64));
    }
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    (ious, mean)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn miou_matches_pixel_counting(
        pred in prop::collection::vec(0u8..4, 64),
        gt in prop::collection::vec(prop_oneof![4 => 0u8..4, 1 => Just(255u8)], 64),
    ) {
        prop_assume!(gt.iter().any(|g| *g != 255));
        let p = LabelMap::from_vec([1, 8, 8], pred.clone()).unwrap();
        let g = LabelMap::from_vec([1, 8, 8], gt.clone()).unwrap();
        let report = miou(&[p], &[g], 4, 255).unwrap();
        let (per_class, mean) = brute_force(&pred, &gt, 4, 255);
        prop_assert_eq!(report.per_class, per_class);
        prop_assert_eq!(report.mean, mean);
    }

    #[test]
    fn confusion_total_counts_scored_pixels(
        pred in prop::collection::vec(0u8..3, 16),
        gt in prop::collection::vec(prop_oneof![0u8..3, Just(255u8)], 16),
    ) {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(
            &LabelMap::from_vec([1, 4, 4], pred).unwrap(),
            &LabelMap::from_vec([1, 4, 4], gt.clone()).unwrap(),
            255,
        ).unwrap();
        prop_assert_eq!(cm.total() as usize, gt.iter().filter(|g| **g != 255).count());
    }
}

#[test]
fn accumulating_images_equals_one_big_image() {
    let a = LabelMap::from_vec([1, 1, 4], vec![0, 1, 1, 2]).unwrap();
    let b = LabelMap::from_vec([1, 1, 4], vec![2, 2, 0, 1]).unwrap();
    let pa = LabelMap::from_vec([1, 1, 4], vec![0, 1, 2, 2]).unwrap();
    let pb = LabelMap::from_vec([1, 1, 4], vec![2, 0, 0, 1]).unwrap();
    let split = miou(&[pa.clone(), pb.clone()], &[a.clone(), b.clone()], 3, 255).unwrap();
    let joined = miou(
        &[LabelMap::concat_batch(&[pa, pb]).unwrap()],
        &[LabelMap::concat_batch(&[a, b]).unwrap()],
        3,
        255,
    )
    .unwrap();
    assert_eq!(split, joined);
}
