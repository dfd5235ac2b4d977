use metaseg_core::normstats::{
    apply_norm, compute_batch_stats, kl_divergence, symmetric_kl, whole_set_stats, NormLayerState, StyleSignature,
};
use metaseg_core::segnet::{self, init_params, NetworkConfig, NormMode};
use metaseg_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn signature(channels: usize) -> impl Strategy<Value = StyleSignature> {
    (
        prop::collection::vec(-5.0f64..5.0, channels),
        prop::collection::vec(0.01f64..5.0, channels),
    )
        .prop_map(|(mu, sigma)| StyleSignature { mu, sigma })
}

fn tensor(shape: [usize; 4]) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, shape.iter().product::<usize>())
        .prop_map(move |data| Tensor::from_vec(shape, data).unwrap())
}

proptest! {
    #[test]
    fn symmetric_kl_is_symmetric_and_nonnegative(a in signature(4), b in signature(4)) {
        let ab = symmetric_kl(&a, &b).unwrap();
        let ba = symmetric_kl(&b, &a).unwrap();
        prop_assert_eq!(ab.to_bits(), ba.to_bits());
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(symmetric_kl(&a, &a).unwrap(), 0.0);
        // agrees with the two one-directional divergences
        let two_way = kl_divergence(&a, &b).unwrap() + kl_divergence(&b, &a).unwrap();
        prop_assert!((ab - two_way).abs() <= 1e-9 * (1.0 + ab));
    }

    #[test]
    fn normalization_is_invertible(x in tensor([2, 3, 3, 3]), w in prop::collection::vec(0.2f64..2.0, 3), b in prop::collection::vec(-1.0f64..1.0, 3)) {
        let stats = compute_batch_stats(&x).unwrap();
        prop_assume!(stats.var.iter().all(|v| *v > 1e-6));
        let state = NormLayerState { running_mean: vec![0.0; 3], running_var: vec![1.0; 3], weight: w.clone(), bias: b.clone(), eps: 1e-5 };
        let y = apply_norm(&x, &stats.mean, &stats.var, &state).unwrap();
        let mut recovered = y.clone();
        for n in 0..2 {
            for c in 0..3 {
                let std = (stats.var[c] + 1e-5).sqrt();
                recovered.plane_mut(n, c).iter_mut().for_each(|v| *v = (*v - b[c]) / w[c] * std + stats.mean[c]);
            }
        }
        prop_assert!(recovered.max_abs_diff(&x) <= 1e-6);
    }

    #[test]
    fn batch_moments_follow_total_variance(x in tensor([3, 2, 2, 4])) {
        let all = compute_batch_stats(&x).unwrap();
        let parts: Vec<_> = (0..3).map(|i| compute_batch_stats(&x.sample(i)).unwrap()).collect();
        for c in 0..2 {
            let mean = parts.iter().map(|p| p.mean[c]).sum::<f64>() / 3.0;
            let within = parts.iter().map(|p| p.var[c]).sum::<f64>() / 3.0;
            let between = parts.iter().map(|p| (p.mean[c] - mean).powi(2)).sum::<f64>() / 3.0;
            prop_assert!((all.mean[c] - mean).abs() <= 1e-10);
            prop_assert!((all.var[c] - (within + between)).abs() <= 1e-10);
        }
    }

    #[test]
    fn batch_normalization_ignores_per_channel_affine_input_changes(
        x in tensor([2, 2, 3, 3]),
        scale in prop::collection::vec(0.1f64..4.0, 2),
        offset in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let stats = compute_batch_stats(&x).unwrap();
        prop_assume!(stats.var.iter().all(|v| *v > 1e-3));
        let mut moved = x.clone();
        for n in 0..2 {
            for c in 0..2 {
                moved.plane_mut(n, c).iter_mut().for_each(|v| *v = scale[c] * *v + offset[c]);
            }
        }
        let state = NormLayerState { eps: 0.0, ..NormLayerState::new(2, 1e-5) };
        let moved_stats = compute_batch_stats(&moved).unwrap();
        let a = apply_norm(&x, &stats.mean, &stats.var, &state).unwrap();
        let b = apply_norm(&moved, &moved_stats.mean, &moved_stats.var, &state).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-9);
    }
}

#[test]
fn thousand_random_pairs_are_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let mut s = || StyleSignature {
            mu: (0..8).map(|_| rng.random_range(-2.0..2.0)).collect(),
            sigma: (0..8).map(|_| rng.random_range(0.003..3.0)).collect(),
        };
        let (a, b) = (s(), s());
        assert!(symmetric_kl(&a, &b).unwrap() >= 0.0);
    }
}

fn random_images(seed: u64, count: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Tensor::from_vec([1, 3, 6, 6], (0..108).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
        .collect()
}

fn small_model() -> segnet::ModelParams {
    let cfg = NetworkConfig { widths: vec![4, 6, 5], num_classes: 3, ..NetworkConfig::default() };
    let mut p = init_params(&cfg, 17).unwrap();
    // non-trivial affines so later layers see shifted inputs
    for (l, b) in p.blocks.iter_mut().enumerate() {
        for (c, w) in b.norm.weight.iter_mut().enumerate() {
            *w = 0.5 + 0.1 * (c + l) as f64;
        }
        for (c, v) in b.norm.bias.iter_mut().enumerate() {
            *v = 0.05 * c as f64 - 0.1;
        }
    }
    p
}

#[test]
fn whole_set_stats_of_one_image_match_target_specific_forward() {
    let params = small_model();
    let images = random_images(1, 1);
    let whole = whole_set_stats(&images, &params).unwrap();
    let direct = segnet::forward(&params, &images[0], &NormMode::TargetSpecific).unwrap().layer_stats;
    for (a, b) in whole.iter().zip(&direct) {
        for c in 0..a.channels() {
            assert!((a.mean[c] - b.mean[c]).abs() < 1e-12);
            assert!((a.var[c] - b.var[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn whole_set_stats_ignore_duplication() {
    let params = small_model();
    let one = random_images(2, 1);
    let two = vec![one[0].clone(), one[0].clone()];
    let a = whole_set_stats(&one, &params).unwrap();
    let b = whole_set_stats(&two, &params).unwrap();
    for (x, y) in a.iter().zip(&b) {
        for c in 0..x.channels() {
            assert!((x.mean[c] - y.mean[c]).abs() < 1e-12);
            assert!((x.var[c] - y.var[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn whole_set_stats_match_concatenated_batch() {
    let params = small_model();
    let images = random_images(3, 3);
    let streamed = whole_set_stats(&images, &params).unwrap();
    let batch = Tensor::concat_batch(&images).unwrap();
    let oracle = segnet::forward(&params, &batch, &NormMode::TargetSpecific).unwrap().layer_stats;
    for (a, b) in streamed.iter().zip(&oracle) {
        for c in 0..a.channels() {
            assert!((a.mean[c] - b.mean[c]).abs() <= 1e-6);
            assert!((a.var[c] - b.var[c]).abs() <= 1e-6);
        }
    }
    assert!(whole_set_stats(&[], &params).is_err());
}
