use metaseg_core::autodiff::{finite_difference_gradient, relative_error, Tape};
use metaseg_core::segnet::{self, init_params, ModelParams, NetworkConfig, NormMode};
use metaseg_core::synth::{build_benchmark, preset_styles, DomainDataset, SceneSpec};
use metaseg_core::trainer::{
    agg_step, domain_specific_loss, inner_update, loss_gradient, meta_gradient, meta_step, sample_episode,
    DomainBatch, EpisodeBatch, LossOrder, MetaGradient, Sgd, TrainConfig, TrainMethod, Trainer,
};
use metaseg_core::{Error, LabelMap, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> NetworkConfig {
    NetworkConfig { widths: vec![4, 4], num_classes: 4, ..NetworkConfig::default() }
}

fn random_batch(rng: &mut ChaCha8Rng, id: u32, n: usize, size: usize) -> DomainBatch {
    let len = n * 3 * size * size;
    let shift = id as f64 * 0.3;
    DomainBatch {
        domain_id: id,
        images: Tensor::from_vec([n, 3, size, size], (0..len).map(|_| shift + rng.random_range(0.0..1.0)).collect())
            .unwrap(),
        masks: LabelMap::from_vec([n, size, size], (0..n * size * size).map(|_| rng.random_range(0..3)).collect())
            .unwrap(),
    }
}

fn episode(seed: u64) -> EpisodeBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    EpisodeBatch {
        meta_train: vec![random_batch(&mut rng, 0, 1, 5), random_batch(&mut rng, 1, 1, 5)],
        meta_test: vec![random_batch(&mut rng, 2, 2, 5)],
    }
}

fn plain_config() -> TrainConfig {
    TrainConfig { momentum: 0.0, weight_decay: 0.0, ..TrainConfig::default() }
}

/// `J = L_ds(p) + alpha * L_dg(p - eta * grad L_ds(p))`, evaluated without
/// recording any second-order graph.
fn meta_objective(params: &ModelParams, ep: &EpisodeBatch, eta: f64, alpha: f64) -> f64 {
    let (x_tr, y_tr) = ep.train_batch().unwrap();
    let (x_te, y_te) = ep.test_batch().unwrap();
    let (l_ds, grads, _) = loss_gradient(params, &x_tr, &y_tr).unwrap();
    let mut adapted = params.clone();
    adapted.apply_gradients(&grads, eta).unwrap();
    let (l_dg, _, _) = loss_gradient(&adapted, &x_te, &y_te).unwrap();
    l_ds + alpha * l_dg
}

fn flat_grads(params: &ModelParams, ep: &EpisodeBatch, config: &TrainConfig) -> Vec<f64> {
    let result = meta_gradient(params, ep, config).unwrap();
    params.ids().iter().flat_map(|id| result.grads.get(id).unwrap().data().to_vec()).collect()
}

#[test]
fn exact_meta_gradient_matches_finite_differences() {
    let params = init_params(&tiny_config(), 1).unwrap();
    assert!(params.num_trainable() <= 500);
    let ep = episode(2);
    let config = TrainConfig { inner_lr: 0.5, alpha: 1.0, ..plain_config() };
    let analytic = flat_grads(&params, &ep, &config);
    let numeric = finite_difference_gradient(
        |flat| meta_objective(&params.with_flat(flat).unwrap(), &ep, 0.5, 1.0),
        &params.to_flat(),
        1e-5,
    );
    let err = relative_error(&analytic, &numeric);
    assert!(err <= 1e-5, "exact relative error {err}");

    // the first-order variant misses the second-order term at this step size
    let first = flat_grads(&params, &ep, &TrainConfig { meta_gradient: MetaGradient::FirstOrder, ..config });
    assert!(relative_error(&first, &numeric) > 1e-3);
}

#[test]
fn first_order_gap_shrinks_linearly_with_inner_rate() {
    let params = init_params(&tiny_config(), 3).unwrap();
    let ep = episode(4);
    let gap = |eta: f64| {
        let exact = flat_grads(&params, &ep, &TrainConfig { inner_lr: eta, ..plain_config() });
        let first = flat_grads(
            &params,
            &ep,
            &TrainConfig { inner_lr: eta, meta_gradient: MetaGradient::FirstOrder, ..plain_config() },
        );
        exact.iter().zip(&first).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let (g1, g2, g3) = (gap(0.04), gap(0.02), gap(0.01));
    assert!(g1 > 0.0);
    for ratio in [g1 / g2, g2 / g3] {
        assert!((1.7..2.3).contains(&ratio), "gap ratio {ratio}");
    }
    assert_eq!(gap(0.0), 0.0);
}

#[test]
fn zero_alpha_is_a_plain_step_on_the_specific_loss() {
    let params = init_params(&tiny_config(), 5).unwrap();
    let ep = episode(6);
    let config = TrainConfig { alpha: 0.0, inner_lr: 0.3, ..plain_config() };
    let mut meta = params.clone();
    meta_step(&mut meta, &mut Sgd::new(0.0, 0.0), &ep, &config, 0.1).unwrap();

    let (x, y) = ep.train_batch().unwrap();
    let mut agg = params.clone();
    agg_step(&mut agg, &mut Sgd::new(0.0, 0.0), &x, &y, 0.1).unwrap();
    let diff = meta.to_flat().iter().zip(agg.to_flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "max difference {diff}");
    // running statistics also absorb the meta-test pass in the meta step
    assert_ne!(meta.blocks[0].norm.running_mean, agg.blocks[0].norm.running_mean);
}

#[test]
fn zero_inner_rate_sums_plain_gradients() {
    let params = init_params(&tiny_config(), 7).unwrap();
    let ep = episode(8);
    let config = TrainConfig { inner_lr: 0.0, alpha: 0.7, ..plain_config() };
    let got = flat_grads(&params, &ep, &config);
    let (x_tr, y_tr) = ep.train_batch().unwrap();
    let (x_te, y_te) = ep.test_batch().unwrap();
    let (_, g_ds, _) = loss_gradient(&params, &x_tr, &y_tr).unwrap();
    let (_, g_dg, _) = loss_gradient(&params, &x_te, &y_te).unwrap();
    let expected: Vec<f64> = params
        .ids()
        .iter()
        .flat_map(|id| {
            let a = g_ds.get(id).unwrap();
            let b = g_dg.get(id).unwrap();
            a.zip_map(b, |a, b| a + 0.7 * b).unwrap().into_data()
        })
        .collect();
    assert!(relative_error(&got, &expected) < 1e-12);
}

#[test]
fn loss_order_is_irrelevant_at_unit_weight() {
    let params = init_params(&tiny_config(), 9).unwrap();
    let ep = episode(10);
    let a = meta_gradient(&params, &ep, &TrainConfig { inner_lr: 0.2, ..plain_config() }).unwrap();
    let b = meta_gradient(
        &params,
        &ep,
        &TrainConfig { inner_lr: 0.2, loss_order: LossOrder::WeightSpecific, ..plain_config() },
    )
    .unwrap();
    assert!((a.losses.total - b.losses.total).abs() < 1e-12);
    assert!(relative_error(&a.grads.flatten(), &b.grads.flatten()) < 1e-12);
    let c = meta_gradient(
        &params,
        &ep,
        &TrainConfig { inner_lr: 0.2, alpha: 0.5, loss_order: LossOrder::WeightSpecific, ..plain_config() },
    )
    .unwrap();
    let expected = c.losses.generalization.unwrap() + 0.5 * c.losses.specific;
    assert!((c.losses.total - expected).abs() < 1e-12);
}

#[test]
fn batch_loss_is_the_mean_of_per_sample_losses() {
    let params = init_params(&tiny_config(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let batch = random_batch(&mut rng, 0, 3, 4);
    let mut tape = Tape::new();
    let vars = params.to_vars(&mut tape);
    let (loss, _) = domain_specific_loss(&mut tape, &params, &vars, &batch.images, &batch.masks).unwrap();
    let logits = segnet::forward(&params, &batch.images, &NormMode::TrainBatch).unwrap().logits;
    let mut per_sample = Vec::new();
    for n in 0..3 {
        let mut total = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let z: Vec<f64> = (0..4).map(|c| logits.get(n, c, y, x)).collect();
                let log_norm = z.iter().map(|v| v.exp()).sum::<f64>().ln();
                total += log_norm - z[batch.masks.get(n, y, x) as usize];
            }
        }
        per_sample.push(total / 16.0);
    }
    let oracle = per_sample.iter().sum::<f64>() / 3.0;
    assert!((tape.value(loss).item() - oracle).abs() < 1e-12);
}

#[test]
fn inner_update_arithmetic() {
    let params = init_params(&tiny_config(), 13).unwrap();
    let mut tape = Tape::new();
    let vars = params.to_vars(&mut tape);
    let ones: Vec<_> = vars.vars().iter().map(|v| {
        let shape = tape.value(*v).shape();
        tape.constant(Tensor::full(shape, 1.0))
    }).collect();
    let same = inner_update(&mut tape, &vars, &ones, 0.0).unwrap();
    let moved = inner_update(&mut tape, &vars, &ones, 0.1).unwrap();
    for ((p, s), m) in vars.vars().iter().zip(same.vars()).zip(moved.vars()) {
        assert_eq!(tape.value(*p), tape.value(*s));
        let expected = tape.value(*p).map(|v| v - 0.1);
        assert!(tape.value(*m).max_abs_diff(&expected) < 1e-15);
    }
    assert!(inner_update(&mut tape, &vars, &ones[1..], 0.1).is_err());

    // one small step lowers the loss
    let ep = episode(14);
    let (x, y) = ep.train_batch().unwrap();
    let (before, grads, _) = loss_gradient(&params, &x, &y).unwrap();
    let mut stepped = params.clone();
    stepped.apply_gradients(&grads, 1e-2).unwrap();
    assert!(loss_gradient(&stepped, &x, &y).unwrap().0 < before);
}

#[test]
fn zero_gradient_leaves_parameters_alone() {
    let mut params = init_params(&tiny_config(), 15).unwrap();
    let before = params.clone();
    let zeros = params.ids().into_iter().map(|id| (id, params.get(id).map(|_| 0.0))).collect();
    Sgd::new(0.9, 0.0).step(&mut params, &zeros, 0.5).unwrap();
    assert_eq!(params, before);
}

#[test]
fn momentum_and_weight_decay_follow_the_update_rule() {
    let mut params = init_params(&tiny_config(), 16).unwrap();
    let p0 = params.to_flat();
    let ones = params.ids().into_iter().map(|id| (id, params.get(id).map(|_| 1.0))).collect();
    let mut sgd = Sgd::new(0.5, 0.1);
    sgd.step(&mut params, &ones, 0.2).unwrap();
    let p1 = params.to_flat();
    sgd.step(&mut params, &ones, 0.2).unwrap();
    for ((a, b), c) in p0.iter().zip(&p1).zip(params.to_flat()) {
        let v1 = 1.0 + 0.1 * a;
        assert!((b - (a - 0.2 * v1)).abs() < 1e-12);
        let v2 = 0.5 * v1 + 1.0 + 0.1 * b;
        assert!((c - (b - 0.2 * v2)).abs() < 1e-12);
    }
}

fn toy_domains(count: usize, per: usize, seed: u64) -> Vec<DomainDataset> {
    let spec = SceneSpec { height: 12, width: 12, min_size: 4, max_size: 8, ..SceneSpec::default() };
    build_benchmark(per, &spec, &preset_styles()[..count], seed).unwrap()
}

#[test]
fn episodes_split_whole_domains() {
    let domains = toy_domains(4, 6, 1);
    let config = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let ep = sample_episode(&domains, &config, &mut rng).unwrap();
        assert_eq!((ep.meta_train.len(), ep.meta_test.len()), (2, 2));
        assert!(ep.is_disjoint());
        assert!(ep.meta_train.iter().chain(&ep.meta_test).all(|b| b.images.batch() == 2));
        let mut ids: Vec<u32> = ep.meta_train.iter().chain(&ep.meta_test).map(|b| b.domain_id).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2, 3]);
    }
    let a = sample_episode(&domains, &config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = sample_episode(&domains, &config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a.pooled().unwrap(), b.pooled().unwrap());

    let two = sample_episode(&domains[..2], &TrainConfig { split: Some((3, 1)), ..config.clone() }, &mut rng).unwrap();
    assert_eq!((two.meta_train.len(), two.meta_test.len()), (1, 1));
    assert!(matches!(sample_episode(&domains[..1], &config, &mut rng), Err(Error::Config(_))));
}

#[test]
fn training_is_deterministic_and_logs_every_step() {
    let domains = toy_domains(3, 4, 2);
    let config = TrainConfig { batch_size: 3, epochs: 2, inner_lr: 0.01, outer_lr: 0.05, seed: 4, ..TrainConfig::default() };
    let run = || {
        let mut trainer = Trainer::new(config.clone(), &domains, init_params(&tiny_config(), 4).unwrap()).unwrap();
        let mut rows = Vec::new();
        trainer
            .run(|row, _| {
                rows.push(row.clone());
                Ok(())
            })
            .unwrap();
        (trainer.into_params(), rows)
    };
    let (p1, rows1) = run();
    let (p2, rows2) = run();
    assert_eq!(p1, p2);
    assert_eq!(rows1.len(), 8);
    assert_eq!(rows1.last().unwrap().epoch, 1);
    assert_eq!(rows1[0].lr, 0.05);
    for (a, b) in rows1.iter().zip(&rows2) {
        assert_eq!(a.losses, b.losses);
        assert!(a.losses.generalization.is_some());
    }
}

#[test]
fn single_domain_training() {
    let domains = toy_domains(1, 4, 3);
    let init = init_params(&tiny_config(), 5).unwrap();
    let mldg = Trainer::new(TrainConfig::default(), &domains, init.clone());
    assert!(matches!(mldg, Err(Error::Config(_))));
    let agg = TrainConfig { method: TrainMethod::Agg, batch_size: 2, ..TrainConfig::default() };
    let mut trainer = Trainer::new(agg, &domains, init).unwrap();
    let row = trainer.step().unwrap().unwrap();
    assert!(row.losses.generalization.is_none());
    assert!(Trainer::new(TrainConfig::default(), &[], init_params(&tiny_config(), 5).unwrap()).is_err());
}

#[test]
fn non_finite_parameters_abort_with_numeric_error() {
    let mut params = init_params(&tiny_config(), 17).unwrap();
    params.classifier_bias[0] = f64::NAN;
    let result = meta_step(&mut params, &mut Sgd::new(0.0, 0.0), &episode(18), &plain_config(), 0.1);
    assert!(matches!(result, Err(Error::Numeric(_))), "{result:?}");
}

#[test]
fn aggregation_fits_a_separable_toy_task() {
    // the label is whichever of the first two channels is brighter
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let n = 4;
    let mut images = Tensor::zeros([n, 3, 6, 6]);
    let mut masks = LabelMap::filled([n, 6, 6], 0);
    for i in 0..n {
        for y in 0..6 {
            for x in 0..6 {
                let label = rng.random_range(0..2u8);
                images.set(i, label as usize, y, x, 1.0);
                images.set(i, 2, y, x, rng.random_range(0.0..0.1));
                masks.data_mut()[(i * 6 + y) * 6 + x] = label;
            }
        }
    }
    let cfg = NetworkConfig { widths: vec![4], kernel_size: 1, num_classes: 2, ..NetworkConfig::default() };
    let mut params = init_params(&cfg, 20).unwrap();
    let mut sgd = Sgd::new(0.9, 0.0);
    let mut last = f64::INFINITY;
    for _ in 0..100 {
        last = agg_step(&mut params, &mut sgd, &images, &masks, 0.1).unwrap().total;
    }
    assert!(last < 0.1, "final loss {last}");
}

