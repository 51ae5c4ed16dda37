use feedrank::data::synthetic::{generate, SyntheticConfig};
use feedrank::data::{build_side_info, Behaviour, Event, InteractionStore, ItemSet};
use feedrank::eval::metrics_from_ranks;
use feedrank::layers::TransformerLayer;
use feedrank::models::{Batch, Model, ModelConfig, Variant, Vocab};
use feedrank::numerics::{ModelParams, Tape, Tensor};
use feedrank::training::{pad_sequence, sample_negatives, Trainer, TrainingConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_synth(seed: u64) -> (InteractionStore, feedrank::data::SideInfo) {
    let s = generate(&SyntheticConfig {
        users: 20,
        items: 30,
        categories: 3,
        clicks_in_category: 5,
        noise_clicks: 2,
        explicit: 2,
        seed,
    });
    let side = build_side_info(&s.store, &s.categories);
    (s.store, side)
}

fn small_model(variant: Variant, seed: u64, side: &feedrank::data::SideInfo) -> Model<f64> {
    model_k(variant, seed, side, 4)
}

fn model_k(variant: Variant, seed: u64, side: &feedrank::data::SideInfo, k: usize) -> Model<f64> {
    let cfg = ModelConfig {
        embedding_dim: k,
        seq_len: 3,
        layers: 1,
        ..ModelConfig::default()
    };
    let v = Vocab {
        users: 20,
        items: 30,
        categories: side.num_categories(),
    };
    Model::new(variant, &cfg, v, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn random_store(seed: u64, users: usize, items: usize, per_user: usize) -> InteractionStore {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let events = (0..users)
        .map(|_| {
            (0..per_user)
                .map(|t| Event {
                    timestamp: t as i64,
                    item: rng.random_range(0..items as u32),
                    behaviour: if rng.random_bool(0.3) {
                        Behaviour::Explicit
                    } else {
                        Behaviour::Implicit
                    },
                })
                .collect()
        })
        .collect();
    InteractionStore::from_events(
        (0..users).map(|u| u.to_string()).collect(),
        (0..items).map(|i| i.to_string()).collect(),
        events,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zero_eta_gives_implicit_head_no_gradient(seed in 0u64..1000, bert in any::<bool>()) {
        let (store, side) = small_synth(seed);
        let variant = if bert { Variant::BertIteSi } else { Variant::IteSi };
        // wide enough that the explicit tower is never entirely dead
        let model = model_k(variant, seed, &side, 16);
        let tc = TrainingConfig { eta: 0.0, negatives: 2, ..TrainingConfig::default() };
        let trainer = Trainer::new(&model, &store, Some(&side), tc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = trainer.sample_examples(&mut rng).unwrap();
        let chunk = &examples[..40];
        let mut tape = Tape::new(model.params());
        let batch = trainer.batch(chunk, model.seq_len(), &mut rng);
        let out = model.forward(&mut tape, &batch, Some(&side), true, &mut rng).unwrap();
        let labels: Vec<f64> = chunk.iter().map(|e| if e.positive { 1.0 } else { 0.0 }).collect();
        let explicit: Vec<bool> = chunk.iter().map(|e| e.explicit).collect();
        prop_assume!(explicit.iter().any(|&e| e));
        let loss = feedrank::training::joint_loss(&mut tape, out.x_hat, out.y_hat, &labels, &explicit, None, 0.0, 0.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        let hi = grads.param(model.implicit_head()).unwrap_or(&[]);
        prop_assert!(hi.iter().all(|&g| g == 0.0));
        let phi = grads.var(out.implicit_layer).unwrap();
        prop_assert!(phi.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic(seed in 0u64..1000, a in 0u64..100, b in 100u64..200) {
        let (_, side) = small_synth(1);
        let model = small_model(Variant::BertIteSi, seed, &side);
        let batch = Batch { users: vec![1, 2], items: vec![3, 4], sequences: vec![5, 6, 7, 8, 9, 10] };
        let run = |s: u64| {
            let mut tape = Tape::new(model.params());
            let out = model.forward(&mut tape, &batch, Some(&side), false, &mut ChaCha8Rng::seed_from_u64(s)).unwrap();
            (tape.value(out.x_hat).data().to_vec(), tape.value(out.y_hat).data().to_vec())
        };
        prop_assert_eq!(run(a), run(b));
    }

    #[test]
    fn negatives_never_collide(seed in 0u64..10_000, count in 0usize..40) {
        let store = random_store(seed, 5, 60, 25);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for u in 0..5u32 {
            for m in [Behaviour::Implicit, Behaviour::Explicit] {
                let negs = sample_negatives(&store, u, m, count, &mut rng).unwrap();
                prop_assert_eq!(negs.len(), count);
                prop_assert!(negs.iter().all(|&i| !store.observed(u, m).contains(i)));
                let mut d = negs.clone();
                d.sort_unstable();
                d.dedup();
                prop_assert_eq!(d.len(), negs.len());
            }
        }
    }

    #[test]
    fn training_examples_respect_matrices(seed in 0u64..1000) {
        let (store, side) = small_synth(seed);
        let model = small_model(Variant::Ite, seed, &side);
        let trainer = Trainer::new(&model, &store, None, TrainingConfig::default()).unwrap();
        let ex = trainer.sample_examples(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        for e in ex {
            let m = if e.explicit { Behaviour::Explicit } else { Behaviour::Implicit };
            prop_assert_eq!(e.positive, store.observed(e.user, m).contains(e.item));
        }
    }

    #[test]
    fn k_sweep_is_monotone(ranks in proptest::collection::vec(1usize..1001, 1..200)) {
        let mut prev = metrics_from_ranks(&ranks, 1).unwrap();
        for k in 2..=20 {
            let m = metrics_from_ranks(&ranks, k).unwrap();
            prop_assert!(m.hr >= prev.hr && m.ndcg >= prev.ndcg);
            prop_assert!(m.ndcg <= m.hr);
            prev = m;
        }
    }

    #[test]
    fn attention_is_permutation_equivariant(seed in 0u64..1000, perm in Just((0..5usize).collect::<Vec<_>>()).prop_shuffle()) {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::<f64>::new();
        let layer = TransformerLayer::new(&mut params, "tf", 4, 2, 0.0, &mut rng).unwrap();
        let d = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..20).map(|_| d.sample(&mut rng)).collect();
        let px: Vec<f64> = perm.iter().flat_map(|&r| x[r * 4..r * 4 + 4].to_vec()).collect();
        let run = |data: Vec<f64>| {
            let mut tape = Tape::new(&params);
            let v = tape.constant(Tensor::new(vec![5, 4], data).unwrap());
            let y = layer.forward(&mut tape, v, 5, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            tape.value(y).data().to_vec()
        };
        let (y, py) = (run(x), run(px));
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                prop_assert!((py[dst * 4 + c] - y[src * 4 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn padding_fills_with_unseen_items(seed in 0u64..10_000, n in 2usize..12, seen in proptest::collection::vec(0u32..50, 0..20)) {
        let observed = ItemSet::from_unsorted(seen.clone());
        let hist: Vec<u32> = seen.iter().copied().take(n - 2).collect();
        prop_assume!(hist.len() == n - 2);
        let p = pad_sequence(&hist, n, 50, &observed, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(p.len(), n);
        prop_assert_eq!(&p[2..], hist.as_slice());
        prop_assert!(p[..2].iter().all(|&i| !observed.contains(i)));
    }
}

#[test]
fn epoch_reruns_are_bit_identical() {
    let (store, side) = small_synth(4);
    let run = || {
        let mut model = small_model(Variant::BertIteSi, 5, &side);
        let tc = TrainingConfig {
            batch_size: Some(32),
            ..TrainingConfig::default()
        };
        let mut trainer = Trainer::new(&model, &store, Some(&side), tc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let report = trainer.train_epoch(&mut model, &mut rng).unwrap();
        let bits: Vec<u64> = model
            .params()
            .iter()
            .flat_map(|p| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        (report.mean_loss.to_bits(), bits)
    };
    assert_eq!(run(), run());
}

#[test]
fn loss_decreases_over_first_epochs() {
    let (store, side) = small_synth(2);
    for variant in [Variant::Ite, Variant::BertIte] {
        let mut model = small_model(variant, 3, &side);
        let tc = TrainingConfig {
            batch_size: Some(64),
            ..TrainingConfig::default()
        };
        let mut trainer = Trainer::new(&model, &store, Some(&side), tc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let losses: Vec<f64> = (0..5)
            .map(|_| trainer.train_epoch(&mut model, &mut rng).unwrap().mean_loss)
            .collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{variant}: {losses:?}");
        assert!(losses.iter().all(|&l| l >= 0.0));
    }
}

/// Every eligible item's count over 10⁵ single draws stays within 3σ of
/// the uniform expectation, and the chi-square statistic is plausible.
#[test]
fn negative_sampling_is_uniform() {
    let store = random_store(3, 1, 40, 15);
    let eligible = 40 - store.implicit(0).len();
    let mut counts = vec![0usize; 40];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let draws = 100_000;
    for _ in 0..draws {
        for i in sample_negatives(&store, 0, Behaviour::Implicit, 1, &mut rng).unwrap() {
            counts[i as usize] += 1;
        }
    }
    let p = 1.0 / eligible as f64;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    let mut chi2 = 0.0;
    for i in 0..40u32 {
        let c = counts[i as usize] as f64;
        if store.implicit(0).contains(i) {
            assert_eq!(c, 0.0);
        } else {
            assert!((c - mean).abs() < 3.0 * sd + 1.0, "item {i}: {c} vs {mean}");
            chi2 += (c - mean) * (c - mean) / mean;
        }
    }
    // 99.9% quantile of chi-square with up to 39 degrees of freedom is < 73
    assert!(chi2 < 73.0, "chi2 {chi2}");
}
