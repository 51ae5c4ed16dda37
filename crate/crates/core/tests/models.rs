//! Model forwards against plain-arithmetic re-implementations that read the
//! parameters by name, plus checkpoint and random-ranking checks.

#![allow(clippy::needless_range_loop)]

use feedrank::data::synthetic::{generate, SyntheticConfig};
use feedrank::data::{build_side_info, Behaviour, Event, InteractionStore, PreparedDataset, SideInfo, SplitOptions};
use feedrank::eval::evaluate;
use feedrank::models::{bert_ite_forward, checkpoint, ite_forward, Model, ModelConfig, Variant, Vocab};
use feedrank::numerics::ModelParams;
use feedrank::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Mat = Vec<Vec<f64>>;

fn mat(p: &ModelParams<f64>, name: &str) -> Mat {
    let t = p.by_name(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

fn vecp(p: &ModelParams<f64>, name: &str) -> Vec<f64> {
    p.by_name(name).unwrap().data().to_vec()
}

fn vm(x: &[f64], w: &Mat) -> Vec<f64> {
    (0..w[0].len()).map(|j| x.iter().zip(w).map(|(a, row)| a * row[j]).sum()).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maclaurin series; plenty accurate for the magnitudes seen here.
fn erf(x: f64) -> f64 {
    if x.abs() > 6.0 {
        return x.signum();
    }
    let mut sum = 0.0;
    let mut term = x;
    let mut n = 0.0;
    loop {
        let add = term / (2.0 * n + 1.0);
        sum += add;
        if add.abs() < 1e-17 {
            break;
        }
        n += 1.0;
        term *= -x * x / n;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn dense(p: &ModelParams<f64>, name: &str, x: &[f64]) -> Vec<f64> {
    let b = vecp(p, &format!("{name}.bias"));
    vm(x, &mat(p, &format!("{name}.weight")))
        .iter()
        .zip(&b)
        .map(|(a, c)| a + c)
        .collect()
}

fn relu_tower(p: &ModelParams<f64>, prefix: &str, mut x: Vec<f64>) -> Vec<f64> {
    let mut j = 0;
    while p.by_name(&format!("{prefix}.{j}.weight")).is_some() {
        x = dense(p, &format!("{prefix}.{j}"), &x).into_iter().map(|v| v.max(0.0)).collect();
        j += 1;
    }
    x
}

/// Row lookup plus the projected dense side vector.
fn embed(p: &ModelParams<f64>, table: &str, idx: usize, side: Option<&[f32]>) -> Vec<f64> {
    let mut e = mat(p, table)[idx].clone();
    if let Some(s) = side {
        let proj = mat(p, &format!("{table}.side"));
        for (c, &w) in s.iter().enumerate() {
            for (k, v) in e.iter_mut().enumerate() {
                *v += w as f64 * proj[c][k];
            }
        }
    }
    e
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[i] + b[i])
        .collect()
}

fn transformer(p: &ModelParams<f64>, l: usize, heads: usize, h: &Mat) -> Mat {
    let d = h[0].len();
    let dh = d / heads;
    let t = h.len();
    let mut concat: Mat = vec![Vec::new(); t];
    for i in 0..heads {
        let q: Mat = h.iter().map(|r| vm(r, &mat(p, &format!("layer{l}.head{i}.query")))).collect();
        let k: Mat = h.iter().map(|r| vm(r, &mat(p, &format!("layer{l}.head{i}.key")))).collect();
        let v: Mat = h.iter().map(|r| vm(r, &mat(p, &format!("layer{l}.head{i}.value")))).collect();
        for a in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|b| q[a].iter().zip(&k[b]).map(|(x, y)| x * y).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                concat[a].push((0..t).map(|b| e[b] / z * v[b][c]).sum());
            }
        }
    }
    let wo = mat(p, &format!("layer{l}.attn_out"));
    let (g1, b1) = (vecp(p, &format!("layer{l}.ln_attn.gain")), vecp(p, &format!("layer{l}.ln_attn.bias")));
    let (g2, b2) = (vecp(p, &format!("layer{l}.ln_ffn.gain")), vecp(p, &format!("layer{l}.ln_ffn.bias")));
    (0..t)
        .map(|a| {
            let mh = vm(&concat[a], &wo);
            let res: Vec<f64> = h[a].iter().zip(&mh).map(|(x, y)| x + y).collect();
            let an = layer_norm(&res, &g1, &b1);
            let hid: Vec<f64> = dense(p, &format!("layer{l}.ffn_in"), &an).into_iter().map(gelu).collect();
            let f = dense(p, &format!("layer{l}.ffn_out"), &hid);
            let res: Vec<f64> = an.iter().zip(&f).map(|(x, y)| x + y).collect();
            layer_norm(&res, &g2, &b2)
        })
        .collect()
}

fn scramble(p: &mut ModelParams<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, 0.4).unwrap();
    for param in p.iter_mut() {
        for v in param.value.data_mut() {
            *v += d.sample(&mut rng);
        }
    }
}

fn fixture() -> (InteractionStore, SideInfo) {
    let s = generate(&SyntheticConfig {
        users: 6,
        items: 12,
        categories: 3,
        clicks_in_category: 3,
        noise_clicks: 1,
        explicit: 2,
        seed: 3,
    });
    let side = build_side_info(&s.store, &s.categories);
    (s.store, side)
}

fn vocab(side: &SideInfo) -> Vocab {
    Vocab {
        users: 6,
        items: 12,
        categories: side.num_categories(),
    }
}

#[test]
fn ite_matches_plain_arithmetic() {
    let (_, side) = fixture();
    for variant in [Variant::Ite, Variant::IteSi, Variant::IteOssi] {
        for depth in [1, 2, 3, 4] {
            let cfg = ModelConfig {
                embedding_dim: 8,
                implicit_depth: depth,
                explicit_depth: depth.min(3),
                ..ModelConfig::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(depth as u64);
            let mut model = Model::<f64>::new(variant, &cfg, vocab(&side), &mut rng).unwrap();
            scramble(model.params_mut(), 4);
            let Model::Ite(m) = &model else { unreachable!() };
            let p = &m.params;
            let mode = variant.side_mode();
            for (u, i) in [(0usize, 0usize), (3, 7), (5, 11)] {
                let us = side.user_vector(u as u32);
                let is = side.item_vector(i as u32);
                let us = mode.user().then_some(us.as_slice());
                let is = mode.item().then_some(is.as_slice());
                let pg = embed(p, "user_gmf", u, us);
                let qg = embed(p, "item_gmf", i, is);
                let mut z = embed(p, "user_mlp", u, us);
                z.extend(embed(p, "item_mlp", i, is));
                let mut phi: Vec<f64> = pg.iter().zip(&qg).map(|(a, b)| a * b).collect();
                phi.extend(relu_tower(p, "implicit_mlp", z));
                assert_eq!(phi.len(), 16);
                let x = sigmoid(vm(&phi, &mat(p, "h_implicit"))[0]);
                let e = relu_tower(p, "explicit_mlp", phi);
                let y = sigmoid(vm(&e, &mat(p, "h_explicit"))[0]);

                let (xh, yh) = ite_forward(m, u, i, Some(&side)).unwrap();
                assert!((xh - x).abs() < 1e-12 && (yh - y).abs() < 1e-12, "{variant} depth {depth}");
            }
        }
    }
}

#[test]
fn bert_ite_matches_plain_arithmetic() {
    let (_, side) = fixture();
    for variant in [Variant::BertIte, Variant::BertIteSi, Variant::BertIteOssi] {
        let cfg = ModelConfig {
            embedding_dim: 8,
            seq_len: 4,
            layers: 2,
            heads: 2,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = Model::<f64>::new(variant, &cfg, vocab(&side), &mut rng).unwrap();
        scramble(model.params_mut(), 9);
        let Model::Bert(m) = &model else { unreachable!() };
        let p = &m.params;
        let mode = variant.side_mode();
        for (u, seq, target) in [(1usize, [3usize, 4, 5, 6], 2usize), (4, [0, 0, 11, 7], 9)] {
            let uv = side.user_vector(u as u32);
            let user = embed(p, "user_emb", u, mode.user().then_some(uv.as_slice()));
            let item = |i: usize| {
                let iv = side.item_vector(i as u32);
                embed(p, "item_emb", i, mode.item().then_some(iv.as_slice()))
            };
            let mut h: Mat = vec![user];
            h.extend(seq.iter().map(|&i| item(i)));
            let tgt = item(target);
            h.push(tgt.clone());
            for l in 0..2 {
                h = transformer(p, l, 2, &h);
            }
            let phi: Vec<f64> = h[0].iter().zip(&tgt).map(|(a, b)| a * b).collect();
            let x = sigmoid(vm(&phi, &mat(p, "h_implicit"))[0]);
            let e = relu_tower(p, "explicit_mlp", phi);
            let y = sigmoid(vm(&e, &mat(p, "h_explicit"))[0]);

            let (xh, yh) = bert_ite_forward(m, u, &seq, target, Some(&side)).unwrap();
            assert!((xh - x).abs() < 1e-12 && (yh - y).abs() < 1e-12, "{variant}: {xh} vs {x}, {yh} vs {y}");
        }
    }
}

#[test]
fn batched_scores_match_single_examples() {
    let (_, side) = fixture();
    let cfg = ModelConfig {
        embedding_dim: 4,
        seq_len: 3,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::<f64>::new(Variant::BertIteSi, &cfg, vocab(&side), &mut rng).unwrap();
    let Model::Bert(m) = &model else { unreachable!() };
    let batch = feedrank::models::Batch {
        users: vec![0, 5, 2],
        items: vec![1, 2, 3],
        sequences: vec![4, 5, 6, 7, 8, 9, 10, 11, 0],
    };
    let scores = model.score(&batch, Some(&side)).unwrap();
    for r in 0..3 {
        let seq: Vec<usize> = batch.sequences[r * 3..r * 3 + 3].to_vec();
        let (x, y) = bert_ite_forward(m, batch.users[r], &seq, batch.items[r], Some(&side)).unwrap();
        assert!((scores[r] - x * y).abs() < 1e-14);
    }
}

#[test]
fn invalid_configurations_are_rejected() {
    let v = Vocab {
        users: 3,
        items: 3,
        categories: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bad_heads = ModelConfig {
        embedding_dim: 6,
        heads: 4,
        ..ModelConfig::default()
    };
    assert!(matches!(Model::<f32>::new(Variant::BertIte, &bad_heads, v, &mut rng), Err(Error::Config(_))));
    let no_side = Model::<f32>::new(Variant::IteSi, &ModelConfig::default(), v, &mut rng);
    assert!(matches!(no_side, Err(Error::Config(_))));
    let bad_tower = ModelConfig {
        embedding_dim: 2,
        explicit_depth: 4,
        ..ModelConfig::default()
    };
    assert!(Model::<f32>::new(Variant::BertIte, &bad_tower, v, &mut rng).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let synth = generate(&SyntheticConfig::default());
    let split = SplitOptions {
        negatives: 60,
        ..SplitOptions::default()
    };
    let ds = PreparedDataset::prepare(&synth.store, Some(&synth.categories), &split);
    let dir = tempfile::tempdir().unwrap();
    for variant in Variant::ALL {
        let v = Vocab {
            users: ds.train.num_users(),
            items: ds.train.num_items(),
            categories: 5,
        };
        let cfg = ModelConfig {
            seq_len: 5,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Model::<f32>::new(variant, &cfg, v, &mut rng).unwrap();
        let a = dir.path().join(format!("{variant}.a"));
        let b = dir.path().join(format!("{variant}.b"));
        checkpoint::save(&model, &a).unwrap();
        let loaded = checkpoint::load(&a).unwrap();
        checkpoint::save(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let before = evaluate(&model, &ds, 2, 1).unwrap();
        let after = evaluate(&loaded, &ds, 3, 1).unwrap();
        assert_eq!(before, after);
    }
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = Vocab {
        users: 4,
        items: 4,
        categories: 0,
    };
    let model = Model::<f32>::new(Variant::Ite, &ModelConfig::default(), v, &mut rng).unwrap();
    checkpoint::save(&model, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Format { .. })));
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(matches!(checkpoint::load(&path), Err(Error::Format { .. })));
}

/// An untrained model ranks the held-out item uniformly at random among
/// 1000 candidates, so HR@10 is Binomial(n, 0.01) / n.
#[test]
fn untrained_model_ranks_at_chance() {
    let (users, items) = (2400usize, 1500usize);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let events: Vec<Vec<Event>> = (0..users)
        .map(|_| {
            (0..6)
                .map(|t| Event {
                    timestamp: t,
                    item: rng.random_range(0..items as u32),
                    behaviour: if t >= 4 { Behaviour::Explicit } else { Behaviour::Implicit },
                })
                .collect()
        })
        .collect();
    let store = InteractionStore::from_events(
        (0..users).map(|u| u.to_string()).collect(),
        (0..items).map(|i| i.to_string()).collect(),
        events,
    );
    let ds = PreparedDataset::prepare(&store, None, &SplitOptions::default());
    assert!(ds.cases.len() >= 2000);
    let v = Vocab {
        users,
        items,
        categories: 0,
    };
    let model = Model::<f32>::new(Variant::Ite, &ModelConfig::default(), v, &mut rng).unwrap();
    let hr = evaluate(&model, &ds, 4, 0).unwrap().metrics(10).unwrap().hr;
    let n = ds.cases.len() as f64;
    let sigma = (0.01 * 0.99 / n).sqrt();
    assert!((hr - 0.01).abs() <= 3.0 * sigma, "HR@10 {hr} outside 0.01 ± {}", 3.0 * sigma);
}
