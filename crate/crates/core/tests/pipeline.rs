use std::fs;
use std::path::{Path, PathBuf};

use feedrank::data::synthetic::{generate, SyntheticConfig};
use feedrank::data::{IngestOptions, SplitOptions};
use feedrank::models::{checkpoint, Model, Variant, Vocab};
use feedrank::run::{
    cmd_evaluate, cmd_prepare, cmd_train, EvaluateArgs, PrepareArgs, RunConfig, TrainOptions, CHECKPOINT_FILE,
    CONFIG_FILE, EPOCH_LOG, METRICS_FILE,
};
use feedrank::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EVENTS: &str = "timestamp,visitorid,event,itemid,transactionid
1,u1,view,a,
2,u1,view,b,
3,u1,addtocart,b,
4,u1,view,c,
5,u1,transaction,c,1
6,u2,view,a,
7,u2,view,a,
8,u2,view,d,
9,u2,view,e,
10,u2,addtocart,a,
11,u3,view,a,
12,u3,view,b,
13,u3,view,c,
14,u3,view,d,
";

const CATEGORIES: &str = "itemid,categoryid\na,c1\nb,c1\nb,c2\nd,c3\n";

fn prepare(dir: &Path, events: &Path, categories: Option<&Path>, negatives: usize) -> PathBuf {
    let out = dir.join("data.frd");
    cmd_prepare(&PrepareArgs {
        events,
        categories,
        out: &out,
        ingest: IngestOptions::default(),
        split: SplitOptions {
            negatives,
            ..SplitOptions::default()
        },
    })
    .unwrap();
    out
}

#[test]
fn fixture_statistics_are_hand_counted() {
    let dir = tempfile::tempdir().unwrap();
    let ev = dir.path().join("events.csv");
    let cats = dir.path().join("cats.csv");
    fs::write(&ev, EVENTS).unwrap();
    fs::write(&cats, CATEGORIES).unwrap();
    let out = dir.path().join("data.frd");
    let ds = cmd_prepare(&PrepareArgs {
        events: &ev,
        categories: Some(&cats),
        out: &out,
        ingest: IngestOptions::default(),
        split: SplitOptions::default(),
    })
    .unwrap();
    // u3 has four events and is dropped; u1 {a,b,c} / {b,c}, u2 {a,d,e} / {a}
    let s = &ds.stats;
    assert_eq!((s.users, s.items, s.implicit, s.explicit), (2, 5, 6, 3));
    assert_eq!(s.categories, Some(3));
    assert!((s.sparsity - 0.1).abs() < 1e-12);
    assert_eq!(ds.cases.len(), 2);
    assert_eq!(ds.train.item_id(ds.cases[0].item), "c");
    assert_eq!(ds.train.item_id(ds.cases[1].item), "a");
    // two never-touched items per user remain as negatives
    assert!(ds.cases.iter().all(|c| c.negatives.len() == 2));
}

struct Synth {
    _dir: tempfile::TempDir,
    root: PathBuf,
    with_side: PathBuf,
    without_side: PathBuf,
}

fn synth() -> Synth {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = generate(&SyntheticConfig::default());
    let (ev, cats) = (root.join("events.csv"), root.join("cats.csv"));
    data.write_csv(&ev, &cats).unwrap();
    let with_side = prepare(&root, &ev, Some(&cats), 999);
    let plain = root.join("plain");
    fs::create_dir_all(&plain).unwrap();
    let without_side = prepare(&plain, &ev, None, 999);
    Synth {
        _dir: dir,
        root,
        with_side,
        without_side,
    }
}

fn config(s: &Synth, variant: Variant, dataset: &Path, out: &str, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::new(variant, dataset, s.root.join(out));
    cfg.workers = 2;
    cfg.model.seq_len = 5;
    cfg.training.epochs = epochs;
    cfg.training.batch_size = Some(128);
    cfg
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let s = synth();
    let cfg = config(&s, Variant::BertIteSi, &s.with_side, "zero", 0);
    let summary = cmd_train(&cfg, TrainOptions { no_timestamps: true }).unwrap();
    assert!(summary.epochs.is_empty());
    let saved = fs::read(cfg.out.join(CHECKPOINT_FILE)).unwrap();
    let v = Vocab {
        users: 50,
        items: 100,
        categories: 5,
    };
    let init = Model::<f32>::new(cfg.variant, &cfg.model, v, &mut ChaCha8Rng::seed_from_u64(cfg.training.seed)).unwrap();
    assert_eq!(checkpoint::to_container(&init).unwrap().to_bytes(), saved);
}

#[test]
fn training_is_reproducible_and_logged() {
    let s = synth();
    let a = config(&s, Variant::BertIte, &s.without_side, "a", 3);
    let mut b = a.clone();
    b.out = s.root.join("b");
    b.workers = 3;
    let sa = cmd_train(&a, TrainOptions { no_timestamps: true }).unwrap();
    let sb = cmd_train(&b, TrainOptions { no_timestamps: true }).unwrap();
    for f in [EPOCH_LOG, METRICS_FILE, CHECKPOINT_FILE] {
        assert_eq!(fs::read(a.out.join(f)).unwrap(), fs::read(b.out.join(f)).unwrap(), "{f}");
    }
    assert_eq!(sa.epochs, sb.epochs);
    let csv = fs::read_to_string(a.out.join(METRICS_FILE)).unwrap();
    assert!(csv.starts_with("epoch,K,HR,NDCG,loss,seconds\n"));
    assert_eq!(csv.lines().count(), 4);
    let log = fs::read_to_string(a.out.join(EPOCH_LOG)).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "loss", "hr@10", "ndcg@10", "seconds"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    // the written config reproduces the run
    let effective = RunConfig::load(&a.out.join(CONFIG_FILE)).unwrap();
    assert_eq!(effective.training.batch_size, Some(128));
    let mut again = effective.clone();
    again.out = s.root.join("c");
    cmd_train(&again, TrainOptions { no_timestamps: true }).unwrap();
    assert_eq!(
        fs::read(a.out.join(EPOCH_LOG)).unwrap(),
        fs::read(again.out.join(EPOCH_LOG)).unwrap()
    );

    // the saved best checkpoint scores what training reported
    let best = sa.best.unwrap();
    let rows = cmd_evaluate(&EvaluateArgs {
        checkpoint: &sa.checkpoint,
        dataset: &s.without_side,
        k: 10,
        topk_sweep: false,
        workers: 1,
        out: None,
    })
    .unwrap();
    assert_eq!(rows, vec![best]);
}

#[test]
fn side_variants_need_categories() {
    let s = synth();
    let cfg = config(&s, Variant::IteOssi, &s.without_side, "x", 1);
    let err = cmd_train(&cfg, TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    assert!(!cfg.out.exists());
}

#[test]
fn sweep_is_monotone_and_written() {
    let s = synth();
    let cfg = config(&s, Variant::Ite, &s.with_side, "ite", 1);
    let summary = cmd_train(&cfg, TrainOptions { no_timestamps: true }).unwrap();
    let csv = s.root.join("sweep/out.csv");
    let rows = cmd_evaluate(&EvaluateArgs {
        checkpoint: &summary.checkpoint,
        dataset: &s.with_side,
        k: 10,
        topk_sweep: true,
        workers: 2,
        out: Some(&csv),
    })
    .unwrap();
    assert_eq!(rows.len(), 20);
    assert!(rows.windows(2).all(|w| w[1].hr >= w[0].hr && w[1].ndcg >= w[0].ndcg));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 21);
    assert!(text.starts_with("K,HR,NDCG\n1,"));
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let s = synth();
    let bad = s.root.join("bad.ckpt");
    fs::write(&bad, b"FEEDRANK1 but not really").unwrap();
    let args = |ckpt: &Path| {
        cmd_evaluate(&EvaluateArgs {
            checkpoint: ckpt,
            dataset: &s.with_side,
            k: 10,
            topk_sweep: false,
            workers: 1,
            out: None,
        })
    };
    let e = args(&bad).unwrap_err();
    assert!(matches!(e, Error::Format { .. }));
    assert_eq!(e.exit_code(), 1);
    let e = args(&s.root.join("missing.ckpt")).unwrap_err();
    assert!(matches!(e, Error::Io { .. }));
    assert_eq!(e.exit_code(), 2);
}
