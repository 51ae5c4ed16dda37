//! Pipeline stages behind the command-line tool: prepare a dataset, train
//! a model with per-epoch evaluation, evaluate a checkpoint.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ingest, read_category_file, IngestOptions, PreparedDataset, SplitOptions};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::models::{checkpoint, Model, ModelConfig, SideMode, Variant, Vocab};
use crate::training::{Trainer, TrainingConfig};

/// Cutoff used for per-epoch reporting and best-epoch selection.
pub const REPORT_K: usize = 10;
/// Seed for evaluation-time history padding. Fixed so that a checkpoint
/// scores the same whether evaluated during training or afterwards.
pub const EVAL_SEED: u64 = 0x5EED;

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    /// Prepared dataset file.
    pub dataset: PathBuf,
    pub out: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn new(variant: Variant, dataset: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        RunConfig {
            variant,
            dataset: dataset.into(),
            out: out.into(),
            workers: default_workers(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Defaults resolved, so the text reproduces the run on its own.
    pub fn effective(&self) -> RunConfig {
        let mut cfg = self.clone();
        cfg.training.batch_size.get_or_insert(self.variant.default_batch_size());
        cfg
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.model.validate(self.variant)?;
        self.training.validate()
    }
}

pub struct PrepareArgs<'a> {
    pub events: &'a Path,
    pub categories: Option<&'a Path>,
    pub out: &'a Path,
    pub ingest: IngestOptions,
    pub split: SplitOptions,
}

/// Ingests, splits and (optionally) attaches categories, then writes the
/// prepared dataset.
pub fn cmd_prepare(args: &PrepareArgs<'_>) -> Result<PreparedDataset> {
    let store = ingest(args.events, &args.ingest)?;
    let categories = args
        .categories
        .map(|p| read_category_file(p, args.ingest.delimiter))
        .transpose()?;
    let ds = PreparedDataset::prepare(&store, categories.as_ref(), &args.split);
    info!("{} evaluation cases", ds.cases.len());
    ds.save(args.out)?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    #[serde(rename = "hr@10")]
    pub hr: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the saved checkpoint; 0 means the initialization.
    pub best_epoch: usize,
    pub best: Option<Metrics>,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub no_timestamps: bool,
}

fn check_side_available(variant: Variant, ds: &PreparedDataset, path: &Path) -> Result<()> {
    if variant.side_mode() != SideMode::None && ds.side.is_none() {
        return Err(Error::Config(format!(
            "{variant} needs category side information, but {} was prepared without a category file",
            path.display()
        )));
    }
    Ok(())
}

fn append(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains per the config, evaluating after every epoch. The checkpoint
/// with the best HR@10 is kept (ties keep the earlier epoch).
pub fn cmd_train(cfg: &RunConfig, opts: TrainOptions) -> Result<TrainSummary> {
    let cfg = cfg.effective();
    cfg.validate()?;
    let ds = PreparedDataset::load(&cfg.dataset)?;
    check_side_available(cfg.variant, &ds, &cfg.dataset)?;

    let vocab = Vocab {
        users: ds.train.num_users(),
        items: ds.train.num_items(),
        categories: ds.side.as_ref().map_or(0, |s| s.num_categories()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.seed);
    let mut model = Model::<f32>::new(cfg.variant, &cfg.model, vocab, &mut rng)?;
    let mut trainer = Trainer::new(&model, &ds.train, ds.side.as_ref(), cfg.training.clone())?;

    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let config_path = cfg.out.join(CONFIG_FILE);
    fs::write(&config_path, cfg.to_toml()?).map_err(|e| Error::io(&config_path, e))?;
    let log_path = cfg.out.join(EPOCH_LOG);
    let csv_path = cfg.out.join(METRICS_FILE);
    File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    fs::write(&csv_path, "epoch,K,HR,NDCG,loss,seconds\n").map_err(|e| Error::io(&csv_path, e))?;
    let ckpt = cfg.out.join(CHECKPOINT_FILE);
    checkpoint::save(&model, &ckpt)?;

    let mut summary = TrainSummary {
        epochs: Vec::new(),
        best_epoch: 0,
        best: None,
        checkpoint: ckpt.clone(),
    };
    for _ in 0..cfg.training.epochs {
        let start = Instant::now();
        let report = trainer.train_epoch(&mut model, &mut rng)?;
        let m = evaluate(&model, &ds, cfg.workers, EVAL_SEED)?.metrics(REPORT_K)?;
        let seconds = if opts.no_timestamps {
            0.0
        } else {
            start.elapsed().as_secs_f64()
        };
        let rec = EpochRecord {
            epoch: report.epoch,
            loss: report.mean_loss,
            hr: m.hr,
            ndcg: m.ndcg,
            seconds,
        };
        info!(
            "epoch {:>3}  loss {:.5}  HR@10 {:.4}  NDCG@10 {:.4}  {:.1}s",
            rec.epoch, rec.loss, rec.hr, rec.ndcg, rec.seconds
        );
        let json = serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?;
        append(&log_path, &json)?;
        append(
            &csv_path,
            &format!("{},{},{},{},{},{}", rec.epoch, REPORT_K, rec.hr, rec.ndcg, rec.loss, rec.seconds),
        )?;
        if summary.best.is_none_or(|b| m.hr > b.hr) {
            checkpoint::save(&model, &ckpt)?;
            summary.best = Some(m);
            summary.best_epoch = rec.epoch;
        }
        summary.epochs.push(rec);
    }
    Ok(summary)
}

pub struct EvaluateArgs<'a> {
    pub checkpoint: &'a Path,
    pub dataset: &'a Path,
    pub k: usize,
    /// Report every cutoff from 1 to 20 instead of just `k`.
    pub topk_sweep: bool,
    pub workers: usize,
    /// CSV destination, if any.
    pub out: Option<&'a Path>,
}

/// Scores a saved checkpoint and returns one metrics row per cutoff.
pub fn cmd_evaluate(args: &EvaluateArgs<'_>) -> Result<Vec<Metrics>> {
    if args.k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if args.workers == 0 {
        return Err(Error::Config("workers must be at least 1".into()));
    }
    let model = checkpoint::load(args.checkpoint)?;
    let ds = PreparedDataset::load(args.dataset)?;
    check_side_available(model.variant(), &ds, args.dataset)?;
    let vocab = model.vocab();
    if vocab.users != ds.train.num_users() || vocab.items != ds.train.num_items() {
        return Err(Error::Config(format!(
            "checkpoint was trained on {} users / {} items, dataset has {} / {}",
            vocab.users,
            vocab.items,
            ds.train.num_users(),
            ds.train.num_items()
        )));
    }
    let ev = evaluate(&model, &ds, args.workers, EVAL_SEED)?;
    let rows = if args.topk_sweep {
        ev.sweep(1..=20)?
    } else {
        vec![ev.metrics(args.k)?]
    };
    if let Some(out) = args.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(out, metrics_csv(&rows)).map_err(|e| Error::io(out, e))?;
    }
    Ok(rows)
}

pub fn metrics_csv(rows: &[Metrics]) -> String {
    let mut s = String::from("K,HR,NDCG\n");
    for m in rows {
        s.push_str(&format!("{},{},{}\n", m.k, m.hr, m.ndcg));
    }
    s
}
