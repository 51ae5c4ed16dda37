use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use feedrank::data::synthetic::{generate, SyntheticConfig};
use feedrank::data::{convert_item_properties, Classification, ColumnNames, IngestOptions, SplitOptions};
use feedrank::models::Variant;
use feedrank::run::{
    cmd_evaluate, cmd_prepare, cmd_train, metrics_csv, EvaluateArgs, PrepareArgs, RunConfig, TrainOptions,
};
use feedrank::{Error, Result};

#[derive(Parser)]
#[command(name = "feedrank", version, about = "Train and evaluate implicit-to-explicit recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest an event log, split it leave-one-out and save the dataset.
    Prepare {
        /// Event log (timestamp, user, event type, item columns).
        #[arg(long)]
        events: PathBuf,
        /// `item_id,category_id` file; needed by the -si / -ossi variants.
        #[arg(long)]
        categories: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Negatives ranked against each held-out item.
        #[arg(long, default_value_t = 999)]
        negatives: usize,
        #[arg(long, default_value_t = 5)]
        min_interactions: usize,
        #[arg(long, default_value_t = ',')]
        delimiter: char,
        /// Event classification, e.g. `view=implicit,addtocart=explicit`.
        #[arg(long)]
        events_map: Option<String>,
        #[arg(long, default_value = "timestamp")]
        timestamp_col: String,
        #[arg(long, default_value = "visitorid")]
        user_col: String,
        #[arg(long, default_value = "event")]
        event_col: String,
        #[arg(long, default_value = "itemid")]
        item_col: String,
    },
    /// Extract `itemid,categoryid` rows from Retail Rocket item_properties files.
    ConvertCategories {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Print a config file with every default filled in.
    Config {
        #[arg(long, default_value = "bert-ite")]
        variant: String,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per a config file, evaluating after each epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        /// Write 0 for wall-clock columns so logs compare byte for byte.
        #[arg(long)]
        no_timestamps: bool,
    },
    /// Score a checkpoint on a prepared dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, short = 'k', default_value_t = 10)]
        k: usize,
        /// Report K = 1..20.
        #[arg(long)]
        topk_sweep: bool,
        #[arg(long)]
        workers: Option<usize>,
        /// Also write the metrics CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic event log with planted category preferences.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        users: usize,
        #[arg(long, default_value_t = 100)]
        items: usize,
        #[arg(long, default_value_t = 5)]
        categories: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn workers_or_default(w: Option<usize>) -> usize {
    w.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn delimiter_byte(c: char) -> Result<u8> {
    u8::try_from(c)
        .ok()
        .filter(u8::is_ascii)
        .ok_or_else(|| Error::Config(format!("delimiter {c:?} is not a single ASCII character")))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare {
            events,
            categories,
            out,
            seed,
            negatives,
            min_interactions,
            delimiter,
            events_map,
            timestamp_col,
            user_col,
            event_col,
            item_col,
        } => {
            let classification = match events_map {
                Some(s) => Classification::parse(&s)?,
                None => Classification::default(),
            };
            let ingest = IngestOptions {
                columns: ColumnNames {
                    timestamp: timestamp_col,
                    user: user_col,
                    event: event_col,
                    item: item_col,
                },
                delimiter: delimiter_byte(delimiter)?,
                classification,
                min_interactions,
            };
            let split = SplitOptions {
                negatives,
                seed,
                ..SplitOptions::default()
            };
            let ds = cmd_prepare(&PrepareArgs {
                events: &events,
                categories: categories.as_deref(),
                out: &out,
                ingest,
                split,
            })?;
            println!("{}", ds.stats);
            println!("eval cases {}", ds.cases.len());
        }
        Command::ConvertCategories { out, inputs } => {
            let refs: Vec<&std::path::Path> = inputs.iter().map(PathBuf::as_path).collect();
            let n = convert_item_properties(&refs, &out)?;
            println!("wrote categories for {n} items to {}", out.display());
        }
        Command::Config { variant, dataset, out } => {
            let variant: Variant = variant.parse()?;
            print!("{}", RunConfig::new(variant, dataset, out).effective().to_toml()?);
        }
        Command::Train {
            config,
            seed,
            out,
            workers,
            no_timestamps,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.training.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let summary = cmd_train(&cfg, TrainOptions { no_timestamps })?;
            match summary.best {
                Some(m) => println!(
                    "best epoch {}: HR@{} {:.4}  NDCG@{} {:.4}  ({})",
                    summary.best_epoch,
                    m.k,
                    m.hr,
                    m.k,
                    m.ndcg,
                    summary.checkpoint.display()
                ),
                None => println!("no epochs run; initialization saved to {}", summary.checkpoint.display()),
            }
        }
        Command::Evaluate {
            checkpoint,
            dataset,
            k,
            topk_sweep,
            workers,
            out,
        } => {
            let rows = cmd_evaluate(&EvaluateArgs {
                checkpoint: &checkpoint,
                dataset: &dataset,
                k,
                topk_sweep,
                workers: workers_or_default(workers),
                out: out.as_deref(),
            })?;
            print!("{}", metrics_csv(&rows));
        }
        Command::Synth {
            out,
            users,
            items,
            categories,
            seed,
        } => {
            if categories == 0 || items < categories {
                return Err(Error::Config("need at least one item per category".into()));
            }
            let data = generate(&SyntheticConfig {
                users,
                items,
                categories,
                seed,
                ..SyntheticConfig::default()
            });
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let (ev, cats) = (out.join("events.csv"), out.join("categories.csv"));
            data.write_csv(&ev, &cats)?;
            info!("wrote {} and {}", ev.display(), cats.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => {
            let _ = std::io::stdout().flush();
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
