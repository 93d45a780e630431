//! `sgreid` command-line front end.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use sgreid_core::pipeline::{self, Config, EvalFlags, SynthConfig};

#[derive(Debug, Parser)]
#[command(name = "sgreid", version, about = "Person re-identification from images and scene graphs")]
struct Cli {
    /// Flat TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print every configuration key with its value and exit.
    #[arg(long)]
    dump_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan the dataset directories and write the manifest.
    Ingest,
    /// Generate scene graphs for every image (resumable).
    Graphgen,
    /// Build the visual feature store and the text embedding store.
    Embed,
    /// Train the model.
    Train {
        /// Continue from the latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the query and gallery splits.
    Eval {
        /// Checkpoint directory; defaults to the latest one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, overrides_with = "no_rerank")]
        rerank: bool,
        #[arg(long)]
        no_rerank: bool,
        #[arg(long)]
        k1: Option<usize>,
        #[arg(long)]
        k2: Option<usize>,
        #[arg(long)]
        lambda_rr: Option<f64>,
        /// Treat the run as cross-dataset even if the dataset names match.
        #[arg(long)]
        cross_dataset: bool,
    },
    /// Attribute query images to scene-graph nodes.
    Attribute {
        /// Image ids; defaults to the first configured number of queries.
        image_ids: Vec<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the risk report from evaluation and attribution outputs.
    Report,
    /// Generate a synthetic dataset with fixtures and a config.
    Synth {
        /// Output directory.
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        train_identities: usize,
        #[arg(long, default_value_t = 8)]
        test_identities: usize,
        #[arg(long, default_value_t = 10)]
        images_per_identity: usize,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;
    if cli.dump_config {
        print!("{}", cfg.dump());
        return Ok(());
    }
    let Some(command) = cli.command else {
        anyhow::bail!("no command given; see --help");
    };
    match command {
        Command::Ingest => {
            let m = pipeline::ingest_stage(&cfg)?;
            println!(
                "{}: train {}/{} query {}/{} gallery {}/{} (images/identities)",
                m.dataset,
                m.train.images,
                m.train.identities,
                m.query.images,
                m.query.identities,
                m.gallery.images,
                m.gallery.identities
            );
        }
        Command::Graphgen => {
            let s = pipeline::graphgen_stage(&cfg)?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Embed => {
            let s = pipeline::embed_stage(&cfg)?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Train { resume } => {
            let out = pipeline::train_stage(&cfg, resume)?;
            if let Some(last) = out.metrics.last() {
                println!("step {} epoch {} loss {:.6}", last.step, last.epoch, last.total);
            }
            if let Some(ckpt) = out.last_checkpoint {
                println!("checkpoint {}", ckpt.display());
            }
        }
        Command::Eval {
            checkpoint,
            rerank,
            no_rerank,
            k1,
            k2,
            lambda_rr,
            cross_dataset,
        } => {
            cfg.k1 = k1.unwrap_or(cfg.k1);
            cfg.k2 = k2.unwrap_or(cfg.k2);
            cfg.lambda_rr = lambda_rr.unwrap_or(cfg.lambda_rr);
            cfg.validate()?;
            let flags = EvalFlags {
                checkpoint,
                rerank: if no_rerank {
                    Some(false)
                } else {
                    rerank.then_some(true)
                },
                cross_dataset,
            };
            for (stem, r) in pipeline::eval_stage(&cfg, &flags)?.reports {
                println!("{stem}: R@1 {:.4} R@5 {:.4} mAP {:.4}", r.rank1, r.rank5, r.map);
            }
        }
        Command::Attribute { image_ids, checkpoint } => {
            let records = pipeline::attribute_stage(&cfg, &image_ids, checkpoint.as_deref())?;
            println!("attributed {} images into {}", records.len(), cfg.reports_dir.display());
        }
        Command::Report => {
            let report = pipeline::report_stage(&cfg)?;
            print!("{}", report.to_markdown());
        }
        Command::Synth {
            out,
            train_identities,
            test_identities,
            images_per_identity,
        } => {
            let synth = SynthConfig {
                seed: cfg.seed,
                train_identities,
                test_identities,
                images_per_identity,
                ..SynthConfig::default()
            };
            let truth = pipeline::synthesize(&out, &synth)?;
            info!("ground truth in {}", out.join(pipeline::TRUTH_FILE).display());
            println!(
                "wrote {} images to {}; run with --config {}",
                truth.samples.len(),
                truth.data_root.display(),
                out.join("config.toml").display()
            );
        }
    }
    Ok(())
}
