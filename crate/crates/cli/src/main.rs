//! Command-line front end: data generation, training, evaluation, ablation,
//! threshold sweeps and attention dumps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use lctr_core::data::{self, Sample};
use lctr_core::harness::{self, EvalOptions};
use lctr_core::{checkpoint, rpam, LctrModel, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "lctr", version, about = "Weakly supervised localization toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override; falls back to LCTR_SEED, then the config file.
    #[arg(long, global = true, env = "LCTR_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic train/test split to disk.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint.
    Train {
        /// Dataset directory from `gen-data`; generated in memory if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write metrics, boxes and heatmaps.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Localize from the class map alone.
        #[arg(long)]
        no_rpam: bool,
    },
    /// Train both heads and write the four-row ablation table.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gt-known accuracy across binarization ratios, as CSV.
    SweepThreshold {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_rpam: bool,
    },
    /// Write per-block class-token and relation vectors plus the relation map.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A `P6` image; defaults to the first generated test image.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dataset(cfg: &RunConfig, dir: Option<&Path>) -> Result<(Vec<Sample>, Vec<Sample>)> {
    match dir {
        Some(d) => Ok((data::load_split(&d.join("train"))?, data::load_split(&d.join("test"))?)),
        None => Ok(data::generate_dataset(
            cfg.n_train,
            cfg.n_test,
            cfg.backbone.image_size,
            cfg.backbone.num_classes,
            cfg.seed,
        )?),
    }
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<LctrModel> {
    let mut model = LctrModel::new(cfg.model_config(), cfg.seed)?;
    checkpoint::load(path, &mut model.store)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(model)
}

fn grid_csv(map: &lctr_core::Tensor) -> String {
    let w = map.shape()[1];
    let mut s = String::new();
    for row in map.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
        let _ = writeln!(s, "{}", cells.join(","));
    }
    s
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData { out } => {
            let (train, test) = dataset(&cfg, None)?;
            data::save_split(&train, &out.join("train"))?;
            data::save_split(&test, &out.join("test"))?;
            println!("wrote {} train and {} test samples to {}", train.len(), test.len(), out.display());
        }
        Command::Train { data, out } => {
            let (train, _) = dataset(&cfg, data.as_deref())?;
            let (model, logs) = harness::train(&cfg, &train)?;
            for l in &logs {
                println!("epoch {} loss {:.6} train_acc {:.4}", l.epoch, l.loss, l.train_acc);
            }
            checkpoint::save(&model.store, &out)?;
            println!("checkpoint written to {}", out.display());
        }
        Command::Eval { checkpoint, data, out, threshold, no_rpam } => {
            let Some(ckpt) = checkpoint else {
                bail!("eval needs a trained model: pass --checkpoint <file>");
            };
            let model = load_model(&cfg, &ckpt)?;
            let (_, test) = dataset(&cfg, data.as_deref())?;
            let opts = EvalOptions {
                rpam_enabled: cfg.rpam_enabled && !no_rpam,
                threshold_ratio: threshold.unwrap_or(cfg.threshold_ratio),
            };
            let res = harness::run_eval(&model, &test, opts, &out)?;
            print!("{}", res.report.to_text());
        }
        Command::Ablate { data, out } => {
            let (train, test) = dataset(&cfg, data.as_deref())?;
            let rows = harness::ablate(&cfg, &train, &test)?;
            let table = harness::ablation_table(&rows);
            std::fs::write(&out, &table)?;
            print!("{table}");
        }
        Command::SweepThreshold { checkpoint, data, out, no_rpam } => {
            let model = load_model(&cfg, &checkpoint)?;
            let (_, test) = dataset(&cfg, data.as_deref())?;
            let rpam_enabled = cfg.rpam_enabled && !no_rpam;
            let curve = harness::sweep_threshold(&model, &test, rpam_enabled, &harness::default_sweep_ratios())?;
            let csv = harness::sweep_csv(&curve);
            std::fs::write(&out, &csv)?;
            print!("{csv}");
        }
        Command::DumpAttn { checkpoint, image, out } => {
            let model = load_model(&cfg, &checkpoint)?;
            let img = match image {
                Some(p) => data::decode_ppm(&std::fs::read(&p)?)?,
                None => {
                    let mut c = cfg.clone();
                    c.n_train = 0;
                    c.n_test = 1;
                    dataset(&c, None)?.1.remove(0).image
                }
            };
            let pred = model.predict(&img)?;
            let g = cfg.backbone.grid();
            std::fs::create_dir_all(&out)?;
            rpam::write_debug_csv(&pred.record, &out.join("blocks.csv"))?;
            let map = rpam::build_patch_relation_map(&pred.record, g, g)?;
            std::fs::write(out.join("relation_map.csv"), grid_csv(&map.map))?;
            println!("attention for {} blocks written to {}", map.source_blocks, out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
