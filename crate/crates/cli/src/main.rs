use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndpca_core::channel::{ChannelParams, ChannelTrace};
use ndpca_core::dsp::{read_wav, write_wav};
use ndpca_core::harness::{self, Checkpoint, ExperimentConfig, SweepResult, CHECKPOINT_FILE};
use ndpca_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ndpca", version, about = "Bandwidth-adaptive distributed speech compression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a starting configuration file.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        /// Full-size spectrograms and schedule instead of the desk setup.
        #[arg(long)]
        full_scale: bool,
    },
    /// Train one pipeline; writes checkpoint.json and losses.csv to the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Perceptual weight; a positive value also turns on the task loss.
        #[arg(long)]
        perc_weight: Option<f64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Held-out PSNR per budget for one or more checkpoints.
    Sweep {
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one task-aware run per perceptual weight, then sweep their distortion.
    Rdp {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,1.0")]
        weights: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compress four mic recordings at a budget and run the enhancer on the result.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        /// Four WAV files, one per microphone, in source order.
        #[arg(long = "in", num_args = 4, required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        budget: usize,
    },
    /// Render SVG figures from a sweep CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `time_s,capacity_bps` trace for the bandwidth figure.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

fn apply_perc_weight(cfg: &mut ExperimentConfig, w: f64) {
    cfg.weights.perceptual = w;
    if cfg.weights.task == 0.0 {
        cfg.weights.task = 1.0;
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { out, full_scale } => {
            let cfg = if full_scale { ExperimentConfig::full_scale() } else { ExperimentConfig::desk() };
            std::fs::write(&out, cfg.to_toml_string()?).map_err(|e| Error::Value(format!("{}: {e}", out.display())))?;
        }
        Command::Train { config, out, epochs, perc_weight, resume } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(w) = perc_weight {
                apply_perc_weight(&mut cfg, w);
            }
            cfg.validate()?;
            let data = harness::prepare_data(&cfg.data, cfg.seed)?;
            let ck = if resume {
                harness::resume(&cfg.out_dir.join(CHECKPOINT_FILE), cfg.epochs, &data)?
            } else {
                harness::train_on(&cfg, &data)?
            };
            println!("trained {} for {} epochs ({} steps) into {}", ck.pipeline.variant.label(), ck.epochs_done, ck.step, cfg.out_dir.display());
        }
        Command::Sweep { ckpts, budgets, out } => {
            let loaded = ckpts.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
            let first = &loaded[0].config;
            let budgets = if budgets.is_empty() { first.budgets.clone() } else { budgets };
            let data = harness::prepare_data(&first.data, first.seed)?;
            let res = harness::eval_bandwidth_sweep(&loaded, &budgets, &data.test)?;
            res.write_csv(&out)?;
            print_rows(&res);
        }
        Command::Rdp { config, weights, budgets, out } => {
            let base = ExperimentConfig::load(&config)?;
            let budgets = if budgets.is_empty() { base.budgets.clone() } else { budgets };
            let data = harness::prepare_data(&base.data, base.seed)?;
            let mut ckpts = Vec::new();
            for &w in &weights {
                let mut cfg = base.clone();
                apply_perc_weight(&mut cfg, w);
                cfg.out_dir = out.with_extension("").join(format!("w{w}"));
                let path = cfg.out_dir.join(CHECKPOINT_FILE);
                if !path.exists() {
                    harness::train_on(&cfg, &data)?;
                }
                ckpts.push((w, path));
            }
            let res = harness::rdp_sweep(&ckpts, &budgets, &data.test)?;
            res.write_csv(&out)?;
            print_rows(&res);
        }
        Command::Enhance { ckpt, inputs, out, budget } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mics = inputs.iter().map(|p| read_wav(p)).collect::<Result<Vec<_>>>()?;
            let wav = harness::enhance_recordings(&ck, &mics, budget)?;
            write_wav(&out, &wav)?;
            println!("wrote {} samples to {}", wav.len(), out.display());
        }
        Command::Plot { csv, out, trace } => {
            let params = ChannelParams::default();
            let loaded = trace.as_deref().map(ChannelTrace::read_csv).transpose()?;
            let files = harness::emit_plots(&csv, &out, loaded.as_ref().map(|t| (t, &params)))?;
            for f in files {
                println!("{}", display(&f));
            }
        }
    }
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn print_rows(res: &SweepResult) {
    println!("variant ndpca budget psnr_db task");
    for r in &res.rows {
        println!("{} {} {} {:.3} {:.5}", r.variant, r.ndpca, r.budget, r.psnr_db, r.task);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
