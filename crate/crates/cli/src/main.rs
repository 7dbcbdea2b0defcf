use std::path::PathBuf;
use std::process::ExitCode;

use cdnet::mil::MilHyper;
use cdnet::model::Arch;
use cdnet_cli::{
    cmd_attention, cmd_complexity, cmd_extract, cmd_gen_data, cmd_mil, cmd_pretrain, PretrainArgs, RunConfig,
    LABELS,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cdnet", version, about = "Context-detail transformer pipeline on synthetic pyramids")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// RNG seed for every stochastic step.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model preset: toy or reference.
    #[arg(long, global = true, default_value = "toy")]
    preset: String,
    /// Flat key = value model config; overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (output file for `attention`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic slides, tile them and write a manifest.
    GenData {
        /// Slides per class.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Level-L slide side in pixels (default: four patches).
        #[arg(long)]
        slide_px: Option<u32>,
    },
    /// Self-distillation pretraining on the manifest's tissue pairs.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Peak learning rate (default: batch-scaled base rate).
        #[arg(long)]
        lr: Option<f64>,
        /// Backbone: cdnet or vit.
        #[arg(long, default_value = "cdnet")]
        arch: String,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Per-slide feature files from a pretrained checkpoint.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate the slide-level MIL head.
    Mil {
        #[arg(long)]
        features: PathBuf,
        /// Slide labels (default: labels.tsv in the feature directory).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
    },
    /// Export the CLS attention map of one pair as a PGM.
    Attention {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pair_id: String,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Block index, 1-based.
        #[arg(long, default_value_t = 1)]
        layer: usize,
    },
    /// Attention cost tables for the given presets.
    Complexity {
        #[arg(default_values_t = vec!["reference".to_string()])]
        presets: Vec<String>,
    },
}

fn run(cli: Cli) -> cdnet::Result<()> {
    let c = cli.common;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let mut rc = RunConfig::new(&c.preset, c.config.as_deref(), c.seed, out.clone())?;
    if c.sequential {
        rc.exec = cdnet::parallel::Exec::Sequential;
    }
    match cli.command {
        Command::GenData { count, slide_px } => {
            let m = cmd_gen_data(&rc, count, slide_px)?;
            println!("manifest {}", m.display());
        }
        Command::Pretrain {
            manifest,
            epochs,
            batch_size,
            lr,
            arch,
            max_steps,
        } => {
            let args = PretrainArgs {
                epochs,
                batch_size,
                peak_lr: lr,
                arch: Arch::parse(&arch)?,
                max_steps,
            };
            let ck = cmd_pretrain(&rc, &manifest, &args)?;
            println!("checkpoint {}", ck.display());
        }
        Command::Extract { manifest, checkpoint } => {
            let e = cmd_extract(&rc, &manifest, &checkpoint)?;
            println!(
                "wrote {} feature files to {} ({} skipped)",
                e.written.len(),
                e.dir.display(),
                e.skipped.len()
            );
        }
        Command::Mil {
            features,
            labels,
            epochs,
        } => {
            let labels = labels.unwrap_or_else(|| features.join(LABELS));
            let hyper = MilHyper {
                epochs,
                ..MilHyper::default()
            };
            let r = cmd_mil(&rc, &features, &labels, &hyper)?;
            println!("accuracy {:.4}", r.accuracy);
            match r.auc {
                Some(a) => println!("auc {a:.4}"),
                None => println!("auc NA"),
            }
            println!("best epoch {} (train/val/test {}/{}/{})", r.best_epoch, r.train, r.val, r.test);
        }
        Command::Attention {
            manifest,
            pair_id,
            checkpoint,
            layer,
        } => {
            let path = c.out.unwrap_or_else(|| PathBuf::from(format!("{pair_id}_attention.pgm")));
            let p = cmd_attention(&manifest, &pair_id, &checkpoint, layer, &path)?;
            println!("attention map {}", p.display());
        }
        Command::Complexity { presets } => print!("{}", cmd_complexity(&presets)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
