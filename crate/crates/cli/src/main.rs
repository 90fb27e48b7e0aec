use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slideseg_core::config::ExperimentConfig;
use slideseg_core::pipeline::{
    cmd_evaluate, cmd_generate, cmd_infer, cmd_report, cmd_train_classifier, cmd_train_refiner,
    render_report, Workspace,
};
use slideseg_core::Result;

#[derive(Parser, Debug)]
#[command(
    name = "slideseg",
    version,
    about = "Coarse-to-fine segmentation of synthetic slides"
)]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the workspace directory.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    /// Worker threads for generation and inference (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic datasets and held-out slides.
    Generate,
    /// Pretrain the patch classifier and fine-tune its adapters.
    TrainClassifier,
    /// Train the mask refiner on cached coarse masks.
    TrainRefiner,
    /// Write coarse and refined rasters.
    Infer {
        /// A single slide image; every held-out slide when omitted.
        #[arg(long)]
        wsi: Option<PathBuf>,
    },
    /// Score the rasters of the held-out slides.
    Evaluate,
    /// Print the result tables.
    Report,
    /// Print the effective config as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(ws) = &cli.workspace {
        cfg.paths.workspace = ws.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let ws = Workspace::new(&cfg);
    match &cli.command {
        Command::Generate => {
            let out = cmd_generate(&cfg, &ws, cli.threads)?;
            print!("{}", out.table);
            println!("source manifest  {}", out.source_manifest.display());
            println!("patch manifest   {}", out.patch_manifest.display());
            println!("region manifest  {}", out.region_manifest.display());
            println!("held-out slides  {}", out.eval_manifest.display());
        }
        Command::TrainClassifier => {
            let s = cmd_train_classifier(&cfg, &ws)?;
            println!("source val accuracy      {:.4}", s.source_val_accuracy);
            println!(
                "target val accuracy      {:.4} before adaptation",
                s.target_val_accuracy_before
            );
            for (i, (loss, acc)) in s
                .finetune_losses
                .iter()
                .zip(&s.target_val_accuracy)
                .enumerate()
            {
                println!("epoch {:>3}  loss {loss:.4}  val accuracy {acc:.4}", i + 1);
            }
            println!("target test accuracy     {:.4}", s.target_test_accuracy);
            println!("frozen checksum          {}", s.frozen_checksum);
        }
        Command::TrainRefiner => {
            let s = cmd_train_refiner(&cfg, &ws)?;
            println!(
                "regions {}  parameters {}  coarse cache hit {}",
                s.regions, s.parameters, s.cache_hit
            );
            let tail = s.total.len().min(50);
            let mean = |v: &[f64]| v[v.len() - tail..].iter().sum::<f64>() / tail.max(1) as f64;
            println!(
                "last {tail} steps: L_ref {:.4}  L_trans {:.4}  L_seg {:.4}",
                mean(&s.total),
                mean(&s.transition),
                mean(&s.segmentation)
            );
        }
        Command::Infer { wsi } => {
            for o in cmd_infer(&cfg, &ws, cli.threads, wsi.as_deref())? {
                println!(
                    "{}  {}  {}",
                    o.name,
                    o.coarse.display(),
                    o.refined.display()
                );
            }
        }
        Command::Evaluate => {
            let report = cmd_evaluate(&cfg, &ws)?;
            print!("{}", render_report(&report));
        }
        Command::Report => print!("{}", cmd_report(&cfg, &ws)?),
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
