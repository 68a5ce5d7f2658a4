//! Command implementations behind the `srlora` binary.

pub mod commands;
pub mod vit;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "srlora", version, about = "Stable-rank guided low-rank adaptation toolkit")]
pub struct Cli {
    /// Overrides every seed in the invoked command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for outputs that are not given an explicit path.
    #[arg(long, global = true, default_value = "srlora-out")]
    pub out_dir: PathBuf,
    /// Relative singular-value threshold (analyze: effective rank, default 1e-6;
    /// spectrum: count above, default 1e-3).
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-tensor norms and ranks of a bundle as CSV.
    Analyze {
        bundle: PathBuf,
        /// Defaults to `<out-dir>/analysis.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Allocates adapter ranks (`stable` or `fixed:R`) and prints the budget.
    Plan {
        bundle: PathBuf,
        strategy: String,
        #[arg(long, default_value = "ceil")]
        rounding: String,
        /// Defaults to `<out-dir>/plan.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generates a task, pretrains, plans and trains from a JSON run config.
    Train { config: PathBuf },
    /// Pearson correlation of (ΔW effective rank, metric gain) across reports.
    Correlate {
        /// Glob matching report.json files.
        reports: String,
        /// Defaults to `<out-dir>/correlation.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Singular values of a model's pooled features on a dataset split.
    Spectrum {
        model: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Defaults to `<out-dir>/spectrum.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a seeded bundle with ViT encoder geometry.
    VitBundle {
        dir: PathBuf,
        #[arg(long, default_value_t = 12)]
        layers: usize,
        #[arg(long, default_value_t = 768)]
        dim: usize,
        #[arg(long, default_value_t = 3072)]
        mlp_dim: usize,
    },
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let out = |given: Option<PathBuf>, name: &str| given.unwrap_or_else(|| cli.out_dir.join(name));
    match cli.command {
        Command::Analyze { ref bundle, out: ref o } => {
            let path = out(o.clone(), "analysis.csv");
            commands::analyze(
                bundle,
                &path,
                cli.threshold
                    .unwrap_or(srlora::linalg::DEFAULT_EFFECTIVE_RANK_THRESHOLD),
            )
        }
        Command::Plan {
            ref bundle,
            ref strategy,
            ref rounding,
            out: ref o,
        } => {
            let path = out(o.clone(), "plan.json");
            let summary = commands::plan(bundle, strategy, rounding, &path)?;
            print!("{summary}");
            Ok(())
        }
        Command::Train { ref config } => {
            let summary = commands::train(config, &cli.out_dir, cli.seed)?;
            print!("{summary}");
            Ok(())
        }
        Command::Correlate {
            ref reports,
            out: ref o,
        } => {
            let path = out(o.clone(), "correlation.json");
            let r = commands::correlate(reports, &path)?;
            println!("pearson: {r}");
            Ok(())
        }
        Command::Spectrum {
            ref model,
            ref dataset,
            ref split,
            out: ref o,
        } => {
            let path = out(o.clone(), "spectrum.csv");
            let count = commands::spectrum(model, dataset, split, &path, cli.threshold.unwrap_or(1e-3))?;
            println!("above_threshold: {count}");
            Ok(())
        }
        Command::VitBundle {
            ref dir,
            layers,
            dim,
            mlp_dim,
        } => {
            let shape = vit::VitShape {
                layers,
                dim,
                mlp_dim,
                ..vit::VitShape::BASE
            };
            let b = vit::vit_bundle(shape, cli.seed.unwrap_or(0));
            b.save(dir)?;
            println!("backbone_total: {}", b.backbone_total());
            Ok(())
        }
    }
}
