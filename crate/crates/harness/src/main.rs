use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sesc_harness::config::ExperimentConfig;
use sesc_harness::pipeline::{self, Layout};
use sesc_harness::report::{self, check_rows};
use sesc_harness::sweeps::{per_image_monotone, SweepRow};
use sesc_harness::HarnessError;

/// Semantic-aware image transmission experiments.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory holding every artifact.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    /// Retrain even if a checkpoint already exists.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and cache the synthetic dataset splits.
    GenData(Common),
    /// Masked-autoencoder pretraining.
    Pretrain(Train),
    /// Fine-tune the pretrained codec with the channel in the loop.
    Finetune(Train),
    /// Train the frozen downstream classifier.
    TrainTask(Train),
    /// Similarity versus number of sent features.
    SweepL(Common),
    /// Task accuracy versus SNR for every scheme.
    SweepSnr(Common),
    /// Symbols and accuracy versus threshold.
    SweepMu(Common),
    /// Reference codec over the SNR grid.
    BaselineEval(Common),
    /// Plots and summary from the sweep CSVs.
    Report {
        #[command(flatten)]
        common: Common,
        /// Output directory of a second run to compare CSVs against.
        #[arg(long)]
        compare: Option<PathBuf>,
    },
    /// Every stage in order.
    RunAll(Common),
}

fn setup(c: &Common) -> Result<(ExperimentConfig, Layout), HarnessError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.master_seed = seed;
    }
    cfg.validate()?;
    let out = Layout::new(&c.out)?;
    std::fs::write(out.path("config.toml"), cfg.to_toml()).map_err(|e| HarnessError::Io(out.path("config.toml").display().to_string(), e))?;
    Ok((cfg, out))
}

fn print_rows(rows: &[SweepRow]) {
    eprintln!("{} rows", rows.len());
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::GenData(c) => {
            let (cfg, out) = setup(&c)?;
            pipeline::gen_data(&cfg, &out)?;
        }
        Command::Pretrain(t) => {
            let (cfg, out) = setup(&t.common)?;
            let m = pipeline::pretrain(&cfg, &out, t.force)?;
            eprintln!("validation MSE {:?}", m.meta.validation_mse);
        }
        Command::Finetune(t) => {
            let (cfg, out) = setup(&t.common)?;
            let m = pipeline::finetune(&cfg, &out, t.force)?;
            eprintln!("validation MSE {:?}", m.meta.validation_mse);
        }
        Command::TrainTask(t) => {
            let (cfg, out) = setup(&t.common)?;
            pipeline::train_task(&cfg, &out, t.force)?;
        }
        Command::SweepL(c) => {
            let (cfg, out) = setup(&c)?;
            let t = pipeline::load_trained(&cfg, &out)?;
            let ctx = pipeline::context(&cfg, &out, &t)?;
            let rows = pipeline::sweep_l(&cfg, &out, &ctx)?;
            check_rows(&rows, ctx.l_total())?;
            print_rows(&rows);
        }
        Command::SweepSnr(c) => {
            let (cfg, out) = setup(&c)?;
            let t = pipeline::load_trained(&cfg, &out)?;
            let ctx = pipeline::context(&cfg, &out, &t)?;
            let rows = pipeline::sweep_snr(&cfg, &out, &ctx)?;
            check_rows(&rows, ctx.l_total())?;
            print_rows(&rows);
        }
        Command::SweepMu(c) => {
            let (cfg, out) = setup(&c)?;
            let t = pipeline::load_trained(&cfg, &out)?;
            let ctx = pipeline::context(&cfg, &out, &t)?;
            let rows = pipeline::sweep_mu(&cfg, &out, &ctx)?;
            check_rows(&rows, ctx.l_total())?;
            if let Some((i, mu)) = per_image_monotone(&ctx, &cfg.sweeps.mu_grid)? {
                return Err(HarnessError::Check(format!("image {i} sends more features at mu {mu}")));
            }
            print_rows(&rows);
        }
        Command::BaselineEval(c) => {
            let (cfg, out) = setup(&c)?;
            let t = pipeline::load_trained(&cfg, &out)?;
            let ctx = pipeline::context(&cfg, &out, &t)?;
            let rows = pipeline::baseline_eval(&cfg, &out, &ctx)?;
            check_rows(&rows, ctx.l_total())?;
            print_rows(&rows);
        }
        Command::Report { common, compare } => {
            let (cfg, out) = setup(&common)?;
            let t = pipeline::load_trained(&cfg, &out)?;
            let ctx = pipeline::context(&cfg, &out, &t)?;
            let summary = report::emit_with(&cfg, &out, &t, &ctx, compare.as_deref())?;
            print!("{}", summary.text);
            return Ok(summary.all_pass());
        }
        Command::RunAll(c) => {
            let (cfg, out) = setup(&c)?;
            let summary = pipeline::run_all(&cfg, &out)?;
            print!("{}", summary.text);
            return Ok(summary.all_pass());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
