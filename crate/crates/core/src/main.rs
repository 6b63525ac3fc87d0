use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aeotgan::config::RunConfig;
use aeotgan::pipeline::{emit_plots, load_dataset, run_pipeline, write_dataset, RunManifest, RunOptions, Stage};
use aeotgan::Result;

#[derive(Parser)]
#[command(name = "aeotgan", version, about = "Autoencoder + optimal-transport latent sampler + GAN fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Reuse completed stages whose inputs are unchanged.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset to <out>/data.
    MakeData(Common),
    /// Train the autoencoder and encode the data.
    TrainAe(Common),
    /// Solve the transport map onto the latent codes.
    FitOt(Common),
    /// Fine-tune the decoder adversarially.
    TrainGan(Common),
    /// Score generated samples.
    Eval(Common),
    /// Render SVG figures of a finished run.
    Plot(Common),
    /// Every stage, then the figures.
    Run(Common),
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage(c: &Common, until: Stage) -> Result<RunManifest> {
    let m = run_pipeline(&config(c)?, &c.out, RunOptions { resume: c.resume, until, reuse_upstream: true })?;
    report(&m);
    Ok(m)
}

fn report(m: &RunManifest) {
    for s in &m.stages {
        println!("{:<10} {:?}", s.stage.name(), s.status);
        for n in &s.notes {
            println!("  note: {n}");
        }
    }
    if let Some(r) = &m.metrics {
        println!(
            "latent gap max {:.4} (ε = {:.4}), gap fraction {:?}, mode shares {:?}",
            r.latent_code_gap.max, r.epsilon, r.gap_fraction, r.mode_shares
        );
    }
}

fn plots(out: &Path) -> Result<()> {
    for p in emit_plots(&RunManifest::load(out)?, out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeData(c) => {
            let cfg = config(&c)?;
            for (name, p) in write_dataset(&load_dataset(&cfg)?, &c.out.join("data"))? {
                println!("{name}: {}", p.display());
            }
        }
        Command::TrainAe(c) => {
            stage(&c, Stage::TrainAe)?;
        }
        Command::FitOt(c) => {
            stage(&c, Stage::FitOt)?;
        }
        Command::TrainGan(c) => {
            stage(&c, Stage::TrainGan)?;
        }
        Command::Eval(c) => {
            stage(&c, Stage::Eval)?;
        }
        Command::Plot(c) => plots(&c.out)?,
        Command::Run(c) => {
            let m = run_pipeline(&config(&c)?, &c.out, RunOptions { resume: c.resume, ..RunOptions::default() })?;
            report(&m);
            plots(&c.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
