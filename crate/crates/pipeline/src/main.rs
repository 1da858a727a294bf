use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dvc_pipeline::{run_all, run_stage, sweep, PipelineConfig, PipelineError, RunDir, Stage};

#[derive(Parser)]
#[command(name = "dvc", version, about = "Dense video captioning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides every stage seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: StageArgs,
    /// Codebook sizes, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    vocab: Vec<usize>,
    /// Co-occurrence windows, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    window: Vec<usize>,
}

#[derive(Subcommand)]
enum Command {
    Synth(StageArgs),
    Codebook(StageArgs),
    Cooccur(StageArgs),
    Embed(StageArgs),
    TrainCaptionerBimodal(StageArgs),
    TrainProposals(StageArgs),
    Propose(StageArgs),
    TrainCaptionerVanilla(StageArgs),
    Caption(StageArgs),
    Eval(StageArgs),
    /// Runs every stage in order.
    All(StageArgs),
    /// Retrains everything after `synth` for each grid point.
    Sweep(SweepArgs),
}

fn load(args: &StageArgs) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg = cfg.seeded(seed);
    }
    if let Some(out) = &args.out {
        cfg.paths.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let (stage, args) = match cli.command {
        Command::Synth(a) => (Stage::Synth, a),
        Command::Codebook(a) => (Stage::Codebook, a),
        Command::Cooccur(a) => (Stage::Cooccur, a),
        Command::Embed(a) => (Stage::Embed, a),
        Command::TrainCaptionerBimodal(a) => (Stage::TrainCaptionerBimodal, a),
        Command::TrainProposals(a) => (Stage::TrainProposals, a),
        Command::Propose(a) => (Stage::Propose, a),
        Command::TrainCaptionerVanilla(a) => (Stage::TrainCaptionerVanilla, a),
        Command::Caption(a) => (Stage::Caption, a),
        Command::Eval(a) => (Stage::Eval, a),
        Command::All(a) => {
            let report = run_all(&load(&a)?)?;
            print!("{}", report.to_text());
            return Ok(());
        }
        Command::Sweep(a) => {
            let table = sweep(&load(&a.common)?, &a.vocab, &a.window)?;
            print!("{}", table.to_text());
            return Ok(());
        }
    };
    let cfg = load(&args)?;
    run_stage(stage, &cfg)?;
    let dir = RunDir::new(&cfg.paths.out_dir).stage(stage);
    if stage == Stage::Eval {
        let text = std::fs::read_to_string(dir.join(dvc_pipeline::report::REPORT_TXT))
            .map_err(|e| PipelineError::io(&dir, e))?;
        print!("{text}");
    } else {
        println!("{stage}: wrote {}", dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dvc: {e}");
            ExitCode::FAILURE
        }
    }
}
