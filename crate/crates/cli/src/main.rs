use std::path::PathBuf;
use std::process::ExitCode;

use cda_cli::config::RunConfig;
use cda_cli::error::{CliError, Result};
use cda_cli::pipeline::Pipeline;
use cda_core::data::synth::{write_synthetic, SyntheticSpec};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cda", version, about = "Compound domain adaptation for live/spoof classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic source domain and compound target domain.
    MakeSynth {
        /// TOML synthetic spec; built-in defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage A: supervised source training.
    TrainSource(RunArgs),
    /// Stage B: memory module and adversarial target adaptation.
    Adapt(RunArgs),
    /// Stage C: pseudo labels and the domain specifier network.
    TrainDsn(RunArgs),
    /// Rank target samples by domain distance to the source.
    Rank(RunArgs),
    /// Stage D: curriculum re-adaptation.
    AdaptCurriculum(RunArgs),
    /// Score source-only, adapted and final networks on the target test split.
    Eval(RunArgs),
    /// Write 2-D feature projections of the target set.
    ExportEmbed(RunArgs),
    /// Every stage in order, then eval.
    RunAll(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = "CDA_WORKDIR")]
    workdir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Epochs for every training stage.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    no_memory: bool,
    #[arg(long)]
    no_curriculum: bool,
    /// Re-run stages whose outputs are already current.
    #[arg(long)]
    force: bool,
    /// Disable data-parallel execution.
    #[arg(long)]
    sequential: bool,
}

impl RunArgs {
    fn open(&self) -> Result<Pipeline> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.insert("epochs".into(), toml::Value::Integer(e as i64));
            cfg.epochs = Default::default();
        }
        if self.no_memory {
            cfg.memory_enabled = false;
        }
        if self.no_curriculum {
            cfg.curriculum_enabled = false;
        }
        if self.sequential {
            cfg.train.insert("exec".into(), toml::Value::String("sequential".into()));
        }
        cfg.validate()?;
        let workdir = self
            .workdir
            .clone()
            .or_else(|| cfg.workdir.clone())
            .ok_or_else(|| CliError::Config("no workdir: pass --workdir, set CDA_WORKDIR or `workdir` in the config".into()))?;
        Pipeline::open(cfg, workdir, self.force)
    }
}

fn make_synth(spec: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let spec = match spec {
        Some(p) => {
            let text = std::fs::read_to_string(&p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<SyntheticSpec>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    let s = write_synthetic(&spec, &out)?;
    println!(
        "source: {} samples -> {}\ntarget: {} samples in {} sub-domains -> {}\nshape: {:?}",
        s.source_samples,
        s.source_manifest.display(),
        s.target_samples,
        s.num_subdomains,
        s.target_manifest.display(),
        s.shape
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeSynth { spec, out } => make_synth(spec, out),
        Command::TrainSource(a) => a.open()?.train_source().map(drop),
        Command::Adapt(a) => a.open()?.adapt().map(drop),
        Command::TrainDsn(a) => a.open()?.train_dsn().map(drop),
        Command::Rank(a) => a.open()?.rank().map(drop),
        Command::AdaptCurriculum(a) => a.open()?.adapt_curriculum().map(drop),
        Command::Eval(a) => a.open()?.eval().map(drop),
        Command::ExportEmbed(a) => a.open()?.export_embed().map(drop),
        Command::RunAll(a) => a.open()?.run_all().map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
