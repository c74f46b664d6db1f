use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vrdiff_cli::validate::Fault;
use vrdiff_cli::{bench, commands, validate, CliError, CliResult, RunConfig};

/// Receptor-conditioned ligand diffusion with virtual receptor compression.
///
/// Log verbosity follows VRDIFF_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "vrdiff", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset of receptor–ligand complexes.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of complexes.
        #[arg(long)]
        count: Option<usize>,
        /// Number of receptor templates shared among the complexes.
        #[arg(long)]
        families: Option<usize>,
    },
    /// Pretrain the virtual receptor autoencoder.
    PretrainVr(Common),
    /// Train the denoiser, fine-tuning the encoder.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a denoiser checkpoint written by `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Start without a pretrained virtual receptor.
        #[arg(long)]
        from_scratch: bool,
        /// Write the checkpoint every this many steps.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Stop after this many steps in total; continue later with --resume.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Generate ligands for a pocket from the dataset.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Number of ligands.
        #[arg(short = 'n', long)]
        samples: Option<usize>,
        /// Atoms per ligand; defaults to the reference ligand's size.
        #[arg(long)]
        ligand_atoms: Option<usize>,
        /// Complex id whose pocket is used; defaults to the first record.
        #[arg(long)]
        complex: Option<String>,
    },
    /// Time denoiser passes against receptor node count.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        repetitions: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        ligand_atoms: Option<usize>,
    },
    /// Run the property suite and report pass/fail per property.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Inject a known defect to confirm the suite reports it.
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset in JSON lines, one complex per line.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Embedding file, or a directory of `<complex id>.vremb` files.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Diffusion steps T.
    #[arg(short = 'T', long = "steps")]
    steps: Option<usize>,
    #[arg(long)]
    virtual_atoms: Option<usize>,
    #[arg(long)]
    pocket_atoms: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl Common {
    fn resolve(&self, extra: RunConfig) -> CliResult<RunConfig> {
        let file = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let flags = RunConfig {
            dataset: self.dataset.clone(),
            embeddings: self.embeddings.clone(),
            checkpoint: self.checkpoint.clone(),
            out: self.out.clone(),
            seed: self.seed,
            diffusion_steps: self.steps,
            virtual_atoms: self.virtual_atoms,
            pocket_atoms: self.pocket_atoms,
            epochs: self.epochs,
            batch: self.batch,
            learning_rate: self.lr,
            ..Default::default()
        };
        Ok(file.overlay(flags).overlay(extra))
    }
}

fn print_json(value: &impl serde::Serialize) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_or_print(cfg: &RunConfig, value: &impl serde::Serialize) -> CliResult<()> {
    match &cfg.out {
        Some(p) => {
            vrdiff_cli::config::require_writable_parent(p)?;
            let mut bytes = serde_json::to_vec_pretty(value)?;
            bytes.push(b'\n');
            vrdiff::diffcore::write_atomic(p, &bytes)?;
            Ok(())
        }
        None => print_json(value),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { common, count, families } => {
            let mut cfg = common.resolve(RunConfig::default())?;
            let mut synth = cfg.synth.clone().unwrap_or_default();
            synth.count = count.unwrap_or(synth.count);
            synth.families = families.unwrap_or(synth.families);
            cfg.synth = Some(synth);
            commands::synth(&cfg)?;
        }
        Command::PretrainVr(common) => {
            let cfg = common.resolve(RunConfig::default())?;
            print_json(&commands::pretrain_vr(&cfg)?)?;
        }
        Command::Train { common, resume, from_scratch, checkpoint_every, stop_after } => {
            let extra =
                RunConfig { resume, from_scratch: from_scratch.then_some(true), checkpoint_every, stop_after, ..Default::default() };
            let cfg = common.resolve(extra)?;
            print_json(&commands::train(&cfg)?)?;
        }
        Command::Sample { common, samples, ligand_atoms, complex } => {
            let cfg = common.resolve(RunConfig { samples, ligand_atoms, complex, ..Default::default() })?;
            let report = commands::sample_cmd(&cfg)?;
            log::info!("wrote {} ligands", report.ligands.len());
        }
        Command::Bench { common, repetitions, warmup, ligand_atoms } => {
            let cfg = common.resolve(RunConfig { repetitions, warmup, ligand_atoms, ..Default::default() })?;
            let report = bench::run_bench(&cfg)?;
            write_or_print(&cfg, &report)?;
        }
        Command::Validate { common, inject_fault } => {
            let cfg = common.resolve(RunConfig::default())?;
            let report = validate::run_validation(&cfg, inject_fault)?;
            write_or_print(&cfg, &report)?;
            let failed = report.failures();
            if !failed.is_empty() {
                let names: Vec<String> = failed.iter().map(|c| format!("{}::{}", c.module, c.property)).collect();
                return Err(CliError::Validation(format!("failing properties: {}", names.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VRDIFF_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage errors are config errors; help and version are not errors
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
