//! `helix`: phantoms, simulation, training, reconstruction, evaluation and
//! self-checks for turn-split helical CT reconstruction.

mod commands;
mod dataset;
mod manifest;
mod selftest;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use commands::Method;
use helix_core::volume::read_json;
use manifest::{digest_file, RunManifest};
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "helix", version, about = "Helical CT simulation and turn-split learned reconstruction")]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "HELICAL_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the desk-scale volume spec and trajectory.
    Desk {
        #[arg(long, default_value_t = 5)]
        turns: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generates random ellipsoid phantoms in HU.
    Phantom {
        /// Phantom set spec; the desk volume when omitted.
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulates low-dose data for every phantom of a dataset.
    Simulate {
        dataset: PathBuf,
        /// Trajectory parameters.
        #[arg(long)]
        geometry: PathBuf,
        #[arg(long, default_value_t = helix_core::simulation::LOW_DOSE_PHOTONS)]
        photons: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory; the dataset itself when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains the learned reconstruction on a simulated dataset.
    Train {
        dataset: PathBuf,
        #[arg(long, default_value = "ilpdh3")]
        preset: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstructs one sinogram.
    Reconstruct {
        sino: PathBuf,
        /// Scan geometry written by `simulate`.
        #[arg(long)]
        geometry: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Preset name or file overriding the method defaults.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a reconstruction against its ground truth.
    Evaluate {
        recon: PathBuf,
        truth: PathBuf,
        /// Scan geometry, used to mark turn boundaries.
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[arg(long, default_value_t = helix_core::metrics::DEFAULT_DISCARD)]
        discard: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the built-in adjoint, dense-matrix, inversion and gradient checks.
    Selftest {
        /// Directory for the check report and run manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true, default_value_t = 0.0)]
        inject_adjoint_fault: f64,
    },
    /// Re-runs a recorded command and compares output digests.
    Replay { manifest: PathBuf },
}

/// Bad invocation that clap cannot see, such as a missing checkpoint.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Raised by `selftest` when a check fails.
#[derive(Debug)]
struct ChecksFailed(usize);

impl fmt::Display for ChecksFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} self-test checks failed", self.0)
    }
}

impl std::error::Error for ChecksFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<ChecksFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<helix_core::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
    }
    2
}

fn selftest(out: Option<PathBuf>, fault: f64) -> Result<()> {
    let mut rec = manifest::Recorder::new("selftest");
    rec.config(&fault)?;
    let checks = selftest::run(selftest::Faults { adjoint: fault });
    for c in &checks {
        println!("{} {}: {:.3e} (limit {:.1e})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        let report = dir.join("selftest.json");
        helix_core::volume::write_json(&report, &checks)?;
        rec.output(&report)?;
        rec.finish(&manifest::manifest_path(&dir))?;
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    if failed > 0 {
        bail!(ChecksFailed(failed));
    }
    Ok(())
}

fn replay(path: &PathBuf) -> Result<()> {
    let recorded: RunManifest = read_json(path).with_context(|| format!("reading {}", path.display()))?;
    if recorded.command == "replay" || recorded.argv.len() < 2 {
        bail!(UsageError(format!("{} does not record a replayable command", path.display())));
    }
    let status = std::process::Command::new(std::env::current_exe()?)
        .args(&recorded.argv[1..])
        .env("HELICAL_THREADS", recorded.threads.to_string())
        .status()
        .context("re-running the recorded command")?;
    if !status.success() {
        bail!("replayed command exited with {status}");
    }
    let mut mismatched = Vec::new();
    for o in &recorded.outputs {
        if digest_file(&o.path)?.sha256 != o.sha256 {
            mismatched.push(o.path.display().to_string());
        }
    }
    if !mismatched.is_empty() {
        bail!(helix_core::Error::Format(format!("replay changed {}", mismatched.join(", "))));
    }
    println!("replayed {} outputs bitwise", recorded.outputs.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(UsageError("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    match cli.command {
        Command::Desk { turns, out } => commands::desk(turns, &out),
        Command::Phantom { spec, out, count, seed } => commands::phantom(spec.as_deref(), &out, count, seed),
        Command::Simulate { dataset, geometry, photons, seed, out } => {
            commands::simulate(&dataset, &geometry, photons, seed, out.as_deref())
        }
        Command::Train { dataset, preset, steps, out } => commands::train_cmd(&dataset, &preset, steps, &out),
        Command::Reconstruct { sino, geometry, method, ckpt, preset, out } => {
            commands::reconstruct(&sino, &geometry, method, ckpt.as_deref(), preset.as_deref(), &out)
        }
        Command::Evaluate { recon, truth, geometry, discard, out } => {
            commands::evaluate_cmd(&recon, &truth, geometry.as_deref(), discard, &out).map(|_| ())
        }
        Command::Selftest { out, inject_adjoint_fault } => selftest(out, inject_adjoint_fault),
        Command::Replay { manifest } => replay(&manifest),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
