//! Command-line interface: nine subcommands mapped one-to-one onto stage
//! operations, a per-directory lock so one process owns an experiment at a
//! time, and conventional exit codes (0 success, 1 validation or
//! environment error, 2 stage failure, 64 usage error).
//!
//! [`cli`] is in-process callable: tests and embedders get the same
//! behavior as the installed binary, including exit codes.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::orchestrator::config::ExperimentConfig;
use crate::orchestrator::stages::{
    make_phantoms, open_or_init_manifest, run_stage, RunContext, STAGES,
};
use crate::{Result, XwdError};

/// Lock file marking an experiment directory as owned by one process.
pub const LOCK_FILE: &str = "xwd.lock";

#[derive(Debug, Parser)]
#[command(
    name = "xwd",
    version,
    about = "Cross-window distillation experiments on volumetric data",
    disable_help_subcommand = true
)]
struct Cli {
    /// Experiment configuration (TOML). Required by every subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the configuration's root seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load or synthesize volumes, then window, normalize, split, persist.
    Preprocess,
    /// Train one supervised model per window.
    TrainBaselines,
    /// Choose the teacher window by validation AUC.
    SelectTeacher,
    /// Train the student models against the teacher's features.
    Distill,
    /// Fit the stacking meta-learners and their validation reports.
    Ensemble,
    /// Evaluate cross-cohort transfer, directly and with head refits.
    Transfer,
    /// Produce test reports, agreement analysis, and attention maps.
    Analyze,
    /// Execute every stage in order.
    RunAll,
    /// Write a synthetic cohort to disk in the real-data layout.
    MakePhantoms {
        /// Destination directory (default: `<output>/phantom-cohort`).
        #[arg(long, value_name = "DIR")]
        dest: Option<PathBuf>,
    },
}

/// In-process CLI entry point; returns the process exit code.
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(p) => p,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
            let _ = e.print();
            return code;
        }
    };
    let Some(config_path) = parsed.config.clone() else {
        eprintln!("error: --config <PATH> is required\n\nUsage: xwd --config <PATH> <COMMAND>");
        return 64;
    };
    match dispatch(&parsed, &config_path) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli, config_path: &Path) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = cli.seed {
        cfg.training.seed = seed;
    }
    cfg.validate()?;

    if let Command::MakePhantoms { dest: Some(dest) } = &cli.command {
        // Explicit destination: no experiment directory involved.
        make_phantoms(&cfg, dest)?;
        eprintln!("phantom cohort written to {}", dest.display());
        return Ok(());
    }

    let out = cfg.resolve_output_dir(config_path)?;
    fs::create_dir_all(&out)?;
    let _lock = Lock::acquire(&out)?;

    if let Command::MakePhantoms { dest } = &cli.command {
        let dest = dest.clone().unwrap_or_else(|| out.join("phantom-cohort"));
        make_phantoms(&cfg, &dest)?;
        eprintln!("phantom cohort written to {}", dest.display());
        return Ok(());
    }

    let mut ctx = RunContext::new(cfg, out)?;
    let mut man = open_or_init_manifest(&ctx)?;
    let stages: &[&'static str] = match &cli.command {
        Command::Preprocess => &["preprocess"],
        Command::TrainBaselines => &["train-baselines"],
        Command::SelectTeacher => &["select-teacher"],
        Command::Distill => &["distill"],
        Command::Ensemble => &["ensemble"],
        Command::Transfer => &["transfer"],
        Command::Analyze => &["analyze"],
        Command::RunAll => &STAGES,
        Command::MakePhantoms { .. } => unreachable!("handled above"),
    };
    for stage in stages.iter().copied() {
        run_stage(&mut ctx, &mut man, stage)?;
        if let Some(event) = man.history.last() {
            eprintln!("{}: {}", event.stage, event.action);
        }
    }
    Ok(())
}

/// Exclusive ownership of one experiment directory, released on drop. A
/// leftover lock (crashed process) must be removed manually; the error
/// names the file.
struct Lock {
    path: PathBuf,
}

impl Lock {
    fn acquire(dir: &Path) -> Result<Lock> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut file) => {
                let _ = writeln!(file, "{}", std::process::id());
                Ok(Lock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(XwdError::LockHeld(format!(
                    "{} exists; another process owns this experiment directory \
                     (delete the file if that process is gone)",
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Writes a fast 24-phantom configuration whose output directory sits
    /// inside `dir`, returning the config path.
    fn write_config(dir: &Path) -> PathBuf {
        let out = dir.join("exp");
        let text = format!(
            r#"
schema_version = 1

[data]
source = "phantom"

[data.phantom]
n_patients = 24
class_balance = 0.5
signal_band = [-155.0, 195.0]
signal_texture_amplitude = 30.0
volume_shape = [4, 12, 12]
background_tissue_mix = [
    {{ mean_hu = -820.0, stddev_hu = 60.0, volume_fraction = 0.8 }},
    {{ mean_hu = 30.0, stddev_hu = 45.0, volume_fraction = 0.2 }},
]

[sampling]
task_mode = "diffuse"
target_slices = 2
region_start_fraction = 0.0
trim_fraction = 0.1

[encoder]
preset = "grad_check"

[training]
epochs = 2
batch_size = 4
seed = 11

[split]
fractions = [0.5, 0.25, 0.25]

[evaluation]
n_bootstrap = 25

[transfer]
n_patients = 16

[output]
dir = "{}"
"#,
            out.display()
        );
        let path = dir.join("config.toml");
        fs::write(&path, text).unwrap();
        path
    }

    fn run_cli(args: &[&str]) -> i32 {
        cli(["xwd"].iter().chain(args).copied())
    }

    #[test]
    fn usage_errors_exit_64() {
        assert_eq!(run_cli(&["frobnicate"]), 64);
        assert_eq!(run_cli(&["preprocess", "--what"]), 64);
        assert_eq!(run_cli(&["preprocess"]), 64); // --config missing
        assert_eq!(run_cli(&[]), 64); // no subcommand
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run_cli(&["--help"]), 0);
        assert_eq!(run_cli(&["--version"]), 0);
    }

    #[test]
    fn unreadable_config_exits_one() {
        assert_eq!(
            run_cli(&["preprocess", "--config", "/nonexistent/config.toml"]),
            1
        );
    }

    #[test]
    fn preprocess_succeeds_releases_the_lock_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        let config = config.to_str().unwrap();
        assert_eq!(run_cli(&["preprocess", "--config", config]), 0);

        let out = dir.path().join("exp");
        assert!(out.join("manifest.json").is_file());
        assert!(out.join("preprocessed/index.json").is_file());
        assert!(!out.join(LOCK_FILE).exists(), "lock must be released");

        // Second invocation skips the stage (manifest history grows).
        assert_eq!(run_cli(&["preprocess", "--config", config]), 0);
        let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
        assert!(manifest.contains("skipped (up to date)"), "{manifest}");
    }

    #[test]
    fn stage_out_of_order_exits_two() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        let code = run_cli(&["select-teacher", "--config", config.to_str().unwrap()]);
        assert_eq!(code, 2);
    }

    #[test]
    fn held_lock_exits_one() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        let out = dir.path().join("exp");
        fs::create_dir_all(&out).unwrap();
        fs::write(out.join(LOCK_FILE), b"12345\n").unwrap();
        assert_eq!(
            run_cli(&["preprocess", "--config", config.to_str().unwrap()]),
            1
        );
    }

    #[test]
    fn seed_override_changes_the_experiment_identity() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        let config = config.to_str().unwrap();
        assert_eq!(run_cli(&["preprocess", "--config", config]), 0);
        // Same directory, different effective seed: refused, exit 1.
        assert_eq!(run_cli(&["preprocess", "--config", config, "--seed", "12"]), 1);
        // Matching explicit seed is accepted.
        assert_eq!(run_cli(&["preprocess", "--config", config, "--seed", "11"]), 0);
    }

    #[test]
    fn make_phantoms_honors_explicit_destination() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path());
        let dest = dir.path().join("cohort");
        assert_eq!(
            run_cli(&[
                "make-phantoms",
                "--config",
                config.to_str().unwrap(),
                "--dest",
                dest.to_str().unwrap(),
            ]),
            0
        );
        assert!(dest.join("labels.tsv").is_file());
        // No experiment directory is created for an explicit destination.
        assert!(!dir.path().join("exp").exists());
    }
}
