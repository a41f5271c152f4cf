//! Command-line harness for the PHN click-through-rate model: synthetic data
//! generation, training, evaluation, depth grids and diagnostic matrices.

pub mod commands;
pub mod config;
pub mod error;
pub mod run;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::commands::{Matrix, SplitName, CHECKPOINT, CONFIG_ECHO};
use crate::config::{resolve, resolve_synthetic, RunConfig};
use crate::error::{CliError, Result, EXIT_OK, EXIT_USAGE};
use crate::run::{absolute, RunDir};

#[derive(Debug, Parser)]
#[command(name = "phn", version, about = "Train and diagnose PHN click-through-rate models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config file, overrides and the common shortcuts.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run config; defaults apply to absent fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config field, e.g. `--set model.residual=prl`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shortcut for `data.path`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Shortcut for `data.format` (criteo, avazu, synthetic).
    #[arg(long)]
    pub format: Option<String>,
    /// Shortcut for `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sets both `model.seed` and `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shortcut for `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Sequential execution and zero wall time, for bitwise-reproducible runs.
    #[arg(long)]
    pub deterministic: bool,
}

fn toml_str(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

impl RunArgs {
    pub fn overrides(&self) -> Vec<String> {
        let mut o = self.set.clone();
        if let Some(p) = &self.data {
            o.push(format!("data.path={}", toml_str(p)));
        }
        if let Some(f) = &self.format {
            o.push(format!("data.format={}", toml::Value::String(f.clone())));
        }
        if let Some(p) = &self.out {
            o.push(format!("out_dir={}", toml_str(p)));
        }
        if let Some(s) = self.seed {
            o.push(format!("model.seed={s}"));
            o.push(format!("train.seed={s}"));
        }
        if let Some(e) = self.epochs {
            o.push(format!("train.epochs={e}"));
        }
        if self.deterministic {
            o.push("deterministic=true".into());
        }
        o
    }

    /// Resolved config with every path made absolute, so the echo is
    /// self-contained.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg: RunConfig = resolve(self.config.as_deref(), &self.overrides())?;
        cfg.out_dir = absolute(&cfg.out_dir);
        cfg.data.path = absolute(&cfg.data.path);
        cfg.data.probabilities = cfg.data.probabilities.as_deref().map(absolute);
        cfg.train.deterministic |= cfg.deterministic;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset, its true probabilities and the spec used.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// TOML synthetic spec; defaults apply to absent fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        fields: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
    },
    /// Train one model; writes checkpoint, metric trace and summary.
    Train(RunArgs),
    /// Score a checkpoint on one split of its run's data.
    Eval {
        /// Training run directory (uses its config echo and checkpoint).
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for `eval.json` and a manifest; nothing is written without it.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Retrain from scratch with every tower at each depth.
    Grid {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        depths: Vec<usize>,
    },
    /// Train and report diagnostic matrices.
    Diagnose {
        #[command(flatten)]
        run: RunArgs,
        /// Any of residual-bn, selection, towers, scaling, all. Defaults to all unless a
        /// matrix file is given.
        #[arg(long, value_delimiter = ',')]
        matrix: Option<Vec<String>>,
        /// TOML file of `[[cell]]` entries (a `name` plus model config fields).
        #[arg(long)]
        matrix_file: Option<PathBuf>,
    },
}

/// Runs the CLI and returns the process exit code. Results go to `out`,
/// progress and error records to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
                report_error(&CliError::Usage(e.kind().to_string()), err);
            }
            return code;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            report_error(&e, err);
            e.exit_code()
        }
    }
}

fn report_error(e: &CliError, err: &mut dyn Write) {
    let line = serde_json::to_string(&e.record()).unwrap_or_else(|_| e.to_string());
    let _ = writeln!(err, "{line}");
}

fn emit<S: Serialize>(out: &mut dyn Write, value: &S) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| CliError::Usage(e.to_string()))?;
    writeln!(out, "{line}").map_err(|e| CliError::io("writing output", e))
}

/// Creates the run directory, registers the inputs, echoes the config, runs
/// `body`, then writes the manifest (or the error record on failure).
fn in_run_dir<R>(
    root: Option<&Path>,
    command: &str,
    inputs: &[Option<&Path>],
    echo: Option<(&str, String)>,
    body: impl FnOnce(&mut RunDir) -> Result<R>,
) -> Result<R> {
    let mut run = match root {
        Some(r) => RunDir::create(r, command)?,
        None => RunDir::in_memory(command),
    };
    for p in inputs.iter().flatten() {
        run.add_input(p);
    }
    let result = (|| {
        if let Some((name, text)) = echo {
            run.write(name, text.as_bytes())?;
        }
        body(&mut run)
    })();
    match result {
        Ok(r) => {
            run.finish()?;
            Ok(r)
        }
        Err(e) => {
            run.fail(&e);
            Err(e)
        }
    }
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenData {
            out: dir,
            spec,
            mut set,
            seed,
            samples,
            fields,
            vocab,
        } => {
            let shortcuts = [
                ("seed", seed.map(|v| v as usize)),
                ("sample_count", samples),
                ("field_count", fields),
                ("vocab_size_per_field", vocab),
            ];
            for (key, v) in shortcuts {
                if let Some(v) = v {
                    set.push(format!("{key}={v}"));
                }
            }
            let spec = resolve_synthetic(spec.as_deref(), &set)?;
            spec.validate()?;
            let dir = absolute(&dir);
            let n = in_run_dir(Some(&dir), "gen-data", &[], None, |run| {
                commands::cmd_gen_data(&spec, run)
            })?;
            emit(out, &serde_json::json!({ "out_dir": dir, "samples": n }))
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let _ = writeln!(err, "training into {}", cfg.out_dir.display());
            let echo = (CONFIG_ECHO, cfg.to_toml()?);
            let inputs = cfg.inputs(args.config.as_deref());
            let summary = in_run_dir(Some(&cfg.out_dir), "train", &inputs, Some(echo), |run| {
                commands::cmd_train(&cfg, run)
            })?;
            emit(out, &summary)
        }
        Command::Eval {
            run,
            config,
            checkpoint,
            split,
            out: dir,
            set,
        } => {
            let split: SplitName = split.parse()?;
            let config = config.or_else(|| run.as_ref().map(|r| r.join(CONFIG_ECHO)));
            let checkpoint = checkpoint
                .or_else(|| run.as_ref().map(|r| r.join(CHECKPOINT)))
                .ok_or_else(|| CliError::Usage("eval needs --run or --checkpoint".into()))?;
            let checkpoint = absolute(&checkpoint);
            if !checkpoint.exists() {
                return Err(CliError::CheckpointNotFound(checkpoint));
            }
            let cfg = RunArgs {
                config: config.clone(),
                set,
                ..RunArgs::default()
            }
            .resolve()?;
            let dir = dir.as_deref().map(absolute);
            let echo = dir
                .as_ref()
                .map(|_| cfg.to_toml())
                .transpose()?
                .map(|t| (CONFIG_ECHO, t));
            let mut inputs = cfg.inputs(config.as_deref());
            inputs.push(Some(&checkpoint));
            let record = in_run_dir(dir.as_deref(), "eval", &inputs, echo, |run| {
                commands::cmd_eval(&cfg, &checkpoint, split, run)
            })?;
            emit(out, &record)
        }
        Command::Grid { run, depths } => {
            let cfg = run.resolve()?;
            let echo = (CONFIG_ECHO, cfg.to_toml()?);
            let inputs = cfg.inputs(run.config.as_deref());
            let rows = in_run_dir(Some(&cfg.out_dir), "grid", &inputs, Some(echo), |r| {
                commands::cmd_grid(&cfg, &depths, r)
            })?;
            emit(out, &rows)
        }
        Command::Diagnose {
            run,
            matrix,
            matrix_file,
        } => {
            let cfg = run.resolve()?;
            let matrices = match (&matrix, &matrix_file) {
                (Some(m), _) => Matrix::parse_list(m)?,
                (None, Some(_)) => Vec::new(),
                (None, None) => Matrix::ALL.to_vec(),
            };
            let matrix_file = matrix_file.as_deref().map(absolute);
            let _ = writeln!(err, "diagnosing into {}", cfg.out_dir.display());
            let echo = (CONFIG_ECHO, cfg.to_toml()?);
            let mut inputs = cfg.inputs(run.config.as_deref());
            inputs.push(matrix_file.as_deref());
            let summary = in_run_dir(Some(&cfg.out_dir), "diagnose", &inputs, Some(echo), |r| {
                commands::cmd_diagnose(&cfg, &matrices, matrix_file.as_deref(), r)
            })?;
            emit(out, &summary)
        }
    }
}
