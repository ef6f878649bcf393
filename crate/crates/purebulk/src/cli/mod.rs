//! Batch command-line frontend.
//!
//! Every subcommand reads one config file (TOML, or a `manifest.json` left
//! by a previous run), writes its artifacts into `--out`, and records a
//! manifest holding the fully resolved config, the tool version, the
//! primary seed, and the thread-count setting. Re-running a command from
//! its manifest, with the same thread-count setting, reproduces every CSV
//! byte for byte.
//!
//! Exit codes: 0 success, 1 validation or i/o failure, 2 numerical failure.

mod run;

pub use run::{
    ClassifyCmd, DataSource, DiluteCmd, EmbedCmd, GradcheckCmd, ModelKind, NamedCheckpoint,
    RankCmd, SurvivalCmd, SynthCmd, TrainCmd, TuneCmd, UniquenessCmd,
};

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Environment variable fixing the rayon thread count; recorded in every
/// manifest because reproducibility is promised per thread-count setting.
pub const THREADS_ENV: &str = "PUREBULK_THREADS";

#[derive(Debug, Parser)]
#[command(name = "purebulk", version, about = "Purification of bulk tumor expression profiles", disable_help_subcommand = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Config file: TOML, or the manifest.json of a previous run of the
    /// same subcommand. Omitted = built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with planted subtype programs.
    Synth(CommonArgs),
    /// Fit an embedding model and write its checkpoint.
    Train(CommonArgs),
    /// Random-search mixing fraction and decorrelation weight.
    Tune(CommonArgs),
    /// Embed a cohort with a trained checkpoint.
    Embed(CommonArgs),
    /// Run the dilution robustness benchmark over one or more checkpoints.
    Dilute(CommonArgs),
    /// Train a fold ensemble on embeddings and score a held-out split.
    Classify(CommonArgs),
    /// Export per-dimension preranked gene lists and signatures.
    Rank(CommonArgs),
    /// Score dimension uniqueness with an empirical permutation test.
    Uniqueness(CommonArgs),
    /// Validate embedding-derived signatures against survival endpoints.
    Survival(CommonArgs),
    /// Compare analytic gradients of the full objective chain against
    /// finite differences.
    Gradcheck(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Tune(_) => "tune",
            Command::Embed(_) => "embed",
            Command::Dilute(_) => "dilute",
            Command::Classify(_) => "classify",
            Command::Rank(_) => "rank",
            Command::Uniqueness(_) => "uniqueness",
            Command::Survival(_) => "survival",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::Synth(a)
            | Command::Train(a)
            | Command::Tune(a)
            | Command::Embed(a)
            | Command::Dilute(a)
            | Command::Classify(a)
            | Command::Rank(a)
            | Command::Uniqueness(a)
            | Command::Survival(a)
            | Command::Gradcheck(a) => a,
        }
    }
}

/// Per-run output context shared by every command.
pub(crate) struct CommandIo<'a> {
    pub out: &'a Path,
    pub threads: Option<usize>,
}

#[derive(Serialize)]
struct ManifestOut<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    /// Primary RNG seed of the run; 0 for commands that draw no randomness.
    seed: u64,
    threads: Option<usize>,
    config: &'a C,
}

pub(crate) fn write_manifest<C: Serialize>(
    io: &CommandIo<'_>,
    command: &str,
    seed: u64,
    config: &C,
) -> Result<()> {
    let manifest = ManifestOut {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        threads: io.threads,
        config,
    };
    let path = io.out.join("manifest.json");
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, &manifest)
        .map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    out.flush().map_err(|e| Error::io(&path, e))
}

/// Resolve a command's config: missing path = defaults, `.json` = a prior
/// manifest of the same subcommand (its resolved config is reused
/// verbatim), anything else = TOML. Unknown keys are rejected.
fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>, command: &str) -> Result<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let recorded = v
            .get("command")
            .and_then(|c| c.as_str())
            .ok_or_else(|| {
                Error::Parse(format!("{}: manifest lacks a command field", path.display()))
            })?;
        if recorded != command {
            return Err(Error::InvalidInput(format!(
                "manifest {} records a {recorded:?} run, not {command:?}",
                path.display()
            )));
        }
        if let Some(version) = v.get("version").and_then(|x| x.as_str()) {
            if version != env!("CARGO_PKG_VERSION") {
                log::warn!(
                    "manifest was written by version {version}; this is {}",
                    env!("CARGO_PKG_VERSION")
                );
            }
        }
        let config = v.get("config").cloned().ok_or_else(|| {
            Error::Parse(format!("{}: manifest lacks a config field", path.display()))
        })?;
        serde_json::from_value(config).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

fn read_threads() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(raw) => {
            let n: usize = raw.trim().parse().map_err(|_| {
                Error::InvalidInput(format!(
                    "{THREADS_ENV} must be a positive integer, got {raw:?}"
                ))
            })?;
            if n == 0 {
                return Err(Error::InvalidInput(format!(
                    "{THREADS_ENV} must be at least 1"
                )));
            }
            Ok(Some(n))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::InvalidInput(format!("{THREADS_ENV}: {e}"))),
    }
}

/// Run one parsed command to completion.
pub fn execute(command: &Command, threads: Option<usize>) -> Result<()> {
    let args = command.args();
    let name = command.name();
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let io = CommandIo {
        out: &args.out,
        threads,
    };
    let config = args.config.as_deref();
    match command {
        Command::Synth(_) => run::synth(&load_config(config, name)?, &io),
        Command::Train(_) => run::train(&load_config(config, name)?, &io),
        Command::Tune(_) => run::tune(&load_config(config, name)?, &io),
        Command::Embed(_) => run::embed(&load_config(config, name)?, &io),
        Command::Dilute(_) => run::dilute(&load_config(config, name)?, &io),
        Command::Classify(_) => run::classify(&load_config(config, name)?, &io),
        Command::Rank(_) => run::rank(&load_config(config, name)?, &io),
        Command::Uniqueness(_) => run::uniqueness(&load_config(config, name)?, &io),
        Command::Survival(_) => run::survival(&load_config(config, name)?, &io),
        Command::Gradcheck(_) => run::gradcheck(&load_config(config, name)?, &io),
    }
}

/// Full program body behind `main`: parse, honor the thread-count setting,
/// dispatch, and map failures to the exit-code contract.
pub fn main_impl<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let informational = matches!(
                e.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            );
            let _ = e.print();
            return if informational { 0 } else { 1 };
        }
    };
    let threads = match read_threads() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("purebulk: {e}");
            return e.exit_code();
        }
    };
    if let Some(n) = threads {
        // a pool may already exist when embedded in another process; thread
        // count never changes results, only the manifest records it
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    match execute(&cli.command, threads) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("purebulk: {e}");
            e.exit_code()
        }
    }
}
