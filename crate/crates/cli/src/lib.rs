//! `cxrinf` command-line front end.
//!
//! Every command writes a [`manifest::RunManifest`] recording its
//! arguments, the configuration it ran with, seeds, input hashes and output
//! paths; `cxrinf replay --from <manifest>` re-runs it. Exit codes: 0 on
//! success, 1 for usage and validation errors, 2 for runtime failures.

pub mod args;
pub mod commands;
pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Parser;
use serde::Serialize;

use args::Cli;
use config::Config;
use manifest::{hash_path, InputHash, RunManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<cxrinf_core::Error> for CliError {
    fn from(e: cxrinf_core::Error) -> Self {
        use cxrinf_core::Error as E;
        match e {
            E::InvalidArgument { .. } | E::ShapeMismatch { .. } | E::DuplicateId(_) | E::ClassTooSmall { .. } | E::UnknownLayer { .. } => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<cxrinf_annotate::Error> for CliError {
    fn from(e: cxrinf_annotate::Error) -> Self {
        use cxrinf_annotate::Error as E;
        match e {
            E::Core(c) => c.into(),
            E::Invalid(_) | E::MissingManualMask(_) | E::Conflict(_) | E::NotFound(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Per-invocation state: path resolution and the manifest being recorded.
pub struct Ctx {
    pub config: Config,
    data_dir: Option<PathBuf>,
    seeds: BTreeMap<String, u64>,
    settings: serde_json::Map<String, serde_json::Value>,
    inputs: Vec<InputHash>,
    outputs: Vec<String>,
    /// Where the manifest goes when `--manifest` is not given.
    pub manifest_default: Option<PathBuf>,
    run: Option<RunInfo>,
}

struct RunInfo {
    command: String,
    args: Vec<String>,
    explicit: Option<PathBuf>,
    fallback_dir: PathBuf,
    started: Instant,
    written: bool,
}

impl Ctx {
    pub fn new(config: Config, data_dir: Option<PathBuf>) -> Self {
        Self {
            config,
            data_dir,
            seeds: BTreeMap::new(),
            settings: serde_json::Map::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            manifest_default: None,
            run: None,
        }
    }

    /// Writes the manifest now. Commands that never return (the server)
    /// call this before blocking; everything else is finalized by `run`.
    pub fn write_manifest(&mut self) -> CliResult<()> {
        let Some(run) = &self.run else {
            return Ok(());
        };
        let manifest = RunManifest {
            command: run.command.clone(),
            args: run.args.clone(),
            config: self.config.clone(),
            settings: serde_json::Value::Object(self.settings.clone()),
            seeds: self.seeds.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            elapsed_ms: run.started.elapsed().as_secs_f64() * 1e3,
        };
        let path = run
            .explicit
            .clone()
            .or_else(|| self.manifest_default.clone())
            .unwrap_or_else(|| run.fallback_dir.join("runs").join(format!("{}.manifest.json", run.command)));
        manifest.write(&path)?;
        log::info!("manifest written to {}", path.display());
        self.run.as_mut().expect("checked").written = true;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        match &self.data_dir {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Resolves an input path, checks it exists and records its hash.
    pub fn input(&mut self, p: &Path) -> CliResult<PathBuf> {
        let path = self.resolve(p);
        if !path.exists() {
            return Err(CliError::Usage(format!("{} does not exist", path.display())));
        }
        let sha256 = hash_path(&path)?;
        self.inputs.push(InputHash {
            path: path.display().to_string(),
            sha256,
        });
        Ok(path)
    }

    pub fn output(&mut self, p: &Path) -> PathBuf {
        let path = self.resolve(p);
        self.outputs.push(path.display().to_string());
        path
    }

    pub fn seed(&mut self, name: &str, v: u64) {
        self.seeds.insert(name.into(), v);
    }

    pub fn setting(&mut self, name: &str, v: impl Serialize) {
        self.settings
            .insert(name.into(), serde_json::to_value(v).expect("settings serialize"));
    }
}

fn recorded_args(raw: &[OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in raw.iter().skip(1) {
        let a = a.to_string_lossy().into_owned();
        if skip {
            skip = false;
            continue;
        }
        if ["--config", "--manifest", "--data-dir"].contains(&a.as_str()) {
            skip = true;
            continue;
        }
        if ["--config=", "--manifest=", "--data-dir="].iter().any(|p| a.starts_with(p)) {
            continue;
        }
        out.push(a);
    }
    out
}

fn command_name(raw: &[String]) -> String {
    raw.iter()
        .find(|a| !a.starts_with('-'))
        .cloned()
        .unwrap_or_default()
}

/// Parses `args` (including the binary name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let raw: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&raw) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(cli, recorded_args(&raw)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli, args: Vec<String>) -> CliResult<()> {
    if let args::Command::Replay(r) = &cli.command {
        return replay(&r.from, cli.data_dir.as_deref());
    }
    let config = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let mut ctx = Ctx::new(config, cli.data_dir.clone());
    ctx.run = Some(RunInfo {
        command: command_name(&args),
        args,
        explicit: cli.manifest.clone(),
        fallback_dir: cli.data_dir.clone().unwrap_or_else(|| PathBuf::from(".")),
        started: Instant::now(),
        written: false,
    });
    commands::dispatch(&mut ctx, cli.command)?;
    if !ctx.run.as_ref().is_some_and(|r| r.written) {
        ctx.write_manifest()?;
    }
    Ok(())
}

fn replay(from: &Path, data_dir: Option<&Path>) -> CliResult<()> {
    let m = RunManifest::read(from)?;
    if m.command == "replay" {
        return Err(CliError::Usage("a replay manifest cannot be replayed".into()));
    }
    let dir = std::env::temp_dir().join(format!("cxrinf-replay-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let cfg_path = dir.join("config.toml");
    let text = toml::to_string(&m.config).map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(&cfg_path, text).map_err(|e| CliError::io(&cfg_path, e))?;
    let mut argv: Vec<OsString> = vec!["cxrinf".into()];
    if m.config != Config::default() {
        argv.push("--config".into());
        argv.push(cfg_path.into_os_string());
    }
    if let Some(d) = data_dir {
        argv.push("--data-dir".into());
        argv.push(d.into());
    }
    argv.push("--manifest".into());
    argv.push(from.into());
    argv.extend(m.args.iter().map(OsString::from));
    let cli = Cli::try_parse_from(&argv).map_err(|e| CliError::Usage(e.to_string()))?;
    let result = execute(cli, m.args.clone());
    let _ = std::fs::remove_dir_all(&dir);
    result
}
