//! Command-line harness: argument handling, config files, exit codes and
//! the subcommands themselves.

pub mod args;
mod commands;
pub mod manifest;

use std::ffi::OsString;
use std::fs;

use clap::Parser;

pub use args::{Cli, Command};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Usage problems found outside clap, such as a malformed config file.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit code for an error raised while running a command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<smlw_core::Error>() {
            return match e {
                smlw_core::Error::Argument(_) => EXIT_USAGE,
                smlw_core::Error::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_DATA;
        }
    }
    EXIT_USAGE
}

fn config_args(path: &str) -> Result<Vec<OsString>, UsageError> {
    let text = fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {path}: {e}")))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| UsageError(format!("config {path} is not valid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| UsageError(format!("config {path} must hold a JSON object")))?;
    let mut out = Vec::new();
    for (key, v) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        let scalar = |v: &serde_json::Value| match v {
            serde_json::Value::String(s) => Ok(s.clone()),
            serde_json::Value::Number(n) => Ok(n.to_string()),
            other => Err(UsageError(format!("config key `{key}` has unsupported value {other}"))),
        };
        match v {
            serde_json::Value::Null | serde_json::Value::Bool(false) => {}
            serde_json::Value::Bool(true) => out.push(flag.into()),
            serde_json::Value::Array(items) => {
                let parts = items.iter().map(scalar).collect::<Result<Vec<_>, _>>()?;
                out.push(flag.into());
                out.push(parts.join(",").into());
            }
            other => {
                out.push(flag.into());
                out.push(scalar(other)?.into());
            }
        }
    }
    Ok(out)
}

/// Splices `--config file.json` entries in front of the explicit flags so
/// that flags given on the command line win.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>, UsageError> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        if s == "--config" {
            let p = it
                .next()
                .ok_or_else(|| UsageError("--config needs a file path".into()))?;
            config = Some(p.to_string_lossy().into_owned());
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else { return Ok(rest) };
    let sub = rest
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map(|i| i + 1)
        .ok_or_else(|| UsageError("--config must accompany a subcommand".into()))?;
    let extra = config_args(&path)?;
    rest.splice(sub + 1..sub + 1, extra);
    Ok(rest)
}

fn init_runtime() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    if let Some(n) = std::env::var("SML_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails harmlessly if the pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    init_runtime();
    let argv = match expand_config(argv.into_iter().map(Into::into).collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
