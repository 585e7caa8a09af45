//! Configuration, artifact handling and experiment runners behind the
//! `ndc` binary.

pub mod artifacts;
pub mod commands;
pub mod config;
mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;

pub use commands::{run, Command};
pub use config::RunConfig;
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "ndc", version, about = "Point detection and classification of nucleus-like objects")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set detector.lr=0.05`. Dotted keys can
    /// also be passed directly as `--detector.lr=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,

    /// Output directory (config key `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Run seed (config key `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
}

impl Cli {
    /// Overrides in precedence order: `--set` values, then `--out`/`--seed`.
    pub fn all_overrides(&self) -> Vec<String> {
        let mut all = self.overrides.clone();
        if let Some(out) = &self.out {
            all.push(format!("out={}", toml::Value::String(out.display().to_string())));
        }
        if let Some(seed) = self.seed {
            all.push(format!("seed={seed}"));
        }
        all
    }

    pub fn config(&self) -> Result<RunConfig> {
        config::load(self.config.as_deref(), &self.all_overrides())
    }
}

/// Rewrites `--section.key=value` and `--section.key value` into
/// `--set section.key=value`.
pub fn expand_dotted_flags<I: IntoIterator<Item = OsString>>(args: I) -> Vec<OsString> {
    let mut out = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        let dotted = arg
            .to_str()
            .and_then(|s| s.strip_prefix("--"))
            .filter(|s| s.split('=').next().is_some_and(|k| k.contains('.')))
            .map(str::to_string);
        match dotted {
            Some(flag) if flag.contains('=') => {
                out.push("--set".into());
                out.push(flag.into());
            }
            Some(key) => match it.next() {
                Some(v) => {
                    out.push("--set".into());
                    let mut kv = OsString::from(format!("{key}="));
                    kv.push(v);
                    out.push(kv);
                }
                None => out.push(arg),
            },
            None => out.push(arg),
        }
    }
    out
}

/// Parses arguments, runs the command and returns the output directory.
pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> Result<PathBuf> {
    let cli = Cli::try_parse_from(expand_dotted_flags(args)).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => e.exit(),
        _ => CliError::Usage(e.to_string().trim_end().to_string()),
    })?;
    let cfg = cli.config()?;
    run(cli.command, &cfg, cli.force)
}
