//! `monoview` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

const CONFIG_HELP: &str = "\
Configuration:
  A config file holds one `key = value` per line; `#` starts a comment.
  Keys are dotted paths under the command name, for example
  `train.epochs = 50` or `train.sampling.num_fine = 32`. `--set KEY=VALUE`
  overrides the file. Unknown keys and malformed values exit with status 2.
  Run a command with `--dry-run` to print every key with its resolved value.

Outputs:
  gen-data  <out_dir>/images/*.png, masks/*.png, manifest.tsv, scenes.json
  train     <out_dir>/train_log.ndjson, checkpoints/epoch_NNNN.ckpt,
            model.ckpt, state.ckpt
  render    <out_dir>/<record>/input.png, recon.png, recon_alpha.png,
            recon_depth.pfm, view_KK.png, alpha_KK.png, depth_KK.pfm,
            poses.tsv (KK = 00 .. sweep-1)
  eval      <out_dir>/report.tsv
  Every command also writes <out_dir>/effective.conf, the resolved
  configuration in the input format.

Exit status: 0 on success, 2 for configuration errors, 1 for runtime
errors. Errors are printed to stderr as one JSON object.";

#[derive(Parser)]
#[command(name = "monoview", version, about = "Single-view radiance fields: data, training, rendering and evaluation", after_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic posed dataset with masks and a manifest.
    GenData(RunArgs),
    /// Train an encoder and conditional field on a manifest.
    Train(RunArgs),
    /// Reconstruct records and render an azimuth sweep with depth.
    Render(RunArgs),
    /// Score held-out views and write a TSV report.
    Eval(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Config file of `key = value` lines.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key; may be repeated.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Validate and print the resolved configuration without side effects.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Config, message: message.into() }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Runtime, message: message.into() }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Runtime => 1,
        }
    }

    fn to_json(&self) -> String {
        let kind = match self.kind {
            ErrorKind::Config => "config",
            ErrorKind::Runtime => "runtime",
        };
        serde_json::json!({ "error": kind, "message": self.message }).to_string()
    }
}

impl From<monoview::Error> for CliError {
    fn from(e: monoview::Error) -> Self {
        match e {
            monoview::Error::Config(m) => Self::config(m),
            other => Self::runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::config(first).to_json());
            return ExitCode::from(2);
        }
    };
    let (name, args) = match &cli.command {
        Command::GenData(a) => ("gen", a),
        Command::Train(a) => ("train", a),
        Command::Render(a) => ("render", a),
        Command::Eval(a) => ("eval", a),
    };
    match run(name, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(name: &str, args: &RunArgs) -> Result<(), CliError> {
    let mut pairs = match &args.config {
        Some(path) => config::read_file(path)?,
        None => Vec::new(),
    };
    pairs.extend(config::parse_overrides(&args.set)?);
    let opts = commands::Options { dry_run: args.dry_run };
    match name {
        "gen" => commands::gen_data(&pairs, opts),
        "train" => commands::train(&pairs, opts),
        "render" => commands::render(&pairs, opts),
        _ => commands::eval(&pairs, opts),
    }
}
