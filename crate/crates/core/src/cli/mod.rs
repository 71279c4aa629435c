//! Command-line front end.
//!
//! Configuration precedence, lowest first: built-in defaults, the TOML file
//! given by `--config`, then command-line flags. The output root is
//! `--out`, else `out_dir` from the file, else `$LITEATT_OUT`, else
//! `liteatt-out`. Every artifact carries the SHA-256 of the resolved
//! configuration and the seed.
//!
//! Exit codes: 0 success (including protocol sessions that end `Failed`),
//! 2 configuration or usage error, 3 runtime failure.

mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autoenc::Arch;
use crate::evalkit::{config_digest, ExperimentConfig, Provenance};

pub const OUT_ENV: &str = "LITEATT_OUT";
pub const DEFAULT_OUT: &str = "liteatt-out";

#[derive(Debug, Parser)]
#[command(name = "liteatt", version, about = "SRAM self-attestation lab: traces, autoencoders, int8 inference and a mutual-attestation handshake")]
pub struct Cli {
    /// TOML configuration file, or `default` for the built-in configuration.
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// Master seed (decimal or 0x-prefixed hex).
    #[arg(long, global = true, value_parser = parse_seed)]
    pub seed: Option<u64>,
    /// Output root directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate firmware profiles and aggregated trace CSVs.
    Gen(GenArgs),
    /// Train the float autoencoder for one firmware.
    Train(StageArgs),
    /// Quantize a trained model to int8.
    Quantize(StageArgs),
    /// Calibrate the detection threshold of a quantized model.
    Calibrate(StageArgs),
    /// Run one attestation-application invocation and print the outcome.
    Attest(AttestArgs),
    /// Run handshake sessions through the simulated network.
    Handshake(HandshakeArgs),
    /// Run the full cross-firmware evaluation campaign.
    Eval(EvalArgs),
}

#[derive(Debug, Args, Default)]
pub struct Overrides {
    /// Number of firmware images in the suite.
    #[arg(long)]
    pub firmware: Option<usize>,
    /// Autoencoder architecture (m1, m2, m3).
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Safe traces collected per firmware.
    #[arg(long)]
    pub safe_traces: Option<usize>,
    /// Traces per mutated image.
    #[arg(long)]
    pub traces_per_mutation: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    /// Firmware index within the suite.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Aggregated safe-trace CSV to use instead of regenerating traces.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Model file to read; defaults to the previous stage's output.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct AttestArgs {
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Quantized model file; defaults to the calibrate stage's output.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Run a mutated image: `<kind>:<severity>`, e.g. `tamper_data:1.0`.
    #[arg(long)]
    pub mutate: Option<String>,
    /// Peer device id (8 hex digits).
    #[arg(long, default_value = "00000002")]
    pub peer: String,
    /// Peer report ciphertext to validate, in hex.
    #[arg(long)]
    pub report: Option<String>,
    /// Skip self-attestation.
    #[arg(long)]
    pub no_self: bool,
    /// Omit the sender id.
    #[arg(long)]
    pub no_sender: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct HandshakeArgs {
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Adversary script file.
    #[arg(long)]
    pub adversary: Option<PathBuf>,
    /// Play a built-in game instead of a script: honest, fabrication,
    /// replay, tamper, expired_report, unsafe_sender.
    #[arg(long, conflicts_with = "adversary")]
    pub game: Option<String>,
    #[arg(long)]
    pub sessions: Option<usize>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Skip the second-device leg.
    #[arg(long)]
    pub no_twin: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

fn parse_seed(s: &str) -> Result<u64, String> {
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    }
    .map_err(|e| format!("bad seed `{s}`: {e}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Report expiry window.
    pub epsilon_ms: u64,
    pub hop_ms: u64,
    pub sessions: usize,
    pub adversary: Option<PathBuf>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            epsilon_ms: crate::attestor::DEFAULT_EPSILON_MS,
            hop_ms: 10,
            sessions: 1,
            adversary: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub out_dir: Option<PathBuf>,
    pub experiment: ExperimentConfig,
    pub protocol: ProtocolConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

pub(crate) fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

impl Config {
    pub fn load(spec: Option<&str>) -> Result<Self, CliError> {
        match spec {
            None | Some("default") => Ok(Config::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{path}: {e}")))?;
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{path}: {e}")))
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        let e = &mut self.experiment;
        if let Some(n) = o.firmware {
            e.firmware_count = n;
        }
        if let Some(a) = o.arch {
            e.pipeline.arch = a;
        }
        if let Some(n) = o.epochs {
            e.pipeline.train.epochs = n;
        }
        if let Some(n) = o.safe_traces {
            e.pipeline.safe_traces = n;
        }
        if let Some(n) = o.traces_per_mutation {
            e.traces_per_mutation = n;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.experiment.validate().map_err(|e| CliError::Config(format!("experiment.{}", e.to_string().trim_start_matches("config: "))))?;
        if self.protocol.epsilon_ms == 0 {
            return Err(CliError::Config("protocol.epsilon_ms: must be positive".into()));
        }
        Ok(())
    }
}

/// Resolved run context shared by the subcommands.
pub struct Run {
    pub config: Config,
    pub provenance: Provenance,
    pub out: PathBuf,
    pub mode: crate::exec::ExecMode,
}

impl Run {
    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.out.join(rel)
    }

    pub fn ensure_dir(&self, rel: &str) -> Result<PathBuf, CliError> {
        let d = self.out.join(rel);
        std::fs::create_dir_all(&d).map_err(|e| runtime(format!("{}: {e}", d.display())))?;
        Ok(d)
    }
}

fn resolve(cli: &Cli) -> Result<Run, CliError> {
    let mut config = Config::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        config.experiment.seed = s;
    }
    let overrides = match &cli.command {
        Command::Gen(a) => &a.overrides,
        Command::Train(a) | Command::Quantize(a) | Command::Calibrate(a) => &a.overrides,
        Command::Attest(a) => &a.overrides,
        Command::Handshake(a) => &a.overrides,
        Command::Eval(a) => &a.overrides,
    };
    config.apply(overrides);
    match &cli.command {
        Command::Handshake(a) => {
            if let Some(n) = a.sessions {
                config.protocol.sessions = n;
            }
            if let Some(p) = &a.adversary {
                config.protocol.adversary = Some(p.clone());
            }
        }
        Command::Eval(a) if a.no_twin => config.experiment.twin_transfer = false,
        _ => {}
    }
    config.validate()?;
    let out = cli
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let provenance = Provenance {
        config_digest: config_digest(&config),
        seed: config.experiment.seed,
    };
    let mode = if cli.sequential { crate::exec::ExecMode::Sequential } else { crate::exec::ExecMode::Parallel };
    Ok(Run {
        config,
        provenance,
        out,
        mode,
    })
}

/// Parse arguments, run and map the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match resolve(&cli).and_then(|run| commands::dispatch(&cli.command, &run)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[experiment]\nseed = \"0x10\"\nfirmware_count = 3\n[experiment.pipeline]\nsafe_traces = 64\n").unwrap();
        let cli = Cli::try_parse_from(["liteatt", "--config", path.to_str().unwrap(), "--seed", "7", "gen", "--firmware", "2"]).unwrap();
        let run = resolve(&cli).unwrap();
        assert_eq!(run.config.experiment.seed, 7);
        assert_eq!(run.config.experiment.firmware_count, 2);
        assert_eq!(run.config.experiment.pipeline.safe_traces, 64);
        assert_eq!(run.provenance.config_digest, config_digest(&run.config));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[experiment]\nfirmware_cout = 3\n").unwrap();
        let err = Config::load(path.to_str()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("firmware_cout"));
    }

    #[test]
    fn invalid_values_name_their_path() {
        let mut c = Config::default();
        c.experiment.severities = vec![2.0];
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("experiment.severities[0]"), "{e}");
    }

    #[test]
    fn seeds_parse_in_both_bases() {
        assert_eq!(parse_seed("0xff"), Ok(255));
        assert_eq!(parse_seed("12"), Ok(12));
        assert!(parse_seed("zz").is_err());
    }

    #[test]
    fn every_subcommand_has_help() {
        use clap::CommandFactory;
        let cmd = Cli::command();
        for sub in ["gen", "train", "quantize", "calibrate", "attest", "handshake", "eval"] {
            let s = cmd.find_subcommand(sub).unwrap();
            assert!(s.get_about().is_some(), "{sub}");
        }
    }
}
