//! Command-line driver. Flags override the config file; the effective config
//! is validated before any command runs.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{ExperimentConfig, Variant};
use crate::error::{Error, Result};
use crate::pipeline;
use crate::session::TransportKind;

#[derive(Debug, Parser)]
#[command(
    name = "mpcsieve",
    version,
    about = "Private data selection over two-party secret sharing"
)]
pub struct Cli {
    /// Config file; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = ["loopback", "socket"])]
    pub transport: Option<String>,
    #[arg(long, global = true, value_parser = ["P", "PM", "PMT", "full"])]
    pub variant: Option<String>,
    /// Working directory for inputs and outputs.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Seeded target model and dataset.
    Gen,
    /// Build every phase's proxy and train its approximators.
    TrainApprox,
    /// Run the selection protocol.
    Select {
        /// Run P, PM, PMT and full on the same inputs and tabulate them.
        #[arg(long)]
        compare: bool,
    },
    /// Per-operation cost of one secure forward pass of the kernel baseline.
    Bench,
    /// Summarize the outputs found in the working directory.
    Report,
}

impl Cli {
    /// The config file (or defaults) with command-line overrides applied.
    pub fn effective_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = &self.transport {
            cfg.transport = t.parse::<TransportKind>()?;
        }
        if let Some(v) = &self.variant {
            cfg.variant = v.parse::<Variant>()?;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one command and returns what it prints on success.
pub fn execute(cli: &Cli) -> Result<String> {
    let cfg = cli.effective_config()?;
    let mut s = String::new();
    match &cli.command {
        Command::Gen => {
            for f in pipeline::cmd_gen(&cfg)? {
                let _ = writeln!(s, "wrote {}", f.display());
            }
        }
        Command::TrainApprox => {
            let (reports, files) = pipeline::cmd_train_approx(&cfg)?;
            for ph in &reports {
                let sp = ph.spec;
                let _ = writeln!(s, "phase {} <{},{},{}>", ph.phase, sp.layers, sp.heads, sp.hidden);
                for site in &ph.sites {
                    let layer = site.layer.map_or_else(|| "-".to_string(), |l| l.to_string());
                    let _ = writeln!(
                        s,
                        "  {:<16} layer {:>2}  train mse {:.3e}  held-out mse {:.3e}",
                        site.site.name(),
                        layer,
                        site.report.train_mse,
                        site.report.heldout_mse
                    );
                }
            }
            let _ = writeln!(s, "wrote {} files", files.len());
        }
        Command::Select { compare: false } => {
            pipeline::cmd_select(&cfg)?;
            s.push_str(&pipeline::cmd_report(&cfg.out)?);
        }
        Command::Select { compare: true } => {
            let rows = pipeline::cmd_compare(&cfg)?;
            s.push_str(&pipeline::variant_table(&rows));
        }
        Command::Bench => s.push_str(&pipeline::cmd_bench(&cfg)?.to_text()),
        Command::Report => s.push_str(&pipeline::cmd_report(&cfg.out)?),
    }
    Ok(s)
}

/// Parses `args`, runs the command, prints its output or a diagnostic, and
/// returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                crate::error::Category::Config.exit_code()
            } else {
                0
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> i32 {
    let cat = e.category();
    eprintln!("error [{}]: {e}", cat.name());
    cat.exit_code()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("mpcsieve").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_defaults() {
        let c = parse(&[
            "select",
            "--seed",
            "9",
            "--variant",
            "full",
            "--transport",
            "socket",
            "--out",
            "x",
        ]);
        let cfg = c.effective_config().unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.variant, Variant::Full);
        assert_eq!(cfg.transport, TransportKind::Socket);
        assert_eq!(cfg.out, PathBuf::from("x"));
        assert!(matches!(c.command, Command::Select { compare: false }));
    }

    #[test]
    fn flags_go_before_or_after_the_verb() {
        let a = parse(&["--seed", "3", "gen"]).effective_config().unwrap();
        let b = parse(&["gen", "--seed", "3"]).effective_config().unwrap();
        assert_eq!(a, b);
        assert!(matches!(parse(&["train-approx"]).command, Command::TrainApprox));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(Cli::try_parse_from(["mpcsieve", "select", "--variant", "X"]).is_err());
        assert!(Cli::try_parse_from(["mpcsieve", "frobnicate"]).is_err());
        assert_eq!(main_with(["mpcsieve", "gen", "--seed", "nope"]), 2);
    }

    #[test]
    fn missing_config_file_is_an_io_error() {
        let c = parse(&["gen", "--config", "/nonexistent/cfg.txt"]);
        let e = execute(&c).unwrap_err();
        assert_eq!(e.category().exit_code(), 3);
    }
}
