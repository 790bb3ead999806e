//! Command-line front end. Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{self, ConfigError, ExperimentConfig};
use crate::metrics::{self, SinkSet};
use crate::orchestrator::{run_experiment_with, OrchestratorError};
use crate::topology::Role;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "flnet", version, about = "Federated learning over a simulated network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Directory holding fl.toml, net.toml and general.toml.
    pub config_dir: PathBuf,
    /// Use built-in defaults for missing files.
    #[arg(long)]
    pub defaults: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment and write its metrics.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Override fl.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; every file the run writes lands here.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Load and cross-check a configuration without running it.
    Validate {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Describe the resolved topology and the server-to-client paths.
    Topo {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Summarize the CSV files of a finished run and write report.json.
    Report {
        csv_dir: PathBuf,
    },
}

fn config_failure(err: &ConfigError, stderr: &mut dyn Write) -> i32 {
    let _ = writeln!(stderr, "error: {err}");
    match err {
        ConfigError::Io { .. } => EXIT_RUNTIME,
        _ => EXIT_INVALID,
    }
}

fn cmd_run(args: &ConfigArgs, seed: Option<u64>, out: &Path, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let mut cfg = match config::load_config(&args.config_dir, args.defaults) {
        Ok(c) => c,
        Err(e) => return config_failure(&e, stderr),
    };
    if let Some(s) = seed {
        cfg.fl.seed = s;
    }
    if let Err(e) = std::fs::create_dir_all(out) {
        let _ = writeln!(stderr, "error: cannot create {}: {e}", out.display());
        return EXIT_RUNTIME;
    }
    let mut sinks = match SinkSet::from_config(&cfg.general, out) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_RUNTIME;
        }
    };
    let res = run_experiment_with(&cfg, &mut sinks, &mut |r| {
        let _ = writeln!(
            stdout,
            "round {:>3}  clients {:>3}  duration {:>10.6} s  max_s2c {:>10.6} s  loss {:.4}  accuracy {:.4}",
            r.round,
            r.selected.len(),
            r.round_duration_s,
            r.max_s2c_s(),
            r.global_loss,
            r.global_accuracy
        );
    });
    drop(sinks);
    match res {
        Ok(_) => {}
        Err(OrchestratorError::InvalidConfig(v)) => {
            for x in v {
                let _ = writeln!(stderr, "  {x}");
            }
            return EXIT_INVALID;
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_RUNTIME;
        }
    }
    if let (true, Some(csv)) = (cfg.general.report, &cfg.general.sinks.csv) {
        let dir = out.join(&csv.dir);
        if let Err(e) = metrics::summarize(&dir).and_then(|s| metrics::write_report(&s, &dir)) {
            let _ = writeln!(stderr, "error: {e}");
            return EXIT_RUNTIME;
        }
    }
    EXIT_OK
}

fn cmd_validate(args: &ConfigArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    match config::load_config(&args.config_dir, args.defaults) {
        Ok(_) => {
            let _ = writeln!(stdout, "configuration is valid");
            EXIT_OK
        }
        Err(e) => config_failure(&e, stderr),
    }
}

fn describe_topology(cfg: &ExperimentConfig, stdout: &mut dyn Write) -> Result<(), OrchestratorError> {
    let topo = cfg.resolve_topology()?;
    let hosts = topo.hosts().count();
    let _ = writeln!(
        stdout,
        "nodes {} (hosts {}, switches {})  links {}",
        topo.nodes().len(),
        hosts,
        topo.nodes().len() - hosts,
        topo.links().len()
    );
    let _ = writeln!(stdout, "\n{:<10} {:<10} {:>10} {:>9} {:>8}", "a", "b", "bw_mbps", "delay_ms", "loss");
    for l in topo.links() {
        let _ = writeln!(
            stdout,
            "{:<10} {:<10} {:>10} {:>9} {:>8}",
            l.a,
            l.b,
            metrics::fmt_real(l.attrs.bandwidth_mbps),
            metrics::fmt_real(l.attrs.delay_ms),
            metrics::fmt_real(l.attrs.loss_frac)
        );
    }
    let server = &cfg.net.server_node;
    let _ = writeln!(stdout, "\n{:<10} {:<10} {:>5} {:>9}  path", "server", "client", "hops", "delay_ms");
    for c in topo.hosts_with_role(Role::Client) {
        let path = topo.shortest_path(server, c)?;
        let _ = writeln!(
            stdout,
            "{:<10} {:<10} {:>5} {:>9}  {}",
            server,
            c,
            path.hop_count(),
            metrics::fmt_real(path.delay_ms(&topo)),
            path.nodes.join(" > ")
        );
    }
    Ok(())
}

fn cmd_topo(args: &ConfigArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cfg = match config::parse_config(&args.config_dir, args.defaults) {
        Ok(c) => c,
        Err(e) => return config_failure(&e, stderr),
    };
    match describe_topology(&cfg, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_INVALID
        }
    }
}

fn cmd_report(dir: &Path, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    match metrics::summarize(dir).and_then(|s| metrics::write_report(&s, dir).map(|_| s)) {
        Ok(s) => {
            let _ = write!(stdout, "{}", s.to_text());
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Parses `args` (including the program name) and runs the subcommand; returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(stderr, "{}", e.render())
            } else {
                write!(stdout, "{}", e.render())
            };
            return code;
        }
    };
    match &cli.command {
        Command::Run { config, seed, out } => cmd_run(config, *seed, out, stdout, stderr),
        Command::Validate { config } => cmd_validate(config, stdout, stderr),
        Command::Topo { config } => cmd_topo(config, stdout, stderr),
        Command::Report { csv_dir } => cmd_report(csv_dir, stdout, stderr),
    }
}
