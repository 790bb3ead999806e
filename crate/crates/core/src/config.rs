//! Three-file experiment configuration: `fl.toml`, `net.toml`, `general.toml`.
//!
//! Each file has its own strict schema, so a key can only ever live in one
//! file. Relative topology and trace paths are resolved against the config
//! directory at load time; sink paths stay relative to the output directory.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Component, Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fl::{AggregatorSpec, DatasetSpec, PartitionSpec, SelectionStrategy, TrainConfig};
use crate::orchestrator::ComputeModel;
use crate::topology::{self, LinkAttrs, Role, Shape, Topology, TopologyError};
use crate::traffic::{load_trace, TrafficFlowSpec, TrafficPatternSpec, TrafficSource};

pub const FL_FILE: &str = "fl.toml";
pub const NET_FILE: &str = "net.toml";
pub const GENERAL_FILE: &str = "general.toml";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("missing config file {0}")]
    MissingFile(String),
    #[error("cannot read {file}: {message}")]
    Io { file: String, message: String },
    #[error("{file}:{line}: key `{key}`: {message}")]
    ParseError {
        file: String,
        line: usize,
        key: String,
        message: String,
    },
    #[error("{} violation(s):\n{}", .0.len(), .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    ValidationError(Vec<Violation>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    pub n_clients: usize,
    pub rounds: usize,
    pub clients_per_round_fraction: f64,
    pub seed: u64,
    pub selection_strategy: SelectionStrategy,
    pub aggregator: AggregatorSpec,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    pub partition: PartitionSpec,
    pub compute: ComputeModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TopologySource {
    TopohubJson { path: PathBuf },
    #[serde(rename = "graphml")]
    GraphMl { path: PathBuf },
    Generated { shape: Shape, n_hosts: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub server_node: String,
    pub topology: TopologySource,
    pub default_link: LinkAttrs,
    /// Background flows keyed by flow id.
    #[serde(default)]
    pub traffic: BTreeMap<String, TrafficFlowSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSinkSpec {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogfileSinkSpec {
    pub path: PathBuf,
}

fn default_queue_capacity() -> usize {
    4096
}

fn default_await_timeout() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSinkSpec {
    pub bind: String,
    /// Per-subscriber buffer; the oldest message is dropped when full.
    #[serde(default = "default_queue_capacity")]
    pub queue_capacity: usize,
    /// Wait for this many subscribers before the run starts.
    #[serde(default)]
    pub await_subscribers: usize,
    #[serde(default = "default_await_timeout")]
    pub await_timeout_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinks {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<CsvSinkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logfile: Option<LogfileSinkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stream: Option<StreamSinkSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneralConfig {
    pub metric_sample_period_s: f64,
    pub report: bool,
    pub sinks: Sinks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub fl: FlConfig,
    pub net: NetConfig,
    pub general: GeneralConfig,
}

pub fn default_config() -> ExperimentConfig {
    let mut traffic = BTreeMap::new();
    traffic.insert(
        "bg1".to_string(),
        TrafficFlowSpec {
            enabled: false,
            src: "h2".into(),
            dst: "h3".into(),
            cap_mbps: 50.0,
            start_s: 0.0,
            stop_s: 600.0,
            seed: 7,
            pattern: TrafficPatternSpec::Uniform { rate_mbps: 20.0 },
        },
    );
    ExperimentConfig {
        fl: FlConfig {
            n_clients: 4,
            rounds: 5,
            clients_per_round_fraction: 1.0,
            seed: 42,
            selection_strategy: SelectionStrategy::Random,
            aggregator: AggregatorSpec::FedAvg,
            train: TrainConfig::default(),
            dataset: DatasetSpec::default(),
            partition: PartitionSpec::Iid,
            compute: ComputeModel {
                work_per_sample_s: 0.001,
            },
        },
        net: NetConfig {
            server_node: "h1".into(),
            topology: TopologySource::Generated {
                shape: Shape::Star,
                n_hosts: 5,
            },
            default_link: LinkAttrs::default(),
            traffic,
        },
        general: GeneralConfig {
            metric_sample_period_s: 0.5,
            report: true,
            sinks: Sinks {
                csv: Some(CsvSinkSpec { dir: PathBuf::from(".") }),
                logfile: Some(LogfileSinkSpec {
                    path: PathBuf::from("run.log"),
                }),
                stream: None,
            },
        },
    }
}

impl ExperimentConfig {
    /// Builds the topology and applies FL roles: `server_node` becomes the
    /// server; in generated topologies every other host is a client.
    pub fn resolve_topology(&self) -> Result<Topology, TopologyError> {
        let link = self.net.default_link;
        let topo = match &self.net.topology {
            TopologySource::Generated { shape, n_hosts } => {
                let t = topology::generate(*shape, *n_hosts, link)?;
                let hosts: Vec<String> = t.hosts().map(|n| n.id.clone()).collect();
                hosts.into_iter().try_fold(t, |t, h| {
                    let role = if h == self.net.server_node { Role::Server } else { Role::Client };
                    t.with_role(&h, role)
                })?
            }
            TopologySource::TopohubJson { path } => topology::parse_topohub_json(&read_topology(path)?, &link)?,
            TopologySource::GraphMl { path } => topology::parse_graphml(&read_topology(path)?, &link)?,
        };
        match topo.node(&self.net.server_node) {
            Some(n) if n.is_host() && n.role != Role::Server => topo.with_role(&self.net.server_node, Role::Server),
            _ => Ok(topo),
        }
    }

    /// Enabled background flows with their traces loaded, in flow-id order.
    pub fn traffic_sources(&self) -> Result<Vec<(String, TrafficSource)>, Violation> {
        self.net
            .traffic
            .iter()
            .filter(|(_, f)| f.enabled)
            .map(|(id, f)| {
                let src = TrafficSource::new(f.clone());
                match &f.pattern {
                    TrafficPatternSpec::TraceReplay { trace, time_scale } => {
                        let path = format!("net.traffic.{id}.pattern.trace");
                        let bytes = std::fs::read(trace)
                            .map_err(|e| Violation::new(&path, format!("{}: {e}", trace.display())))?;
                        let events = load_trace(&bytes, *time_scale).map_err(|e| Violation::new(&path, e.to_string()))?;
                        Ok((id.clone(), src.with_trace(events)))
                    }
                    _ => Ok((id.clone(), src)),
                }
            })
            .collect()
    }

    /// Renders `(fl.toml, net.toml, general.toml)`.
    pub fn to_toml(&self) -> (String, String, String) {
        (render(&self.fl), render(&self.net), render(&self.general))
    }

    pub fn write_dir(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let (fl, net, general) = self.to_toml();
        std::fs::write(dir.join(FL_FILE), fl)?;
        std::fs::write(dir.join(NET_FILE), net)?;
        std::fs::write(dir.join(GENERAL_FILE), general)
    }
}

fn render<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("config values are always representable in TOML")
}

fn read_topology(path: &Path) -> Result<Vec<u8>, TopologyError> {
    std::fs::read(path).map_err(|e| TopologyError::Schema {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// The offending key: a backtick-quoted name in the message, else the key on the error line.
fn key_of(text: &str, message: &str, line: usize) -> String {
    let mut parts = message.split('`');
    if let (Some(_), Some(k)) = (parts.next(), parts.next()) {
        if !k.is_empty() && !k.contains(' ') {
            return k.to_string();
        }
    }
    text.lines()
        .nth(line - 1)
        .and_then(|l| l.split_once('=').map(|(k, _)| k.trim().to_string()))
        .unwrap_or_default()
}

fn parse_file<T: DeserializeOwned>(file: &str, text: &str) -> Result<T, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s.start)).unwrap_or(1);
        let message = e.message().trim().to_string();
        ConfigError::ParseError {
            file: file.to_string(),
            line,
            key: key_of(text, &message, line),
            message,
        }
    })
}

fn read_file<T: DeserializeOwned>(dir: &Path, file: &str, allow_defaults: bool, fallback: T) -> Result<T, ConfigError> {
    let path = dir.join(file);
    match std::fs::read_to_string(&path) {
        Ok(text) => parse_file(file, &text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            if allow_defaults {
                Ok(fallback)
            } else {
                Err(ConfigError::MissingFile(file.to_string()))
            }
        }
        Err(e) => Err(ConfigError::Io {
            file: file.to_string(),
            message: e.to_string(),
        }),
    }
}

fn resolve_path(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// Parses the three files (file-level defaults allowed when `allow_defaults`), then validates.
pub fn load_config(dir: &Path, allow_defaults: bool) -> Result<ExperimentConfig, ConfigError> {
    let cfg = parse_config(dir, allow_defaults)?;
    let violations = check(&cfg);
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError::ValidationError(violations))
    }
}

/// Parses and resolves paths without validating.
pub fn parse_config(dir: &Path, allow_defaults: bool) -> Result<ExperimentConfig, ConfigError> {
    let base = std::path::absolute(dir).unwrap_or_else(|_| dir.to_path_buf());
    let defaults = default_config();
    let mut cfg = ExperimentConfig {
        fl: read_file(&base, FL_FILE, allow_defaults, defaults.fl)?,
        net: read_file(&base, NET_FILE, allow_defaults, defaults.net)?,
        general: read_file(&base, GENERAL_FILE, allow_defaults, defaults.general)?,
    };
    match &mut cfg.net.topology {
        TopologySource::TopohubJson { path } | TopologySource::GraphMl { path } => resolve_path(&base, path),
        TopologySource::Generated { .. } => {}
    }
    for flow in cfg.net.traffic.values_mut() {
        if let TrafficPatternSpec::TraceReplay { trace, .. } = &mut flow.pattern {
            resolve_path(&base, trace);
        }
    }
    Ok(cfg)
}

/// Resolves the topology and runs every check; topology failures become violations.
pub fn check(cfg: &ExperimentConfig) -> Vec<Violation> {
    match cfg.resolve_topology() {
        Ok(topo) => validate(cfg, &topo),
        Err(e) => {
            let mut v = validate_fields(cfg);
            v.push(Violation::new("net.topology", e.to_string()));
            v
        }
    }
}

fn positive(v: &mut Vec<Violation>, path: &str, x: f64) {
    if !(x.is_finite() && x > 0.0) {
        v.push(Violation::new(path, format!("must be > 0, got {x}")));
    }
}

fn sink_path(v: &mut Vec<Violation>, path: &str, p: &Path) {
    let escapes = p.is_absolute() || p.components().any(|c| matches!(c, Component::ParentDir | Component::Prefix(_)));
    if escapes {
        v.push(Violation::new(
            path,
            format!("{} must be relative to the output directory without `..`", p.display()),
        ));
    }
}

/// Checks that need no topology.
fn validate_fields(cfg: &ExperimentConfig) -> Vec<Violation> {
    let mut v = Vec::new();
    let fl = &cfg.fl;
    if fl.n_clients < 1 {
        v.push(Violation::new("fl.n_clients", "must be >= 1"));
    }
    if fl.rounds < 1 {
        v.push(Violation::new("fl.rounds", "must be >= 1"));
    }
    let f = fl.clients_per_round_fraction;
    if !(f > 0.0 && f <= 1.0) {
        v.push(Violation::new(
            "fl.clients_per_round_fraction",
            format!("must be in (0,1], got {f}"),
        ));
    }
    for m in fl.aggregator.violations() {
        v.push(Violation::new("fl.aggregator", m));
    }
    let t = &fl.train;
    if t.local_epochs < 1 {
        v.push(Violation::new("fl.train.local_epochs", "must be >= 1"));
    }
    if t.batch_size < 1 {
        v.push(Violation::new("fl.train.batch_size", "must be >= 1"));
    }
    positive(&mut v, "fl.train.lr", t.lr);
    if !(t.mu.is_finite() && t.mu >= 0.0) {
        v.push(Violation::new("fl.train.mu", format!("must be >= 0, got {}", t.mu)));
    }
    let d = &fl.dataset;
    if d.n_classes < 2 {
        v.push(Violation::new("fl.dataset.n_classes", "must be >= 2"));
    }
    if d.dim < 2 {
        v.push(Violation::new("fl.dataset.dim", "must be >= 2"));
    }
    if d.n_eval < 1 {
        v.push(Violation::new("fl.dataset.n_eval", "must be >= 1"));
    }
    if d.n_train < d.n_classes.max(fl.n_clients) {
        v.push(Violation::new(
            "fl.dataset.n_train",
            format!(
                "must be >= max(n_classes, n_clients) = {}, got {}",
                d.n_classes.max(fl.n_clients),
                d.n_train
            ),
        ));
    }
    if !(d.class_sep.is_finite() && d.class_sep >= 0.0) {
        v.push(Violation::new("fl.dataset.class_sep", "must be >= 0"));
    }
    for m in fl.partition.violations(d.n_classes) {
        v.push(Violation::new("fl.partition", m));
    }
    if let PartitionSpec::Shards { classes_per_client } = fl.partition {
        let total = fl.n_clients * classes_per_client;
        if classes_per_client >= 1 && d.n_classes >= 1 && !total.is_multiple_of(d.n_classes) {
            v.push(Violation::new(
                "fl.partition.classes_per_client",
                format!(
                    "n_clients x classes_per_client = {total} shards must divide evenly over {} classes",
                    d.n_classes
                ),
            ));
        }
    }
    positive(&mut v, "fl.compute.work_per_sample_s", fl.compute.work_per_sample_s);

    let net = &cfg.net;
    for m in net.default_link.violations() {
        v.push(Violation::new("net.default_link", m));
    }
    for (id, flow) in &net.traffic {
        for m in flow.violations() {
            v.push(Violation::new(format!("net.traffic.{id}"), m));
        }
    }

    let g = &cfg.general;
    positive(&mut v, "general.metric_sample_period_s", g.metric_sample_period_s);
    let s = &g.sinks;
    if s.csv.is_none() && s.logfile.is_none() && s.stream.is_none() {
        v.push(Violation::new("general.sinks", "at least one sink must be enabled"));
    }
    if let Some(c) = &s.csv {
        sink_path(&mut v, "general.sinks.csv.dir", &c.dir);
    }
    if let Some(l) = &s.logfile {
        sink_path(&mut v, "general.sinks.logfile.path", &l.path);
    }
    if let Some(st) = &s.stream {
        if st.bind.parse::<std::net::SocketAddr>().is_err() {
            v.push(Violation::new(
                "general.sinks.stream.bind",
                format!("`{}` is not a socket address", st.bind),
            ));
        }
        if st.queue_capacity < 1 {
            v.push(Violation::new("general.sinks.stream.queue_capacity", "must be >= 1"));
        }
        if !(st.await_timeout_s.is_finite() && st.await_timeout_s >= 0.0) {
            v.push(Violation::new("general.sinks.stream.await_timeout_s", "must be >= 0"));
        }
    }
    v
}

/// Every field and cross-file check against an already resolved topology.
pub fn validate(cfg: &ExperimentConfig, topo: &Topology) -> Vec<Violation> {
    let mut v = validate_fields(cfg);
    let server = &cfg.net.server_node;
    let server_ok = match topo.node(server) {
        None => {
            v.push(Violation::new(
                "net.server_node",
                format!("node `{server}` is not in the topology"),
            ));
            false
        }
        Some(n) if !n.is_host() => {
            v.push(Violation::new("net.server_node", format!("node `{server}` is a switch")));
            false
        }
        Some(_) => true,
    };
    // without a server the client set is undefined, so the count is not checked
    let clients = topo.hosts_with_role(Role::Client).len();
    if server_ok && clients != cfg.fl.n_clients {
        v.push(Violation::new(
            "fl.n_clients vs topology client hosts",
            format!("fl.n_clients = {} but the topology has {clients} client hosts", cfg.fl.n_clients),
        ));
    }
    for (id, flow) in &cfg.net.traffic {
        for (field, node) in [("src", &flow.src), ("dst", &flow.dst)] {
            if !topo.contains(node) {
                v.push(Violation::new(
                    format!("net.traffic.{id}.{field}"),
                    format!("node `{node}` is not in the topology"),
                ));
            }
        }
    }
    if let Err(e) = cfg.traffic_sources() {
        v.push(e);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = default_config();
        assert_eq!(cfg.fl.n_clients, 4);
        assert_eq!(cfg.fl.aggregator, AggregatorSpec::FedAvg);
        assert_eq!(check(&cfg), vec![]);
        let topo = cfg.resolve_topology().unwrap();
        assert_eq!(topo.hosts_with_role(Role::Client), vec!["h2", "h3", "h4", "h5"]);
        assert_eq!(topo.hosts_with_role(Role::Server), vec!["h1"]);
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        default_config().write_dir(dir.path()).unwrap();
        assert_eq!(load_config(dir.path(), false).unwrap(), default_config());
    }

    #[test]
    fn missing_file() {
        let dir = tempfile::tempdir().unwrap();
        default_config().write_dir(dir.path()).unwrap();
        std::fs::remove_file(dir.path().join(NET_FILE)).unwrap();
        match load_config(dir.path(), false) {
            Err(ConfigError::MissingFile(f)) => assert_eq!(f, "net.toml"),
            other => panic!("{other:?}"),
        }
        assert_eq!(load_config(dir.path(), true).unwrap(), default_config());
        let empty = tempfile::tempdir().unwrap();
        assert_eq!(load_config(empty.path(), true).unwrap(), default_config());
    }

    #[test]
    fn unknown_key_reports_line_and_key() {
        let dir = tempfile::tempdir().unwrap();
        default_config().write_dir(dir.path()).unwrap();
        let fl = std::fs::read_to_string(dir.path().join(FL_FILE)).unwrap();
        std::fs::write(dir.path().join(FL_FILE), format!("roundz = 3\n{fl}")).unwrap();
        match load_config(dir.path(), false) {
            Err(ConfigError::ParseError { file, line, key, .. }) => {
                assert_eq!(file, "fl.toml");
                assert_eq!(line, 1);
                assert_eq!(key, "roundz");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_value_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        default_config().write_dir(dir.path()).unwrap();
        let fl = std::fs::read_to_string(dir.path().join(FL_FILE)).unwrap();
        let fl = fl.replace("rounds = 5", "rounds = \"five\"");
        std::fs::write(dir.path().join(FL_FILE), &fl).unwrap();
        let expected = fl.lines().position(|l| l.starts_with("rounds")).unwrap() + 1;
        match load_config(dir.path(), false) {
            Err(ConfigError::ParseError { line, key, .. }) => {
                assert_eq!(line, expected);
                assert_eq!(key, "rounds");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fraction_zero_rejected() {
        let mut cfg = default_config();
        cfg.fl.clients_per_round_fraction = 0.0;
        let v = check(&cfg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].path, "fl.clients_per_round_fraction");
    }

    #[test]
    fn client_count_mismatch() {
        let mut cfg = default_config();
        cfg.fl.n_clients = 10;
        let v = check(&cfg);
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(v[0].message.contains("10") && v[0].message.contains('4'));
    }

    #[test]
    fn dangling_traffic_node() {
        let mut cfg = default_config();
        cfg.net.traffic.get_mut("bg1").unwrap().dst = "h99".into();
        let v = check(&cfg);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].path, "net.traffic.bg1.dst");
    }

    #[test]
    fn all_violations_reported_together() {
        let mut cfg = default_config();
        cfg.fl.rounds = 0;
        cfg.fl.train.lr = -1.0;
        cfg.general.metric_sample_period_s = 0.0;
        cfg.net.server_node = "nope".into();
        assert_eq!(check(&cfg).len(), 4, "{:?}", check(&cfg));
    }

    #[test]
    fn sink_paths_stay_inside_output() {
        let mut cfg = default_config();
        cfg.general.sinks.csv = Some(CsvSinkSpec { dir: "../x".into() });
        cfg.general.sinks.logfile = Some(LogfileSinkSpec { path: "/tmp/x.log".into() });
        assert_eq!(check(&cfg).len(), 2);
        cfg.general.sinks = Sinks::default();
        assert_eq!(check(&cfg).len(), 1);
    }

    #[test]
    fn relative_topology_path_resolves_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = default_config();
        cfg.net.topology = TopologySource::TopohubJson { path: "topo.json".into() };
        cfg.net.traffic.clear();
        cfg.fl.n_clients = 2;
        cfg.write_dir(dir.path()).unwrap();
        std::fs::write(
            dir.path().join("topo.json"),
            r#"{"name":"t","nodes":[{"id":"h1","role":"server"},{"id":"c1","role":"client"},{"id":"c2","role":"client"},{"id":"s","kind":"switch"}],
               "links":[{"a":"h1","b":"s"},{"a":"c1","b":"s"},{"a":"c2","b":"s"}]}"#,
        )
        .unwrap();
        let loaded = load_config(dir.path(), false).unwrap();
        match &loaded.net.topology {
            TopologySource::TopohubJson { path } => assert!(path.is_absolute()),
            other => panic!("{other:?}"),
        }
    }
}
