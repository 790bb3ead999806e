//! Metric envelopes and the sinks that persist or stream them.

mod csv_sink;
mod report;
mod stream;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use csv_sink::{CsvSink, NET_HEADER, ROUNDS_HEADER, SYS_HEADER, TRAFFIC_HEADER};
pub use report::{summarize, write_report, ClientPhaseMeans, DurationStats, ReportSummary, RoundSummary};
pub use stream::{StreamPublisher, Subscriber};

use crate::config::GeneralConfig;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("cannot bind stream socket {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("{file}: {message}")]
    Schema { file: String, message: String },
}

impl MetricsError {
    pub(crate) fn io(path: &Path, e: impl fmt::Display) -> Self {
        MetricsError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Topic {
    #[serde(rename = "fl.round")]
    FlRound,
    #[serde(rename = "sys.sample")]
    SysSample,
    #[serde(rename = "net.sample")]
    NetSample,
    #[serde(rename = "traffic.event")]
    TrafficEvent,
    #[serde(rename = "log")]
    Log,
}

impl Topic {
    pub const ALL: [Topic; 5] = [
        Topic::FlRound,
        Topic::SysSample,
        Topic::NetSample,
        Topic::TrafficEvent,
        Topic::Log,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Topic::FlRound => "fl.round",
            Topic::SysSample => "sys.sample",
            Topic::NetSample => "net.sample",
            Topic::TrafficEvent => "traffic.event",
            Topic::Log => "log",
        }
    }

    pub fn parse(s: &str) -> Option<Topic> {
        Topic::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Real(f64),
    Str(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            Value::Str(_) => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Real(v)
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as i64)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEnvelope {
    pub t_sim_s: f64,
    pub source: String,
    pub topic: Topic,
    pub payload: BTreeMap<String, Value>,
}

impl MetricEnvelope {
    pub fn new(t_sim_s: f64, source: impl Into<String>, topic: Topic) -> Self {
        Self {
            t_sim_s,
            source: source.into(),
            topic,
            payload: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.payload.insert(key.to_string(), value.into());
        self
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.payload.get(key).and_then(Value::as_f64)
    }

    /// Wire form: topic, one space, a JSON object, LF.
    pub fn to_line(&self) -> String {
        let body = serde_json::to_string(self).expect("envelopes serialize");
        format!("{} {body}\n", self.topic)
    }

    pub fn from_line(line: &str) -> Option<MetricEnvelope> {
        let (topic, body) = line.trim_end_matches('\n').split_once(' ')?;
        let env: MetricEnvelope = serde_json::from_str(body).ok()?;
        (env.topic.as_str() == topic).then_some(env)
    }
}

/// Formats a real with 6 significant digits, `%g` style.
pub fn fmt_real(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    // the exponent after rounding to 6 digits decides the layout (999999.5 -> 1e+06)
    let sci = format!("{:.5e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub trait MetricSink {
    fn publish(&mut self, env: &MetricEnvelope) -> Result<(), MetricsError>;
    fn finish(&mut self) -> Result<(), MetricsError>;
}

/// Keeps every envelope in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub envelopes: Vec<MetricEnvelope>,
}

impl MetricSink for MemorySink {
    fn publish(&mut self, env: &MetricEnvelope) -> Result<(), MetricsError> {
        self.envelopes.push(env.clone());
        Ok(())
    }

    fn finish(&mut self) -> Result<(), MetricsError> {
        Ok(())
    }
}

/// One line per envelope: `<t> <topic> <source> <json payload>`.
pub struct LogfileSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl LogfileSink {
    pub fn create(path: &Path) -> Result<Self, MetricsError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| MetricsError::io(parent, e))?;
        }
        let f = File::create(path).map_err(|e| MetricsError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(f),
        })
    }
}

impl MetricSink for LogfileSink {
    fn publish(&mut self, env: &MetricEnvelope) -> Result<(), MetricsError> {
        let payload = serde_json::to_string(&env.payload).expect("payload serializes");
        writeln!(
            self.out,
            "{} {} {} {payload}",
            fmt_real(env.t_sim_s),
            env.topic,
            env.source
        )
        .map_err(|e| MetricsError::io(&self.path, e))
    }

    fn finish(&mut self) -> Result<(), MetricsError> {
        self.out.flush().map_err(|e| MetricsError::io(&self.path, e))
    }
}

/// Fans envelopes out to every configured sink.
#[derive(Default)]
pub struct SinkSet {
    sinks: Vec<Box<dyn MetricSink + Send>>,
}

impl SinkSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, sink: Box<dyn MetricSink + Send>) {
        self.sinks.push(sink);
    }

    /// Opens the sinks of `general`; file paths are taken relative to `out`.
    pub fn from_config(general: &GeneralConfig, out: &Path) -> Result<Self, MetricsError> {
        let mut set = SinkSet::new();
        let s = &general.sinks;
        if let Some(c) = &s.csv {
            set.push(Box::new(CsvSink::new(&out.join(&c.dir))));
        }
        if let Some(l) = &s.logfile {
            set.push(Box::new(LogfileSink::create(&out.join(&l.path))?));
        }
        if let Some(st) = &s.stream {
            let publisher = StreamPublisher::bind(&st.bind, st.queue_capacity)?;
            if st.await_subscribers > 0 {
                publisher.wait_for_subscribers(
                    st.await_subscribers,
                    std::time::Duration::from_secs_f64(st.await_timeout_s),
                );
            }
            set.push(Box::new(publisher));
        }
        Ok(set)
    }
}

impl MetricSink for SinkSet {
    fn publish(&mut self, env: &MetricEnvelope) -> Result<(), MetricsError> {
        self.sinks.iter_mut().try_for_each(|s| s.publish(env))
    }

    fn finish(&mut self) -> Result<(), MetricsError> {
        self.sinks.iter_mut().try_for_each(|s| s.finish())
    }
}
