//! Background traffic: rate processes and trace replay.
//!
//! Uniform, SineWave, Normal and Bursty are piecewise-constant demand
//! processes. Poisson and trace replay are event based: each event is a burst
//! of bytes queued at the sender and sent at `cap_mbps` until the backlog is
//! empty, which turns the event stream into an on/off demand profile.

use std::f64::consts::PI;
use std::path::PathBuf;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Default step for Normal processes.
pub const DEFAULT_NORMAL_STEP_S: f64 = 0.1;
/// SineWave demand is sampled this many times per period.
pub const SINE_STEPS_PER_PERIOD: u32 = 64;
/// Window used by [`TrafficSource::demand_at`] for event-based patterns.
pub const SMOOTHING_WINDOW_S: f64 = 1.0;

fn default_step() -> f64 {
    DEFAULT_NORMAL_STEP_S
}

fn default_scale() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrafficPatternSpec {
    Poisson {
        lambda_events_per_s: f64,
        event_bytes: f64,
    },
    Bursty {
        burst_rate_mbps: f64,
        burst_s: f64,
        idle_s: f64,
    },
    Uniform {
        rate_mbps: f64,
    },
    Normal {
        mean_mbps: f64,
        std_mbps: f64,
        #[serde(default = "default_step")]
        step_s: f64,
    },
    SineWave {
        base_mbps: f64,
        amplitude_mbps: f64,
        period_s: f64,
    },
    TraceReplay {
        trace: PathBuf,
        #[serde(default = "default_scale")]
        time_scale: f64,
    },
}

impl TrafficPatternSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Poisson { .. } => "poisson",
            Self::Bursty { .. } => "bursty",
            Self::Uniform { .. } => "uniform",
            Self::Normal { .. } => "normal",
            Self::SineWave { .. } => "sine_wave",
            Self::TraceReplay { .. } => "trace_replay",
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut nonneg = |name: &str, x: f64| {
            if !(x.is_finite() && x >= 0.0) {
                v.push(format!("{name} must be >= 0, got {x}"));
            }
        };
        match self {
            Self::Poisson {
                lambda_events_per_s,
                event_bytes,
            } => {
                nonneg("lambda_events_per_s", *lambda_events_per_s);
                nonneg("event_bytes", *event_bytes);
            }
            Self::Bursty {
                burst_rate_mbps,
                burst_s,
                idle_s,
            } => {
                nonneg("burst_rate_mbps", *burst_rate_mbps);
                nonneg("idle_s", *idle_s);
                if !(burst_s.is_finite() && *burst_s > 0.0) {
                    v.push(format!("burst_s must be > 0, got {burst_s}"));
                }
            }
            Self::Uniform { rate_mbps } => nonneg("rate_mbps", *rate_mbps),
            Self::Normal {
                mean_mbps,
                std_mbps,
                step_s,
            } => {
                nonneg("mean_mbps", *mean_mbps);
                nonneg("std_mbps", *std_mbps);
                if !(step_s.is_finite() && *step_s > 0.0) {
                    v.push(format!("step_s must be > 0, got {step_s}"));
                }
            }
            Self::SineWave {
                base_mbps,
                amplitude_mbps,
                period_s,
            } => {
                nonneg("base_mbps", *base_mbps);
                nonneg("amplitude_mbps", *amplitude_mbps);
                if !(period_s.is_finite() && *period_s > 0.0) {
                    v.push(format!("period_s must be > 0, got {period_s}"));
                }
            }
            Self::TraceReplay { time_scale, .. } => {
                if !(time_scale.is_finite() && *time_scale > 0.0) {
                    v.push(format!("time_scale must be > 0, got {time_scale}"));
                }
            }
        }
        v
    }
}

/// One background flow between two nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficFlowSpec {
    #[serde(default = "default_true")]
    pub enabled: bool,
    pub src: String,
    pub dst: String,
    pub cap_mbps: f64,
    pub start_s: f64,
    pub stop_s: f64,
    pub seed: u64,
    pub pattern: TrafficPatternSpec,
}

impl TrafficFlowSpec {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.cap_mbps.is_finite() && self.cap_mbps > 0.0) {
            v.push(format!("cap_mbps must be > 0, got {}", self.cap_mbps));
        }
        if !(self.start_s.is_finite() && self.start_s >= 0.0) {
            v.push(format!("start_s must be >= 0, got {}", self.start_s));
        }
        if !(self.start_s < self.stop_s) {
            v.push(format!(
                "start_s ({}) must be < stop_s ({})",
                self.start_s, self.stop_s
            ));
        }
        if self.src == self.dst {
            v.push(format!("src and dst are the same node ({})", self.src));
        }
        v.extend(self.pattern.violations().into_iter().map(|m| format!("pattern.{m}")));
        v
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TraceError {
    #[error("trace format error on line {line}: {message}")]
    TraceFormatError { line: usize, message: String },
    #[error("trace time goes backwards on line {line}")]
    NonMonotonicTime { line: usize },
    #[error("cannot read trace {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEvent {
    pub time_offset_s: f64,
    pub bytes: f64,
}

/// Parses a `time_s,bytes` CSV trace and scales its time offsets.
pub fn load_trace(bytes: &[u8], time_scale: f64) -> Result<Vec<TraceEvent>, TraceError> {
    let text = std::str::from_utf8(bytes).map_err(|e| TraceError::TraceFormatError {
        line: 1,
        message: format!("invalid UTF-8: {e}"),
    })?;
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("time_s,bytes") => {}
        other => {
            return Err(TraceError::TraceFormatError {
                line: 1,
                message: format!("expected header \"time_s,bytes\", got {:?}", other.unwrap_or("")),
            })
        }
    }
    let mut out = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for (i, raw) in lines.enumerate() {
        let line = i + 2;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let bad = |message: String| TraceError::TraceFormatError { line, message };
        let (t, b) = raw
            .split_once(',')
            .ok_or_else(|| bad("expected two comma-separated fields".into()))?;
        let t: f64 = t.trim().parse().map_err(|_| bad(format!("bad time {t:?}")))?;
        let b: f64 = b.trim().parse().map_err(|_| bad(format!("bad byte count {b:?}")))?;
        if !(t.is_finite() && t >= 0.0 && b.is_finite() && b >= 0.0) {
            return Err(bad("values must be finite and non-negative".into()));
        }
        if t < last {
            return Err(TraceError::NonMonotonicTime { line });
        }
        last = t;
        out.push(TraceEvent {
            time_offset_s: t * time_scale,
            bytes: b,
        });
    }
    Ok(out)
}

/// A change of demanded rate at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemandChange {
    pub t: f64,
    pub mbps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleItem {
    Demand { t: f64, mbps: f64 },
    Burst { t: f64, bytes: f64 },
}

impl ScheduleItem {
    pub fn t(&self) -> f64 {
        match self {
            Self::Demand { t, .. } | Self::Burst { t, .. } => *t,
        }
    }
}

/// A traffic flow specification bound to its (optional) loaded trace.
#[derive(Debug, Clone)]
pub struct TrafficSource {
    pub spec: TrafficFlowSpec,
    trace: Option<Arc<Vec<TraceEvent>>>,
}

impl TrafficSource {
    pub fn new(spec: TrafficFlowSpec) -> Self {
        Self { spec, trace: None }
    }

    /// Attaches trace events (already time-scaled) for `TraceReplay` patterns.
    pub fn with_trace(mut self, events: Vec<TraceEvent>) -> Self {
        self.trace = Some(Arc::new(events));
        self
    }

    fn clamp(&self, mbps: f64) -> f64 {
        mbps.clamp(0.0, self.spec.cap_mbps)
    }

    fn normal_draw(&self, step: u64, mean: f64, std: f64) -> f64 {
        if std <= 0.0 {
            return mean;
        }
        let mut rng = seed::rng(&[seed::stream::TRAFFIC, self.spec.seed, step]);
        Normal::new(mean, std).map(|d| d.sample(&mut rng)).unwrap_or(mean)
    }

    /// Event-based patterns: the `(time, bytes)` stream over `[start_s, stop_s)`.
    pub fn bursts(&self) -> Box<dyn Iterator<Item = (f64, f64)> + '_> {
        let start = self.spec.start_s;
        let stop = self.spec.stop_s;
        match &self.spec.pattern {
            TrafficPatternSpec::Poisson {
                lambda_events_per_s,
                event_bytes,
            } => {
                let bytes = *event_bytes;
                let Ok(exp) = Exp::new(*lambda_events_per_s) else {
                    return Box::new(std::iter::empty());
                };
                if *lambda_events_per_s <= 0.0 {
                    return Box::new(std::iter::empty());
                }
                let mut rng: ChaCha8Rng = seed::rng(&[seed::stream::TRAFFIC, self.spec.seed]);
                let mut t = start;
                Box::new(std::iter::from_fn(move || {
                    t += exp.sample(&mut rng);
                    (t < stop).then_some((t, bytes))
                }))
            }
            TrafficPatternSpec::TraceReplay { .. } => {
                let events = self.trace.clone().unwrap_or_default();
                let mut i = 0;
                Box::new(std::iter::from_fn(move || {
                    let e = events.get(i)?;
                    i += 1;
                    let t = start + e.time_offset_s;
                    (t < stop).then_some((t, e.bytes))
                }))
            }
            _ => Box::new(std::iter::empty()),
        }
    }

    /// Demanded rate at time `t`, clamped to `[0, cap_mbps]`; zero outside the active interval.
    pub fn demand_at(&self, t: f64) -> f64 {
        let s = &self.spec;
        if t < s.start_s || t >= s.stop_s {
            return 0.0;
        }
        let raw = match &s.pattern {
            TrafficPatternSpec::Uniform { rate_mbps } => *rate_mbps,
            TrafficPatternSpec::SineWave {
                base_mbps,
                amplitude_mbps,
                period_s,
            } => base_mbps + amplitude_mbps * (2.0 * PI * t / period_s).sin(),
            TrafficPatternSpec::Normal {
                mean_mbps,
                std_mbps,
                step_s,
            } => {
                let k = ((t - s.start_s) / step_s).floor() as u64;
                self.normal_draw(k, *mean_mbps, *std_mbps)
            }
            TrafficPatternSpec::Bursty {
                burst_rate_mbps,
                burst_s,
                idle_s,
            } => {
                let phase = (t - s.start_s) % (burst_s + idle_s);
                if phase < *burst_s {
                    *burst_rate_mbps
                } else {
                    0.0
                }
            }
            TrafficPatternSpec::Poisson { .. } | TrafficPatternSpec::TraceReplay { .. } => {
                let lo = t - SMOOTHING_WINDOW_S;
                let bytes: f64 = self
                    .bursts()
                    .take_while(|(bt, _)| *bt <= t)
                    .filter(|(bt, _)| *bt > lo)
                    .map(|(_, b)| b)
                    .sum();
                bytes * 8.0 / SMOOTHING_WINDOW_S / 1e6
            }
        };
        self.clamp(raw)
    }

    /// Lazily generated piecewise-constant demand profile.
    pub fn demand_changes(&self) -> DemandProcess<'_> {
        DemandProcess::new(self)
    }

    /// Events up to `horizon`: demand changes for rate patterns, bursts for
    /// event patterns. Always ends with the drop to zero at `stop_s` when
    /// that lies within the horizon.
    pub fn schedule_events(&self, horizon: f64) -> Vec<ScheduleItem> {
        match self.spec.pattern {
            TrafficPatternSpec::Poisson { .. } | TrafficPatternSpec::TraceReplay { .. } => self
                .bursts()
                .take_while(|(t, _)| *t <= horizon)
                .map(|(t, bytes)| ScheduleItem::Burst { t, bytes })
                .collect(),
            _ => self
                .demand_changes()
                .take_while(|c| c.t <= horizon)
                .map(|c| ScheduleItem::Demand { t: c.t, mbps: c.mbps })
                .collect(),
        }
    }
}

enum ProcessState<'a> {
    Stepped { k: u64 },
    Backlog {
        bursts: Box<dyn Iterator<Item = (f64, f64)> + 'a>,
        pending: Option<(f64, f64)>,
        busy_until: Option<f64>,
    },
    Finished,
}

/// Iterator over [`DemandChange`]s of one traffic source.
pub struct DemandProcess<'a> {
    src: &'a TrafficSource,
    state: ProcessState<'a>,
}

impl<'a> DemandProcess<'a> {
    fn new(src: &'a TrafficSource) -> Self {
        let state = match src.spec.pattern {
            TrafficPatternSpec::Poisson { .. } | TrafficPatternSpec::TraceReplay { .. } => {
                let mut bursts = src.bursts();
                let pending = bursts.next();
                ProcessState::Backlog {
                    bursts,
                    pending,
                    busy_until: None,
                }
            }
            _ => ProcessState::Stepped { k: 0 },
        };
        Self { src, state }
    }

    fn stop(&mut self) -> Option<DemandChange> {
        self.state = ProcessState::Finished;
        Some(DemandChange {
            t: self.src.spec.stop_s,
            mbps: 0.0,
        })
    }
}

impl Iterator for DemandProcess<'_> {
    type Item = DemandChange;

    fn next(&mut self) -> Option<DemandChange> {
        let spec = &self.src.spec;
        let (start, stop, cap) = (spec.start_s, spec.stop_s, spec.cap_mbps);
        match &mut self.state {
            ProcessState::Finished => None,
            ProcessState::Stepped { k } => {
                let i = *k;
                let (t, mbps) = match &spec.pattern {
                    TrafficPatternSpec::Uniform { rate_mbps } => {
                        if i > 0 {
                            return self.stop();
                        }
                        (start, *rate_mbps)
                    }
                    TrafficPatternSpec::SineWave {
                        base_mbps,
                        amplitude_mbps,
                        period_s,
                    } => {
                        let t = start + i as f64 * period_s / SINE_STEPS_PER_PERIOD as f64;
                        (t, base_mbps + amplitude_mbps * (2.0 * PI * t / period_s).sin())
                    }
                    TrafficPatternSpec::Normal {
                        mean_mbps,
                        std_mbps,
                        step_s,
                    } => (
                        start + i as f64 * step_s,
                        self.src.normal_draw(i, *mean_mbps, *std_mbps),
                    ),
                    TrafficPatternSpec::Bursty {
                        burst_rate_mbps,
                        burst_s,
                        idle_s,
                    } => {
                        let cycle = i / 2;
                        let base = start + cycle as f64 * (burst_s + idle_s);
                        if i % 2 == 0 {
                            (base, *burst_rate_mbps)
                        } else {
                            (base + burst_s, 0.0)
                        }
                    }
                    _ => unreachable!("event patterns use the backlog state"),
                };
                if t >= stop {
                    return self.stop();
                }
                *k += 1;
                Some(DemandChange {
                    t,
                    mbps: mbps.clamp(0.0, cap),
                })
            }
            ProcessState::Backlog {
                bursts,
                pending,
                busy_until,
            } => {
                let rate_bytes_per_s = cap * 1e6 / 8.0;
                match *busy_until {
                    None => {
                        // Idle: the next arrival starts a busy period.
                        let Some((t, bytes)) = pending.take() else {
                            return self.stop();
                        };
                        *busy_until = Some(t + bytes / rate_bytes_per_s);
                        *pending = bursts.next();
                        Some(DemandChange { t, mbps: cap })
                    }
                    Some(mut end) => {
                        // Absorb arrivals that land inside the busy period.
                        while let Some((t, bytes)) = *pending {
                            if t > end {
                                break;
                            }
                            end += bytes / rate_bytes_per_s;
                            *pending = bursts.next();
                        }
                        if end >= stop {
                            return self.stop();
                        }
                        *busy_until = None;
                        Some(DemandChange { t: end, mbps: 0.0 })
                    }
                }
            }
        }
    }
}

/// Time-weighted mean demand of a change sequence over `[from, to)`.
pub fn mean_rate(changes: &[DemandChange], from: f64, to: f64) -> f64 {
    let mut total = 0.0;
    let mut level = 0.0;
    let mut t_prev = from;
    for c in changes {
        let t = c.t.clamp(from, to);
        total += level * (t - t_prev);
        t_prev = t;
        level = c.mbps;
    }
    total += level * (to - t_prev);
    total / (to - from)
}
