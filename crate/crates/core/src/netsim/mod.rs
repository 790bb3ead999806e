//! Flow-level discrete-event network simulator.
//!
//! Flows are fluids: each active flow gets a max-min fair share of every link
//! direction it crosses, and the simulator jumps from event to event. Rates
//! are recomputed lazily, once per instant, whenever the active flow set or an
//! inelastic demand changed.
//!
//! An elastic flow occupies bandwidth from its start until its payload has
//! been pushed through (the transmission phase); it is reported complete one
//! path propagation delay later. Loss scales goodput by `1 - path_loss`, so the
//! sender injects `bytes_total / (1 - path_loss)` bytes.

mod alloc;
mod queue;

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::topology::{Path, Topology, TopologyError};

pub use alloc::{allocate_rates, FlowDemand, RateAllocation, Resource};
pub use queue::EventQueue;

pub type FlowId = u64;

const BITS_PER_MBIT: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetSimError {
    #[error("simulation stalled: elastic flow {flow} has no bandwidth")]
    StalledSimulation { flow: FlowId },
    #[error(transparent)]
    Routing(#[from] TopologyError),
    #[error("unknown flow {0}")]
    UnknownFlow(FlowId),
    #[error("cannot schedule at {at} s, clock is already at {now} s")]
    PastEvent { at: f64, now: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowKind {
    Elastic { bytes_total: f64, bytes_remaining: f64 },
    Inelastic { demand_mbps: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub id: FlowId,
    pub src: String,
    pub dst: String,
    pub path: Path,
    pub kind: FlowKind,
    pub start_s: f64,
    /// Time the last byte left the sender.
    pub drained_s: Option<f64>,
    /// Time the last byte arrived (elastic flows only).
    pub done_s: Option<f64>,
    pub propagation_s: f64,
    pub path_loss: f64,
}

impl Flow {
    pub fn is_elastic(&self) -> bool {
        matches!(self.kind, FlowKind::Elastic { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Event {
    FlowStart(FlowId),
    /// Internal: projected end of an elastic flow's transmission under the
    /// allocation of the given epoch. Stale epochs are discarded.
    FlowDrained { flow: FlowId, epoch: u64 },
    FlowComplete(FlowId),
    FlowStop(FlowId),
    RateProcessChange { flow: FlowId, demand_mbps: f64 },
    MetricSampleTick,
    RoundPhaseBoundary(u64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub t: f64,
    pub seq: u64,
    pub event: Event,
}

/// Per-node interface counters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NodeCounters {
    pub tx_bytes: f64,
    pub rx_bytes: f64,
    pub tx_bps: f64,
    pub rx_bps: f64,
}

pub struct NetSim {
    topo: Topology,
    now: f64,
    queue: EventQueue<Event>,
    flows: BTreeMap<FlowId, Flow>,
    active: BTreeSet<FlowId>,
    alloc: RateAllocation,
    dirty: bool,
    epoch: u64,
    next_id: FlowId,
    tx_bytes: BTreeMap<String, f64>,
    rx_bytes: BTreeMap<String, f64>,
    paths: BTreeMap<(String, String), Path>,
    trace: Option<Vec<TraceEntry>>,
}

impl NetSim {
    pub fn new(topo: Topology) -> Self {
        Self {
            topo,
            now: 0.0,
            queue: EventQueue::new(),
            flows: BTreeMap::new(),
            active: BTreeSet::new(),
            alloc: RateAllocation::default(),
            dirty: false,
            epoch: 0,
            next_id: 0,
            tx_bytes: BTreeMap::new(),
            rx_bytes: BTreeMap::new(),
            paths: BTreeMap::new(),
            trace: None,
        }
    }

    /// Records every processed event, for determinism checks.
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn trace(&self) -> &[TraceEntry] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    pub fn flow(&self, id: FlowId) -> Option<&Flow> {
        self.flows.get(&id)
    }

    pub fn active_flows(&self) -> impl Iterator<Item = &Flow> {
        self.active.iter().map(|id| &self.flows[id])
    }

    pub fn allocation(&self) -> &RateAllocation {
        &self.alloc
    }

    fn path(&mut self, src: &str, dst: &str) -> Result<Path, NetSimError> {
        let key = (src.to_string(), dst.to_string());
        if let Some(p) = self.paths.get(&key) {
            return Ok(p.clone());
        }
        let p = self.topo.shortest_path(src, dst)?;
        self.paths.insert(key, p.clone());
        Ok(p)
    }

    fn register(&mut self, src: &str, dst: &str, kind: FlowKind, start_s: f64) -> Result<FlowId, NetSimError> {
        if start_s < self.now {
            return Err(NetSimError::PastEvent {
                at: start_s,
                now: self.now,
            });
        }
        let path = self.path(src, dst)?;
        let id = self.next_id;
        self.next_id += 1;
        let flow = Flow {
            id,
            src: src.to_string(),
            dst: dst.to_string(),
            propagation_s: path.delay_ms(&self.topo) / 1000.0,
            path_loss: path.loss(&self.topo),
            path,
            kind,
            start_s,
            drained_s: None,
            done_s: None,
        };
        self.flows.insert(id, flow);
        self.queue.push(start_s, Event::FlowStart(id));
        Ok(id)
    }

    /// Schedules a fixed-size transfer; `bytes` is the goodput to deliver.
    pub fn add_elastic(&mut self, src: &str, dst: &str, bytes: f64, start_s: f64) -> Result<FlowId, NetSimError> {
        self.register(
            src,
            dst,
            FlowKind::Elastic {
                bytes_total: bytes,
                bytes_remaining: bytes,
            },
            start_s,
        )
    }

    /// Schedules a demand-driven flow with zero initial demand. Demand changes
    /// arrive as [`Event::RateProcessChange`]; stopping it is up to the caller.
    pub fn add_inelastic(&mut self, src: &str, dst: &str, start_s: f64) -> Result<FlowId, NetSimError> {
        self.register(src, dst, FlowKind::Inelastic { demand_mbps: 0.0 }, start_s)
    }

    pub fn schedule(&mut self, at: f64, event: Event) -> Result<(), NetSimError> {
        if at < self.now {
            return Err(NetSimError::PastEvent { at, now: self.now });
        }
        self.queue.push(at, event);
        Ok(())
    }

    fn integrate_to(&mut self, t: f64) {
        let dt = t - self.now;
        if dt <= 0.0 {
            return;
        }
        for id in &self.active {
            let rate = self.alloc.rate(*id);
            if rate <= 0.0 {
                continue;
            }
            let flow = self.flows.get_mut(id).unwrap();
            let injected = rate * BITS_PER_MBIT * dt / 8.0;
            let delivered = injected * (1.0 - flow.path_loss);
            *self.tx_bytes.entry(flow.src.clone()).or_insert(0.0) += injected;
            *self.rx_bytes.entry(flow.dst.clone()).or_insert(0.0) += delivered;
            if let FlowKind::Elastic { bytes_remaining, .. } = &mut flow.kind {
                *bytes_remaining = (*bytes_remaining - delivered).max(0.0);
            }
        }
        self.now = t;
    }

    fn reallocate(&mut self) -> Result<(), NetSimError> {
        let demands: Vec<FlowDemand<'_>> = self
            .active
            .iter()
            .map(|id| {
                let f = &self.flows[id];
                FlowDemand {
                    id: *id,
                    hops: &f.path.hops,
                    demand_mbps: match f.kind {
                        FlowKind::Elastic { .. } => None,
                        FlowKind::Inelastic { demand_mbps } => Some(demand_mbps),
                    },
                }
            })
            .collect();
        self.alloc = allocate_rates(&demands, &self.topo);
        self.epoch += 1;
        self.dirty = false;

        let mut earliest: Option<(f64, FlowId)> = None;
        for id in &self.active {
            let f = &self.flows[id];
            let FlowKind::Elastic { bytes_remaining, .. } = f.kind else {
                continue;
            };
            let goodput = self.alloc.rate(*id) * (1.0 - f.path_loss);
            if goodput <= 0.0 {
                return Err(NetSimError::StalledSimulation { flow: *id });
            }
            let t = self.now + bytes_remaining * 8.0 / (goodput * BITS_PER_MBIT);
            if earliest.is_none_or(|(et, _)| t < et) {
                earliest = Some((t, *id));
            }
        }
        if let Some((t, flow)) = earliest {
            self.queue.push(t, Event::FlowDrained { flow, epoch: self.epoch });
        }
        Ok(())
    }

    fn ensure_allocated(&mut self) -> Result<(), NetSimError> {
        if self.dirty {
            self.reallocate()?;
        }
        Ok(())
    }

    fn drain(&mut self, id: FlowId) {
        let now = self.now;
        let flow = self.flows.get_mut(&id).unwrap();
        if let FlowKind::Elastic { bytes_remaining, .. } = &mut flow.kind {
            *bytes_remaining = 0.0;
        }
        flow.drained_s = Some(now);
        let done = now + flow.propagation_s;
        self.active.remove(&id);
        self.queue.push(done, Event::FlowComplete(id));
        self.dirty = true;
    }

    /// Processes the next event and returns it, or `None` when the queue is empty.
    pub fn advance(&mut self) -> Result<Option<(f64, Event)>, NetSimError> {
        loop {
            if self.dirty && self.queue.peek_time().is_none_or(|t| t > self.now) {
                self.reallocate()?;
            }
            let Some((t, seq, event)) = self.queue.pop() else {
                return Ok(None);
            };
            if let Event::FlowDrained { epoch, .. } = event {
                if epoch != self.epoch {
                    continue;
                }
            }
            self.integrate_to(t);
            if let Some(trace) = &mut self.trace {
                trace.push(TraceEntry { t, seq, event });
            }
            match event {
                Event::FlowStart(id) => {
                    let flow = self.flows.get(&id).ok_or(NetSimError::UnknownFlow(id))?;
                    match flow.kind {
                        FlowKind::Elastic { bytes_total, .. } if bytes_total <= 0.0 => self.drain(id),
                        _ => {
                            self.active.insert(id);
                            self.dirty = true;
                        }
                    }
                }
                Event::FlowDrained { flow, .. } => {
                    self.drain(flow);
                    // Flows whose projected end coincides within rounding drain together.
                    let close: Vec<FlowId> = self
                        .active
                        .iter()
                        .copied()
                        .filter(|id| match self.flows[id].kind {
                            FlowKind::Elastic {
                                bytes_total,
                                bytes_remaining,
                            } => bytes_remaining <= 1e-6 + 1e-12 * bytes_total,
                            _ => false,
                        })
                        .collect();
                    for id in close {
                        self.drain(id);
                    }
                }
                Event::FlowComplete(id) => {
                    let flow = self.flows.get_mut(&id).ok_or(NetSimError::UnknownFlow(id))?;
                    flow.done_s = Some(t);
                }
                Event::FlowStop(id) => {
                    if !self.flows.contains_key(&id) {
                        return Err(NetSimError::UnknownFlow(id));
                    }
                    if self.active.remove(&id) {
                        self.dirty = true;
                    }
                }
                Event::RateProcessChange { flow, demand_mbps } => {
                    let is_active = self.active.contains(&flow);
                    let f = self.flows.get_mut(&flow).ok_or(NetSimError::UnknownFlow(flow))?;
                    if let FlowKind::Inelastic { demand_mbps: d } = &mut f.kind {
                        if *d != demand_mbps {
                            *d = demand_mbps;
                            self.dirty |= is_active;
                        }
                    }
                }
                Event::MetricSampleTick | Event::RoundPhaseBoundary(_) => {}
            }
            return Ok(Some((t, event)));
        }
    }

    /// Propagation and transmission time of a completed elastic flow.
    pub fn transfer_time_components(&self, id: FlowId) -> Option<(f64, f64)> {
        let f = self.flows.get(&id)?;
        if !f.is_elastic() {
            return None;
        }
        let drained = f.drained_s?;
        f.done_s?;
        Some((f.propagation_s, drained - f.start_s))
    }

    /// Cumulative bytes and instantaneous bit rates for every host.
    pub fn link_counters(&mut self) -> Result<BTreeMap<String, NodeCounters>, NetSimError> {
        self.ensure_allocated()?;
        let mut out: BTreeMap<String, NodeCounters> = self
            .topo
            .hosts()
            .map(|n| {
                (
                    n.id.clone(),
                    NodeCounters {
                        tx_bytes: self.tx_bytes.get(&n.id).copied().unwrap_or(0.0),
                        rx_bytes: self.rx_bytes.get(&n.id).copied().unwrap_or(0.0),
                        ..Default::default()
                    },
                )
            })
            .collect();
        for id in &self.active {
            let f = &self.flows[id];
            let bps = self.alloc.rate(*id) * BITS_PER_MBIT;
            if let Some(c) = out.get_mut(&f.src) {
                c.tx_bps += bps;
            }
            if let Some(c) = out.get_mut(&f.dst) {
                c.rx_bps += bps * (1.0 - f.path_loss);
            }
        }
        Ok(out)
    }
}
