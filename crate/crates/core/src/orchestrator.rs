//! Couples federated rounds to the network simulation.
//!
//! Learning for a round runs up front and never looks at network timing;
//! the network then replays the round's transfers (S2C, compute, C2S) to
//! produce its timing breakdown. Traffic demand changes and metric ticks
//! are interleaved with the round events on the same clock.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{self, ExperimentConfig, Violation};
use crate::fl::{
    evaluate, local_train, make_synthetic_split, partition, select_clients, Architecture, ClientState, Dataset,
    FlError, ModelParams, ServerOptimizer, TrainConfig,
};
use crate::metrics::{MetricEnvelope, MetricSink, MetricsError, Topic};
use crate::netsim::{Event, FlowId, NetSim, NetSimError};
use crate::seed;
use crate::topology::{NodeResources, Role, TopologyError};

/// Idle CPU floor reported outside the compute phase.
pub const IDLE_CPU_PCT: f64 = 2.0;
/// Resident memory of an idle client process.
pub const IDLE_MEM_MB: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeModel {
    /// Reference-core seconds per sample per epoch.
    pub work_per_sample_s: f64,
}

impl ComputeModel {
    pub fn compute_time(&self, local_epochs: usize, n_samples: usize, cpu_units: f64) -> f64 {
        local_epochs as f64 * n_samples as f64 * self.work_per_sample_s / cpu_units
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid configuration:\n{}", .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    InvalidConfig(Vec<Violation>),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("experiment setup failed: {0}")]
    Setup(FlError),
    #[error("round {round}, client {client}: {source}")]
    Learning {
        round: usize,
        client: String,
        source: FlError,
    },
    #[error("round {round}: {source}")]
    Network { round: usize, source: NetSimError },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundTiming {
    pub client_id: String,
    pub s2c_s: f64,
    pub compute_s: f64,
    pub c2s_s: f64,
}

impl ClientRoundTiming {
    pub fn span(&self) -> f64 {
        self.s2c_s + self.compute_s + self.c2s_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub start_s: f64,
    pub selected: Vec<String>,
    pub timings: Vec<ClientRoundTiming>,
    /// Max client span; aggregation takes no time.
    pub round_duration_s: f64,
    pub global_loss: f64,
    pub global_accuracy: f64,
}

impl RoundRecord {
    pub fn max_s2c_s(&self) -> f64 {
        self.timings.iter().map(|t| t.s2c_s).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub rounds: Vec<RoundRecord>,
    pub clients: Vec<String>,
    pub initial_loss: f64,
    pub initial_accuracy: f64,
    pub wire_bytes: u64,
    pub end_s: f64,
    pub final_params: ModelParams,
}

impl ExperimentResult {
    pub fn final_accuracy(&self) -> f64 {
        self.rounds.last().map_or(self.initial_accuracy, |r| r.global_accuracy)
    }

    pub fn final_loss(&self) -> f64 {
        self.rounds.last().map_or(self.initial_loss, |r| r.global_loss)
    }
}

struct Learner {
    seed: u64,
    train: Dataset,
    eval: Dataset,
    parts: Vec<Vec<usize>>,
    clients: Vec<String>,
    train_cfg: TrainConfig,
    global: ModelParams,
    server: ServerOptimizer,
}

impl Learner {
    fn new(cfg: &ExperimentConfig, clients: Vec<String>) -> Result<Self, FlError> {
        let fl = &cfg.fl;
        let (train, eval) = make_synthetic_split(&fl.dataset)?;
        let parts = partition(&train, &fl.partition, clients.len(), fl.seed)?.assignments;
        let arch = Architecture {
            input_dim: train.dim,
            hidden: fl.train.hidden_units,
            n_classes: train.n_classes,
        };
        let global = ModelParams::init(arch, &mut seed::rng(&[seed::stream::INIT, fl.seed]));
        Ok(Self {
            seed: fl.seed,
            train,
            eval,
            parts,
            clients,
            train_cfg: fl.train,
            global,
            server: ServerOptimizer::new(&fl.aggregator),
        })
    }

    /// Trains the selected clients from the current global model and aggregates.
    fn round(&mut self, round: usize, selected: &[usize]) -> Result<(f64, f64), OrchestratorError> {
        let results: Vec<_> = selected
            .par_iter()
            .map(|&i| {
                let mut rng = seed::rng(&[
                    seed::stream::TRAINING,
                    self.seed,
                    round as u64,
                    seed::hash_str(&self.clients[i]),
                ]);
                local_train(&self.global, &self.train, &self.parts[i], &self.train_cfg, &mut rng)
            })
            .collect();
        let mut updates = Vec::with_capacity(selected.len());
        for (res, &i) in results.into_iter().zip(selected) {
            let (params, _) = res.map_err(|source| OrchestratorError::Learning {
                round,
                client: self.clients[i].clone(),
                source,
            })?;
            updates.push((params, self.parts[i].len()));
        }
        self.global = self
            .server
            .apply(&self.global, &updates)
            .map_err(|source| OrchestratorError::Learning {
                round,
                client: "server".into(),
                source,
            })?;
        Ok(evaluate(&self.global, &self.eval))
    }

    /// Resident memory while training: parameters, gradient and anchor, plus the local data.
    fn busy_mem_mb(&self, client: usize) -> f64 {
        let params = 3 * self.global.len();
        let data = self.parts[client].len() * (self.train.dim + 1);
        IDLE_MEM_MB + ((params + data) * 8) as f64 / 1e6
    }
}

#[derive(Debug, Clone, Default)]
struct Progress {
    client: usize,
    s2c_done: Option<f64>,
    compute_s: f64,
    compute_end: Option<f64>,
    c2s_done: Option<f64>,
}

impl Progress {
    fn computing_at(&self, t: f64) -> bool {
        self.s2c_done.is_some_and(|s| t >= s && t < s + self.compute_s)
    }
}

struct Emitter<'a> {
    sink: &'a mut dyn MetricSink,
}

impl Emitter<'_> {
    fn emit(&mut self, env: MetricEnvelope) -> Result<(), OrchestratorError> {
        self.sink.publish(&env).map_err(Into::into)
    }
}

/// Runs the experiment, publishing every metric to `sink` and finishing it at the end.
pub fn run_experiment(cfg: &ExperimentConfig, sink: &mut dyn MetricSink) -> Result<ExperimentResult, OrchestratorError> {
    run_experiment_with(cfg, sink, &mut |_| {})
}

/// As [`run_experiment`], calling `on_round` after each round.
pub fn run_experiment_with(
    cfg: &ExperimentConfig,
    sink: &mut dyn MetricSink,
    on_round: &mut dyn FnMut(&RoundRecord),
) -> Result<ExperimentResult, OrchestratorError> {
    let topo = cfg.resolve_topology()?;
    let violations = config::validate(cfg, &topo);
    if !violations.is_empty() {
        return Err(OrchestratorError::InvalidConfig(violations));
    }
    let sources = cfg
        .traffic_sources()
        .map_err(|v| OrchestratorError::InvalidConfig(vec![v]))?;
    let fl = &cfg.fl;
    let server = cfg.net.server_node.clone();
    let clients: Vec<String> = topo.hosts_with_role(Role::Client).into_iter().map(String::from).collect();
    let resources: Vec<NodeResources> = clients
        .iter()
        .map(|c| topo.node(c).and_then(|n| n.resources).unwrap_or_default())
        .collect();
    let server_mem = topo
        .node(&server)
        .and_then(|n| n.resources)
        .unwrap_or_default()
        .mem_mb;

    let mut learner = Learner::new(cfg, clients.clone()).map_err(OrchestratorError::Setup)?;
    let (initial_loss, initial_accuracy) = evaluate(&learner.global, &learner.eval);
    let wire_bytes = learner.global.wire_bytes();
    let wire = wire_bytes as f64;

    let mut out = Emitter { sink };
    let mut sim = NetSim::new(topo);
    let net_err = |round: usize| move |source: NetSimError| OrchestratorError::Network { round, source };

    let mut processes = Vec::with_capacity(sources.len());
    let mut traffic_of: BTreeMap<FlowId, usize> = BTreeMap::new();
    for (id, src) in &sources {
        let flow = sim
            .add_inelastic(&src.spec.src, &src.spec.dst, src.spec.start_s)
            .map_err(net_err(0))?;
        let mut process = src.demand_changes();
        if let Some(ch) = process.next() {
            sim.schedule(ch.t, Event::RateProcessChange { flow, demand_mbps: ch.mbps })
                .map_err(net_err(0))?;
        }
        traffic_of.insert(flow, processes.len());
        processes.push((id.as_str(), process));
    }
    let period = cfg.general.metric_sample_period_s;
    let mut tick: u64 = 0;
    sim.schedule(0.0, Event::MetricSampleTick).map_err(net_err(0))?;

    out.emit(
        MetricEnvelope::new(0.0, "experiment", Topic::Log)
            .with("event", "start")
            .with("n_clients", clients.len())
            .with("rounds", fl.rounds)
            .with("aggregator", fl.aggregator.name())
            .with("wire_bytes", wire_bytes as i64)
            .with("initial_accuracy", initial_accuracy),
    )?;

    let mut records = Vec::with_capacity(fl.rounds);
    for round in 0..fl.rounds {
        let start = sim.now();
        let states: Vec<ClientState> = clients
            .iter()
            .zip(&resources)
            .map(|(id, r)| ClientState {
                id: id.clone(),
                resources: *r,
                available: true,
            })
            .collect();
        let mut sel_rng = seed::rng(&[seed::stream::SELECTION, fl.seed, round as u64]);
        let selected_ids = select_clients(fl.selection_strategy, &states, fl.clients_per_round_fraction, &mut sel_rng);
        let selected: Vec<usize> = selected_ids
            .iter()
            .map(|id| clients.iter().position(|c| c == id).expect("selected from client list"))
            .collect();

        let (global_loss, global_accuracy) = learner.round(round, &selected)?;

        let mut progress: Vec<Progress> = selected
            .iter()
            .map(|&client| Progress {
                client,
                ..Default::default()
            })
            .collect();
        // flow id -> (slot, is_s2c)
        let mut fl_flows: BTreeMap<FlowId, (usize, bool)> = BTreeMap::new();
        for (slot, p) in progress.iter().enumerate() {
            let f = sim
                .add_elastic(&server, &clients[p.client], wire, start)
                .map_err(net_err(round))?;
            fl_flows.insert(f, (slot, true));
        }
        let mut pending = progress.len();
        while pending > 0 {
            let Some((t, event)) = sim.advance().map_err(net_err(round))? else {
                let flow = fl_flows.keys().next().copied().unwrap_or_default();
                return Err(OrchestratorError::Network {
                    round,
                    source: NetSimError::StalledSimulation { flow },
                });
            };
            match event {
                Event::FlowComplete(f) => {
                    let Some((slot, s2c)) = fl_flows.remove(&f) else {
                        continue;
                    };
                    let p = &mut progress[slot];
                    if s2c {
                        p.s2c_done = Some(t);
                        p.compute_s = fl.compute.compute_time(
                            fl.train.local_epochs,
                            learner.parts[p.client].len(),
                            resources[p.client].cpu_units,
                        );
                        sim.schedule(t + p.compute_s, Event::RoundPhaseBoundary(slot as u64))
                            .map_err(net_err(round))?;
                    } else {
                        p.c2s_done = Some(t);
                        pending -= 1;
                    }
                }
                Event::RoundPhaseBoundary(slot) => {
                    let slot = slot as usize;
                    progress[slot].compute_end = Some(t);
                    let f = sim
                        .add_elastic(&clients[progress[slot].client], &server, wire, t)
                        .map_err(net_err(round))?;
                    fl_flows.insert(f, (slot, false));
                }
                Event::RateProcessChange { flow, demand_mbps } => {
                    let Some(&k) = traffic_of.get(&flow) else {
                        continue;
                    };
                    let (id, process) = &mut processes[k];
                    out.emit(
                        MetricEnvelope::new(t, *id, Topic::TrafficEvent)
                            .with("flow_id", *id)
                            .with("demand_mbps", demand_mbps),
                    )?;
                    if let Some(ch) = process.next() {
                        sim.schedule(ch.t.max(t), Event::RateProcessChange { flow, demand_mbps: ch.mbps })
                            .map_err(net_err(round))?;
                    }
                }
                Event::MetricSampleTick => {
                    let busy: BTreeMap<usize, bool> = progress.iter().map(|p| (p.client, p.computing_at(t))).collect();
                    out.emit(
                        MetricEnvelope::new(t, server.as_str(), Topic::SysSample)
                            .with("cpu_pct", IDLE_CPU_PCT)
                            .with("mem_mb", IDLE_MEM_MB.min(server_mem)),
                    )?;
                    for (i, c) in clients.iter().enumerate() {
                        let computing = busy.get(&i).copied().unwrap_or(false);
                        let (cpu, mem) = if computing {
                            (100.0, learner.busy_mem_mb(i))
                        } else {
                            (IDLE_CPU_PCT, IDLE_MEM_MB)
                        };
                        out.emit(
                            MetricEnvelope::new(t, c.as_str(), Topic::SysSample)
                                .with("cpu_pct", cpu)
                                .with("mem_mb", mem.min(resources[i].mem_mb)),
                        )?;
                    }
                    for (node, c) in sim.link_counters().map_err(net_err(round))? {
                        out.emit(
                            MetricEnvelope::new(t, node, Topic::NetSample)
                                .with("tx_bytes", c.tx_bytes)
                                .with("rx_bytes", c.rx_bytes)
                                .with("tx_bps", c.tx_bps)
                                .with("rx_bps", c.rx_bps),
                        )?;
                    }
                    tick += 1;
                    sim.schedule(tick as f64 * period, Event::MetricSampleTick)
                        .map_err(net_err(round))?;
                }
                _ => {}
            }
        }

        let timings: Vec<ClientRoundTiming> = progress
            .iter()
            .map(|p| {
                let s2c_done = p.s2c_done.expect("round finished");
                let compute_end = p.compute_end.expect("round finished");
                ClientRoundTiming {
                    client_id: clients[p.client].clone(),
                    s2c_s: s2c_done - start,
                    compute_s: p.compute_s,
                    c2s_s: p.c2s_done.expect("round finished") - compute_end,
                }
            })
            .collect();
        let record = RoundRecord {
            round,
            start_s: start,
            selected: selected_ids,
            round_duration_s: timings.iter().map(ClientRoundTiming::span).fold(0.0, f64::max),
            timings,
            global_loss,
            global_accuracy,
        };
        let end = sim.now();
        for t in &record.timings {
            out.emit(
                MetricEnvelope::new(end, t.client_id.as_str(), Topic::FlRound)
                    .with("round", round)
                    .with("client_id", t.client_id.as_str())
                    .with("s2c_s", t.s2c_s)
                    .with("compute_s", t.compute_s)
                    .with("c2s_s", t.c2s_s)
                    .with("round_duration_s", record.round_duration_s)
                    .with("global_loss", record.global_loss)
                    .with("global_accuracy", record.global_accuracy),
            )?;
        }
        on_round(&record);
        records.push(record);
    }

    let end_s = sim.now();
    out.emit(
        MetricEnvelope::new(end_s, "experiment", Topic::Log)
            .with("event", "finish")
            .with("rounds", records.len()),
    )?;
    out.sink.finish()?;
    Ok(ExperimentResult {
        rounds: records,
        clients,
        initial_loss,
        initial_accuracy,
        wire_bytes,
        end_s,
        final_params: learner.global,
    })
}
