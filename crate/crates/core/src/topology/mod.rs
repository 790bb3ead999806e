//! Network topologies: hosts, switches and the links between them.
//!
//! A [`Topology`] is always validated on construction: it is connected, has
//! no self-loops or parallel links, and contains at least one host. Links are
//! stored in canonical form (`a < b`) and sorted, so two inputs that describe
//! the same graph in a different order produce equal values.

mod parse;
mod routing;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{parse_graphml, parse_topohub_json};
pub use routing::{Hop, Path};

/// Resources assumed for hosts that do not declare any.
pub const DEFAULT_CPU_UNITS: f64 = 1.0;
pub const DEFAULT_MEM_MB: f64 = 1024.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("graph is disconnected; unreachable nodes: {}", unreachable.join(", "))]
    DisconnectedGraph { unreachable: Vec<String> },
    #[error("duplicate link between {a} and {b}")]
    DuplicateLink { a: String, b: String },
    #[error("self-loop on node {0}")]
    SelfLoop(String),
    #[error("link references unknown node {0}")]
    UnknownNode(String),
    #[error("duplicate node id {0}")]
    DuplicateNode(String),
    #[error("invalid node {id}: {message}")]
    InvalidNode { id: String, message: String },
    #[error("invalid link {a}-{b}: {message}")]
    InvalidLink { a: String, b: String, message: String },
    #[error("topology has no host nodes")]
    NoHosts,
    #[error("a generated topology needs at least 2 hosts, got {0}")]
    InvalidCount(usize),
    #[error("no path from {src} to {dst}")]
    NoPath { src: String, dst: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Host,
    Switch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Server,
    Client,
    TrafficEndpoint,
    Transit,
}

impl Role {
    pub fn parse(s: &str) -> Option<Role> {
        match s.trim().to_ascii_lowercase().as_str() {
            "server" => Some(Role::Server),
            "client" => Some(Role::Client),
            "traffic_endpoint" | "traffic" | "trafficendpoint" => Some(Role::TrafficEndpoint),
            "transit" => Some(Role::Transit),
            _ => None,
        }
    }
}

/// Compute and memory limits of a host; `cpu_units = 1.0` is one reference core.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeResources {
    pub cpu_units: f64,
    pub mem_mb: f64,
}

impl Default for NodeResources {
    fn default() -> Self {
        Self {
            cpu_units: DEFAULT_CPU_UNITS,
            mem_mb: DEFAULT_MEM_MB,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub id: String,
    pub kind: NodeKind,
    pub role: Role,
    /// Present for hosts, `None` for switches.
    pub resources: Option<NodeResources>,
}

impl NodeSpec {
    pub fn host(id: impl Into<String>, role: Role, resources: NodeResources) -> Self {
        Self {
            id: id.into(),
            kind: NodeKind::Host,
            role,
            resources: Some(resources),
        }
    }

    pub fn switch(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            kind: NodeKind::Switch,
            role: Role::Transit,
            resources: None,
        }
    }

    pub fn is_host(&self) -> bool {
        self.kind == NodeKind::Host
    }
}

/// Physical properties of a link. Both directions get the full bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkAttrs {
    pub bandwidth_mbps: f64,
    /// One-way propagation delay.
    pub delay_ms: f64,
    pub loss_frac: f64,
}

impl Default for LinkAttrs {
    fn default() -> Self {
        Self {
            bandwidth_mbps: 100.0,
            delay_ms: 1.0,
            loss_frac: 0.0,
        }
    }
}

impl LinkAttrs {
    /// Human-readable range violations, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.bandwidth_mbps.is_finite() && self.bandwidth_mbps > 0.0) {
            out.push(format!("bandwidth_mbps must be > 0, got {}", self.bandwidth_mbps));
        }
        if !(self.delay_ms.is_finite() && self.delay_ms >= 0.0) {
            out.push(format!("delay_ms must be >= 0, got {}", self.delay_ms));
        }
        if !(self.loss_frac >= 0.0 && self.loss_frac < 1.0) {
            out.push(format!("loss_frac must be in [0,1), got {}", self.loss_frac));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub attrs: LinkAttrs,
}

impl LinkSpec {
    pub fn new(a: impl Into<String>, b: impl Into<String>, attrs: LinkAttrs) -> Self {
        Self {
            a: a.into(),
            b: b.into(),
            attrs,
        }
    }

    /// The endpoint opposite `node`, if `node` is one of the endpoints.
    pub fn other(&self, node: &str) -> Option<&str> {
        if self.a == node {
            Some(&self.b)
        } else if self.b == node {
            Some(&self.a)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    nodes: BTreeMap<String, NodeSpec>,
    links: Vec<LinkSpec>,
    adjacency: BTreeMap<String, BTreeSet<String>>,
    link_index: BTreeMap<(String, String), usize>,
}

impl Topology {
    /// Validates and canonicalises a node/link set.
    pub fn new(nodes: Vec<NodeSpec>, links: Vec<LinkSpec>) -> Result<Self, TopologyError> {
        let mut node_map = BTreeMap::new();
        for mut node in nodes {
            match node.kind {
                NodeKind::Switch => {
                    if node.resources.is_some() {
                        return Err(TopologyError::InvalidNode {
                            id: node.id,
                            message: "switches carry no resources".into(),
                        });
                    }
                    if node.role != Role::Transit {
                        return Err(TopologyError::InvalidNode {
                            id: node.id,
                            message: "switches carry no FL role".into(),
                        });
                    }
                }
                NodeKind::Host => {
                    let res = node.resources.get_or_insert_with(NodeResources::default);
                    if !(res.cpu_units.is_finite() && res.cpu_units > 0.0) {
                        return Err(TopologyError::InvalidNode {
                            id: node.id,
                            message: format!("cpu_units must be > 0, got {}", res.cpu_units),
                        });
                    }
                    if !(res.mem_mb.is_finite() && res.mem_mb > 0.0) {
                        return Err(TopologyError::InvalidNode {
                            id: node.id,
                            message: format!("mem_mb must be > 0, got {}", res.mem_mb),
                        });
                    }
                }
            }
            if node_map.contains_key(&node.id) {
                return Err(TopologyError::DuplicateNode(node.id));
            }
            node_map.insert(node.id.clone(), node);
        }
        if !node_map.values().any(NodeSpec::is_host) {
            return Err(TopologyError::NoHosts);
        }

        let mut canon = Vec::with_capacity(links.len());
        let mut seen = BTreeSet::new();
        for link in links {
            if link.a == link.b {
                return Err(TopologyError::SelfLoop(link.a));
            }
            for end in [&link.a, &link.b] {
                if !node_map.contains_key(end) {
                    return Err(TopologyError::UnknownNode(end.clone()));
                }
            }
            let msgs = link.attrs.violations();
            if !msgs.is_empty() {
                return Err(TopologyError::InvalidLink {
                    a: link.a,
                    b: link.b,
                    message: msgs.join("; "),
                });
            }
            let (a, b) = if link.a < link.b {
                (link.a, link.b)
            } else {
                (link.b, link.a)
            };
            if !seen.insert((a.clone(), b.clone())) {
                return Err(TopologyError::DuplicateLink { a, b });
            }
            canon.push(LinkSpec { a, b, attrs: link.attrs });
        }
        canon.sort_by(|x, y| (&x.a, &x.b).cmp(&(&y.a, &y.b)));

        let mut adjacency: BTreeMap<String, BTreeSet<String>> =
            node_map.keys().map(|k| (k.clone(), BTreeSet::new())).collect();
        let mut link_index = BTreeMap::new();
        for (i, l) in canon.iter().enumerate() {
            adjacency.get_mut(&l.a).unwrap().insert(l.b.clone());
            adjacency.get_mut(&l.b).unwrap().insert(l.a.clone());
            link_index.insert((l.a.clone(), l.b.clone()), i);
        }

        let topo = Self {
            nodes: node_map,
            links: canon,
            adjacency,
            link_index,
        };
        topo.check_connected()?;
        Ok(topo)
    }

    fn check_connected(&self) -> Result<(), TopologyError> {
        let Some(start) = self.nodes.keys().next() else {
            return Ok(());
        };
        let mut seen = BTreeSet::new();
        let mut stack = vec![start.as_str()];
        seen.insert(start.as_str());
        while let Some(n) = stack.pop() {
            for m in &self.adjacency[n] {
                if seen.insert(m.as_str()) {
                    stack.push(m);
                }
            }
        }
        if seen.len() == self.nodes.len() {
            return Ok(());
        }
        // Report the nodes outside the largest component so the isolated ones get named.
        let components = self.components();
        let largest = components
            .iter()
            .max_by(|a, b| a.len().cmp(&b.len()).then_with(|| b.cmp(a)))
            .cloned()
            .unwrap_or_default();
        let unreachable = self
            .nodes
            .keys()
            .filter(|k| !largest.contains(*k))
            .cloned()
            .collect();
        Err(TopologyError::DisconnectedGraph { unreachable })
    }

    fn components(&self) -> Vec<BTreeSet<String>> {
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let mut out = Vec::new();
        for start in self.nodes.keys() {
            if seen.contains(start.as_str()) {
                continue;
            }
            let mut comp = BTreeSet::new();
            let mut stack = vec![start.as_str()];
            seen.insert(start);
            while let Some(n) = stack.pop() {
                comp.insert(n.to_string());
                for m in &self.adjacency[n] {
                    if seen.insert(m.as_str()) {
                        stack.push(m);
                    }
                }
            }
            out.push(comp);
        }
        out
    }

    pub fn nodes(&self) -> &BTreeMap<String, NodeSpec> {
        &self.nodes
    }

    pub fn node(&self, id: &str) -> Option<&NodeSpec> {
        self.nodes.get(id)
    }

    pub fn links(&self) -> &[LinkSpec] {
        &self.links
    }

    pub fn link(&self, index: usize) -> &LinkSpec {
        &self.links[index]
    }

    pub fn adjacency(&self) -> &BTreeMap<String, BTreeSet<String>> {
        &self.adjacency
    }

    pub fn neighbors(&self, id: &str) -> impl Iterator<Item = &str> {
        self.adjacency.get(id).into_iter().flatten().map(String::as_str)
    }

    /// Index of the link joining `u` and `v`, in either orientation.
    pub fn link_between(&self, u: &str, v: &str) -> Option<usize> {
        let key = if u < v {
            (u.to_string(), v.to_string())
        } else {
            (v.to_string(), u.to_string())
        };
        self.link_index.get(&key).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn hosts(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.values().filter(|n| n.is_host())
    }

    /// Host ids carrying `role`, in ascending id order.
    pub fn hosts_with_role(&self, role: Role) -> Vec<&str> {
        self.hosts()
            .filter(|n| n.role == role)
            .map(|n| n.id.as_str())
            .collect()
    }

    /// Returns a copy with `id` re-labelled to `role`. Only hosts can take FL roles.
    pub fn with_role(mut self, id: &str, role: Role) -> Result<Self, TopologyError> {
        let node = self
            .nodes
            .get_mut(id)
            .ok_or_else(|| TopologyError::UnknownNode(id.to_string()))?;
        if !node.is_host() {
            return Err(TopologyError::InvalidNode {
                id: id.to_string(),
                message: "only hosts can take an FL role".into(),
            });
        }
        node.role = role;
        Ok(self)
    }

    pub fn shortest_path(&self, src: &str, dst: &str) -> Result<Path, TopologyError> {
        routing::shortest_path(self, src, dst)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Star,
    FullMesh,
    Line,
}

/// Builds a synthetic topology with hosts `h1..hN`; stars get a central switch `s1`.
/// All hosts start out as clients; callers re-label the server.
pub fn generate(shape: Shape, n_hosts: usize, link: LinkAttrs) -> Result<Topology, TopologyError> {
    if n_hosts < 2 {
        return Err(TopologyError::InvalidCount(n_hosts));
    }
    let host_ids: Vec<String> = (1..=n_hosts).map(|i| format!("h{i}")).collect();
    let mut nodes: Vec<NodeSpec> = host_ids
        .iter()
        .map(|id| NodeSpec::host(id.clone(), Role::Client, NodeResources::default()))
        .collect();
    let mut links = Vec::new();
    match shape {
        Shape::Star => {
            nodes.push(NodeSpec::switch("s1"));
            for h in &host_ids {
                links.push(LinkSpec::new(h.clone(), "s1", link));
            }
        }
        Shape::FullMesh => {
            for i in 0..n_hosts {
                for j in (i + 1)..n_hosts {
                    links.push(LinkSpec::new(host_ids[i].clone(), host_ids[j].clone(), link));
                }
            }
        }
        Shape::Line => {
            for w in host_ids.windows(2) {
                links.push(LinkSpec::new(w[0].clone(), w[1].clone(), link));
            }
        }
    }
    Topology::new(nodes, links)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_counts() {
        let l = LinkAttrs::default();
        let star = generate(Shape::Star, 4, l).unwrap();
        assert_eq!(star.nodes().len(), 5);
        assert_eq!(star.links().len(), 4);
        assert_eq!(generate(Shape::FullMesh, 4, l).unwrap().links().len(), 6);
        assert_eq!(generate(Shape::Line, 2, l).unwrap().links().len(), 1);
        assert_eq!(
            generate(Shape::Line, 1, l).unwrap_err(),
            TopologyError::InvalidCount(1)
        );
    }

    #[test]
    fn adjacency_is_symmetric() {
        let t = generate(Shape::FullMesh, 5, LinkAttrs::default()).unwrap();
        for (n, adj) in t.adjacency() {
            for m in adj {
                assert!(t.adjacency()[m].contains(n));
            }
        }
    }

    #[test]
    fn rejects_self_loops_and_duplicates() {
        let h = |id: &str| NodeSpec::host(id, Role::Client, NodeResources::default());
        let l = LinkAttrs::default();
        let err = Topology::new(vec![h("a")], vec![LinkSpec::new("a", "a", l)]).unwrap_err();
        assert_eq!(err, TopologyError::SelfLoop("a".into()));
        let err = Topology::new(
            vec![h("a"), h("b")],
            vec![LinkSpec::new("a", "b", l), LinkSpec::new("b", "a", l)],
        )
        .unwrap_err();
        assert!(matches!(err, TopologyError::DuplicateLink { .. }));
    }

    #[test]
    fn switches_cannot_hold_roles() {
        let mut s = NodeSpec::switch("s");
        s.role = Role::Client;
        let err = Topology::new(vec![s], vec![]).unwrap_err();
        assert!(matches!(err, TopologyError::InvalidNode { .. }));
    }

    #[test]
    fn needs_a_host() {
        let err = Topology::new(vec![NodeSpec::switch("s")], vec![]).unwrap_err();
        assert_eq!(err, TopologyError::NoHosts);
    }

    #[test]
    fn hosts_get_default_resources() {
        let mut n = NodeSpec::host("a", Role::Client, NodeResources::default());
        n.resources = None;
        let t = Topology::new(vec![n], vec![]).unwrap();
        assert_eq!(t.node("a").unwrap().resources, Some(NodeResources::default()));
    }

    #[test]
    fn disconnected_names_isolated_node() {
        let h = |id: &str| NodeSpec::host(id, Role::Client, NodeResources::default());
        let err = Topology::new(
            vec![h("a"), h("b"), h("c")],
            vec![LinkSpec::new("a", "b", LinkAttrs::default())],
        )
        .unwrap_err();
        assert_eq!(
            err,
            TopologyError::DisconnectedGraph {
                unreachable: vec!["c".into()]
            }
        );
    }
}
