//! Static shortest-path routing.
//!
//! Paths minimise hop count, then total propagation delay, then the node-id
//! sequence (lexicographically). The tie-break is applied with the path
//! oriented from the smaller endpoint id, so `a -> b` and `b -> a` always use
//! the same links.

use std::collections::BTreeMap;

use super::{LinkSpec, Topology, TopologyError};

const DELAY_TOL: f64 = 1e-9;

/// One traversal of a link. `forward` means from `link.a` towards `link.b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Hop {
    pub link: usize,
    pub forward: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub nodes: Vec<String>,
    pub hops: Vec<Hop>,
}

impl Path {
    pub fn hop_count(&self) -> usize {
        self.hops.len()
    }

    pub fn links<'t>(&self, topo: &'t Topology) -> Vec<&'t LinkSpec> {
        self.hops.iter().map(|h| topo.link(h.link)).collect()
    }

    pub fn delay_ms(&self, topo: &Topology) -> f64 {
        self.hops.iter().map(|h| topo.link(h.link).attrs.delay_ms).sum()
    }

    /// `1 - prod(1 - loss_i)` over the traversed links.
    pub fn loss(&self, topo: &Topology) -> f64 {
        1.0 - self
            .hops
            .iter()
            .map(|h| 1.0 - topo.link(h.link).attrs.loss_frac)
            .product::<f64>()
    }

    fn reversed(mut self) -> Self {
        self.nodes.reverse();
        self.hops.reverse();
        for h in &mut self.hops {
            h.forward = !h.forward;
        }
        self
    }
}

#[derive(Clone, Copy)]
struct Cost {
    hops: usize,
    delay: f64,
}

impl Cost {
    fn less(&self, other: &Cost) -> bool {
        self.hops < other.hops
            || (self.hops == other.hops && self.delay < other.delay - DELAY_TOL * other.delay.abs().max(1.0))
    }
}

pub(super) fn shortest_path(topo: &Topology, src: &str, dst: &str) -> Result<Path, TopologyError> {
    for id in [src, dst] {
        if !topo.contains(id) {
            return Err(TopologyError::UnknownNode(id.to_string()));
        }
    }
    if src == dst {
        return Err(TopologyError::NoPath {
            src: src.into(),
            dst: dst.into(),
        });
    }
    if src > dst {
        return canonical_path(topo, dst, src).map(Path::reversed);
    }
    canonical_path(topo, src, dst)
}

fn canonical_path(topo: &Topology, src: &str, dst: &str) -> Result<Path, TopologyError> {
    // Costs towards dst.
    let mut dist: BTreeMap<&str, Cost> = BTreeMap::new();
    let mut done: BTreeMap<&str, bool> = topo.nodes().keys().map(|k| (k.as_str(), false)).collect();
    dist.insert(dst, Cost { hops: 0, delay: 0.0 });
    loop {
        let next = dist
            .iter()
            .filter(|(k, _)| !done[*k])
            .fold(None::<(&str, Cost)>, |best, (k, c)| match best {
                Some((_, bc)) if !c.less(&bc) => best,
                _ => Some((k, *c)),
            });
        let Some((u, cu)) = next else { break };
        done.insert(u, true);
        for v in topo.neighbors(u) {
            if done[v] {
                continue;
            }
            let li = topo.link_between(u, v).expect("adjacent nodes share a link");
            let cand = Cost {
                hops: cu.hops + 1,
                delay: cu.delay + topo.link(li).attrs.delay_ms,
            };
            match dist.get(v) {
                Some(cv) if !cand.less(cv) => {}
                _ => {
                    dist.insert(v, cand);
                }
            }
        }
    }

    let Some(&start) = dist.get(src) else {
        return Err(TopologyError::NoPath {
            src: src.into(),
            dst: dst.into(),
        });
    };

    let mut nodes = vec![src.to_string()];
    let mut hops = Vec::with_capacity(start.hops);
    let mut here = src;
    let mut cost = start;
    while here != dst {
        // Neighbours are visited in ascending id order, so the first one on a
        // shortest path gives the lexicographically smallest continuation.
        let mut chosen = None;
        for v in topo.neighbors(here) {
            let Some(cv) = dist.get(v) else { continue };
            let li = topo.link_between(here, v).unwrap();
            let via = cv.delay + topo.link(li).attrs.delay_ms;
            if cv.hops + 1 == cost.hops && (via - cost.delay).abs() <= DELAY_TOL * cost.delay.abs().max(1.0) {
                chosen = Some((v, li, *cv));
                break;
            }
        }
        let (v, li, cv) = chosen.ok_or_else(|| TopologyError::NoPath {
            src: src.into(),
            dst: dst.into(),
        })?;
        hops.push(Hop {
            link: li,
            forward: topo.link(li).a == here,
        });
        nodes.push(v.to_string());
        here = v;
        cost = cv;
    }
    Ok(Path { nodes, hops })
}
