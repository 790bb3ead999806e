//! Max-min fair rate allocation by progressive filling.
//!
//! Every link direction is a resource with the link's full bandwidth. All
//! unfrozen flows grow at the same pace; a flow freezes when one of the
//! resources it crosses saturates or when it reaches its demand cap.

use std::collections::BTreeMap;

use crate::topology::{Hop, Topology};

use super::FlowId;

/// Directed link: `(link index, forward)`.
pub type Resource = (usize, bool);

/// A flow as seen by the allocator. `demand_mbps = None` means elastic.
#[derive(Debug, Clone, Copy)]
pub struct FlowDemand<'a> {
    pub id: FlowId,
    pub hops: &'a [Hop],
    pub demand_mbps: Option<f64>,
}

/// Per-flow rates in Mbps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RateAllocation {
    pub rates: BTreeMap<FlowId, f64>,
}

impl RateAllocation {
    pub fn rate(&self, id: FlowId) -> f64 {
        self.rates.get(&id).copied().unwrap_or(0.0)
    }

    /// Sum of allocated rates per directed link.
    pub fn resource_load(&self, flows: &[FlowDemand<'_>]) -> BTreeMap<Resource, f64> {
        let mut load = BTreeMap::new();
        for f in flows {
            let r = self.rate(f.id);
            for h in f.hops {
                *load.entry((h.link, h.forward)).or_insert(0.0) += r;
            }
        }
        load
    }
}

const REL_EPS: f64 = 1e-12;

pub fn allocate_rates(flows: &[FlowDemand<'_>], topo: &Topology) -> RateAllocation {
    let mut remaining: BTreeMap<Resource, f64> = BTreeMap::new();
    let mut members: BTreeMap<Resource, Vec<usize>> = BTreeMap::new();
    for (i, f) in flows.iter().enumerate() {
        for h in f.hops {
            let key = (h.link, h.forward);
            remaining
                .entry(key)
                .or_insert_with(|| topo.link(h.link).attrs.bandwidth_mbps);
            members.entry(key).or_default().push(i);
        }
    }

    let mut rates = vec![0.0_f64; flows.len()];
    let mut active: Vec<bool> = flows
        .iter()
        .map(|f| !f.hops.is_empty() && f.demand_mbps.is_none_or(|d| d > 0.0))
        .collect();
    let mut n_active: BTreeMap<Resource, usize> = members
        .iter()
        .map(|(k, m)| (*k, m.iter().filter(|&&i| active[i]).count()))
        .collect();
    let mut fill = 0.0_f64;

    while active.iter().any(|&a| a) {
        let mut step = f64::INFINITY;
        for (k, &n) in &n_active {
            if n > 0 {
                step = step.min(remaining[k].max(0.0) / n as f64);
            }
        }
        for (i, f) in flows.iter().enumerate() {
            if let (true, Some(d)) = (active[i], f.demand_mbps) {
                step = step.min((d - fill).max(0.0));
            }
        }
        if !step.is_finite() {
            // Only reachable for flows without hops, which are never active.
            break;
        }
        fill += step;
        for (k, &n) in &n_active {
            if n > 0 {
                *remaining.get_mut(k).unwrap() -= step * n as f64;
            }
        }

        let mut freeze = Vec::new();
        for (i, f) in flows.iter().enumerate() {
            if let (true, Some(d)) = (active[i], f.demand_mbps) {
                if d - fill <= REL_EPS * d.max(1.0) {
                    freeze.push((i, d));
                }
            }
        }
        for (k, &n) in &n_active {
            if n == 0 {
                continue;
            }
            let cap = topo.link(k.0).attrs.bandwidth_mbps;
            if remaining[k] <= REL_EPS * cap {
                for &i in &members[k] {
                    if active[i] {
                        freeze.push((i, fill));
                    }
                }
            }
        }
        for (i, rate) in freeze {
            if !active[i] {
                continue;
            }
            active[i] = false;
            rates[i] = rate;
            for h in flows[i].hops {
                let key = (h.link, h.forward);
                *n_active.get_mut(&key).unwrap() -= 1;
                // Demand-capped flows that freeze at their exact demand need the
                // residual corrected for the sub-epsilon gap to the fill level.
                *remaining.get_mut(&key).unwrap() += fill - rate;
            }
        }
    }

    RateAllocation {
        rates: flows.iter().zip(rates).map(|(f, r)| (f.id, r)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{LinkAttrs, LinkSpec, NodeResources, NodeSpec, Role};

    fn line(bws: &[f64]) -> Topology {
        let nodes = (0..=bws.len())
            .map(|i| NodeSpec::host(format!("n{i}"), Role::Client, NodeResources::default()))
            .collect();
        let links = bws
            .iter()
            .enumerate()
            .map(|(i, &bw)| {
                LinkSpec::new(
                    format!("n{i}"),
                    format!("n{}", i + 1),
                    LinkAttrs {
                        bandwidth_mbps: bw,
                        delay_ms: 0.0,
                        loss_frac: 0.0,
                    },
                )
            })
            .collect();
        Topology::new(nodes, links).unwrap()
    }

    fn fwd(link: usize) -> Hop {
        Hop { link, forward: true }
    }

    #[test]
    fn two_elastic_split_evenly() {
        let t = line(&[100.0]);
        let h = [fwd(0)];
        let flows = [
            FlowDemand { id: 1, hops: &h, demand_mbps: None },
            FlowDemand { id: 2, hops: &h, demand_mbps: None },
        ];
        let a = allocate_rates(&flows, &t);
        assert_eq!(a.rate(1), 50.0);
        assert_eq!(a.rate(2), 50.0);
    }

    #[test]
    fn two_link_example() {
        // link A = 0 (100 Mbps), link B = 1 (50 Mbps)
        let t = line(&[100.0, 50.0]);
        let a_only = [fwd(0)];
        let ab = [fwd(0), fwd(1)];
        let b_only = [fwd(1)];
        let flows = [
            FlowDemand { id: 1, hops: &a_only, demand_mbps: None },
            FlowDemand { id: 2, hops: &ab, demand_mbps: None },
            FlowDemand { id: 3, hops: &b_only, demand_mbps: None },
        ];
        let a = allocate_rates(&flows, &t);
        assert!((a.rate(1) - 75.0).abs() < 1e-12);
        assert!((a.rate(2) - 25.0).abs() < 1e-12);
        assert!((a.rate(3) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn demand_cap() {
        let t = line(&[100.0]);
        let h = [fwd(0)];
        let flows = [
            FlowDemand { id: 1, hops: &h, demand_mbps: Some(30.0) },
            FlowDemand { id: 2, hops: &h, demand_mbps: None },
        ];
        let a = allocate_rates(&flows, &t);
        assert_eq!(a.rate(1), 30.0);
        assert!((a.rate(2) - 70.0).abs() < 1e-12);
    }

    #[test]
    fn opposite_directions_do_not_share() {
        let t = line(&[100.0]);
        let f = [fwd(0)];
        let b = [Hop { link: 0, forward: false }];
        let flows = [
            FlowDemand { id: 1, hops: &f, demand_mbps: None },
            FlowDemand { id: 2, hops: &b, demand_mbps: None },
        ];
        let a = allocate_rates(&flows, &t);
        assert_eq!(a.rate(1), 100.0);
        assert_eq!(a.rate(2), 100.0);
    }

    #[test]
    fn zero_demand_gets_nothing() {
        let t = line(&[100.0]);
        let h = [fwd(0)];
        let flows = [
            FlowDemand { id: 1, hops: &h, demand_mbps: Some(0.0) },
            FlowDemand { id: 2, hops: &h, demand_mbps: None },
        ];
        let a = allocate_rates(&flows, &t);
        assert_eq!(a.rate(1), 0.0);
        assert_eq!(a.rate(2), 100.0);
    }

    #[test]
    fn empty_flow_set() {
        let t = line(&[100.0]);
        assert!(allocate_rates(&[], &t).rates.is_empty());
    }
}
