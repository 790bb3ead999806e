use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::topology::NodeResources;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionStrategy {
    Random,
    /// Highest `cpu_units` first, or highest `mem_mb` when `top_k_by_cpu` is false.
    ResourceAware { top_k_by_cpu: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: String,
    pub resources: NodeResources,
    pub available: bool,
}

/// `ceil(fraction * n)`, at least 1 and at most `n`.
pub fn selection_size(fraction: f64, n: usize) -> usize {
    // the epsilon keeps 0.3 * 10 from rounding up to 4
    let k = (fraction * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Picks `selection_size(fraction, available)` clients; the result is sorted by id.
pub fn select_clients<R: Rng>(
    strategy: SelectionStrategy,
    clients: &[ClientState],
    fraction: f64,
    rng: &mut R,
) -> Vec<String> {
    let mut pool: Vec<&ClientState> = clients.iter().filter(|c| c.available).collect();
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    if pool.is_empty() {
        return vec![];
    }
    let k = selection_size(fraction, pool.len());
    let mut out: Vec<String> = match strategy {
        SelectionStrategy::Random => index::sample(rng, pool.len(), k)
            .into_iter()
            .map(|i| pool[i].id.clone())
            .collect(),
        SelectionStrategy::ResourceAware { top_k_by_cpu } => {
            let key = |c: &ClientState| {
                if top_k_by_cpu {
                    c.resources.cpu_units
                } else {
                    c.resources.mem_mb
                }
            };
            // stable sort keeps ascending id among equals
            pool.sort_by(|a, b| key(b).total_cmp(&key(a)));
            pool.iter().take(k).map(|c| c.id.clone()).collect()
        }
    };
    out.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clients(cpus: &[(&str, f64)]) -> Vec<ClientState> {
        cpus.iter()
            .map(|(id, cpu)| ClientState {
                id: id.to_string(),
                resources: NodeResources { cpu_units: *cpu, mem_mb: 1024.0 },
                available: true,
            })
            .collect()
    }

    #[test]
    fn sizes() {
        assert_eq!(selection_size(1.0, 4), 4);
        assert_eq!(selection_size(0.5, 5), 3);
        assert_eq!(selection_size(0.3, 10), 3);
        assert_eq!(selection_size(0.01, 10), 1);
    }

    #[test]
    fn top_k_by_cpu() {
        let c = clients(&[("c1", 1.0), ("c2", 2.0), ("c3", 0.5)]);
        let sel = select_clients(
            SelectionStrategy::ResourceAware { top_k_by_cpu: true },
            &c,
            2.0 / 3.0,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(sel, vec!["c1", "c2"]);
    }

    #[test]
    fn ties_break_by_id() {
        let c = clients(&[("b", 1.0), ("a", 1.0), ("c", 1.0)]);
        let sel = select_clients(
            SelectionStrategy::ResourceAware { top_k_by_cpu: true },
            &c,
            0.5,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(sel, vec!["a", "b"]);
    }

    #[test]
    fn full_fraction_selects_all() {
        let c = clients(&[("a", 1.0), ("b", 3.0), ("c", 2.0)]);
        for s in [SelectionStrategy::Random, SelectionStrategy::ResourceAware { top_k_by_cpu: false }] {
            assert_eq!(select_clients(s, &c, 1.0, &mut ChaCha8Rng::seed_from_u64(1)), vec!["a", "b", "c"]);
        }
    }

    #[test]
    fn random_is_seeded() {
        let c = clients(&[("a", 1.0), ("b", 1.0), ("c", 1.0), ("d", 1.0), ("e", 1.0)]);
        let a = select_clients(SelectionStrategy::Random, &c, 0.4, &mut ChaCha8Rng::seed_from_u64(5));
        let b = select_clients(SelectionStrategy::Random, &c, 0.4, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn unavailable_are_skipped() {
        let mut c = clients(&[("a", 9.0), ("b", 1.0)]);
        c[0].available = false;
        let sel = select_clients(
            SelectionStrategy::ResourceAware { top_k_by_cpu: true },
            &c,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(sel, vec!["b"]);
    }
}
