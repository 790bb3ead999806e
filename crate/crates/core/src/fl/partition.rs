use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{Dataset, FlError};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    Iid,
    Shards { classes_per_client: usize },
    Dirichlet { alpha: f64 },
}

impl PartitionSpec {
    pub fn violations(&self, n_classes: usize) -> Vec<String> {
        match *self {
            PartitionSpec::Iid => vec![],
            PartitionSpec::Shards { classes_per_client } => {
                let mut v = vec![];
                if classes_per_client == 0 {
                    v.push("classes_per_client must be >= 1".into());
                }
                if classes_per_client > n_classes {
                    v.push(format!(
                        "classes_per_client ({classes_per_client}) exceeds n_classes ({n_classes})"
                    ));
                }
                v
            }
            PartitionSpec::Dirichlet { alpha } => {
                if alpha.is_finite() && alpha > 0.0 {
                    vec![]
                } else {
                    vec![format!("alpha must be > 0, got {alpha}")]
                }
            }
        }
    }
}

/// Client `i` owns `assignments[i]`, a list of dataset row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    /// Number of distinct labels held by each client.
    pub fn distinct_labels(&self, data: &Dataset) -> Vec<usize> {
        self.assignments
            .iter()
            .map(|idx| {
                let mut seen = vec![false; data.n_classes];
                idx.iter().for_each(|&i| seen[data.labels[i]] = true);
                seen.into_iter().filter(|&s| s).count()
            })
            .collect()
    }

    /// True when the assignments are disjoint, non-empty and cover `0..n`.
    pub fn is_exact_cover(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for idx in &self.assignments {
            if idx.is_empty() {
                return false;
            }
            for &i in idx {
                if i >= n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

fn indices_by_class(data: &Dataset) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); data.n_classes];
    for (i, &l) in data.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    by_class
}

pub fn partition(data: &Dataset, spec: &PartitionSpec, n_clients: usize, seed: u64) -> Result<Partition, FlError> {
    if n_clients == 0 {
        return Err(FlError::InvalidArgs("n_clients must be >= 1".into()));
    }
    if n_clients > data.len() {
        return Err(FlError::Validation(format!(
            "{n_clients} clients but only {} samples",
            data.len()
        )));
    }
    if let Some(v) = spec.violations(data.n_classes).into_iter().next() {
        return Err(FlError::Validation(v));
    }
    let mut rng = seed::rng(&[seed::stream::PARTITION, seed]);
    let mut assignments = vec![Vec::new(); n_clients];
    match *spec {
        PartitionSpec::Iid => {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            for (k, i) in order.into_iter().enumerate() {
                assignments[k % n_clients].push(i);
            }
        }
        PartitionSpec::Shards { classes_per_client } => {
            let total = n_clients * classes_per_client;
            if !total.is_multiple_of(data.n_classes) {
                return Err(FlError::Validation(format!(
                    "{total} shards ({n_clients} clients x {classes_per_client}) do not divide evenly over {} classes",
                    data.n_classes
                )));
            }
            let per_class = total / data.n_classes;
            // each shard holds one label, so a client can see at most as many labels as shards
            let mut shards = Vec::with_capacity(total);
            for idx in indices_by_class(data) {
                if idx.len() < per_class {
                    return Err(FlError::Validation(format!(
                        "class with {} samples cannot fill {per_class} shards",
                        idx.len()
                    )));
                }
                let (q, r) = (idx.len() / per_class, idx.len() % per_class);
                let mut start = 0;
                for s in 0..per_class {
                    let len = q + usize::from(s < r);
                    shards.push(idx[start..start + len].to_vec());
                    start += len;
                }
            }
            shards.shuffle(&mut rng);
            for (k, shard) in shards.into_iter().enumerate() {
                assignments[k / classes_per_client].extend(shard);
            }
        }
        PartitionSpec::Dirichlet { alpha } => {
            let gamma = Gamma::new(alpha, 1.0).map_err(|e| FlError::Validation(e.to_string()))?;
            for mut idx in indices_by_class(data) {
                idx.shuffle(&mut rng);
                let draws: Vec<f64> = (0..n_clients).map(|_| gamma.sample(&mut rng)).collect();
                let sum: f64 = draws.iter().sum();
                // small alpha can underflow every draw; fall back to a uniform split
                let props: Vec<f64> = if sum > 0.0 && sum.is_finite() {
                    draws.iter().map(|g| g / sum).collect()
                } else {
                    vec![1.0 / n_clients as f64; n_clients]
                };
                let mut start = 0;
                let mut cum = 0.0;
                for (c, p) in props.iter().enumerate() {
                    cum += p;
                    let end = if c + 1 == n_clients {
                        idx.len()
                    } else {
                        ((cum * idx.len() as f64).round() as usize).clamp(start, idx.len())
                    };
                    assignments[c].extend_from_slice(&idx[start..end]);
                    start = end;
                }
            }
            for c in 0..n_clients {
                if assignments[c].is_empty() {
                    let donor = (0..n_clients)
                        .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
                        .expect("n_clients >= 1");
                    let moved = assignments[donor].pop().expect("donor holds >= 2 samples");
                    assignments[c].push(moved);
                }
            }
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(Partition { assignments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::make_synthetic_dataset;

    fn data(n: usize, k: usize) -> Dataset {
        make_synthetic_dataset(7, n, k, 2, 1.0).unwrap()
    }

    #[test]
    fn iid_sizes() {
        let d = data(10, 2);
        let p = partition(&d, &PartitionSpec::Iid, 2, 1).unwrap();
        assert_eq!(p.sizes(), vec![5, 5]);
        assert!(p.is_exact_cover(10));
        let p = partition(&data(103, 3), &PartitionSpec::Iid, 7, 1).unwrap();
        let s = p.sizes();
        assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
    }

    #[test]
    fn shards_bound_labels() {
        let d = data(1000, 10);
        let p = partition(&d, &PartitionSpec::Shards { classes_per_client: 2 }, 15, 3).unwrap();
        assert!(p.is_exact_cover(1000));
        assert!(p.distinct_labels(&d).iter().all(|&c| (1..=2).contains(&c)));
    }

    #[test]
    fn shards_divisibility_error() {
        let d = data(100, 10);
        let err = partition(&d, &PartitionSpec::Shards { classes_per_client: 3 }, 3, 1).unwrap_err();
        assert!(matches!(err, FlError::Validation(_)));
        let err = partition(&d, &PartitionSpec::Shards { classes_per_client: 11 }, 10, 1).unwrap_err();
        assert!(matches!(err, FlError::Validation(_)));
    }

    #[test]
    fn too_many_clients() {
        assert!(matches!(
            partition(&data(4, 2), &PartitionSpec::Iid, 5, 1),
            Err(FlError::Validation(_))
        ));
    }

    #[test]
    fn dirichlet_small_alpha_repairs_empty_clients() {
        let d = data(40, 4);
        for s in 0..50 {
            let p = partition(&d, &PartitionSpec::Dirichlet { alpha: 0.01 }, 10, s).unwrap();
            assert!(p.is_exact_cover(40), "seed {s}");
        }
    }

    #[test]
    fn deterministic() {
        let d = data(200, 4);
        let spec = PartitionSpec::Dirichlet { alpha: 0.5 };
        assert_eq!(partition(&d, &spec, 5, 9).unwrap(), partition(&d, &spec, 5, 9).unwrap());
        assert_ne!(partition(&d, &spec, 5, 9).unwrap(), partition(&d, &spec, 5, 10).unwrap());
    }
}
