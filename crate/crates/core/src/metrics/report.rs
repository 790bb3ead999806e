use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MetricsError, ROUNDS_HEADER};

pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u64,
    pub n_clients: usize,
    pub max_s2c_s: f64,
    pub round_duration_s: f64,
    pub global_loss: f64,
    pub global_accuracy: f64,
}

/// Nearest-rank statistics of the round durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationStats {
    pub min: f64,
    pub p50: f64,
    pub p90: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPhaseMeans {
    pub client_id: String,
    pub rounds: usize,
    pub s2c_s: f64,
    pub compute_s: f64,
    pub c2s_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub rounds: Vec<RoundSummary>,
    pub round_duration: Option<DurationStats>,
    /// Mean and population variance of the per-round max S2C latency.
    pub max_s2c_mean_s: Option<f64>,
    pub max_s2c_variance_s2: Option<f64>,
    pub clients: Vec<ClientPhaseMeans>,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
}

/// Value at rank `ceil(p * n)` of the sorted sample.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Aggregates `rounds.csv` in `dir`; needs nothing else.
pub fn summarize(dir: &Path) -> Result<ReportSummary, MetricsError> {
    let path = dir.join("rounds.csv");
    let schema = |message: String| MetricsError::Schema {
        file: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(&path).map_err(|e| MetricsError::io(&path, e))?;
    let header = reader.headers().map_err(|e| schema(e.to_string()))?.clone();
    if header.iter().ne(ROUNDS_HEADER.iter().copied()) {
        return Err(schema(format!(
            "header `{}` does not match `{}`",
            header.iter().collect::<Vec<_>>().join(","),
            ROUNDS_HEADER.join(",")
        )));
    }
    let mut rounds: BTreeMap<u64, RoundSummary> = BTreeMap::new();
    let mut per_client: BTreeMap<String, Vec<[f64; 3]>> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| schema(e.to_string()))?;
        let line = i + 2;
        let num = |col: usize| -> Result<f64, MetricsError> {
            rec[col]
                .parse::<f64>()
                .map_err(|_| schema(format!("line {line}: `{}` is not a number in column {}", &rec[col], ROUNDS_HEADER[col])))
        };
        let round: u64 = rec[0]
            .parse()
            .map_err(|_| schema(format!("line {line}: bad round `{}`", &rec[0])))?;
        let (s2c, compute, c2s) = (num(2)?, num(3)?, num(4)?);
        let entry = rounds.entry(round).or_insert(RoundSummary {
            round,
            n_clients: 0,
            max_s2c_s: f64::NEG_INFINITY,
            round_duration_s: num(5)?,
            global_loss: num(6)?,
            global_accuracy: num(7)?,
        });
        entry.n_clients += 1;
        entry.max_s2c_s = entry.max_s2c_s.max(s2c);
        per_client.entry(rec[1].to_string()).or_default().push([s2c, compute, c2s]);
    }
    let rounds: Vec<RoundSummary> = rounds.into_values().collect();
    let mut durations: Vec<f64> = rounds.iter().map(|r| r.round_duration_s).collect();
    durations.sort_by(f64::total_cmp);
    let round_duration = (!durations.is_empty()).then(|| DurationStats {
        min: durations[0],
        p50: nearest_rank(&durations, 0.5),
        p90: nearest_rank(&durations, 0.9),
        max: durations[durations.len() - 1],
        mean: mean(&durations),
    });
    let s2c: Vec<f64> = rounds.iter().map(|r| r.max_s2c_s).collect();
    let (max_s2c_mean_s, max_s2c_variance_s2) = if s2c.is_empty() {
        (None, None)
    } else {
        let m = mean(&s2c);
        let var = s2c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / s2c.len() as f64;
        (Some(m), Some(var))
    };
    let clients = per_client
        .into_iter()
        .map(|(client_id, v)| {
            let col = |k: usize| v.iter().map(|r| r[k]).sum::<f64>() / v.len() as f64;
            ClientPhaseMeans {
                client_id,
                rounds: v.len(),
                s2c_s: col(0),
                compute_s: col(1),
                c2s_s: col(2),
            }
        })
        .collect();
    Ok(ReportSummary {
        final_loss: rounds.last().map(|r| r.global_loss),
        final_accuracy: rounds.last().map(|r| r.global_accuracy),
        rounds,
        round_duration,
        max_s2c_mean_s,
        max_s2c_variance_s2,
        clients,
    })
}

/// Writes `report.json` into `dir`.
pub fn write_report(summary: &ReportSummary, dir: &Path) -> Result<(), MetricsError> {
    let path = dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    std::fs::write(&path, json + "\n").map_err(|e| MetricsError::io(&path, e))
}

impl ReportSummary {
    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if self.rounds.is_empty() {
            s.push_str("empty run: no rounds recorded\n");
            return s;
        }
        let _ = writeln!(
            s,
            "{:>6} {:>8} {:>12} {:>12} {:>10} {:>9}",
            "round", "clients", "max_s2c_s", "duration_s", "loss", "accuracy"
        );
        for r in &self.rounds {
            let _ = writeln!(
                s,
                "{:>6} {:>8} {:>12.6} {:>12.6} {:>10.4} {:>9.4}",
                r.round, r.n_clients, r.max_s2c_s, r.round_duration_s, r.global_loss, r.global_accuracy
            );
        }
        if let Some(d) = &self.round_duration {
            let _ = writeln!(
                s,
                "\nround duration  min {:.6}  p50 {:.6}  p90 {:.6}  max {:.6}  mean {:.6}",
                d.min, d.p50, d.p90, d.max, d.mean
            );
        }
        if let (Some(m), Some(v)) = (self.max_s2c_mean_s, self.max_s2c_variance_s2) {
            let _ = writeln!(s, "max S2C latency mean {m:.6} s  variance {v:.6e} s^2");
        }
        let _ = writeln!(
            s,
            "\n{:<12} {:>6} {:>12} {:>12} {:>12}",
            "client", "rounds", "s2c_s", "compute_s", "c2s_s"
        );
        for c in &self.clients {
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>12.6} {:>12.6} {:>12.6}",
                c.client_id, c.rounds, c.s2c_s, c.compute_s, c.c2s_s
            );
        }
        s
    }
}
