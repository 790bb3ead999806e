use std::path::{Path, PathBuf};

use super::{fmt_real, MetricEnvelope, MetricSink, MetricsError, Topic, Value};

pub const ROUNDS_HEADER: [&str; 8] = [
    "round",
    "client_id",
    "s2c_s",
    "compute_s",
    "c2s_s",
    "round_duration_s",
    "global_loss",
    "global_accuracy",
];
pub const SYS_HEADER: [&str; 4] = ["t_s", "node", "cpu_pct", "mem_mb"];
pub const NET_HEADER: [&str; 6] = ["t_s", "node", "tx_bytes", "rx_bytes", "tx_bps", "rx_bps"];
pub const TRAFFIC_HEADER: [&str; 3] = ["t_s", "flow_id", "demand_mbps"];

const FILES: [(&str, Topic); 4] = [
    ("rounds.csv", Topic::FlRound),
    ("sys_metrics.csv", Topic::SysSample),
    ("net_metrics.csv", Topic::NetSample),
    ("traffic.csv", Topic::TrafficEvent),
];

struct Row {
    t: f64,
    source: String,
    cells: Vec<String>,
}

/// Buffers rows and writes the four CSV files, sorted by `(t, source)`, on finish.
pub struct CsvSink {
    dir: PathBuf,
    rows: [Vec<Row>; 4],
}

fn cell(env: &MetricEnvelope, key: &str) -> String {
    match env.payload.get(key) {
        Some(Value::Real(r)) => fmt_real(*r),
        Some(Value::Int(i)) => i.to_string(),
        Some(Value::Str(s)) => s.clone(),
        None => String::new(),
    }
}

/// Byte counters are rendered as whole bytes.
fn byte_cell(env: &MetricEnvelope, key: &str) -> String {
    env.get_f64(key).map(|b| format!("{}", b.floor() as u64)).unwrap_or_default()
}

impl CsvSink {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            rows: Default::default(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

impl MetricSink for CsvSink {
    fn publish(&mut self, env: &MetricEnvelope) -> Result<(), MetricsError> {
        let t = fmt_real(env.t_sim_s);
        let (slot, cells) = match env.topic {
            Topic::FlRound => (0, ROUNDS_HEADER.iter().map(|k| cell(env, k)).collect()),
            Topic::SysSample => (1, vec![t, env.source.clone(), cell(env, "cpu_pct"), cell(env, "mem_mb")]),
            Topic::NetSample => (
                2,
                vec![
                    t,
                    env.source.clone(),
                    byte_cell(env, "tx_bytes"),
                    byte_cell(env, "rx_bytes"),
                    cell(env, "tx_bps"),
                    cell(env, "rx_bps"),
                ],
            ),
            Topic::TrafficEvent => (3, vec![t, env.source.clone(), cell(env, "demand_mbps")]),
            Topic::Log => return Ok(()),
        };
        self.rows[slot].push(Row {
            t: env.t_sim_s,
            source: env.source.clone(),
            cells,
        });
        Ok(())
    }

    fn finish(&mut self) -> Result<(), MetricsError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| MetricsError::io(&self.dir, e))?;
        let headers: [&[&str]; 4] = [&ROUNDS_HEADER, &SYS_HEADER, &NET_HEADER, &TRAFFIC_HEADER];
        for (((name, _), header), rows) in FILES.iter().zip(headers).zip(self.rows.iter_mut()) {
            let path = self.dir.join(name);
            rows.sort_by(|a, b| a.t.total_cmp(&b.t).then_with(|| a.source.cmp(&b.source)));
            let mut w = csv::Writer::from_path(&path).map_err(|e| MetricsError::io(&path, e))?;
            w.write_record(header).map_err(|e| MetricsError::io(&path, e))?;
            for row in rows.iter() {
                w.write_record(&row.cells).map_err(|e| MetricsError::io(&path, e))?;
            }
            w.flush().map_err(|e| MetricsError::io(&path, e))?;
        }
        Ok(())
    }
}
