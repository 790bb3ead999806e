use std::time::Duration;

use flnet::config::{default_config, ExperimentConfig, StreamSinkSpec};
use flnet::metrics::{MemorySink, SinkSet, Subscriber, Topic};
use flnet::orchestrator::{run_experiment, ExperimentResult};
use flnet::traffic::TrafficPatternSpec;

fn busy() -> ExperimentConfig {
    let mut cfg = default_config();
    let bg = cfg.net.traffic.get_mut("bg1").unwrap();
    bg.enabled = true;
    bg.src = "h1".into();
    bg.pattern = TrafficPatternSpec::Bursty {
        burst_rate_mbps: 50.0,
        burst_s: 0.05,
        idle_s: 0.1,
    };
    cfg.fl.train.hidden_units = 32;
    cfg
}

fn run(cfg: &ExperimentConfig) -> (ExperimentResult, MemorySink) {
    let mut sink = MemorySink::default();
    let res = run_experiment(cfg, &mut sink).unwrap();
    (res, sink)
}

#[test]
fn identical_configs_give_identical_runs() {
    let (a, sa) = run(&busy());
    let (b, sb) = run(&busy());
    assert_eq!(a, b);
    assert_eq!(sa.envelopes, sb.envelopes);
}

#[test]
fn network_changes_timing_but_not_learning() {
    let base = busy();
    let mut slow = busy();
    slow.net.default_link.bandwidth_mbps = 10.0;
    slow.net.default_link.loss_frac = 0.01;
    let (a, _) = run(&base);
    let (b, _) = run(&slow);
    for (x, y) in a.rounds.iter().zip(&b.rounds) {
        assert_eq!(x.global_loss.to_bits(), y.global_loss.to_bits());
        assert_eq!(x.global_accuracy.to_bits(), y.global_accuracy.to_bits());
        assert_eq!(x.selected, y.selected);
        assert!(y.max_s2c_s() > x.max_s2c_s());
    }
    assert_eq!(a.final_params, b.final_params);
}

#[test]
fn traffic_slows_s2c_on_a_shared_uplink() {
    let mut quiet = busy();
    quiet.net.traffic.clear();
    let (q, _) = run(&quiet);
    let (n, _) = run(&busy());
    let total = |r: &ExperimentResult| r.rounds.iter().map(|x| x.max_s2c_s()).sum::<f64>();
    assert!(total(&n) > total(&q));
}

#[test]
fn rounds_follow_each_other() {
    let (res, sink) = run(&busy());
    let mut t = 0.0;
    for r in &res.rounds {
        assert!(r.start_s >= t - 1e-12);
        t = r.start_s + r.round_duration_s;
    }
    // traffic events precede the last round and never exceed the cap
    let cap = busy().net.traffic["bg1"].cap_mbps;
    for e in sink.envelopes.iter().filter(|e| e.topic == Topic::TrafficEvent) {
        let d = e.get_f64("demand_mbps").unwrap();
        assert!((0.0..=cap).contains(&d));
    }
    let rows = sink.envelopes.iter().filter(|e| e.topic == Topic::FlRound).count();
    assert_eq!(rows, res.rounds.iter().map(|r| r.selected.len()).sum::<usize>());
}

#[test]
fn stream_subscriber_sees_filtered_topics() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let mut cfg = busy();
    cfg.general.sinks.csv = None;
    cfg.general.sinks.logfile = None;
    cfg.general.sinks.stream = Some(StreamSinkSpec {
        bind: addr.clone(),
        queue_capacity: 1 << 16,
        await_subscribers: 1,
        await_timeout_s: 10.0,
    });
    let worker = std::thread::spawn(move || {
        let tmp = tempfile::tempdir().unwrap();
        let mut sinks = SinkSet::from_config(&cfg.general, tmp.path()).unwrap();
        run_experiment(&cfg, &mut sinks).unwrap()
    });
    let mut sub = loop {
        match Subscriber::connect(addr.as_str(), &["fl."]) {
            Ok(s) => break s,
            Err(_) => std::thread::sleep(Duration::from_millis(10)),
        }
    };
    sub.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    let mut seen = 0;
    while let Some(env) = sub.next_envelope().unwrap() {
        assert_eq!(env.topic, Topic::FlRound);
        seen += 1;
    }
    let res = worker.join().unwrap();
    assert_eq!(seen, res.rounds.iter().map(|r| r.selected.len()).sum::<usize>());
}
