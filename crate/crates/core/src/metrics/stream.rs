//! Topic-prefixed, line-delimited JSON over TCP.
//!
//! Every subscriber owns a bounded queue drained by its own writer thread.
//! Publishing only touches the queues, so a stalled subscriber loses its
//! oldest messages instead of slowing the simulation. Losses are reported
//! to that subscriber in-band on the `log` topic.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::{MetricEnvelope, MetricSink, MetricsError, Topic};

const WRITE_TIMEOUT: Duration = Duration::from_secs(1);
const ACCEPT_POLL: Duration = Duration::from_millis(5);
const DRAIN_DEADLINE: Duration = Duration::from_secs(5);

struct QueueState {
    buf: VecDeque<(f64, Arc<str>)>,
    unreported_drops: u64,
    closed: bool,
    dead: bool,
}

struct SubQueue {
    state: Mutex<QueueState>,
    ready: Condvar,
    stream: TcpStream,
}

struct Shared {
    subscribers: Mutex<Vec<(Arc<SubQueue>, JoinHandle<()>)>>,
    dropped: AtomicU64,
    stop: AtomicBool,
    capacity: usize,
}

pub struct StreamPublisher {
    shared: Arc<Shared>,
    addr: SocketAddr,
    acceptor: Option<JoinHandle<()>>,
}

fn drop_notice(t: f64, dropped: u64, total: u64) -> String {
    MetricEnvelope::new(t, "stream", Topic::Log)
        .with("event", "dropped")
        .with("dropped", dropped as i64)
        .with("total_dropped", total as i64)
        .to_line()
}

fn writer_loop(queue: Arc<SubQueue>, shared: Arc<Shared>) {
    let mut out = match queue.stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    };
    let mut total = 0;
    loop {
        let (t, line, drops) = {
            let mut st = queue.state.lock().unwrap();
            while st.buf.is_empty() && !st.closed {
                st = queue.ready.wait(st).unwrap();
            }
            let Some((t, line)) = st.buf.pop_front() else {
                break;
            };
            (t, line, std::mem::take(&mut st.unreported_drops))
        };
        total += drops;
        let mut res = Ok(());
        if drops > 0 {
            res = out.write_all(drop_notice(t, drops, total).as_bytes());
        }
        if res.is_ok() {
            res = out.write_all(line.as_bytes());
        }
        if res.is_err() {
            let mut st = queue.state.lock().unwrap();
            st.dead = true;
            let lost = st.buf.len() as u64 + 1;
            st.buf.clear();
            shared.dropped.fetch_add(lost, Ordering::Relaxed);
            break;
        }
    }
    let _ = out.flush();
    let _ = queue.stream.shutdown(Shutdown::Write);
}

impl StreamPublisher {
    /// Binds `addr` and starts accepting subscribers in the background.
    pub fn bind(addr: &str, capacity: usize) -> Result<Self, MetricsError> {
        let bind_err = |e: std::io::Error| MetricsError::Bind {
            addr: addr.to_string(),
            message: e.to_string(),
        };
        let listener = TcpListener::bind(addr).map_err(bind_err)?;
        listener.set_nonblocking(true).map_err(bind_err)?;
        let local = listener.local_addr().map_err(bind_err)?;
        let shared = Arc::new(Shared {
            subscribers: Mutex::new(Vec::new()),
            dropped: AtomicU64::new(0),
            stop: AtomicBool::new(false),
            capacity: capacity.max(1),
        });
        let sh = Arc::clone(&shared);
        let acceptor = std::thread::spawn(move || {
            while !sh.stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = stream.set_nonblocking(false);
                        let _ = stream.set_nodelay(true);
                        let _ = stream.set_write_timeout(Some(WRITE_TIMEOUT));
                        let queue = Arc::new(SubQueue {
                            state: Mutex::new(QueueState {
                                buf: VecDeque::new(),
                                unreported_drops: 0,
                                closed: false,
                                dead: false,
                            }),
                            ready: Condvar::new(),
                            stream,
                        });
                        let (q, s) = (Arc::clone(&queue), Arc::clone(&sh));
                        let handle = std::thread::spawn(move || writer_loop(q, s));
                        sh.subscribers.lock().unwrap().push((queue, handle));
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(ACCEPT_POLL),
                    Err(_) => std::thread::sleep(ACCEPT_POLL),
                }
            }
        });
        Ok(Self {
            shared,
            addr: local,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn subscriber_count(&self) -> usize {
        self.shared.subscribers.lock().unwrap().len()
    }

    /// Messages lost to full queues or failed writes, over all subscribers.
    pub fn dropped(&self) -> u64 {
        self.shared.dropped.load(Ordering::Relaxed)
    }

    /// Blocks until `n` subscribers are connected or `timeout` passes; returns whether they arrived.
    pub fn wait_for_subscribers(&self, n: usize, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        while self.subscriber_count() < n {
            if Instant::now() >= deadline {
                return false;
            }
            std::thread::sleep(ACCEPT_POLL);
        }
        true
    }

    fn send(&self, t: f64, line: Arc<str>) {
        let subs = self.shared.subscribers.lock().unwrap();
        for (q, _) in subs.iter() {
            let mut st = q.state.lock().unwrap();
            if st.dead || st.closed {
                continue;
            }
            if st.buf.len() >= self.shared.capacity {
                st.buf.pop_front();
                st.unreported_drops += 1;
                self.shared.dropped.fetch_add(1, Ordering::Relaxed);
            }
            st.buf.push_back((t, Arc::clone(&line)));
            q.ready.notify_one();
        }
    }

    /// Stops accepting, lets writers drain for a bounded time, then disconnects everyone.
    pub fn close(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        let subs = std::mem::take(&mut *self.shared.subscribers.lock().unwrap());
        for (q, _) in &subs {
            q.state.lock().unwrap().closed = true;
            q.ready.notify_one();
        }
        let deadline = Instant::now() + DRAIN_DEADLINE;
        while Instant::now() < deadline && subs.iter().any(|(_, h)| !h.is_finished()) {
            std::thread::sleep(ACCEPT_POLL);
        }
        for (q, h) in subs {
            if !h.is_finished() {
                let mut st = q.state.lock().unwrap();
                self.shared.dropped.fetch_add(st.buf.len() as u64, Ordering::Relaxed);
                st.buf.clear();
                drop(st);
                let _ = q.stream.shutdown(Shutdown::Both);
            }
            let _ = h.join();
        }
    }
}

impl MetricSink for StreamPublisher {
    fn publish(&mut self, env: &MetricEnvelope) -> Result<(), MetricsError> {
        self.send(env.t_sim_s, Arc::from(env.to_line()));
        Ok(())
    }

    fn finish(&mut self) -> Result<(), MetricsError> {
        self.close();
        Ok(())
    }
}

impl Drop for StreamPublisher {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.close();
        }
    }
}

/// Minimal client: receives lines and keeps those whose topic starts with one of the prefixes.
pub struct Subscriber {
    reader: BufReader<TcpStream>,
    prefixes: Vec<String>,
}

impl Subscriber {
    /// An empty prefix list subscribes to everything.
    pub fn connect(addr: impl ToSocketAddrs, prefixes: &[&str]) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        Ok(Self {
            reader: BufReader::new(stream),
            prefixes: prefixes.iter().map(|p| p.to_string()).collect(),
        })
    }

    pub fn set_read_timeout(&self, t: Option<Duration>) -> std::io::Result<()> {
        self.reader.get_ref().set_read_timeout(t)
    }

    /// Next matching raw line (including its LF), or `None` at end of stream.
    pub fn next_line(&mut self) -> std::io::Result<Option<String>> {
        loop {
            let mut line = String::new();
            if self.reader.read_line(&mut line)? == 0 {
                return Ok(None);
            }
            let topic = line.split(' ').next().unwrap_or("");
            if self.prefixes.is_empty() || self.prefixes.iter().any(|p| topic.starts_with(p.as_str())) {
                return Ok(Some(line));
            }
        }
    }

    /// Next matching message decoded into an envelope; undecodable lines are errors.
    pub fn next_envelope(&mut self) -> std::io::Result<Option<MetricEnvelope>> {
        match self.next_line()? {
            None => Ok(None),
            Some(line) => MetricEnvelope::from_line(&line)
                .map(Some)
                .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidData, line)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delivers_in_order_with_prefix_filter() {
        let mut p = StreamPublisher::bind("127.0.0.1:0", 1024).unwrap();
        let mut all = Subscriber::connect(p.local_addr(), &[]).unwrap();
        let mut fl = Subscriber::connect(p.local_addr(), &["fl."]).unwrap();
        assert!(p.wait_for_subscribers(2, Duration::from_secs(5)));
        for i in 0..10 {
            let topic = if i % 2 == 0 { Topic::FlRound } else { Topic::NetSample };
            p.publish(&MetricEnvelope::new(i as f64, "x", topic).with("i", i as i64)).unwrap();
        }
        p.finish().unwrap();
        let mut n = 0;
        while let Some(env) = all.next_envelope().unwrap() {
            assert_eq!(env.t_sim_s, n as f64);
            n += 1;
        }
        assert_eq!(n, 10);
        let mut m = 0;
        while let Some(env) = fl.next_envelope().unwrap() {
            assert_eq!(env.topic, Topic::FlRound);
            m += 1;
        }
        assert_eq!(m, 5);
        assert_eq!(p.dropped(), 0);
    }

    #[test]
    fn no_subscribers_is_fine() {
        let mut p = StreamPublisher::bind("127.0.0.1:0", 4).unwrap();
        for i in 0..100 {
            p.publish(&MetricEnvelope::new(i as f64, "x", Topic::Log)).unwrap();
        }
        p.finish().unwrap();
        assert_eq!(p.dropped(), 0);
    }

    #[test]
    fn stalled_subscriber_drops_oldest() {
        let mut p = StreamPublisher::bind("127.0.0.1:0", 8).unwrap();
        let sub = Subscriber::connect(p.local_addr(), &[]).unwrap();
        assert!(p.wait_for_subscribers(1, Duration::from_secs(5)));
        let pad = "x".repeat(4096);
        let start = Instant::now();
        for i in 0..20_000 {
            p.publish(&MetricEnvelope::new(i as f64, "x", Topic::Log).with("pad", pad.as_str()))
                .unwrap();
        }
        assert!(start.elapsed() < Duration::from_secs(10));
        assert!(p.dropped() > 0);
        drop(sub);
        p.finish().unwrap();
    }

    #[test]
    fn bind_error() {
        let p = StreamPublisher::bind("127.0.0.1:0", 4).unwrap();
        let addr = p.local_addr().to_string();
        assert!(matches!(StreamPublisher::bind(&addr, 4), Err(MetricsError::Bind { .. })));
    }
}
