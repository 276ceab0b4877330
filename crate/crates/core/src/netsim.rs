//! Deterministic simulated datagram link: loss, fixed delay plus uniform
//! jitter (or a replayed latency trace), and a serialization-time
//! bandwidth cap, all on an explicit millisecond virtual clock. A real
//! UDP mode shares the wire format and semantics but runs on wall time.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::path::Path;

use thiserror::Error;

use crate::sampler::PixelRng;

#[derive(Debug, Error)]
pub enum NetsimError {
    #[error("latency trace is empty")]
    EmptyTrace,
    #[error("trace file: {0}")]
    Io(#[from] std::io::Error),
    #[error("trace file line {0}: not a number")]
    BadTraceLine(usize),
}

/// One direction of a simulated link.
#[derive(Clone, Debug)]
pub struct LinkConfig {
    pub delay_ms: f64,
    /// Uniform jitter on [0, jitter_ms] added per packet.
    pub jitter_ms: f64,
    /// Independent per-packet drop probability in [0, 1).
    pub loss_prob: f64,
    /// Serialization-rate cap; `None` means unlimited.
    pub bandwidth_bps: Option<f64>,
    pub seed: u64,
}

impl Default for LinkConfig {
    fn default() -> Self {
        LinkConfig { delay_ms: 0.0, jitter_ms: 0.0, loss_prob: 0.0, bandwidth_bps: None, seed: 0 }
    }
}

#[derive(Debug)]
struct Flight {
    deliver_at: f64,
    seq: u64,
    bytes: Vec<u8>,
}

impl PartialEq for Flight {
    fn eq(&self, other: &Self) -> bool {
        self.deliver_at == other.deliver_at && self.seq == other.seq
    }
}
impl Eq for Flight {}
impl PartialOrd for Flight {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Flight {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.deliver_at.total_cmp(&other.deliver_at).then(self.seq.cmp(&other.seq))
    }
}

/// Single-owner simulated channel. `send`/`poll` must be called with a
/// monotone `now_ms`; everything downstream is a pure function of
/// (seed, config, input schedule).
pub struct Channel {
    cfg: LinkConfig,
    trace: Option<Vec<f64>>,
    queue: BinaryHeap<Reverse<Flight>>,
    seq: u64,
    link_free_ms: f64,
    delivered_bytes: u64,
    sent_count: u64,
    lost_count: u64,
}

const TAG_LOSS: u32 = 0x1055;
const TAG_JITTER: u32 = 0x1177;

impl Channel {
    pub fn new(cfg: LinkConfig) -> Self {
        Channel {
            cfg,
            trace: None,
            queue: BinaryHeap::new(),
            seq: 0,
            link_free_ms: 0.0,
            delivered_bytes: 0,
            sent_count: 0,
            lost_count: 0,
        }
    }

    /// Replaces the delay + jitter model with per-packet delays drawn
    /// cyclically from `trace_ms`.
    pub fn with_trace(cfg: LinkConfig, trace_ms: Vec<f64>) -> Result<Self, NetsimError> {
        if trace_ms.is_empty() {
            return Err(NetsimError::EmptyTrace);
        }
        let mut ch = Channel::new(cfg);
        ch.trace = Some(trace_ms);
        Ok(ch)
    }

    fn draw(&self, tag: u32) -> f64 {
        let mut rng = PixelRng::from_key(self.cfg.seed ^ (u64::from(tag) << 32) ^ self.seq);
        rng.next_f64()
    }

    /// Queues one packet. Lost packets vanish; surviving ones are
    /// scheduled behind any packet still serializing onto the link.
    pub fn send(&mut self, bytes: Vec<u8>, now_ms: f64) {
        self.sent_count += 1;
        let seq = self.seq;
        if self.cfg.loss_prob > 0.0 && self.draw(TAG_LOSS) < self.cfg.loss_prob {
            self.lost_count += 1;
            self.seq += 1;
            return;
        }
        let serialization_ms = match self.cfg.bandwidth_bps {
            Some(bps) => (bytes.len() as f64) * 8.0 / bps * 1000.0,
            None => 0.0,
        };
        let start = now_ms.max(self.link_free_ms);
        self.link_free_ms = start + serialization_ms;
        let latency = match &self.trace {
            Some(t) => t[(seq % t.len() as u64) as usize],
            None => self.cfg.delay_ms + self.cfg.jitter_ms * self.draw(TAG_JITTER),
        };
        let deliver_at = start + serialization_ms + latency;
        self.queue.push(Reverse(Flight { deliver_at, seq, bytes }));
        self.seq += 1;
    }

    /// Removes and returns every packet due by `now_ms`, in delivery order.
    pub fn poll(&mut self, now_ms: f64) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        while let Some(Reverse(top)) = self.queue.peek() {
            if top.deliver_at > now_ms {
                break;
            }
            let flight = self.queue.pop().unwrap().0;
            self.delivered_bytes += flight.bytes.len() as u64;
            out.push(flight.bytes);
        }
        out
    }

    /// True when a new packet would start serializing immediately.
    pub fn is_idle(&self, now_ms: f64) -> bool {
        self.link_free_ms <= now_ms
    }

    pub fn delivered_bytes(&self) -> u64 {
        self.delivered_bytes
    }

    pub fn sent_count(&self) -> u64 {
        self.sent_count
    }

    pub fn lost_count(&self) -> u64 {
        self.lost_count
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }
}

/// Latency trace file: one duration in milliseconds per line; `#` starts
/// a comment.
pub fn load_trace(path: &Path) -> Result<Vec<f64>, NetsimError> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        out.push(line.parse::<f64>().map_err(|_| NetsimError::BadTraceLine(i + 1))?);
    }
    if out.is_empty() {
        return Err(NetsimError::EmptyTrace);
    }
    Ok(out)
}

/// Synthesizes a lognormal-shaped latency trace with roughly the given
/// mean; shape parameters chosen so the 99th percentile sits near four
/// times the mean. Deterministic in (seed, len).
pub fn synth_trace(mean_ms: f64, len: usize, seed: u64) -> Vec<f64> {
    // lognormal(mu, sigma): mean = exp(mu + sigma^2/2)
    let sigma = 0.7058f64;
    let mu = mean_ms.ln() - sigma * sigma * 0.5;
    let mut rng = PixelRng::from_key(seed ^ 0x7ace);
    (0..len)
        .map(|_| {
            // Box-Muller
            let u1 = rng.next_f64().max(1e-12);
            let u2 = rng.next_f64();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            (mu + sigma * z).exp()
        })
        .collect()
}

/// Real-socket mode: the same datagram payloads over UDP with wall time.
pub mod udp {
    use std::io;
    use std::net::{SocketAddr, UdpSocket};

    /// Nonblocking UDP endpoint used by the serve/client loops.
    pub struct Endpoint {
        socket: UdpSocket,
    }

    impl Endpoint {
        pub fn bind(addr: &str) -> io::Result<Endpoint> {
            let socket = UdpSocket::bind(addr)?;
            socket.set_nonblocking(true)?;
            Ok(Endpoint { socket })
        }

        pub fn local_addr(&self) -> io::Result<SocketAddr> {
            self.socket.local_addr()
        }

        pub fn send_to(&self, bytes: &[u8], addr: SocketAddr) -> io::Result<()> {
            self.socket.send_to(bytes, addr).map(|_| ())
        }

        /// Drains every datagram currently readable.
        pub fn poll(&self) -> Vec<(Vec<u8>, SocketAddr)> {
            let mut out = Vec::new();
            let mut buf = [0u8; 65_536];
            loop {
                match self.socket.recv_from(&mut buf) {
                    Ok((len, from)) => out.push((buf[..len].to_vec(), from)),
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                    Err(_) => break,
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_link_delivers_immediately() {
        let mut ch = Channel::new(LinkConfig::default());
        ch.send(vec![1, 2, 3], 5.0);
        assert_eq!(ch.poll(5.0), vec![vec![1, 2, 3]]);
        assert_eq!(ch.delivered_bytes(), 3);
    }

    #[test]
    fn total_loss_delivers_nothing() {
        let mut ch = Channel::new(LinkConfig { loss_prob: 0.9999999, ..Default::default() });
        for i in 0..1000 {
            ch.send(vec![0; 10], f64::from(i));
        }
        assert!(ch.poll(1e9).is_empty());
    }

    #[test]
    fn loss_rate_matches_binomial_within_three_sigma() {
        let p = 0.1f64;
        let n = 100_000u32;
        let mut ch = Channel::new(LinkConfig { loss_prob: p, seed: 42, ..Default::default() });
        for i in 0..n {
            ch.send(vec![0; 8], f64::from(i));
        }
        let delivered = ch.poll(1e12).len() as f64;
        let rate = delivered / f64::from(n);
        let sigma = (p * (1.0 - p) / f64::from(n)).sqrt();
        assert!((rate - (1.0 - p)).abs() < 3.0 * sigma, "rate {rate}");
    }

    #[test]
    fn poll_respects_deliver_time_and_reorders_by_latency() {
        let mut ch = Channel::with_trace(LinkConfig::default(), vec![50.0, 10.0]).unwrap();
        ch.send(vec![1], 0.0);
        ch.send(vec![2], 0.0);
        assert!(ch.poll(9.0).is_empty());
        assert_eq!(ch.poll(10.0), vec![vec![2]]);
        assert!(ch.poll(49.0).is_empty());
        assert_eq!(ch.poll(50.0), vec![vec![1]]);
    }

    #[test]
    fn schedule_is_deterministic() {
        let run = || {
            let mut ch = Channel::new(LinkConfig {
                delay_ms: 10.0,
                jitter_ms: 5.0,
                loss_prob: 0.2,
                bandwidth_bps: Some(1e6),
                seed: 7,
            });
            let mut log = Vec::new();
            for i in 0..500u32 {
                ch.send(vec![i as u8; 100], f64::from(i) * 0.5);
                for b in ch.poll(f64::from(i) * 0.5) {
                    log.push((i, b[0]));
                }
            }
            for b in ch.poll(1e9) {
                log.push((u32::MAX, b[0]));
            }
            log
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constant_trace_applies_exactly() {
        let mut ch = Channel::with_trace(LinkConfig::default(), vec![12.0]).unwrap();
        for i in 0..10 {
            ch.send(vec![i], f64::from(i));
        }
        for i in 0..10u8 {
            assert!(ch.poll(f64::from(i) + 11.999).is_empty());
            assert_eq!(ch.poll(f64::from(i) + 12.0), vec![vec![i]]);
        }
    }

    #[test]
    fn empty_trace_is_an_error() {
        assert!(matches!(Channel::with_trace(LinkConfig::default(), vec![]), Err(NetsimError::EmptyTrace)));
    }

    #[test]
    fn bandwidth_cap_bounds_throughput() {
        let bps = 8e6; // 1 MB/s
        let mut ch = Channel::new(LinkConfig { bandwidth_bps: Some(bps), ..Default::default() });
        let packet = vec![0u8; 1250]; // 10 kbit -> 1.25 ms each
        let n = 800;
        for _ in 0..n {
            ch.send(packet.clone(), 0.0);
        }
        // drain over time; last delivery must land at ~ n * 1.25 ms
        let mut last = 0.0f64;
        let mut t = 0.0;
        let mut got = 0;
        while got < n {
            t += 0.25;
            let batch = ch.poll(t);
            if !batch.is_empty() {
                last = t;
                got += batch.len();
            }
            assert!(t < 1300.0, "drain stalled");
        }
        let expected = n as f64 * 1.25;
        assert!((last - expected).abs() / expected < 0.01, "last {last} vs {expected}");
        // long-run delivered throughput within 1% of the cap
        let throughput = ch.delivered_bytes() as f64 * 8.0 / (last / 1000.0);
        assert!(throughput <= bps * 1.01, "throughput {throughput}");
    }

    #[test]
    fn synth_trace_statistics() {
        let trace = synth_trace(12.0, 4096, 9);
        let mean = trace.iter().sum::<f64>() / trace.len() as f64;
        assert!((mean - 12.0).abs() < 1.2, "mean {mean}");
        let mut sorted = trace.clone();
        sorted.sort_by(f64::total_cmp);
        let p99 = sorted[(sorted.len() as f64 * 0.99) as usize];
        assert!(p99 > 30.0 && p99 < 75.0, "p99 {p99}");
        assert!(trace.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn trace_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lat.trace");
        std::fs::write(&path, "# trace\n12.0\n13.5\n\n8\n").unwrap();
        assert_eq!(load_trace(&path).unwrap(), vec![12.0, 13.5, 8.0]);
        std::fs::write(&path, "12.0\nnope\n").unwrap();
        assert!(matches!(load_trace(&path), Err(NetsimError::BadTraceLine(2))));
    }

    #[test]
    fn udp_loopback_round_trip() {
        use super::udp::Endpoint;
        let a = match Endpoint::bind("127.0.0.1:0") {
            Ok(e) => e,
            Err(_) => return, // sandbox without loopback sockets
        };
        let b = Endpoint::bind("127.0.0.1:0").unwrap();
        let addr_b = b.local_addr().unwrap();
        a.send_to(b"hello", addr_b).unwrap();
        for _ in 0..50 {
            let got = b.poll();
            if !got.is_empty() {
                assert_eq!(got[0].0, b"hello");
                return;
            }
            std::thread::sleep(std::time::Duration::from_millis(2));
        }
        panic!("datagram never arrived on loopback");
    }
}
