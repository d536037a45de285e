//! Throughput and latency comparison of three paths between a client and a
//! host-side server:
//!
//! - `relay`: through a userspace copy relay, the slow path being bypassed;
//! - `bypass`: from a fresh network namespace under supervision, switched;
//! - `direct`: unsupervised on the host, the upper bound.
//!
//! Every stream is checked end to end: the server returns the xxh3 digest of
//! what it received and the client compares it with what it sent.

use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use xxhash_rust::xxh3::Xxh3;

use crate::engine::{NetEnvironment, Policy, SwitchEngine};
use crate::launch::{spawn_unsupervised, NetnsMode};
use crate::memory::MemoryBroker;
use crate::supervise::{thread_cpu_time, SupervisedChild};

/// Copy buffer of the relay.
pub const RELAY_BUFFER: usize = 32 * 1024;
pub const MIN_PAYLOAD: u64 = 1 << 20;
pub const MAX_STREAMS: usize = 8;
const LATENCY_MESSAGE: usize = 64;
const CHUNK: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid benchmark config: {0}")]
    InvalidConfig(String),
    #[error("setup failed: {0}")]
    SetupFailed(String),
    #[error("stream {stream}: digest mismatch")]
    DigestMismatch { stream: usize },
    #[error("no socket was switched; the bypass result is invalid")]
    SwitchDidNotHappen,
    #[error("client failed: {0}")]
    ClientFailed(String),
}

fn setup(e: impl std::fmt::Display) -> BenchError {
    BenchError::SetupFailed(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Relay,
    Bypass,
    Direct,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Relay, Mode::Bypass, Mode::Direct];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Relay => "relay",
            Mode::Bypass => "bypass",
            Mode::Direct => "direct",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub mode: Mode,
    /// Total bytes across all streams.
    pub payload_bytes: u64,
    pub parallel_streams: usize,
    /// Stop sending early once this much time has passed.
    pub duration: Option<Duration>,
    /// Request/response rounds instead of a bulk transfer.
    pub latency_rounds: Option<u32>,
    /// Only for the negative control of the bypass mode.
    pub supervise: bool,
}

impl BenchConfig {
    pub fn new(mode: Mode, payload_bytes: u64, parallel_streams: usize) -> Self {
        Self { mode, payload_bytes, parallel_streams, duration: None, latency_rounds: None, supervise: true }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if !(1..=MAX_STREAMS).contains(&self.parallel_streams) {
            return Err(BenchError::InvalidConfig(format!("streams must be 1..={MAX_STREAMS}")));
        }
        if self.latency_rounds.is_none() && self.payload_bytes < MIN_PAYLOAD {
            return Err(BenchError::InvalidConfig("payload must be at least 1 MiB".into()));
        }
        if self.latency_rounds == Some(0) {
            return Err(BenchError::InvalidConfig("latency rounds must be positive".into()));
        }
        Ok(())
    }
}

/// Parses sizes like `1G`, `64M`, `512K` or plain bytes (binary units).
pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (num, mult) = match s.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => {
            let m = match c.to_ascii_uppercase() {
                'K' => 1 << 10,
                'M' => 1 << 20,
                'G' => 1 << 30,
                _ => return Err(format!("bad size unit in {s:?}")),
            };
            (&s[..i], m)
        }
        _ => (s, 1),
    };
    num.parse::<u64>().map(|n| n * mult).map_err(|_| format!("bad size {s:?}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamResult {
    pub bytes: u64,
    pub elapsed_ns: u64,
    pub digest_ok: bool,
    pub mean_latency_us: Option<f64>,
}

impl StreamResult {
    pub fn throughput_bps(&self) -> f64 {
        self.bytes as f64 * 8.0 / (self.elapsed_ns.max(1) as f64 / 1e9)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub mode: Mode,
    pub streams: usize,
    pub bytes: u64,
    /// Aggregate bits per second.
    pub throughput_bps: f64,
    pub per_stream_bps: Vec<f64>,
    pub mean_latency_us: Option<f64>,
    /// CPU of the relay or supervisor relative to wall time.
    pub cpu_self_fraction: f64,
    /// Sockets switched; bypass mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switched: Option<u64>,
}

fn fill_pattern(buf: &mut [u8], seed: u64) {
    let mut x = seed | 1;
    for chunk in buf.chunks_mut(8) {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        chunk.copy_from_slice(&x.to_le_bytes()[..chunk.len()]);
    }
}

/// What a client asks the server to do on a connection.
#[derive(Debug, Clone, Copy)]
enum Request {
    /// Read to EOF, answer with digest and byte count.
    Sink = b'T' as isize,
    Echo = b'E' as isize,
}

/// Host-side target of every mode.
pub struct BenchServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl BenchServer {
    pub fn start(bind: &str) -> io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let st = stop.clone();
        let thread = std::thread::spawn(move || {
            while !st.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((s, _)) => {
                        std::thread::spawn(move || serve_conn(s));
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(2)),
                    Err(_) => break,
                }
            }
        });
        Ok(Self { addr, stop, thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for BenchServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve_conn(mut s: TcpStream) {
    s.set_nonblocking(false).ok();
    s.set_nodelay(true).ok();
    let mut kind = [0u8; 1];
    if s.read_exact(&mut kind).is_err() {
        return;
    }
    let mut buf = vec![0u8; 256 * 1024];
    match kind[0] {
        b'T' => {
            let mut h = Xxh3::new();
            let mut n = 0u64;
            loop {
                match s.read(&mut buf) {
                    Ok(0) => break,
                    Ok(k) => {
                        h.update(&buf[..k]);
                        n += k as u64;
                    }
                    Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                    Err(_) => return,
                }
            }
            let mut reply = [0u8; 16];
            reply[..8].copy_from_slice(&h.digest().to_be_bytes());
            reply[8..].copy_from_slice(&n.to_be_bytes());
            let _ = s.write_all(&reply);
        }
        b'E' => loop {
            match s.read(&mut buf) {
                Ok(0) | Err(_) => return,
                Ok(k) => {
                    if s.write_all(&buf[..k]).is_err() {
                        return;
                    }
                }
            }
        },
        _ => {}
    }
}

/// Userspace copy relay with a fixed per-direction buffer.
pub struct Relay {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    cpu_ns: Arc<AtomicU64>,
    thread: Option<JoinHandle<()>>,
}

impl Relay {
    pub fn start(target: SocketAddr) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let cpu_ns = Arc::new(AtomicU64::new(0));
        let (st, cpu) = (stop.clone(), cpu_ns.clone());
        let thread = std::thread::spawn(move || {
            while !st.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((client, _)) => {
                        let cpu = cpu.clone();
                        std::thread::spawn(move || {
                            let _ = relay_conn(client, target, &cpu);
                        });
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(2)),
                    Err(_) => break,
                }
            }
        });
        Ok(Self { addr, stop, cpu_ns, thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// CPU time spent in copy loops so far.
    pub fn cpu_time(&self) -> Duration {
        Duration::from_nanos(self.cpu_ns.load(Ordering::Relaxed))
    }
}

impl Drop for Relay {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn copy_loop(mut from: TcpStream, mut to: TcpStream, cpu: &AtomicU64) {
    let start = thread_cpu_time();
    let mut buf = [0u8; RELAY_BUFFER];
    loop {
        match from.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => {
                if to.write_all(&buf[..n]).is_err() {
                    break;
                }
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(_) => break,
        }
    }
    let _ = to.shutdown(Shutdown::Write);
    cpu.fetch_add((thread_cpu_time() - start).as_nanos() as u64, Ordering::Relaxed);
}

fn relay_conn(client: TcpStream, target: SocketAddr, cpu: &Arc<AtomicU64>) -> io::Result<()> {
    client.set_nonblocking(false)?;
    let upstream = TcpStream::connect(target)?;
    client.set_nodelay(true)?;
    upstream.set_nodelay(true)?;
    let (c2, u2) = (client.try_clone()?, upstream.try_clone()?);
    let cpu2 = cpu.clone();
    let back = std::thread::spawn(move || copy_loop(u2, c2, &cpu2));
    copy_loop(client, upstream, cpu);
    let _ = back.join();
    Ok(())
}

/// Client side, run in the measured process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientSpec {
    pub connect: SocketAddr,
    pub bytes_per_stream: u64,
    pub streams: usize,
    pub duration: Option<Duration>,
    pub latency_rounds: Option<u32>,
}

pub fn run_client(spec: &ClientSpec) -> Result<Vec<StreamResult>, BenchError> {
    let handles: Vec<_> = (0..spec.streams)
        .map(|i| {
            let spec = spec.clone();
            std::thread::spawn(move || match spec.latency_rounds {
                Some(r) => latency_stream(spec.connect, r),
                None => bulk_stream(spec.connect, spec.bytes_per_stream, spec.duration, i as u64 + 1),
            })
        })
        .collect();
    let mut out = Vec::new();
    for h in handles {
        let r = h.join().map_err(|_| BenchError::ClientFailed("stream thread panicked".into()))?;
        out.push(r.map_err(|e| BenchError::ClientFailed(e.to_string()))?);
    }
    Ok(out)
}

fn bulk_stream(addr: SocketAddr, bytes: u64, duration: Option<Duration>, seed: u64) -> io::Result<StreamResult> {
    let mut block = vec![0u8; CHUNK];
    fill_pattern(&mut block, seed);
    let mut s = TcpStream::connect(addr)?;
    let start = Instant::now();
    s.write_all(&[Request::Sink as u8])?;
    let mut h = Xxh3::new();
    let mut sent = 0u64;
    while sent < bytes {
        if duration.is_some_and(|d| start.elapsed() >= d) {
            break;
        }
        let n = (bytes - sent).min(CHUNK as u64) as usize;
        // Vary the content per chunk so a stuck or replayed chunk is caught.
        block[..8].copy_from_slice(&sent.to_le_bytes());
        s.write_all(&block[..n])?;
        h.update(&block[..n]);
        sent += n as u64;
    }
    s.shutdown(Shutdown::Write)?;
    let mut reply = [0u8; 16];
    s.read_exact(&mut reply)?;
    let elapsed = start.elapsed();
    let digest = u64::from_be_bytes(reply[..8].try_into().unwrap());
    let count = u64::from_be_bytes(reply[8..].try_into().unwrap());
    Ok(StreamResult {
        bytes: sent,
        elapsed_ns: elapsed.as_nanos() as u64,
        digest_ok: digest == h.digest() && count == sent,
        mean_latency_us: None,
    })
}

fn latency_stream(addr: SocketAddr, rounds: u32) -> io::Result<StreamResult> {
    let mut s = TcpStream::connect(addr)?;
    s.set_nodelay(true)?;
    s.write_all(&[Request::Echo as u8])?;
    let mut msg = [0u8; LATENCY_MESSAGE];
    let mut back = [0u8; LATENCY_MESSAGE];
    let mut ok = true;
    let start = Instant::now();
    for r in 0..rounds {
        msg[..4].copy_from_slice(&r.to_le_bytes());
        s.write_all(&msg)?;
        s.read_exact(&mut back)?;
        ok &= back == msg;
    }
    let elapsed = start.elapsed();
    Ok(StreamResult {
        bytes: rounds as u64 * LATENCY_MESSAGE as u64 * 2,
        elapsed_ns: elapsed.as_nanos() as u64,
        digest_ok: ok,
        mean_latency_us: Some(elapsed.as_secs_f64() * 1e6 / rounds as f64),
    })
}

/// Runs benchmarks; the client is a separate process (`client_exe` with
/// the `__client` subcommand) so it can be placed and supervised.
pub struct Bench {
    pub client_exe: PathBuf,
    pub work_dir: PathBuf,
}

impl Bench {
    pub fn new(client_exe: impl Into<PathBuf>, work_dir: impl Into<PathBuf>) -> Self {
        Self { client_exe: client_exe.into(), work_dir: work_dir.into() }
    }

    fn client_command(&self, cfg: &BenchConfig, connect: SocketAddr) -> Command {
        let spec = ClientSpec {
            connect,
            bytes_per_stream: cfg.payload_bytes / cfg.parallel_streams as u64,
            streams: cfg.parallel_streams,
            duration: cfg.duration,
            latency_rounds: cfg.latency_rounds,
        };
        let mut cmd = Command::new(&self.client_exe);
        cmd.arg("__client").arg(serde_json::to_string(&spec).expect("client spec serializes"));
        cmd.stdout(Stdio::piped()).stderr(Stdio::inherit());
        cmd
    }

    pub fn run(&self, cfg: &BenchConfig) -> Result<BenchResult, BenchError> {
        cfg.validate()?;
        match cfg.mode {
            Mode::Relay => self.run_relay(cfg),
            Mode::Bypass => self.run_bypass(cfg),
            Mode::Direct => self.run_direct(cfg),
        }
    }

    pub fn run_direct(&self, cfg: &BenchConfig) -> Result<BenchResult, BenchError> {
        let server = BenchServer::start("127.0.0.1:0").map_err(setup)?;
        let (streams, _) = self.unsupervised(cfg, server.addr())?;
        summarize(Mode::Direct, &streams, Duration::ZERO, None)
    }

    pub fn run_relay(&self, cfg: &BenchConfig) -> Result<BenchResult, BenchError> {
        let server = BenchServer::start("127.0.0.1:0").map_err(setup)?;
        let relay = Relay::start(server.addr()).map_err(setup)?;
        let (streams, _) = self.unsupervised(cfg, relay.addr())?;
        // Let the copy threads account their CPU.
        std::thread::sleep(Duration::from_millis(50));
        summarize(Mode::Relay, &streams, relay.cpu_time(), None)
    }

    pub fn run_bypass(&self, cfg: &BenchConfig) -> Result<BenchResult, BenchError> {
        let server = BenchServer::start("127.0.0.1:0").map_err(setup)?;
        let mut cmd = self.client_command(cfg, server.addr());
        let env = NetEnvironment::new(Vec::new(), Vec::new(), true).map_err(setup)?;
        let engine = Arc::new(SwitchEngine::new(Policy::new("bench", env), Arc::new(MemoryBroker::new(None))));
        let (out, switched, cpu) = if cfg.supervise {
            let sup = SupervisedChild::spawn(&mut cmd, engine, NetnsMode::New, &self.work_dir).map_err(setup)?;
            let (status, stdout, report) = sup.wait_with_stdout().map_err(setup)?;
            ((status, stdout), report.counters.sockets_switched, report.supervisor_cpu)
        } else {
            let child = spawn_unsupervised(&mut cmd, NetnsMode::New).map_err(setup)?;
            let out = child.wait_with_output().map_err(setup)?;
            ((out.status, out.stdout), 0, Duration::ZERO)
        };
        if switched == 0 {
            return Err(BenchError::SwitchDidNotHappen);
        }
        let streams = parse_client_output(out.0, &out.1)?;
        summarize(Mode::Bypass, &streams, cpu, Some(switched))
    }

    fn unsupervised(&self, cfg: &BenchConfig, connect: SocketAddr) -> Result<(Vec<StreamResult>, ()), BenchError> {
        let mut cmd = self.client_command(cfg, connect);
        let child = spawn_unsupervised(&mut cmd, NetnsMode::Inherit).map_err(setup)?;
        let out = child.wait_with_output().map_err(setup)?;
        Ok((parse_client_output(out.status, &out.stdout)?, ()))
    }
}

fn parse_client_output(status: std::process::ExitStatus, stdout: &[u8]) -> Result<Vec<StreamResult>, BenchError> {
    if !status.success() {
        return Err(BenchError::ClientFailed(format!("client exited with {status}")));
    }
    serde_json::from_slice(stdout).map_err(|e| BenchError::ClientFailed(format!("client output: {e}")))
}

/// Aggregates per-stream results. Streams with a bad digest invalidate the
/// whole result.
pub fn summarize(
    mode: Mode,
    streams: &[StreamResult],
    overhead_cpu: Duration,
    switched: Option<u64>,
) -> Result<BenchResult, BenchError> {
    if let Some(i) = streams.iter().position(|s| !s.digest_ok) {
        return Err(BenchError::DigestMismatch { stream: i });
    }
    if streams.is_empty() {
        return Err(BenchError::ClientFailed("no streams reported".into()));
    }
    let bytes: u64 = streams.iter().map(|s| s.bytes).sum();
    let wall_ns = streams.iter().map(|s| s.elapsed_ns).max().unwrap_or(1).max(1);
    let latencies: Vec<f64> = streams.iter().filter_map(|s| s.mean_latency_us).collect();
    let throughput_bps = bytes as f64 * 8.0 / (wall_ns as f64 / 1e9);
    if throughput_bps <= 0.0 {
        return Err(BenchError::ClientFailed("no data transferred".into()));
    }
    Ok(BenchResult {
        mode,
        streams: streams.len(),
        bytes,
        throughput_bps,
        per_stream_bps: streams.iter().map(StreamResult::throughput_bps).collect(),
        mean_latency_us: (!latencies.is_empty()).then(|| latencies.iter().sum::<f64>() / latencies.len() as f64),
        cpu_self_fraction: overhead_cpu.as_nanos() as f64 / wall_ns as f64,
        switched,
    })
}

/// Median by throughput of repeated runs of one mode.
pub fn median(mut runs: Vec<BenchResult>) -> Option<BenchResult> {
    if runs.is_empty() {
        return None;
    }
    runs.sort_by(|a, b| a.throughput_bps.total_cmp(&b.throughput_bps));
    let mid = runs.len() / 2;
    Some(runs.swap_remove(mid))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub results: Vec<BenchResult>,
    pub bypass_over_relay: Option<f64>,
    pub bypass_over_direct: Option<f64>,
}

impl ComparisonReport {
    pub fn new(results: Vec<BenchResult>) -> Self {
        let tp = |m: Mode| results.iter().find(|r| r.mode == m).map(|r| r.throughput_bps);
        let ratio = |a: Option<f64>, b: Option<f64>| Some(a? / b?);
        Self {
            bypass_over_relay: ratio(tp(Mode::Bypass), tp(Mode::Relay)),
            bypass_over_direct: ratio(tp(Mode::Bypass), tp(Mode::Direct)),
            results,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>7} {:>12} {:>12} {:>10}", "mode", "streams", "Gbit/s", "latency us", "cpu");
        for r in &self.results {
            let lat = r.mean_latency_us.map(|l| format!("{l:.1}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<8} {:>7} {:>12.3} {:>12} {:>9.1}%",
                r.mode.as_str(),
                r.streams,
                r.throughput_bps / 1e9,
                lat,
                r.cpu_self_fraction * 100.0
            );
        }
        let fmt = |r: Option<f64>| r.map(|v| format!("{v:.2}x")).unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "bypass/relay  {}", fmt(self.bypass_over_relay));
        let _ = writeln!(s, "bypass/direct {}", fmt(self.bypass_over_direct));
        s
    }
}

/// Entry point of the `__client` subcommand.
pub fn client_main(spec_json: &str, out: &mut impl Write) -> Result<(), BenchError> {
    let spec: ClientSpec =
        serde_json::from_str(spec_json).map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
    let results = run_client(&spec)?;
    serde_json::to_writer(&mut *out, &results).map_err(|e| BenchError::ClientFailed(e.to_string()))?;
    Ok(())
}
