//! Active reachability probing between containers.
//!
//! Each container gets an agent thread living in its network namespace. The
//! agent answers probes on `published_port + RESPONDER_PORT_OFFSET` and, on
//! request over its control socket, probes other containers from inside the
//! namespace. Results are cached by [`ProbeService`] and never computed on a
//! syscall handler's path.

use std::collections::{HashMap, HashSet};
use std::io::{self, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, TcpListener, TcpStream};
use std::os::fd::AsFd;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{debug, warn};
use nix::poll::{poll, PollFd, PollFlags, PollTimeout};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::engine::{PeerGate, Reachability};
use crate::netns::NetNs;

pub const RESPONDER_PORT_OFFSET: u16 = 10000;
/// Sent by the prober and echoed by the responder.
pub const PROBE_MAGIC: [u8; 8] = *b"B4NSPRB1";
const MAX_FRAME: u32 = 64 * 1024;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("network namespace unavailable: {0}")]
    NamespaceUnavailable(String),
    #[error("probe control channel: {0}")]
    Control(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub period: Duration,
    /// Results older than this are treated as unknown.
    pub freshness: Duration,
    pub connect_timeout: Duration,
    /// Directory holding the agents' control sockets.
    pub runtime_dir: PathBuf,
}

impl ProbeConfig {
    pub fn new(runtime_dir: impl Into<PathBuf>) -> Self {
        let period = Duration::from_secs(5);
        Self {
            period,
            freshness: period * 3,
            connect_timeout: Duration::from_secs(1),
            runtime_dir: runtime_dir.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub src_container: String,
    pub dst_container: String,
    pub dst_port: u16,
    pub reachable: bool,
    /// Clock reading at which the probe completed.
    pub checked_at: Duration,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
enum ControlRequest {
    Probe { dst: Ipv4Addr, port: u16 },
}

#[derive(Debug, Serialize, Deserialize)]
struct ControlReply {
    reachable: bool,
}

fn write_frame(w: &mut impl Write, msg: &impl Serialize) -> io::Result<()> {
    let body = serde_json::to_vec(msg).map_err(io::Error::other)?;
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)
}

fn read_frame<T: for<'de> Deserialize<'de>>(r: &mut impl Read) -> io::Result<T> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "oversized frame"));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    serde_json::from_slice(&body).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn responder_port(port: u16) -> Option<u16> {
    port.checked_add(RESPONDER_PORT_OFFSET)
}

/// One probe from the calling thread's namespace.
pub fn probe_once(dst: Ipv4Addr, port: u16, timeout: Duration) -> bool {
    let Some(rport) = responder_port(port) else { return false };
    let addr = SocketAddr::V4(SocketAddrV4::new(dst, rport));
    let attempt = || -> io::Result<bool> {
        let mut s = TcpStream::connect_timeout(&addr, timeout)?;
        s.set_read_timeout(Some(timeout))?;
        s.set_write_timeout(Some(timeout))?;
        s.write_all(&PROBE_MAGIC)?;
        let mut reply = [0u8; 8];
        s.read_exact(&mut reply)?;
        Ok(reply == PROBE_MAGIC)
    };
    attempt().unwrap_or(false)
}

fn answer_probe(mut s: TcpStream) {
    s.set_read_timeout(Some(Duration::from_millis(500))).ok();
    let mut hello = [0u8; 8];
    if s.read_exact(&mut hello).is_ok() && hello == PROBE_MAGIC {
        let _ = s.write_all(&PROBE_MAGIC);
    }
}

fn answer_control(mut s: UnixStream, timeout: Duration) {
    s.set_read_timeout(Some(Duration::from_secs(2))).ok();
    let reply = match read_frame::<ControlRequest>(&mut s) {
        Ok(ControlRequest::Probe { dst, port }) => ControlReply { reachable: probe_once(dst, port, timeout) },
        Err(e) => {
            debug!("bad probe control request: {e}");
            return;
        }
    };
    let _ = write_frame(&mut s, &reply);
}

/// Asks the agent behind `control` to probe `dst:port`.
pub fn probe_via(control: &Path, dst: Ipv4Addr, port: u16, timeout: Duration) -> Result<bool, ProbeError> {
    let mut s = UnixStream::connect(control).map_err(|e| ProbeError::Control(e.to_string()))?;
    s.set_read_timeout(Some(timeout + Duration::from_secs(1))).ok();
    write_frame(&mut s, &ControlRequest::Probe { dst, port })
        .map_err(|e| ProbeError::Control(e.to_string()))?;
    let reply: ControlReply = read_frame(&mut s).map_err(|e| ProbeError::Control(e.to_string()))?;
    Ok(reply.reachable)
}

/// A running probe agent. Stops when dropped.
#[derive(Debug)]
pub struct AgentHandle {
    container_id: String,
    control_path: PathBuf,
    responder_ports: Vec<u16>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl AgentHandle {
    pub fn container_id(&self) -> &str {
        &self.container_id
    }

    pub fn control_path(&self) -> &Path {
        &self.control_path
    }

    pub fn responder_ports(&self) -> &[u16] {
        &self.responder_ports
    }
}

impl Drop for AgentHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        let _ = std::fs::remove_file(&self.control_path);
    }
}

/// Starts an agent inside `netns` with responders for `published_ports`.
pub fn start_agent(
    container_id: &str,
    netns: &NetNs,
    published_ports: &[u16],
    control_path: &Path,
    connect_timeout: Duration,
) -> Result<AgentHandle, ProbeError> {
    let ns = netns.try_clone().map_err(|e| ProbeError::NamespaceUnavailable(e.to_string()))?;
    let ports: Vec<u16> = published_ports.to_vec();
    let path = control_path.to_path_buf();
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<Result<Vec<u16>, ProbeError>>();
    let stop_t = stop.clone();
    let thread = std::thread::Builder::new()
        .name(format!("probe-{container_id}"))
        .spawn(move || {
            if let Err(e) = ns.enter() {
                let _ = tx.send(Err(ProbeError::NamespaceUnavailable(e.to_string())));
                return;
            }
            drop(ns);
            let mut responders = Vec::new();
            for p in ports.iter().filter_map(|p| responder_port(*p)) {
                match TcpListener::bind(("0.0.0.0", p)) {
                    Ok(l) => responders.push(l),
                    Err(e) => warn!("probe responder on {p}: {e}"),
                }
            }
            let _ = std::fs::remove_file(&path);
            let control = match UnixListener::bind(&path) {
                Ok(l) => l,
                Err(e) => {
                    let _ = tx.send(Err(ProbeError::Control(e.to_string())));
                    return;
                }
            };
            let bound = responders.iter().filter_map(|l| l.local_addr().ok()).map(|a| a.port()).collect();
            let _ = tx.send(Ok(bound));
            agent_loop(&control, &responders, &stop_t, connect_timeout);
        })?;
    let responder_ports = rx
        .recv()
        .map_err(|_| ProbeError::NamespaceUnavailable("agent thread exited".into()))??;
    Ok(AgentHandle {
        container_id: container_id.to_string(),
        control_path: control_path.to_path_buf(),
        responder_ports,
        stop,
        thread: Some(thread),
    })
}

fn agent_loop(control: &UnixListener, responders: &[TcpListener], stop: &AtomicBool, timeout: Duration) {
    control.set_nonblocking(true).ok();
    for r in responders {
        r.set_nonblocking(true).ok();
    }
    while !stop.load(Ordering::Relaxed) {
        let mut fds = vec![PollFd::new(control.as_fd(), PollFlags::POLLIN)];
        fds.extend(responders.iter().map(|r| PollFd::new(r.as_fd(), PollFlags::POLLIN)));
        if poll(&mut fds, PollTimeout::from(100u16)).unwrap_or(0) == 0 {
            continue;
        }
        let ready: Vec<bool> = fds
            .iter()
            .map(|f| f.revents().is_some_and(|r| r.contains(PollFlags::POLLIN)))
            .collect();
        // Threads spawned here inherit the agent's namespace.
        if ready[0] {
            if let Ok((s, _)) = control.accept() {
                s.set_nonblocking(false).ok();
                std::thread::spawn(move || answer_control(s, timeout));
            }
        }
        for (r, _) in responders.iter().zip(&ready[1..]).filter(|(_, ok)| **ok) {
            if let Ok((s, _)) = r.accept() {
                s.set_nonblocking(false).ok();
                std::thread::spawn(move || answer_probe(s));
            }
        }
    }
}

type PairKey = (String, String, u16);

#[derive(Debug)]
struct Member {
    addr: Ipv4Addr,
    /// `None` when the agent could not be started.
    agent: Option<AgentHandle>,
}

/// Cached reachability between containers on this host.
pub struct ProbeService {
    config: ProbeConfig,
    clock: Arc<dyn Clock>,
    members: Mutex<HashMap<String, Member>>,
    cache: RwLock<HashMap<PairKey, ProbeResult>>,
    wanted: Mutex<HashSet<PairKey>>,
    nudge: (Mutex<bool>, Condvar),
    stop: AtomicBool,
}

impl ProbeService {
    pub fn new(config: ProbeConfig, clock: Arc<dyn Clock>) -> Arc<Self> {
        Arc::new(Self {
            config,
            clock,
            members: Mutex::new(HashMap::new()),
            cache: RwLock::new(HashMap::new()),
            wanted: Mutex::new(HashSet::new()),
            nudge: (Mutex::new(false), Condvar::new()),
            stop: AtomicBool::new(false),
        })
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    /// Registers a container and starts its agent. On failure the container
    /// stays registered without an agent, so every pair involving it as a
    /// source stays unknown.
    pub fn add_container(
        &self,
        id: &str,
        addr: Ipv4Addr,
        netns: Option<&NetNs>,
        published_ports: &[u16],
    ) -> Result<(), ProbeError> {
        self.purge(id);
        let control = self.config.runtime_dir.join(format!("probe-{id}.sock"));
        let agent = match netns {
            Some(ns) => start_agent(id, ns, published_ports, &control, self.config.connect_timeout),
            None => Err(ProbeError::NamespaceUnavailable("no namespace given".into())),
        };
        let (agent, result) = match agent {
            Ok(a) => (Some(a), Ok(())),
            Err(e) => (None, Err(e)),
        };
        self.members.lock().unwrap().insert(id.to_string(), Member { addr, agent });
        result
    }

    pub fn remove_container(&self, id: &str) {
        let member = self.members.lock().unwrap().remove(id);
        drop(member);
        self.purge(id);
    }

    fn purge(&self, id: &str) {
        self.cache.write().unwrap().retain(|(s, d, _), _| s != id && d != id);
        self.wanted.lock().unwrap().retain(|(s, d, _)| s != id && d != id);
    }

    /// Fresh cached result, or `None` (unknown). Misses are queued for the
    /// refresher; this never probes inline.
    pub fn check(&self, src: &str, dst: &str, port: u16) -> Option<ProbeResult> {
        let key = (src.to_string(), dst.to_string(), port);
        let now = self.clock.now();
        if let Some(r) = self.cache.read().unwrap().get(&key) {
            if now.saturating_sub(r.checked_at) <= self.config.freshness {
                return Some(r.clone());
            }
        }
        if self.wanted.lock().unwrap().insert(key) {
            let (flag, cv) = &self.nudge;
            *flag.lock().unwrap() = true;
            cv.notify_all();
        }
        None
    }

    pub fn results(&self) -> Vec<ProbeResult> {
        let mut v: Vec<_> = self.cache.read().unwrap().values().cloned().collect();
        v.sort_by(|a, b| (&a.src_container, &a.dst_container, a.dst_port).cmp(&(&b.src_container, &b.dst_container, b.dst_port)));
        v
    }

    fn probe_pair(&self, key: &PairKey) -> Option<ProbeResult> {
        let (control, dst_addr) = {
            let members = self.members.lock().unwrap();
            let src = members.get(&key.0)?;
            let dst = members.get(&key.1)?;
            (src.agent.as_ref()?.control_path.clone(), dst.addr)
        };
        let reachable = match probe_via(&control, dst_addr, key.2, self.config.connect_timeout) {
            Ok(r) => r,
            Err(e) => {
                debug!("probe {key:?} failed: {e}");
                false
            }
        };
        Some(ProbeResult {
            src_container: key.0.clone(),
            dst_container: key.1.clone(),
            dst_port: key.2,
            reachable,
            checked_at: self.clock.now(),
        })
    }

    fn store(&self, key: PairKey, mut result: ProbeResult) {
        let mut cache = self.cache.write().unwrap();
        if let Some(prev) = cache.get(&key) {
            result.checked_at = result.checked_at.max(prev.checked_at);
        }
        cache.insert(key, result);
    }

    fn refresh_keys(&self, keys: Vec<PairKey>) -> usize {
        let mut probed = 0;
        for key in keys {
            match self.probe_pair(&key) {
                Some(r) => {
                    self.store(key.clone(), r);
                    self.wanted.lock().unwrap().remove(&key);
                    probed += 1;
                }
                None => {
                    let live = {
                        let m = self.members.lock().unwrap();
                        m.contains_key(&key.0) && m.contains_key(&key.1)
                    };
                    if !live {
                        self.cache.write().unwrap().remove(&key);
                        self.wanted.lock().unwrap().remove(&key);
                    }
                }
            }
        }
        probed
    }

    /// Re-probes every known pair. Returns the number of pairs probed.
    pub fn refresh_all(&self) -> usize {
        let mut keys: HashSet<PairKey> = self.cache.read().unwrap().keys().cloned().collect();
        keys.extend(self.wanted.lock().unwrap().iter().cloned());
        self.refresh_keys(keys.into_iter().collect())
    }

    /// Probes only pairs that were asked for but never answered.
    pub fn refresh_pending(&self) -> usize {
        let cached: HashSet<PairKey> = self.cache.read().unwrap().keys().cloned().collect();
        let keys: Vec<PairKey> =
            self.wanted.lock().unwrap().iter().filter(|k| !cached.contains(*k)).cloned().collect();
        self.refresh_keys(keys)
    }

    /// Runs `refresh_all` every period and `refresh_pending` on demand.
    pub fn spawn_refresher(self: &Arc<Self>) -> JoinHandle<()> {
        let me = self.clone();
        std::thread::spawn(move || {
            let mut next = Instant::now();
            while !me.stop.load(Ordering::Relaxed) {
                let now = Instant::now();
                if now >= next {
                    me.refresh_all();
                    next += me.config.period;
                    if next < now {
                        next = now + me.config.period;
                    }
                    continue;
                }
                let (flag, cv) = &me.nudge;
                let guard = flag.lock().unwrap();
                let (mut guard, _) = cv
                    .wait_timeout_while(guard, next - now, |nudged| !*nudged && !me.stop.load(Ordering::Relaxed))
                    .unwrap();
                let nudged = std::mem::replace(&mut *guard, false);
                drop(guard);
                if nudged {
                    me.refresh_pending();
                }
            }
        })
    }

    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::Relaxed);
        let (flag, cv) = &self.nudge;
        *flag.lock().unwrap() = true;
        cv.notify_all();
        self.members.lock().unwrap().clear();
    }
}

impl PeerGate for ProbeService {
    fn check(&self, src: &str, dst: &str, port: u16) -> Reachability {
        match ProbeService::check(self, src, dst, port) {
            Some(r) if r.reachable => Reachability::Reachable,
            Some(_) => Reachability::Unreachable,
            None => Reachability::Unknown,
        }
    }
}
