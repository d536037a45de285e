//! Switching decisions and their execution.
//!
//! Every hooked syscall ends in exactly one response. Anything that goes
//! wrong before the fd injection is committed leaves the target's socket
//! untouched and continues the syscall on the in-namespace path.

use std::collections::HashMap;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::os::fd::{AsRawFd, OwnedFd};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use serde::Serialize;
use thiserror::Error;

use crate::fault::{FaultPlan, FaultPoint};
use crate::gateway::{
    GatewayError, InjectFd, NotificationChannel, NotificationEvent, NotifyDevice, Response,
};
use crate::memory::{MemError, TargetAccess, MAX_READ};
use crate::net::{decode_sockaddr, encode_sockaddr_in, Ipv4Cidr, PublishMapping, SockAddr, SOCKADDR_IN_LEN};
use crate::socket_state::{
    lock, probe_fd, OptionKind, Probe, SocketRecord, SocketRegistry, SocketStatus, SwitchOutcome,
    SwitchVia,
};
use crate::sys;

/// Longest sockaddr accepted from a target.
const MAX_SOCKADDR: usize = 128;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    #[error("container networks {0} and {1} overlap")]
    OverlappingCidrs(Ipv4Cidr, Ipv4Cidr),
    #[error("container port {0} is published more than once")]
    DuplicatePublish(u16),
    #[error("host port {0} is not bindable without privileges")]
    PrivilegedPort(u16),
}

/// What the supervisor knows about the container's network placement.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct NetEnvironment {
    /// Networks inside the intermediate namespace; anything else is external.
    pub container_cidrs: Vec<Ipv4Cidr>,
    pub published_ports: Vec<PublishMapping>,
    /// Let connects to 127.0.0.0/8 reach the host's loopback.
    #[serde(default)]
    pub host_loopback_allowed: bool,
}

impl NetEnvironment {
    pub fn new(
        container_cidrs: Vec<Ipv4Cidr>,
        published_ports: Vec<PublishMapping>,
        host_loopback_allowed: bool,
    ) -> Result<Self, EnvError> {
        let env = Self { container_cidrs, published_ports, host_loopback_allowed };
        env.validate()?;
        Ok(env)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        for (i, a) in self.container_cidrs.iter().enumerate() {
            if let Some(b) = self.container_cidrs[i + 1..].iter().find(|b| a.overlaps(b)) {
                return Err(EnvError::OverlappingCidrs(*a, *b));
            }
        }
        for (i, m) in self.published_ports.iter().enumerate() {
            if self.published_ports[i + 1..].iter().any(|o| o.container_port == m.container_port) {
                return Err(EnvError::DuplicatePublish(m.container_port));
            }
        }
        if !nix::unistd::geteuid().is_root() {
            if let Some(m) = self.published_ports.iter().find(|m| m.host_port < 1024) {
                return Err(EnvError::PrivilegedPort(m.host_port));
            }
        }
        Ok(())
    }

    pub fn is_container_addr(&self, ip: Ipv4Addr) -> bool {
        self.container_cidrs.iter().any(|c| c.contains(ip))
    }

    /// The mapping a bind to `local` publishes, if any.
    pub fn published_for_bind(&self, local: SocketAddrV4) -> Option<&PublishMapping> {
        self.published_ports.iter().find(|m| {
            m.container_port == local.port()
                && (local.ip().is_unspecified() || *local.ip() == m.container_addr)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Reachability {
    Reachable,
    Unreachable,
    Unknown,
}

/// Answers whether `src` may reach `dst`'s published `port`.
pub trait PeerGate: Send + Sync {
    fn check(&self, src: &str, dst: &str, port: u16) -> Reachability;
}

/// Maps a remote container endpoint to the host endpoint publishing it.
/// Must answer from local state only.
pub trait RemoteResolver: Send + Sync {
    fn resolve(&self, dest: SocketAddrV4) -> Option<SocketAddrV4>;
}

/// A published listener that has been switched to the host.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActivePublish {
    pub container_endpoint: SocketAddrV4,
    pub host_endpoint: SocketAddrV4,
    pub owner: String,
    pub pid: i32,
    pub fd: i32,
}

/// Switched published listeners, shared by all instances on a host.
#[derive(Debug, Default)]
pub struct PublishTable {
    entries: Mutex<HashMap<SocketAddrV4, ActivePublish>>,
}

impl PublishTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, entry: ActivePublish) {
        self.entries.lock().unwrap().insert(entry.container_endpoint, entry);
    }

    pub fn lookup(&self, dest: SocketAddrV4) -> Option<ActivePublish> {
        self.entries.lock().unwrap().get(&dest).cloned()
    }

    pub fn remove_socket(&self, pid: i32, fd: i32) {
        self.entries.lock().unwrap().retain(|_, e| !(e.pid == pid && e.fd == fd));
    }

    pub fn remove_owner(&self, owner: &str) {
        self.entries.lock().unwrap().retain(|_, e| e.owner != owner);
    }

    pub fn snapshot(&self) -> Vec<ActivePublish> {
        let mut v: Vec<_> = self.entries.lock().unwrap().values().cloned().collect();
        v.sort_by_key(|e| e.container_endpoint);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum IgnoreReason {
    NotTrackable,
    ContainerLocal,
    HostLoopback,
    InternalNoMapping,
    PeerUnreachable,
    PeerUnknown,
    Unpublished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "verdict", rename_all = "kebab-case")]
pub enum SwitchDecision {
    /// Connect: the destination. Bind: the host endpoint to listen on.
    Switch { target: SocketAddrV4 },
    Ignore { reason: IgnoreReason },
    RewriteAndSwitch { new_dest: SocketAddrV4, spoof_peer: SocketAddrV4 },
}

impl SwitchDecision {
    fn ignore(reason: IgnoreReason) -> Self {
        SwitchDecision::Ignore { reason }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnOp {
    Connect(SocketAddrV4),
    Bind(SocketAddrV4),
}

/// Everything `decide` consults.
#[derive(Clone)]
pub struct Policy {
    pub container_id: String,
    pub env: NetEnvironment,
    pub publish: Arc<PublishTable>,
    /// `None` disables reachability gating.
    pub gate: Option<Arc<dyn PeerGate>>,
    pub remote: Option<Arc<dyn RemoteResolver>>,
}

impl Policy {
    pub fn new(container_id: impl Into<String>, env: NetEnvironment) -> Self {
        Self {
            container_id: container_id.into(),
            env,
            publish: Arc::new(PublishTable::new()),
            gate: None,
            remote: None,
        }
    }

    pub fn decide(&self, status: SocketStatus, op: ConnOp) -> SwitchDecision {
        if status != SocketStatus::Trackable {
            return SwitchDecision::ignore(IgnoreReason::NotTrackable);
        }
        match op {
            ConnOp::Bind(local) => match self.env.published_for_bind(local) {
                Some(m) => SwitchDecision::Switch { target: m.host_bind_endpoint() },
                None => SwitchDecision::ignore(IgnoreReason::Unpublished),
            },
            ConnOp::Connect(dest) => self.decide_connect(dest),
        }
    }

    fn decide_connect(&self, dest: SocketAddrV4) -> SwitchDecision {
        let ip = *dest.ip();
        if ip.is_unspecified() {
            return SwitchDecision::ignore(IgnoreReason::ContainerLocal);
        }
        if ip.is_loopback() {
            return if self.env.host_loopback_allowed {
                SwitchDecision::Switch { target: dest }
            } else {
                SwitchDecision::ignore(IgnoreReason::HostLoopback)
            };
        }
        if !self.env.is_container_addr(ip) {
            return SwitchDecision::Switch { target: dest };
        }
        if let Some(active) = self.publish.lookup(dest) {
            let verdict = match &self.gate {
                None => Reachability::Reachable,
                Some(g) => g.check(&self.container_id, &active.owner, dest.port()),
            };
            return match verdict {
                Reachability::Reachable => SwitchDecision::RewriteAndSwitch {
                    new_dest: active.host_endpoint,
                    spoof_peer: dest,
                },
                Reachability::Unreachable => SwitchDecision::ignore(IgnoreReason::PeerUnreachable),
                Reachability::Unknown => SwitchDecision::ignore(IgnoreReason::PeerUnknown),
            };
        }
        if let Some(host) = self.remote.as_ref().and_then(|r| r.resolve(dest)) {
            return SwitchDecision::RewriteAndSwitch { new_dest: host, spoof_peer: dest };
        }
        SwitchDecision::ignore(IgnoreReason::InternalNoMapping)
    }
}

#[derive(Debug, Default)]
struct Counters {
    events_handled: AtomicU64,
    sockets_switched: AtomicU64,
    switches_rolled_back: AtomicU64,
    rewrites: AtomicU64,
    spoofed: AtomicU64,
    ignored: AtomicU64,
    handler_panics: AtomicU64,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct CounterSnapshot {
    pub events_handled: u64,
    pub sockets_switched: u64,
    pub switches_rolled_back: u64,
    pub rewrites: u64,
    pub spoofed: u64,
    pub ignored: u64,
    pub handler_panics: u64,
}

fn bump(c: &AtomicU64) {
    c.fetch_add(1, Ordering::Relaxed);
}

/// Handles the notifications of one container.
pub struct SwitchEngine {
    policy: Policy,
    registry: Arc<SocketRegistry>,
    access: Arc<dyn TargetAccess>,
    faults: Arc<FaultPlan>,
    counters: Counters,
}

/// How a handler finished.
enum Reply {
    Respond(Response),
    /// The response went out together with an injected fd.
    Done,
}

use Reply::{Done, Respond};

fn cont() -> Reply {
    Respond(Response::continue_syscall())
}

impl SwitchEngine {
    pub fn new(policy: Policy, access: Arc<dyn TargetAccess>) -> Self {
        Self {
            policy,
            registry: Arc::new(SocketRegistry::new()),
            access,
            faults: Arc::new(FaultPlan::new()),
            counters: Counters::default(),
        }
    }

    pub fn with_faults(mut self, faults: Arc<FaultPlan>) -> Self {
        self.faults = faults;
        self
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn registry(&self) -> &Arc<SocketRegistry> {
        &self.registry
    }

    pub fn faults(&self) -> &Arc<FaultPlan> {
        &self.faults
    }

    pub fn counters(&self) -> CounterSnapshot {
        let c = &self.counters;
        let get = |a: &AtomicU64| a.load(Ordering::Relaxed);
        CounterSnapshot {
            events_handled: get(&c.events_handled),
            sockets_switched: get(&c.sockets_switched),
            switches_rolled_back: get(&c.switches_rolled_back),
            rewrites: get(&c.rewrites),
            spoofed: get(&c.spoofed),
            ignored: get(&c.ignored),
            handler_panics: get(&c.handler_panics),
        }
    }

    /// Serves events until the channel closes or `stop` is raised.
    pub fn serve<D: NotifyDevice>(
        &self,
        ch: &NotificationChannel<D>,
        stop: &AtomicBool,
    ) -> Result<(), GatewayError> {
        let mut last_sweep = Instant::now();
        while !stop.load(Ordering::Relaxed) {
            match ch.next_event_timeout(Duration::from_millis(200)) {
                Ok(Some(ev)) => {
                    self.handle(ch, &ev);
                    if self.faults.fire(FaultPoint::InstanceCrash) {
                        panic!("injected serve loop crash");
                    }
                }
                Ok(None) => {}
                Err(GatewayError::ChannelClosed) => {
                    self.evict_all();
                    return Ok(());
                }
                Err(e) => return Err(e),
            }
            if last_sweep.elapsed() >= Duration::from_secs(5) {
                self.sweep_exited();
                last_sweep = Instant::now();
            }
        }
        Ok(())
    }

    /// Handles one event and sends exactly one response for it.
    pub fn handle<D: NotifyDevice>(&self, ch: &NotificationChannel<D>, ev: &NotificationEvent) {
        bump(&self.counters.events_handled);
        let reply = match catch_unwind(AssertUnwindSafe(|| self.dispatch(ch, ev))) {
            Ok(r) => r,
            Err(_) => {
                bump(&self.counters.handler_panics);
                warn!("handler for {:?} panicked; continuing the syscall", ev.syscall_name());
                cont()
            }
        };
        if let Respond(resp) = reply {
            match ch.respond(ev, resp) {
                Ok(()) | Err(GatewayError::AlreadyResponded(_)) => {}
                Err(GatewayError::StaleCookie(c)) => debug!("notification {c:#x} went stale"),
                Err(e) => warn!("failed to answer notification {:#x}: {e}", ev.cookie),
            }
        }
    }

    fn dispatch<D: NotifyDevice>(&self, ch: &NotificationChannel<D>, ev: &NotificationEvent) -> Reply {
        if self.faults.fire(FaultPoint::HandlerPanic) {
            panic!("injected handler panic");
        }
        match ev.syscall_nr {
            libc::SYS_connect => self.on_connect(ch, ev),
            libc::SYS_bind => self.on_bind(ch, ev),
            libc::SYS_getpeername => self.on_getpeername(ch, ev),
            libc::SYS_setsockopt => self.on_setsockopt(ev),
            libc::SYS_fcntl => self.on_fcntl(ev),
            libc::SYS_ioctl => self.on_ioctl(ev),
            libc::SYS_close => self.on_close(ev),
            _ => cont(),
        }
    }

    fn read(&self, pid: i32, addr: u64, len: usize) -> Result<Vec<u8>, MemError> {
        if self.faults.fire(FaultPoint::MemoryFault) {
            return Err(MemError::Fault(addr));
        }
        self.access.read_mem(pid, addr, len)
    }

    fn validate<D: NotifyDevice>(&self, ch: &NotificationChannel<D>, ev: &NotificationEvent) -> bool {
        !self.faults.fire(FaultPoint::StaleCookie) && ch.validate(ev)
    }

    fn rolled_back(&self, rec: &SocketRecord, why: &str) -> Reply {
        bump(&self.counters.switches_rolled_back);
        info!("switch of pid {} fd {} rolled back: {why}", rec.pid, rec.fd);
        cont()
    }

    fn ignored(&self, rec: &mut SocketRecord, why: &str) -> Reply {
        bump(&self.counters.ignored);
        rec.mark_non_switchable(why);
        cont()
    }

    /// Reads and decodes the sockaddr argument of connect/bind.
    fn read_sockaddr<D: NotifyDevice>(
        &self,
        ch: &NotificationChannel<D>,
        ev: &NotificationEvent,
    ) -> Option<(SocketAddrV4, Vec<u8>)> {
        let (ptr, len) = (ev.args[1], ev.args[2] as u32 as usize);
        if !(2..=MAX_SOCKADDR).contains(&len) {
            return None;
        }
        let raw = self.read(ev.pid, ptr, len).ok()?;
        if !self.validate(ch, ev) {
            return None;
        }
        match decode_sockaddr(&raw)? {
            SockAddr::Inet(a) if len >= SOCKADDR_IN_LEN => Some((a, raw)),
            _ => None,
        }
    }

    /// Confirms the target's socket is still unconnected and unbound and
    /// returns its current status flags.
    fn recheck(&self, rec: &mut SocketRecord) -> Option<i32> {
        let remote = match self.access.acquire_fd(rec.pid, rec.fd) {
            Ok(r) => r,
            Err(e) => {
                rec.mark_non_switchable(format!("fd not available: {e}"));
                return None;
            }
        };
        if let Probe::NonSwitchable(why) = probe_fd(remote.as_raw_fd()) {
            rec.mark_non_switchable(why);
            return None;
        }
        sys::fcntl_getfl(remote.as_raw_fd()).ok()
    }

    /// Creates the host socket and brings it to the target socket's state.
    fn prepare_host_socket(&self, rec: &mut SocketRecord, status_flags: i32) -> Result<OwnedFd, String> {
        if self.faults.fire(FaultPoint::HostSocket) {
            return Err("host socket creation failed (injected)".into());
        }
        let host = sys::tcp4_socket().map_err(|e| format!("host socket: {e}"))?;
        let fl = sys::fcntl_getfl(host.as_raw_fd()).map_err(|e| e.to_string())?;
        sys::fcntl_setfl(host.as_raw_fd(), (fl & !libc::O_NONBLOCK) | (status_flags & libc::O_NONBLOCK))
            .map_err(|e| e.to_string())?;
        let replay = if self.faults.fire(FaultPoint::ReplayFailure) {
            Err("option replay failed (injected)".to_string())
        } else {
            rec.replay_options(host.as_raw_fd()).map_err(|e| e.to_string())
        };
        if let Err(e) = replay {
            rec.mark_non_switchable("option replay failed");
            return Err(e);
        }
        Ok(host)
    }

    fn inject(rec: &SocketRecord, host: &OwnedFd) -> InjectFd {
        let cloexec = sys::fdinfo_flags(rec.pid, rec.fd).map(|f| f & libc::O_CLOEXEC != 0).unwrap_or(false);
        InjectFd { host_fd: host.as_raw_fd(), target_fd: rec.fd, replace_existing: true, cloexec }
    }

    fn on_connect<D: NotifyDevice>(&self, ch: &NotificationChannel<D>, ev: &NotificationEvent) -> Reply {
        let rec_ref = self.registry.ensure_registered(ev.pid, ev.fd_arg(), &*self.access);
        let mut rec = lock(&rec_ref);
        if rec.status != SocketStatus::Trackable {
            return cont();
        }
        let Some((dest, raw)) = self.read_sockaddr(ch, ev) else { return cont() };
        let Some(status_flags) = self.recheck(&mut rec) else { return cont() };
        let (target, spoof) = match self.policy.decide(rec.status, ConnOp::Connect(dest)) {
            SwitchDecision::Ignore { reason } => {
                debug!("connect to {dest} ignored: {reason:?}");
                return self.ignored(&mut rec, "connection not switched");
            }
            SwitchDecision::Switch { target } => (target, None),
            SwitchDecision::RewriteAndSwitch { new_dest, spoof_peer } => (new_dest, Some(spoof_peer)),
        };

        let host = match self.prepare_host_socket(&mut rec, status_flags) {
            Ok(h) => h,
            Err(why) => return self.rolled_back(&rec, &why),
        };
        let (ptr, slot) = (ev.args[1], ev.args[2] as u32 as usize);
        let rewritten = spoof.is_some();
        if rewritten {
            if let Err(e) = self.access.write_mem(ev.pid, ptr, &encode_sockaddr_in(target), slot) {
                return self.rolled_back(&rec, &format!("destination rewrite: {e}"));
            }
        }
        let restore = || {
            if rewritten {
                let _ = self.access.write_mem(ev.pid, ptr, &raw, slot);
            }
        };
        if !self.validate(ch, ev) {
            restore();
            return self.rolled_back(&rec, "notification no longer valid");
        }
        let inject = Self::inject(&rec, &host);
        match ch.respond(ev, Response::continue_syscall().with_injected(inject)) {
            Ok(()) => {
                let outcome = SwitchOutcome {
                    via: SwitchVia::Connect,
                    host_inode: sys::inode_of(host.as_raw_fd()).unwrap_or(0),
                    endpoint: target,
                };
                rec.mark_switched(outcome, spoof).expect("record is trackable under its lock");
                bump(&self.counters.sockets_switched);
                if rewritten {
                    bump(&self.counters.rewrites);
                }
                debug!("pid {} fd {} switched to {target}", rec.pid, rec.fd);
                Done
            }
            Err(GatewayError::StaleCookie(_)) => {
                restore();
                self.rolled_back(&rec, "notification went stale");
                Done
            }
            Err(e) => {
                restore();
                self.rolled_back(&rec, &format!("fd injection: {e}"))
            }
        }
    }

    fn on_bind<D: NotifyDevice>(&self, ch: &NotificationChannel<D>, ev: &NotificationEvent) -> Reply {
        let rec_ref = self.registry.ensure_registered(ev.pid, ev.fd_arg(), &*self.access);
        let mut rec = lock(&rec_ref);
        if rec.status != SocketStatus::Trackable {
            return cont();
        }
        let Some((local, _)) = self.read_sockaddr(ch, ev) else { return cont() };
        let Some(status_flags) = self.recheck(&mut rec) else { return cont() };
        let target = match self.policy.decide(rec.status, ConnOp::Bind(local)) {
            SwitchDecision::Switch { target } => target,
            _ => return self.ignored(&mut rec, "bind not published"),
        };
        let mapping = *self.policy.env.published_for_bind(local).expect("decided on a mapping");

        let host = match self.prepare_host_socket(&mut rec, status_flags) {
            Ok(h) => h,
            Err(why) => return self.rolled_back(&rec, &why),
        };
        if let Err(e) = sys::bind_v4(host.as_raw_fd(), target) {
            rec.mark_non_switchable("host port unavailable");
            return self.rolled_back(&rec, &format!("bind {target}: {e}"));
        }
        if !self.validate(ch, ev) {
            return self.rolled_back(&rec, "notification no longer valid");
        }
        let inject = Self::inject(&rec, &host);
        match ch.respond(ev, Response::success(0).with_injected(inject)) {
            Ok(()) => {
                let outcome = SwitchOutcome {
                    via: SwitchVia::Bind,
                    host_inode: sys::inode_of(host.as_raw_fd()).unwrap_or(0),
                    endpoint: target,
                };
                rec.mark_switched(outcome, None).expect("record is trackable under its lock");
                self.policy.publish.insert(ActivePublish {
                    container_endpoint: mapping.container_endpoint(),
                    host_endpoint: mapping.host_connect_endpoint(),
                    owner: self.policy.container_id.clone(),
                    pid: rec.pid,
                    fd: rec.fd,
                });
                bump(&self.counters.sockets_switched);
                debug!("pid {} fd {} listening on host {target}", rec.pid, rec.fd);
                Done
            }
            Err(GatewayError::StaleCookie(_)) => {
                self.rolled_back(&rec, "notification went stale");
                Done
            }
            Err(e) => self.rolled_back(&rec, &format!("fd injection: {e}")),
        }
    }

    fn on_getpeername<D: NotifyDevice>(&self, ch: &NotificationChannel<D>, ev: &NotificationEvent) -> Reply {
        let Some(rec_ref) = self.registry.get(ev.pid, ev.fd_arg()) else { return cont() };
        let rec = lock(&rec_ref);
        let (SocketStatus::Switched, Some(peer)) = (rec.status, rec.spoofed_peer) else {
            return cont();
        };
        let (addr_ptr, len_ptr) = (ev.args[1], ev.args[2]);
        let Ok(len_bytes) = self.read(ev.pid, len_ptr, 4) else { return cont() };
        let len = i32::from_ne_bytes(len_bytes[..4].try_into().unwrap());
        if len < SOCKADDR_IN_LEN as i32 {
            return Respond(Response::error(libc::EINVAL));
        }
        let slot = (len as usize).min(MAX_READ);
        if self.access.write_mem(ev.pid, addr_ptr, &encode_sockaddr_in(peer), slot).is_err()
            || self
                .access
                .write_mem(ev.pid, len_ptr, &(SOCKADDR_IN_LEN as u32).to_ne_bytes(), 4)
                .is_err()
        {
            return cont();
        }
        if !self.validate(ch, ev) {
            return cont();
        }
        bump(&self.counters.spoofed);
        Respond(Response::success(0))
    }

    fn on_setsockopt(&self, ev: &NotificationEvent) -> Reply {
        let rec_ref = self.registry.ensure_registered(ev.pid, ev.fd_arg(), &*self.access);
        let mut rec = lock(&rec_ref);
        if rec.status != SocketStatus::Trackable {
            return cont();
        }
        let (level, optname, ptr, len) =
            (ev.args[1] as i32, ev.args[2] as i32, ev.args[3], ev.args[4] as u32 as usize);
        let value = match len {
            0 => Vec::new(),
            n if n > MAX_READ => {
                rec.mark_non_switchable("oversized option");
                return cont();
            }
            n => match self.read(ev.pid, ptr, n) {
                Ok(v) => v,
                Err(_) => {
                    rec.mark_non_switchable("unreadable option value");
                    return cont();
                }
            },
        };
        let _ = rec.record_option(OptionKind::Setsockopt { level, optname, value });
        cont()
    }

    fn on_fcntl(&self, ev: &NotificationEvent) -> Reply {
        let cmd = ev.args[1] as i32;
        if cmd != libc::F_SETFL && cmd != libc::F_SETFD {
            return cont();
        }
        let rec_ref = self.registry.ensure_registered(ev.pid, ev.fd_arg(), &*self.access);
        let mut rec = lock(&rec_ref);
        let _ = rec.record_option(OptionKind::Fcntl { cmd, arg: ev.args[2] as i64 });
        cont()
    }

    fn on_ioctl(&self, ev: &NotificationEvent) -> Reply {
        let rec_ref = self.registry.ensure_registered(ev.pid, ev.fd_arg(), &*self.access);
        let mut rec = lock(&rec_ref);
        if rec.status != SocketStatus::Trackable {
            return cont();
        }
        let request = ev.args[1] as u32 as u64;
        if request != libc::FIONBIO as u64 {
            rec.mark_non_switchable(format!("unsupported ioctl {request:#x}"));
            return cont();
        }
        match self.read(ev.pid, ev.args[2], std::mem::size_of::<libc::c_int>()) {
            Ok(arg) => {
                let _ = rec.record_option(OptionKind::Ioctl { request, arg });
            }
            Err(_) => {
                rec.mark_non_switchable("unreadable ioctl argument");
            }
        }
        cont()
    }

    fn on_close(&self, ev: &NotificationEvent) -> Reply {
        if let Some(last) = self.registry.on_close(ev.pid, ev.fd_arg()) {
            if last.switch_outcome.is_some_and(|o| o.via == SwitchVia::Bind) {
                self.policy.publish.remove_socket(last.pid, last.fd);
            }
        }
        cont()
    }

    fn evict_pid(&self, pid: i32) {
        for s in self.registry.summaries().iter().filter(|s| s.pid == pid) {
            self.policy.publish.remove_socket(s.pid, s.fd);
        }
        self.registry.evict_process(pid);
        self.access.forget(pid);
    }

    /// Drops state of processes that have exited.
    pub fn sweep_exited(&self) {
        for pid in self.registry.pids() {
            if !sys::process_alive(pid) {
                self.evict_pid(pid);
            }
        }
    }

    /// Drops all state; the channel is gone.
    pub fn evict_all(&self) {
        for pid in self.registry.pids() {
            self.evict_pid(pid);
        }
        self.policy.publish.remove_owner(&self.policy.container_id);
    }
}
