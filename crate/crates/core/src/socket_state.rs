//! Per-(pid, fd) socket registry, syscall classification and option
//! recording.

use std::collections::HashMap;
use std::fmt;
use std::net::SocketAddrV4;
use std::os::fd::RawFd;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::Serialize;
use thiserror::Error;

use crate::memory::TargetAccess;
use crate::sys;

/// The seven behavioural classes of socket-related syscalls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SyscallClass {
    Creation,
    Configuration,
    Connection,
    Status,
    Derivation,
    Communication,
    Close,
}

impl SyscallClass {
    pub const ALL: [SyscallClass; 7] = [
        SyscallClass::Creation,
        SyscallClass::Configuration,
        SyscallClass::Connection,
        SyscallClass::Status,
        SyscallClass::Derivation,
        SyscallClass::Communication,
        SyscallClass::Close,
    ];

    /// Classes routed to the supervisor.
    pub fn is_hooked(self) -> bool {
        matches!(
            self,
            SyscallClass::Configuration
                | SyscallClass::Connection
                | SyscallClass::Status
                | SyscallClass::Close
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SyscallClass::Creation => "creation",
            SyscallClass::Configuration => "configuration",
            SyscallClass::Connection => "connection",
            SyscallClass::Status => "status",
            SyscallClass::Derivation => "derivation",
            SyscallClass::Communication => "communication",
            SyscallClass::Close => "close",
        }
    }
}

impl fmt::Display for SyscallClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Every classified syscall name.
pub const CLASSIFIED_SYSCALLS: [(&str, SyscallClass); 26] = {
    use SyscallClass::*;
    [
        ("socket", Creation),
        ("fcntl", Configuration),
        ("setsockopt", Configuration),
        ("ioctl", Configuration),
        ("connect", Connection),
        ("bind", Connection),
        ("getsockopt", Status),
        ("getsockname", Status),
        ("getpeername", Status),
        ("accept", Derivation),
        ("accept4", Derivation),
        ("clone", Derivation),
        ("poll", Communication),
        ("recvfrom", Communication),
        ("sendfile", Communication),
        ("write", Communication),
        ("select", Communication),
        ("read", Communication),
        ("listen", Communication),
        ("lseek", Communication),
        ("readv", Communication),
        ("writev", Communication),
        ("epoll_ctl", Communication),
        ("epoll_wait", Communication),
        ("close", Close),
        ("shutdown", Close),
    ]
};

/// `None` means the syscall is outside the classified set.
pub fn classify_syscall(name: &str) -> Option<SyscallClass> {
    CLASSIFIED_SYSCALLS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SocketStatus {
    Unknown,
    NonSwitchable,
    Trackable,
    Switched,
    Closed,
}

impl SocketStatus {
    pub fn can_become(self, to: SocketStatus) -> bool {
        use SocketStatus::*;
        matches!(
            (self, to),
            (Unknown, NonSwitchable)
                | (Unknown, Trackable)
                | (Trackable, Switched)
                | (Trackable, NonSwitchable)
                | (Trackable, Closed)
                | (Switched, Closed)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptionKind {
    Setsockopt { level: i32, optname: i32, value: Vec<u8> },
    Fcntl { cmd: i32, arg: i64 },
    /// `arg` holds the bytes the request pointer referred to.
    Ioctl { request: u64, arg: Vec<u8> },
}

impl OptionKind {
    /// Whether this option can be replayed onto another socket.
    pub fn replayable(&self) -> bool {
        match self {
            OptionKind::Setsockopt { .. } => true,
            OptionKind::Fcntl { cmd, .. } => matches!(*cmd, libc::F_SETFL | libc::F_SETFD),
            OptionKind::Ioctl { request, arg } => {
                *request == libc::FIONBIO as u64 && arg.len() == std::mem::size_of::<libc::c_int>()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OptionEvent {
    pub kind: OptionKind,
    pub sequence: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StateError {
    #[error("illegal transition {from:?} -> {to:?}")]
    IllegalTransition { from: SocketStatus, to: SocketStatus },
    #[error("options can only be recorded on a trackable socket")]
    NotTrackable,
}

#[derive(Debug, Error)]
#[error("replaying {option:?} failed: {source}")]
pub struct ReplayFailed {
    pub option: OptionKind,
    #[source]
    pub source: std::io::Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SwitchVia {
    Connect,
    Bind,
}

/// Identity of the host socket a record was switched to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SwitchOutcome {
    pub via: SwitchVia,
    /// Inode of the host socket, as shown in `/proc/<pid>/fd`.
    pub host_inode: u64,
    /// Where the host socket connects to or listens on.
    pub endpoint: SocketAddrV4,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SocketRecord {
    pub pid: i32,
    pub fd: i32,
    pub status: SocketStatus,
    pub options: Vec<OptionEvent>,
    pub spoofed_peer: Option<SocketAddrV4>,
    pub switch_outcome: Option<SwitchOutcome>,
    pub reason: Option<String>,
    /// Every status held so far, oldest first.
    #[serde(skip)]
    pub history: Vec<SocketStatus>,
    #[serde(skip)]
    next_sequence: u64,
}

impl SocketRecord {
    pub fn new(pid: i32, fd: i32) -> Self {
        Self {
            pid,
            fd,
            status: SocketStatus::Unknown,
            options: Vec::new(),
            spoofed_peer: None,
            switch_outcome: None,
            reason: None,
            history: vec![SocketStatus::Unknown],
            next_sequence: 0,
        }
    }

    pub fn transition(&mut self, to: SocketStatus) -> Result<(), StateError> {
        if !self.status.can_become(to) {
            return Err(StateError::IllegalTransition { from: self.status, to });
        }
        self.status = to;
        self.history.push(to);
        Ok(())
    }

    /// Moves to NonSwitchable when the current status allows it. Returns
    /// whether the record is now NonSwitchable.
    pub fn mark_non_switchable(&mut self, reason: impl Into<String>) -> bool {
        if self.status == SocketStatus::NonSwitchable {
            return true;
        }
        if self.transition(SocketStatus::NonSwitchable).is_ok() {
            self.reason = Some(reason.into());
            self.options.clear();
            return true;
        }
        false
    }

    pub fn record_option(&mut self, kind: OptionKind) -> Result<u64, StateError> {
        if self.status != SocketStatus::Trackable {
            return Err(StateError::NotTrackable);
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.options.push(OptionEvent { kind, sequence });
        Ok(sequence)
    }

    pub fn mark_switched(
        &mut self,
        outcome: SwitchOutcome,
        spoofed_peer: Option<SocketAddrV4>,
    ) -> Result<(), StateError> {
        self.transition(SocketStatus::Switched)?;
        self.switch_outcome = Some(outcome);
        self.spoofed_peer = spoofed_peer;
        Ok(())
    }

    /// Applies the recorded options, in sequence order, to `host_fd`.
    pub fn replay_options(&self, host_fd: RawFd) -> Result<(), ReplayFailed> {
        let mut ordered: Vec<&OptionEvent> = self.options.iter().collect();
        ordered.sort_by_key(|o| o.sequence);
        for ev in ordered {
            apply_option(host_fd, &ev.kind)
                .map_err(|source| ReplayFailed { option: ev.kind.clone(), source })?;
        }
        Ok(())
    }
}

fn apply_option(fd: RawFd, kind: &OptionKind) -> std::io::Result<()> {
    match kind {
        OptionKind::Setsockopt { level, optname, value } => {
            sys::setsockopt_raw(fd, *level, *optname, value)
        }
        OptionKind::Fcntl { cmd: libc::F_SETFL, arg } => sys::fcntl_setfl(fd, *arg as i32),
        OptionKind::Fcntl { cmd: libc::F_SETFD, arg } => {
            // SAFETY: F_SETFD takes an int argument.
            let ret = unsafe { libc::fcntl(fd, libc::F_SETFD, *arg as libc::c_int) };
            if ret < 0 {
                Err(std::io::Error::last_os_error())
            } else {
                Ok(())
            }
        }
        OptionKind::Ioctl { request, arg } if kind.replayable() => {
            let mut val = libc::c_int::from_ne_bytes(arg[..4].try_into().unwrap());
            // SAFETY: FIONBIO reads one int through the pointer.
            let ret = unsafe { libc::ioctl(fd, *request as _, &mut val) };
            if ret < 0 {
                Err(std::io::Error::last_os_error())
            } else {
                Ok(())
            }
        }
        _ => Err(std::io::Error::from_raw_os_error(libc::EOPNOTSUPP)),
    }
}

/// Outcome of interrogating a descriptor during lazy registration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Probe {
    Trackable,
    NonSwitchable(String),
}

/// Decides switchability of a descriptor duplicated from the target.
pub fn probe_fd(fd: RawFd) -> Probe {
    let non = |why: &str| Probe::NonSwitchable(why.to_string());
    match sys::getsockopt_int(fd, libc::SOL_SOCKET, libc::SO_TYPE) {
        Ok(libc::SOCK_STREAM) => {}
        Ok(_) => return non("not SOCK_STREAM"),
        Err(_) => return non("not a socket"),
    }
    match sys::getsockopt_int(fd, libc::SOL_SOCKET, libc::SO_DOMAIN) {
        Ok(libc::AF_INET) => {}
        _ => return non("not AF_INET"),
    }
    if sys::peer_connected(fd) {
        return non("already connected");
    }
    if sys::getsockopt_int(fd, libc::SOL_SOCKET, libc::SO_ACCEPTCONN).unwrap_or(0) != 0 {
        return non("listening");
    }
    if sys::local_port(fd).unwrap_or(0) != 0 {
        return non("already bound");
    }
    Probe::Trackable
}

pub type RecordRef = Arc<Mutex<SocketRecord>>;

/// Operator-facing summary of one record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecordSummary {
    pub pid: i32,
    pub fd: i32,
    pub status: SocketStatus,
    pub options: usize,
    pub spoofed_peer: Option<SocketAddrV4>,
    pub switched_to: Option<SocketAddrV4>,
}

/// Shared map of live records. Each record carries its own lock so
/// operations on one socket are serialized while distinct sockets proceed
/// independently.
#[derive(Debug, Default)]
pub struct SocketRegistry {
    records: Mutex<HashMap<(i32, i32), RecordRef>>,
}

impl SocketRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, pid: i32, fd: i32) -> Option<RecordRef> {
        self.records.lock().unwrap().get(&(pid, fd)).cloned()
    }

    /// Returns the record for (pid, fd), registering it with the result of
    /// `probe` when absent.
    pub fn ensure_registered_with(
        &self,
        pid: i32,
        fd: i32,
        probe: impl FnOnce() -> Probe,
    ) -> RecordRef {
        if let Some(r) = self.get(pid, fd) {
            return r;
        }
        let mut rec = SocketRecord::new(pid, fd);
        match probe() {
            Probe::Trackable => rec.transition(SocketStatus::Trackable),
            Probe::NonSwitchable(why) => {
                rec.reason = Some(why);
                rec.transition(SocketStatus::NonSwitchable)
            }
        }
        .expect("Unknown leads to both probe outcomes");
        let rec = Arc::new(Mutex::new(rec));
        self.records.lock().unwrap().entry((pid, fd)).or_insert(rec).clone()
    }

    /// Lazy registration through the target's descriptor table.
    pub fn ensure_registered(&self, pid: i32, fd: i32, access: &dyn TargetAccess) -> RecordRef {
        self.ensure_registered_with(pid, fd, || match access.acquire_fd(pid, fd) {
            Ok(remote) => probe_fd(std::os::fd::AsRawFd::as_raw_fd(&remote)),
            Err(e) => Probe::NonSwitchable(format!("fd not available: {e}")),
        })
    }

    /// Closes and evicts the record. Returns the final record, if any.
    pub fn on_close(&self, pid: i32, fd: i32) -> Option<SocketRecord> {
        let rec = self.records.lock().unwrap().remove(&(pid, fd))?;
        let mut guard = rec.lock().unwrap();
        if guard.status.can_become(SocketStatus::Closed) {
            guard.transition(SocketStatus::Closed).ok();
        }
        Some(guard.clone())
    }

    /// Drops every record of an exited process.
    pub fn evict_process(&self, pid: i32) -> usize {
        let mut map = self.records.lock().unwrap();
        let before = map.len();
        map.retain(|(p, _), _| *p != pid);
        before - map.len()
    }

    /// Distinct processes with live records.
    pub fn pids(&self) -> Vec<i32> {
        let mut pids: Vec<i32> = self.records.lock().unwrap().keys().map(|(p, _)| *p).collect();
        pids.sort_unstable();
        pids.dedup();
        pids
    }

    pub fn len(&self) -> usize {
        self.records.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn summaries(&self) -> Vec<RecordSummary> {
        let records: Vec<RecordRef> = self.records.lock().unwrap().values().cloned().collect();
        let mut out: Vec<RecordSummary> = records
            .iter()
            .map(|r| {
                let r = lock(r);
                RecordSummary {
                    pid: r.pid,
                    fd: r.fd,
                    status: r.status,
                    options: r.options.len(),
                    spoofed_peer: r.spoofed_peer,
                    switched_to: r.switch_outcome.map(|o| o.endpoint),
                }
            })
            .collect();
        out.sort_by_key(|s| (s.pid, s.fd));
        out
    }

    /// Records whose status is inconsistent with their switch bookkeeping.
    /// Empty in every reachable state.
    pub fn audit(&self) -> Vec<RecordSummary> {
        let records: Vec<RecordRef> = self.records.lock().unwrap().values().cloned().collect();
        let bad: Vec<(i32, i32)> = records
            .iter()
            .filter_map(|r| {
                let r = lock(r);
                let switched = r.history.contains(&SocketStatus::Switched);
                let consistent = switched == r.switch_outcome.is_some()
                    && (r.spoofed_peer.is_none() || switched)
                    && r.history.windows(2).all(|w| w[0].can_become(w[1]));
                (!consistent).then_some((r.pid, r.fd))
            })
            .collect();
        self.summaries().into_iter().filter(|s| bad.contains(&(s.pid, s.fd))).collect()
    }
}

/// Locks a record, recovering from a poisoned lock left by a panicking
/// handler.
pub fn lock(rec: &RecordRef) -> MutexGuard<'_, SocketRecord> {
    rec.lock().unwrap_or_else(|p| p.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::os::fd::AsRawFd;
    use proptest::prelude::*;

    #[test]
    fn classification_partitions_all_names() {
        assert_eq!(classify_syscall("connect"), Some(SyscallClass::Connection));
        assert_eq!(classify_syscall("sendfile"), Some(SyscallClass::Communication));
        assert_eq!(classify_syscall("getpid"), None);
        let mut names: Vec<&str> = CLASSIFIED_SYSCALLS.iter().map(|(n, _)| *n).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 26);
        for class in SyscallClass::ALL {
            assert!(CLASSIFIED_SYSCALLS.iter().any(|(_, c)| *c == class), "{class} empty");
        }
    }

    #[test]
    fn hooked_classes_match_filter() {
        let mut from_classes: Vec<&str> = CLASSIFIED_SYSCALLS
            .iter()
            .filter(|(_, c)| c.is_hooked())
            .map(|(n, _)| *n)
            .collect();
        let mut from_filter: Vec<&str> =
            crate::gateway::HOOKED_SYSCALLS.iter().map(|(_, n)| *n).collect();
        from_classes.sort_unstable();
        from_filter.sort_unstable();
        assert_eq!(from_classes, from_filter);
    }

    #[test]
    fn transition_table() {
        use SocketStatus::*;
        let all = [Unknown, NonSwitchable, Trackable, Switched, Closed];
        let allowed: Vec<_> = all
            .iter()
            .flat_map(|a| all.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| a.can_become(*b))
            .collect();
        assert_eq!(
            allowed,
            vec![
                (Unknown, NonSwitchable),
                (Unknown, Trackable),
                (Trackable, NonSwitchable),
                (Trackable, Switched),
                (Trackable, Closed),
                (Switched, Closed),
            ]
        );
    }

    #[test]
    fn options_only_on_trackable() {
        let mut r = SocketRecord::new(1, 3);
        let opt = OptionKind::Fcntl { cmd: libc::F_SETFL, arg: libc::O_NONBLOCK as i64 };
        assert_eq!(r.record_option(opt.clone()), Err(StateError::NotTrackable));
        r.transition(SocketStatus::Trackable).unwrap();
        assert_eq!(r.record_option(opt.clone()), Ok(0));
        assert_eq!(r.record_option(opt.clone()), Ok(1));
        assert!(r.mark_non_switchable("ioctl"));
        assert!(r.options.is_empty());
        assert_eq!(r.record_option(opt), Err(StateError::NotTrackable));
    }

    #[test]
    fn nonswitchable_record_cannot_close_but_is_evicted() {
        let reg = SocketRegistry::new();
        reg.ensure_registered_with(1, 3, || Probe::NonSwitchable("pipe".into()));
        let last = reg.on_close(1, 3).unwrap();
        assert_eq!(last.status, SocketStatus::NonSwitchable);
        assert!(reg.get(1, 3).is_none());
        assert!(reg.on_close(1, 3).is_none());
    }

    #[test]
    fn fd_reuse_starts_fresh() {
        let reg = SocketRegistry::new();
        let r = reg.ensure_registered_with(1, 3, || Probe::Trackable);
        lock(&r).record_option(OptionKind::Fcntl { cmd: libc::F_SETFL, arg: 0 }).unwrap();
        reg.on_close(1, 3);
        let r2 = reg.ensure_registered_with(1, 3, || Probe::Trackable);
        assert!(lock(&r2).options.is_empty());
        assert!(!Arc::ptr_eq(&r, &r2));
    }

    #[test]
    fn probe_classifies_real_descriptors() {
        let (a, _b) = std::os::unix::net::UnixStream::pair().unwrap();
        assert_eq!(probe_fd(a.as_raw_fd()), Probe::NonSwitchable("not AF_INET".into()));
        let f = std::fs::File::open("/proc/self/status").unwrap();
        assert_eq!(probe_fd(f.as_raw_fd()), Probe::NonSwitchable("not a socket".into()));
        let fresh = sys::tcp4_socket().unwrap();
        assert_eq!(probe_fd(fresh.as_raw_fd()), Probe::Trackable);
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        assert_eq!(probe_fd(listener.as_raw_fd()), Probe::NonSwitchable("listening".into()));
        let conn = std::net::TcpStream::connect(listener.local_addr().unwrap()).unwrap();
        assert_eq!(probe_fd(conn.as_raw_fd()), Probe::NonSwitchable("already connected".into()));
        let udp = std::net::UdpSocket::bind("127.0.0.1:0").unwrap();
        assert_eq!(probe_fd(udp.as_raw_fd()), Probe::NonSwitchable("not SOCK_STREAM".into()));
    }

    #[test]
    fn registration_through_target_access() {
        let broker = crate::memory::MemoryBroker::new(None);
        let me = std::process::id() as i32;
        let reg = SocketRegistry::new();
        let fresh = sys::tcp4_socket().unwrap();
        let r = reg.ensure_registered(me, fresh.as_raw_fd(), &broker);
        assert_eq!(lock(&r).status, SocketStatus::Trackable);
        let r = reg.ensure_registered(me, 100_000, &broker);
        assert_eq!(lock(&r).status, SocketStatus::NonSwitchable);
    }

    fn readback(fd: RawFd) -> (i32, i32) {
        (
            sys::fcntl_getfl(fd).unwrap() & libc::O_NONBLOCK,
            sys::getsockopt_int(fd, libc::SOL_SOCKET, libc::SO_SNDBUF).unwrap(),
        )
    }

    #[test]
    fn replay_matches_control_socket() {
        let mut r = SocketRecord::new(1, 3);
        r.transition(SocketStatus::Trackable).unwrap();
        let host = sys::tcp4_socket().unwrap();
        r.replay_options(host.as_raw_fd()).unwrap();
        assert_eq!(readback(host.as_raw_fd()), readback(sys::tcp4_socket().unwrap().as_raw_fd()));

        r.record_option(OptionKind::Setsockopt {
            level: libc::SOL_SOCKET,
            optname: libc::SO_SNDBUF,
            value: 262144i32.to_ne_bytes().to_vec(),
        })
        .unwrap();
        r.record_option(OptionKind::Ioctl {
            request: libc::FIONBIO as u64,
            arg: 1i32.to_ne_bytes().to_vec(),
        })
        .unwrap();
        let host = sys::tcp4_socket().unwrap();
        r.replay_options(host.as_raw_fd()).unwrap();
        let control = sys::tcp4_socket().unwrap();
        sys::setsockopt_raw(control.as_raw_fd(), libc::SOL_SOCKET, libc::SO_SNDBUF, &262144i32.to_ne_bytes()).unwrap();
        sys::fcntl_setfl(control.as_raw_fd(), sys::fcntl_getfl(control.as_raw_fd()).unwrap() | libc::O_NONBLOCK).unwrap();
        let (flags, sndbuf) = readback(host.as_raw_fd());
        assert_eq!((flags, sndbuf), readback(control.as_raw_fd()));
        assert!(sndbuf >= 262144);
    }

    #[test]
    fn unsupported_ioctl_fails_replay() {
        let mut r = SocketRecord::new(1, 3);
        r.transition(SocketStatus::Trackable).unwrap();
        r.record_option(OptionKind::Ioctl { request: libc::SIOCGIFCONF as u64, arg: vec![] }).unwrap();
        let host = sys::tcp4_socket().unwrap();
        let err = r.replay_options(host.as_raw_fd()).unwrap_err();
        assert_eq!(err.source.raw_os_error(), Some(libc::EOPNOTSUPP));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Register(bool),
        Option,
        Switch,
        NonSwitchable,
        Close,
    }

    fn op() -> impl Strategy<Value = (u8, Op)> {
        let kind = prop_oneof![
            any::<bool>().prop_map(Op::Register),
            Just(Op::Option),
            Just(Op::Switch),
            Just(Op::NonSwitchable),
            Just(Op::Close),
        ];
        (0u8..3, kind)
    }

    proptest! {
        #[test]
        fn random_sequences_stay_legal(ops in proptest::collection::vec(op(), 1..60)) {
            let reg = SocketRegistry::new();
            let outcome = SwitchOutcome {
                via: SwitchVia::Connect,
                host_inode: 1,
                endpoint: "192.0.2.1:80".parse().unwrap(),
            };
            for (fd, op) in ops {
                let fd = fd as i32;
                match op {
                    Op::Register(t) => {
                        reg.ensure_registered_with(1, fd, || if t { Probe::Trackable } else { Probe::NonSwitchable("x".into()) });
                    }
                    Op::Option => if let Some(r) = reg.get(1, fd) {
                        let _ = lock(&r).record_option(OptionKind::Fcntl { cmd: libc::F_SETFL, arg: 0 });
                    },
                    Op::Switch => if let Some(r) = reg.get(1, fd) {
                        let _ = lock(&r).mark_switched(outcome, None);
                    },
                    Op::NonSwitchable => if let Some(r) = reg.get(1, fd) {
                        lock(&r).mark_non_switchable("x");
                    },
                    Op::Close => {
                        if let Some(last) = reg.on_close(1, fd) {
                            prop_assert!(last.history.windows(2).all(|w| w[0].can_become(w[1])));
                        }
                        if let Some(r) = reg.get(1, fd) {
                            prop_assert!(false, "record survived close: {:?}", lock(&r));
                        }
                    }
                }
                prop_assert!(reg.audit().is_empty());
            }
        }
    }
}
