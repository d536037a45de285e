//! Seccomp user-notification channel: handoff, event intake and responses.

use std::collections::HashSet;
use std::fs;
use std::io::{self, IoSlice, IoSliceMut, Read, Write};
use std::os::fd::{AsRawFd, BorrowedFd, FromRawFd, OwnedFd, RawFd};
use std::os::unix::fs::FileTypeExt;
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use log::{debug, warn};
use nix::poll::{poll, PollFd, PollFlags, PollTimeout};
use nix::sys::socket::{recvmsg, sendmsg, ControlMessage, ControlMessageOwned, MsgFlags};
use thiserror::Error;

use crate::sys::seccomp::{
    self, SeccompNotif, SeccompNotifAddfd, SeccompNotifResp, SECCOMP_ADDFD_FLAG_SETFD,
    SECCOMP_USER_NOTIF_FLAG_CONTINUE,
};

/// Ack byte returned to the runtime after a successful handoff.
pub const HANDOFF_ACK: u8 = 0x4f;

/// Syscalls routed to the supervisor: the Configuration, Connection,
/// Status and Close classes. Creation, Derivation and Communication are
/// never hooked.
pub const HOOKED_SYSCALLS: &[(i64, &str)] = &[
    (libc::SYS_fcntl, "fcntl"),
    (libc::SYS_setsockopt, "setsockopt"),
    (libc::SYS_ioctl, "ioctl"),
    (libc::SYS_connect, "connect"),
    (libc::SYS_bind, "bind"),
    (libc::SYS_getsockopt, "getsockopt"),
    (libc::SYS_getsockname, "getsockname"),
    (libc::SYS_getpeername, "getpeername"),
    (libc::SYS_close, "close"),
    (libc::SYS_shutdown, "shutdown"),
];

pub fn hooked_numbers() -> Vec<i64> {
    HOOKED_SYSCALLS.iter().map(|(nr, _)| *nr).collect()
}

pub fn syscall_name(nr: i64) -> Option<&'static str> {
    HOOKED_SYSCALLS.iter().find(|(n, _)| *n == nr).map(|(_, name)| *name)
}

pub fn notify_filter() -> Vec<seccomp::SockFilter> {
    seccomp::build_notify_filter(&hooked_numbers())
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("seccomp handoff failed: {0}")]
    HandoffFailed(String),
    #[error("kernel lacks SECCOMP_IOCTL_NOTIF_ADDFD; refusing to start")]
    UnsupportedKernel,
    #[error("notification channel closed")]
    ChannelClosed,
    #[error("notification {0:#x} is no longer valid")]
    StaleCookie(u64),
    #[error("notification {0:#x} already answered")]
    AlreadyResponded(u64),
    #[error("an error response cannot continue the syscall or inject an fd")]
    InvalidResponse,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One intercepted syscall.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NotificationEvent {
    pub cookie: u64,
    /// Thread-group id of the caller.
    pub pid: i32,
    pub tid: i32,
    pub syscall_nr: i64,
    pub args: [u64; 6],
    pub arch: u32,
}

impl NotificationEvent {
    pub fn syscall_name(&self) -> Option<&'static str> {
        syscall_name(self.syscall_nr)
    }

    /// First argument as a file descriptor.
    pub fn fd_arg(&self) -> i32 {
        self.args[0] as i32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseKind {
    Continue,
    Success(i64),
    Error(i32),
}

/// Descriptor to place into the target before the response is sent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectFd {
    pub host_fd: RawFd,
    pub target_fd: i32,
    pub replace_existing: bool,
    pub cloexec: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Response {
    pub kind: ResponseKind,
    pub injected_fd: Option<InjectFd>,
}

impl Response {
    pub fn continue_syscall() -> Self {
        Self { kind: ResponseKind::Continue, injected_fd: None }
    }

    pub fn success(val: i64) -> Self {
        Self { kind: ResponseKind::Success(val), injected_fd: None }
    }

    pub fn error(errno: i32) -> Self {
        Self { kind: ResponseKind::Error(errno), injected_fd: None }
    }

    pub fn with_injected(mut self, inject: InjectFd) -> Self {
        self.injected_fd = Some(inject);
        self
    }

    fn is_valid(&self) -> bool {
        !matches!((self.kind, self.injected_fd), (ResponseKind::Error(_), Some(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readiness {
    Ready,
    Timeout,
    Hangup,
}

/// The kernel notification interface, abstracted so tests can mask features.
pub trait NotifyDevice: Send + Sync {
    fn poll(&self, timeout: Duration) -> io::Result<Readiness>;
    fn recv(&self) -> io::Result<SeccompNotif>;
    fn send(&self, resp: &SeccompNotifResp) -> io::Result<()>;
    fn id_valid(&self, id: u64) -> bool;
    fn addfd(&self, req: &SeccompNotifAddfd) -> io::Result<i32>;
    /// Ok when fd injection is available.
    fn probe_addfd(&self) -> io::Result<()>;
}

/// The real listener fd returned by `SECCOMP_FILTER_FLAG_NEW_LISTENER`.
#[derive(Debug)]
pub struct SeccompListener(OwnedFd);

impl SeccompListener {
    pub fn new(fd: OwnedFd) -> Self {
        Self(fd)
    }
}

impl AsRawFd for SeccompListener {
    fn as_raw_fd(&self) -> RawFd {
        self.0.as_raw_fd()
    }
}

impl NotifyDevice for SeccompListener {
    fn poll(&self, timeout: Duration) -> io::Result<Readiness> {
        // SAFETY: the fd is owned by self for the duration of the call.
        let fd = unsafe { BorrowedFd::borrow_raw(self.0.as_raw_fd()) };
        let mut fds = [PollFd::new(fd, PollFlags::POLLIN)];
        let ms = timeout.as_millis().min(i32::MAX as u128) as i32;
        match poll(&mut fds, PollTimeout::try_from(ms).unwrap_or(PollTimeout::MAX)) {
            Ok(0) => Ok(Readiness::Timeout),
            Ok(_) => {
                let rev = fds[0].revents().unwrap_or(PollFlags::empty());
                if rev.contains(PollFlags::POLLIN) {
                    Ok(Readiness::Ready)
                } else if rev.intersects(PollFlags::POLLHUP | PollFlags::POLLERR) {
                    Ok(Readiness::Hangup)
                } else {
                    Ok(Readiness::Timeout)
                }
            }
            Err(nix::errno::Errno::EINTR) => Ok(Readiness::Timeout),
            Err(e) => Err(e.into()),
        }
    }

    fn recv(&self) -> io::Result<SeccompNotif> {
        seccomp::notif_recv(&self.0)
    }

    fn send(&self, resp: &SeccompNotifResp) -> io::Result<()> {
        seccomp::notif_send(&self.0, resp)
    }

    fn id_valid(&self, id: u64) -> bool {
        seccomp::notif_id_valid(&self.0, id)
    }

    fn addfd(&self, req: &SeccompNotifAddfd) -> io::Result<i32> {
        seccomp::notif_addfd(&self.0, req)
    }

    fn probe_addfd(&self) -> io::Result<()> {
        // An invalid source fd is rejected with EBADF only after the kernel
        // has recognised the ioctl; older kernels answer EINVAL/ENOTTY.
        let req = SeccompNotifAddfd { srcfd: u32::MAX, ..Default::default() };
        match seccomp::notif_addfd(&self.0, &req) {
            Err(e) if e.raw_os_error() == Some(libc::EBADF) => Ok(()),
            Err(e) => Err(e),
            Ok(_) => Ok(()),
        }
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ChannelStats {
    pub received: u64,
    pub responded: u64,
    pub stale: u64,
}

/// One response attempt, kept when the audit ledger is enabled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub cookie: u64,
    pub syscall_nr: i64,
    pub response: Option<ResponseKind>,
}

pub struct NotificationChannel<D: NotifyDevice = SeccompListener> {
    device: D,
    pending: Mutex<HashSet<u64>>,
    received: AtomicU64,
    responded: AtomicU64,
    stale: AtomicU64,
    ledger: Option<Mutex<Vec<LedgerEntry>>>,
}

impl<D: NotifyDevice> NotificationChannel<D> {
    /// Wraps a device after confirming it supports fd injection.
    pub fn new(device: D) -> Result<Self, GatewayError> {
        device.probe_addfd().map_err(|e| {
            debug!("addfd probe failed: {e}");
            GatewayError::UnsupportedKernel
        })?;
        Ok(Self {
            device,
            pending: Mutex::new(HashSet::new()),
            received: AtomicU64::new(0),
            responded: AtomicU64::new(0),
            stale: AtomicU64::new(0),
            ledger: None,
        })
    }

    /// Records every event and response attempt for later audit.
    pub fn with_ledger(mut self) -> Self {
        self.ledger = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn device(&self) -> &D {
        &self.device
    }

    pub fn stats(&self) -> ChannelStats {
        ChannelStats {
            received: self.received.load(Ordering::Relaxed),
            responded: self.responded.load(Ordering::Relaxed),
            stale: self.stale.load(Ordering::Relaxed),
        }
    }

    pub fn ledger(&self) -> Vec<LedgerEntry> {
        self.ledger.as_ref().map(|l| l.lock().unwrap().clone()).unwrap_or_default()
    }

    /// Blocks until the next event arrives or the channel closes.
    pub fn next_event(&self) -> Result<NotificationEvent, GatewayError> {
        loop {
            if let Some(ev) = self.next_event_timeout(Duration::from_secs(3600))? {
                return Ok(ev);
            }
        }
    }

    /// Like [`next_event`](Self::next_event) but returns `None` on timeout.
    pub fn next_event_timeout(
        &self,
        timeout: Duration,
    ) -> Result<Option<NotificationEvent>, GatewayError> {
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.device.poll(left)? {
                Readiness::Hangup => return Err(GatewayError::ChannelClosed),
                Readiness::Timeout if left.is_zero() => return Ok(None),
                Readiness::Timeout => continue,
                Readiness::Ready => {}
            }
            let raw = match self.device.recv() {
                Ok(raw) => raw,
                // Target died between poll and recv, or a signal interrupted us.
                Err(e) if matches!(e.raw_os_error(), Some(libc::ENOENT | libc::EINTR)) => continue,
                Err(e) => return Err(e.into()),
            };
            let tid = raw.pid as i32;
            let pid = crate::sys::tgid_of(tid).unwrap_or(tid);
            let ev = NotificationEvent {
                cookie: raw.id,
                pid,
                tid,
                syscall_nr: raw.data.nr as i64,
                args: raw.data.args,
                arch: raw.data.arch,
            };
            self.pending.lock().unwrap().insert(ev.cookie);
            self.received.fetch_add(1, Ordering::Relaxed);
            if let Some(l) = &self.ledger {
                l.lock().unwrap().push(LedgerEntry {
                    cookie: ev.cookie,
                    syscall_nr: ev.syscall_nr,
                    response: None,
                });
            }
            return Ok(Some(ev));
        }
    }

    /// True iff the event is still pending in the kernel and unanswered.
    pub fn validate(&self, event: &NotificationEvent) -> bool {
        self.pending.lock().unwrap().contains(&event.cookie) && self.device.id_valid(event.cookie)
    }

    /// Delivers a response. A failed injection leaves the event pending so
    /// the caller can fall back to another response.
    pub fn respond(
        &self,
        event: &NotificationEvent,
        response: Response,
    ) -> Result<(), GatewayError> {
        if !response.is_valid() {
            return Err(GatewayError::InvalidResponse);
        }
        if !self.pending.lock().unwrap().contains(&event.cookie) {
            return Err(GatewayError::AlreadyResponded(event.cookie));
        }
        if let Some(inj) = response.injected_fd {
            let req = SeccompNotifAddfd {
                id: event.cookie,
                flags: if inj.replace_existing { SECCOMP_ADDFD_FLAG_SETFD } else { 0 },
                srcfd: inj.host_fd as u32,
                newfd: if inj.replace_existing { inj.target_fd as u32 } else { 0 },
                newfd_flags: if inj.cloexec { libc::O_CLOEXEC as u32 } else { 0 },
            };
            if let Err(e) = self.device.addfd(&req) {
                if e.raw_os_error() == Some(libc::ENOENT) {
                    self.finish(event, None, true);
                    return Err(GatewayError::StaleCookie(event.cookie));
                }
                return Err(e.into());
            }
        }
        let resp = match response.kind {
            ResponseKind::Continue => SeccompNotifResp {
                id: event.cookie,
                val: 0,
                error: 0,
                flags: SECCOMP_USER_NOTIF_FLAG_CONTINUE,
            },
            ResponseKind::Success(val) => {
                SeccompNotifResp { id: event.cookie, val, error: 0, flags: 0 }
            }
            ResponseKind::Error(errno) => {
                SeccompNotifResp { id: event.cookie, val: 0, error: -errno.abs(), flags: 0 }
            }
        };
        match self.device.send(&resp) {
            Ok(()) => {
                self.finish(event, Some(response.kind), false);
                Ok(())
            }
            Err(e) if e.raw_os_error() == Some(libc::ENOENT) => {
                self.finish(event, Some(response.kind), true);
                Err(GatewayError::StaleCookie(event.cookie))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Responds and swallows stale-cookie failures, which only mean the
    /// target went away while we were deciding.
    pub fn respond_or_log(&self, event: &NotificationEvent, response: Response) {
        match self.respond(event, response) {
            Ok(()) => {}
            Err(GatewayError::StaleCookie(c)) => debug!("notification {c:#x} went stale"),
            Err(e) => warn!("failed to answer notification {:#x}: {e}", event.cookie),
        }
    }

    fn finish(&self, event: &NotificationEvent, kind: Option<ResponseKind>, stale: bool) {
        self.pending.lock().unwrap().remove(&event.cookie);
        self.responded.fetch_add(1, Ordering::Relaxed);
        if stale {
            self.stale.fetch_add(1, Ordering::Relaxed);
        }
        if let Some(l) = &self.ledger {
            let mut l = l.lock().unwrap();
            if let Some(entry) =
                l.iter_mut().rev().find(|e| e.cookie == event.cookie && e.response.is_none())
            {
                entry.response = kind.or(Some(ResponseKind::Error(libc::ENOENT)));
            }
        }
    }
}

/// Supervisor side of the runtime handoff socket.
#[derive(Debug)]
pub struct HandoffListener {
    listener: UnixListener,
    path: PathBuf,
}

impl HandoffListener {
    pub fn bind(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        if let Ok(meta) = fs::symlink_metadata(&path) {
            if meta.file_type().is_socket() {
                let _ = fs::remove_file(&path);
            }
        }
        let listener = UnixListener::bind(&path).map_err(|e| {
            GatewayError::HandoffFailed(format!("cannot listen on {}: {e}", path.display()))
        })?;
        Ok(Self { listener, path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// True once a runtime connection is pending; false after `timeout`.
    pub fn wait_ready(&self, timeout: Duration) -> Result<bool, GatewayError> {
        // SAFETY: fd owned by self.listener.
        let fd = unsafe { BorrowedFd::borrow_raw(self.listener.as_raw_fd()) };
        let mut fds = [PollFd::new(fd, PollFlags::POLLIN)];
        let ms = timeout.as_millis().min(i32::MAX as u128) as i32;
        let n = poll(&mut fds, PollTimeout::try_from(ms).unwrap_or(PollTimeout::MAX))
            .map_err(|e| GatewayError::HandoffFailed(e.to_string()))?;
        Ok(n > 0)
    }

    /// Waits for the runtime to connect and hand over the listener fd.
    pub fn accept(&self, timeout: Option<Duration>) -> Result<OwnedFd, GatewayError> {
        if let Some(t) = timeout {
            if !self.wait_ready(t)? {
                return Err(GatewayError::HandoffFailed("timed out waiting for runtime".into()));
            }
        }
        let (mut stream, _) =
            self.listener.accept().map_err(|e| GatewayError::HandoffFailed(e.to_string()))?;
        stream.set_read_timeout(Some(Duration::from_secs(10))).ok();
        let fd = receive_one_fd(&stream)?;
        stream
            .write_all(&[HANDOFF_ACK])
            .map_err(|e| GatewayError::HandoffFailed(format!("ack: {e}")))?;
        Ok(fd)
    }
}

impl Drop for HandoffListener {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn receive_one_fd(stream: &UnixStream) -> Result<OwnedFd, GatewayError> {
    let mut buf = [0u8; 4096];
    let mut iov = [IoSliceMut::new(&mut buf)];
    let mut cmsg = nix::cmsg_space!([RawFd; 4]);
    let msg = recvmsg::<()>(stream.as_raw_fd(), &mut iov, Some(&mut cmsg), MsgFlags::MSG_CMSG_CLOEXEC)
        .map_err(|e| GatewayError::HandoffFailed(format!("recvmsg: {e}")))?;
    let mut fds = Vec::new();
    if let Ok(cmsgs) = msg.cmsgs() {
        for c in cmsgs {
            if let ControlMessageOwned::ScmRights(got) = c {
                // SAFETY: SCM_RIGHTS descriptors are freshly installed in our table.
                fds.extend(got.into_iter().map(|fd| unsafe { OwnedFd::from_raw_fd(fd) }));
            }
        }
    }
    match fds.len() {
        1 => Ok(fds.pop().unwrap()),
        0 => Err(GatewayError::HandoffFailed("handoff message carried no fd".into())),
        n => Err(GatewayError::HandoffFailed(format!("expected one fd, got {n}"))),
    }
}

/// Binds `path`, waits for the runtime handoff and returns a live channel.
pub fn attach(
    path: impl AsRef<Path>,
    timeout: Option<Duration>,
) -> Result<NotificationChannel, GatewayError> {
    let listener = HandoffListener::bind(path)?;
    let fd = listener.accept(timeout)?;
    NotificationChannel::new(SeccompListener::new(fd))
}

/// Runtime side of the handoff: sends `notify_fd` and waits for the ack.
pub fn send_notify_fd(path: impl AsRef<Path>, notify_fd: BorrowedFd<'_>) -> io::Result<()> {
    let mut stream = UnixStream::connect(path)?;
    send_fd_with_ack(&mut stream, notify_fd)
}

pub(crate) fn send_fd_with_ack(stream: &mut UnixStream, fd: BorrowedFd<'_>) -> io::Result<()> {
    let raw = [fd.as_raw_fd()];
    let iov = [IoSlice::new(b"b4ns")];
    sendmsg::<()>(stream.as_raw_fd(), &iov, &[ControlMessage::ScmRights(&raw)], MsgFlags::empty(), None)?;
    let mut ack = [0u8; 1];
    stream.read_exact(&mut ack)?;
    if ack[0] != HANDOFF_ACK {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad handoff ack"));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod fake {
    //! In-memory notification device for exercising the channel logic.
    use super::*;
    use std::collections::VecDeque;

    #[derive(Default)]
    pub struct FakeDevice {
        pub queue: Mutex<VecDeque<SeccompNotif>>,
        pub live: Mutex<HashSet<u64>>,
        pub sent: Mutex<Vec<SeccompNotifResp>>,
        pub added: Mutex<Vec<SeccompNotifAddfd>>,
        pub without_addfd: bool,
        pub closed: std::sync::atomic::AtomicBool,
    }

    impl FakeDevice {
        pub fn push(&self, id: u64, nr: i64, args: [u64; 6]) {
            let data = crate::sys::seccomp::SeccompData {
                nr: nr as i32,
                arch: crate::sys::seccomp::AUDIT_ARCH_NATIVE,
                instruction_pointer: 0,
                args,
            };
            // Our own pid so the tgid lookup resolves.
            let pid = std::process::id();
            self.queue.lock().unwrap().push_back(SeccompNotif { id, pid, flags: 0, data });
            self.live.lock().unwrap().insert(id);
        }

        pub fn kill(&self, id: u64) {
            self.live.lock().unwrap().remove(&id);
        }
    }

    impl NotifyDevice for FakeDevice {
        fn poll(&self, _timeout: Duration) -> io::Result<Readiness> {
            if !self.queue.lock().unwrap().is_empty() {
                Ok(Readiness::Ready)
            } else if self.closed.load(Ordering::Relaxed) {
                Ok(Readiness::Hangup)
            } else {
                Ok(Readiness::Timeout)
            }
        }
        fn recv(&self) -> io::Result<SeccompNotif> {
            self.queue.lock().unwrap().pop_front().ok_or_else(|| io::Error::from_raw_os_error(libc::ENOENT))
        }
        fn send(&self, resp: &SeccompNotifResp) -> io::Result<()> {
            if !self.live.lock().unwrap().remove(&resp.id) {
                return Err(io::Error::from_raw_os_error(libc::ENOENT));
            }
            self.sent.lock().unwrap().push(*resp);
            Ok(())
        }
        fn id_valid(&self, id: u64) -> bool {
            self.live.lock().unwrap().contains(&id)
        }
        fn addfd(&self, req: &SeccompNotifAddfd) -> io::Result<i32> {
            if self.without_addfd {
                return Err(io::Error::from_raw_os_error(libc::EINVAL));
            }
            if !self.live.lock().unwrap().contains(&req.id) {
                return Err(io::Error::from_raw_os_error(libc::ENOENT));
            }
            self.added.lock().unwrap().push(*req);
            Ok(req.newfd as i32)
        }
        fn probe_addfd(&self) -> io::Result<()> {
            if self.without_addfd {
                Err(io::Error::from_raw_os_error(libc::EINVAL))
            } else {
                Ok(())
            }
        }
    }
}
