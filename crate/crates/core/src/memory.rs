//! Access to the supervised process: memory reads/writes for syscall
//! arguments and duplication of its file descriptors.
//!
//! `/proc/<pid>/mem` is opened directly when permitted. When the target runs
//! under a different in-container user and the direct open is refused, a
//! short-lived agent process enters the target's user namespace (or takes its
//! credentials), opens the memory file there and passes the descriptor back
//! over a unix socket.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, IoSlice, IoSliceMut, Write};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd, RawFd};
use std::os::unix::fs::{FileExt, MetadataExt, OpenOptionsExt};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use log::{debug, warn};
use nix::sys::socket::{recvmsg, sendmsg, ControlMessage, ControlMessageOwned, MsgFlags};
use thiserror::Error;

use crate::sys::{self, Pidfd};

/// Largest single read; sockaddr- and option-sized buffers only.
pub const MAX_READ: usize = 4096;

#[derive(Debug, Error)]
pub enum MemError {
    #[error("target process is gone")]
    TargetGone,
    #[error("bad address {0:#x} in target")]
    Fault(u64),
    #[error("address {0:#x} is not in a writable mapping")]
    ReadOnlyMapping(u64),
    #[error("read of {0} bytes exceeds the {MAX_READ}-byte limit")]
    TooLarge(usize),
    #[error("{len}-byte write does not fit the original {slot}-byte structure")]
    Oversize { len: usize, slot: usize },
    #[error("permission denied opening target memory")]
    PermissionDenied,
    #[error("memory agent failed: {0}")]
    AgentFailed(String),
    #[error("switching disabled for pid {0}")]
    Disabled(i32),
    #[error("target fd not available: {0}")]
    NotAvailable(io::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MemSource {
    DirectProcMem,
    AgentProvided,
}

/// An open handle on a target's address space.
#[derive(Debug)]
pub struct MemHandle {
    pid: i32,
    source: MemSource,
    file: File,
}

impl MemHandle {
    pub fn open_direct(pid: i32) -> Result<Self, MemError> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .custom_flags(libc::O_CLOEXEC)
            .open(format!("/proc/{pid}/mem"))
            .map_err(|e| match e.raw_os_error() {
                Some(libc::EACCES | libc::EPERM) => MemError::PermissionDenied,
                Some(libc::ENOENT | libc::ESRCH) => MemError::TargetGone,
                _ => MemError::Io(e),
            })?;
        Ok(Self { pid, source: MemSource::DirectProcMem, file })
    }

    pub fn from_fd(pid: i32, fd: OwnedFd, source: MemSource) -> Self {
        Self { pid, source, file: File::from(fd) }
    }

    pub fn pid(&self) -> i32 {
        self.pid
    }

    pub fn source(&self) -> MemSource {
        self.source
    }

    fn classify(&self, addr: u64, e: Option<io::Error>) -> MemError {
        if !sys::process_alive(self.pid) {
            return MemError::TargetGone;
        }
        match e.and_then(|e| e.raw_os_error()) {
            Some(libc::ESRCH) => MemError::TargetGone,
            _ => MemError::Fault(addr),
        }
    }

    /// Reads exactly `len` bytes at `addr`.
    pub fn read_mem(&self, addr: u64, len: usize) -> Result<Vec<u8>, MemError> {
        if len > MAX_READ {
            return Err(MemError::TooLarge(len));
        }
        if addr == 0 {
            return Err(MemError::Fault(0));
        }
        let mut buf = vec![0u8; len];
        let mut done = 0;
        while done < len {
            match self.file.read_at(&mut buf[done..], addr + done as u64) {
                Ok(0) => return Err(self.classify(addr, None)),
                Ok(n) => done += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(self.classify(addr, Some(e))),
            }
        }
        Ok(buf)
    }

    /// Overwrites a structure previously read at `addr`. The new encoding may
    /// not be longer than `original_len`.
    pub fn write_mem(&self, addr: u64, bytes: &[u8], original_len: usize) -> Result<(), MemError> {
        if bytes.len() > original_len {
            return Err(MemError::Oversize { len: bytes.len(), slot: original_len });
        }
        if addr == 0 {
            return Err(MemError::Fault(0));
        }
        if !mapping_writable(self.pid, addr, bytes.len())? {
            return Err(MemError::ReadOnlyMapping(addr));
        }
        let mut done = 0;
        while done < bytes.len() {
            match self.file.write_at(&bytes[done..], addr + done as u64) {
                Ok(0) => return Err(self.classify(addr, None)),
                Ok(n) => done += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) if e.raw_os_error() == Some(libc::EPERM) => {
                    return Err(MemError::ReadOnlyMapping(addr))
                }
                Err(e) => return Err(self.classify(addr, Some(e))),
            }
        }
        Ok(())
    }
}

/// True when `[addr, addr+len)` lies inside one writable mapping.
fn mapping_writable(pid: i32, addr: u64, len: usize) -> Result<bool, MemError> {
    let maps = fs::read_to_string(format!("/proc/{pid}/maps")).map_err(|_| MemError::TargetGone)?;
    let end = addr.saturating_add(len as u64);
    for line in maps.lines() {
        let mut fields = line.split_whitespace();
        let (Some(range), Some(perms)) = (fields.next(), fields.next()) else { continue };
        let Some((lo, hi)) = range.split_once('-') else { continue };
        let (Ok(lo), Ok(hi)) = (u64::from_str_radix(lo, 16), u64::from_str_radix(hi, 16)) else {
            continue;
        };
        if addr >= lo && addr < hi {
            return Ok(end <= hi && perms.as_bytes().get(1) == Some(&b'w'));
        }
    }
    Err(MemError::Fault(addr))
}

/// A duplicate of a target descriptor held by the supervisor.
#[derive(Debug)]
pub struct RemoteFd {
    pub pid: i32,
    pub remote_fd: i32,
    pub local: OwnedFd,
}

impl AsRawFd for RemoteFd {
    fn as_raw_fd(&self) -> RawFd {
        self.local.as_raw_fd()
    }
}

/// How memory handles are obtained.
#[derive(Debug, Clone)]
pub struct AgentConfig {
    /// Program and leading arguments of the agent; `--socket PATH --pid N`
    /// are appended.
    pub command: Vec<String>,
    pub runtime_dir: PathBuf,
    pub timeout: Duration,
    /// Skip the direct open and always go through the agent.
    pub force: bool,
}

impl AgentConfig {
    pub fn for_exe(exe: impl Into<PathBuf>, runtime_dir: impl Into<PathBuf>) -> Self {
        Self {
            command: vec![exe.into().display().to_string(), "mem-agent".into()],
            runtime_dir: runtime_dir.into(),
            timeout: Duration::from_secs(5),
            force: false,
        }
    }
}

/// Memory and descriptor access to supervised processes, as used by the
/// switch engine. Implemented by [`MemoryBroker`]; tests wrap it to inject
/// faults.
pub trait TargetAccess: Send + Sync {
    fn read_mem(&self, pid: i32, addr: u64, len: usize) -> Result<Vec<u8>, MemError>;
    fn write_mem(&self, pid: i32, addr: u64, bytes: &[u8], original_len: usize)
        -> Result<(), MemError>;
    fn acquire_fd(&self, pid: i32, remote_fd: i32) -> Result<RemoteFd, MemError>;
    /// Drops cached state for an exited process.
    fn forget(&self, pid: i32);
}

/// Caches per-process memory handles and pidfds; spawns agents lazily.
pub struct MemoryBroker {
    agent: Option<AgentConfig>,
    handles: Mutex<HashMap<i32, Arc<MemHandle>>>,
    pidfds: Mutex<HashMap<i32, Arc<Pidfd>>>,
    disabled: Mutex<HashSet<i32>>,
    agents_spawned: AtomicU64,
}

impl MemoryBroker {
    pub fn new(agent: Option<AgentConfig>) -> Self {
        Self {
            agent,
            handles: Mutex::new(HashMap::new()),
            pidfds: Mutex::new(HashMap::new()),
            disabled: Mutex::new(HashSet::new()),
            agents_spawned: AtomicU64::new(0),
        }
    }

    pub fn agents_spawned(&self) -> u64 {
        self.agents_spawned.load(Ordering::Relaxed)
    }

    pub fn is_disabled(&self, pid: i32) -> bool {
        self.disabled.lock().unwrap().contains(&pid)
    }

    /// Returns a cached or newly opened handle for `pid`.
    pub fn handle(&self, pid: i32) -> Result<Arc<MemHandle>, MemError> {
        if self.is_disabled(pid) {
            return Err(MemError::Disabled(pid));
        }
        if let Some(h) = self.handles.lock().unwrap().get(&pid) {
            return Ok(h.clone());
        }
        let force = self.agent.as_ref().is_some_and(|a| a.force);
        let opened = if force { Err(MemError::PermissionDenied) } else { MemHandle::open_direct(pid) };
        let handle = match opened {
            Ok(h) => h,
            Err(MemError::PermissionDenied) => match &self.agent {
                Some(cfg) => {
                    self.agents_spawned.fetch_add(1, Ordering::Relaxed);
                    match open_mem_via_agent(cfg, pid) {
                        Ok(h) => h,
                        Err(e) => {
                            warn!("memory agent for pid {pid} failed, switching disabled: {e}");
                            self.disabled.lock().unwrap().insert(pid);
                            return Err(e);
                        }
                    }
                }
                None => {
                    self.disabled.lock().unwrap().insert(pid);
                    return Err(MemError::PermissionDenied);
                }
            },
            Err(e) => return Err(e),
        };
        let handle = Arc::new(handle);
        self.handles.lock().unwrap().insert(pid, handle.clone());
        Ok(handle)
    }

    fn pidfd(&self, pid: i32) -> io::Result<Arc<Pidfd>> {
        if let Some(p) = self.pidfds.lock().unwrap().get(&pid) {
            return Ok(p.clone());
        }
        let p = Arc::new(Pidfd::open(pid)?);
        self.pidfds.lock().unwrap().insert(pid, p.clone());
        Ok(p)
    }
}

impl TargetAccess for MemoryBroker {
    fn read_mem(&self, pid: i32, addr: u64, len: usize) -> Result<Vec<u8>, MemError> {
        self.handle(pid)?.read_mem(addr, len)
    }

    fn write_mem(
        &self,
        pid: i32,
        addr: u64,
        bytes: &[u8],
        original_len: usize,
    ) -> Result<(), MemError> {
        self.handle(pid)?.write_mem(addr, bytes, original_len)
    }

    fn acquire_fd(&self, pid: i32, remote_fd: i32) -> Result<RemoteFd, MemError> {
        let pidfd = self.pidfd(pid).map_err(MemError::NotAvailable)?;
        let local = pidfd.get_fd(remote_fd).map_err(MemError::NotAvailable)?;
        Ok(RemoteFd { pid, remote_fd, local })
    }

    fn forget(&self, pid: i32) {
        self.handles.lock().unwrap().remove(&pid);
        self.pidfds.lock().unwrap().remove(&pid);
        self.disabled.lock().unwrap().remove(&pid);
    }
}

static AGENT_SEQ: AtomicU64 = AtomicU64::new(0);

/// Spawns the agent for `pid` and receives its `/proc/<pid>/mem` descriptor.
pub fn open_mem_via_agent(cfg: &AgentConfig, pid: i32) -> Result<MemHandle, MemError> {
    let fail = |msg: String| MemError::AgentFailed(msg);
    let (prog, args) = cfg.command.split_first().ok_or_else(|| fail("empty agent command".into()))?;
    fs::create_dir_all(&cfg.runtime_dir).map_err(|e| fail(format!("runtime dir: {e}")))?;
    let seq = AGENT_SEQ.fetch_add(1, Ordering::Relaxed);
    let sock_path =
        cfg.runtime_dir.join(format!("mem-agent-{}-{pid}-{seq}.sock", std::process::id()));
    let _ = fs::remove_file(&sock_path);
    let listener = UnixListener::bind(&sock_path).map_err(|e| fail(format!("bind: {e}")))?;
    let _cleanup = RemoveOnDrop(sock_path.clone());
    listener.set_nonblocking(true).map_err(|e| fail(e.to_string()))?;

    let mut child = Command::new(prog)
        .args(args)
        .arg("--socket")
        .arg(&sock_path)
        .arg("--pid")
        .arg(pid.to_string())
        .stdin(Stdio::null())
        .spawn()
        .map_err(|e| fail(format!("spawn: {e}")))?;

    let deadline = Instant::now() + cfg.timeout;
    let stream = loop {
        match listener.accept() {
            Ok((s, _)) => break s,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {}
            Err(e) => return Err(fail(format!("accept: {e}"))),
        }
        if let Ok(Some(status)) = child.try_wait() {
            return Err(fail(format!("agent exited before connecting ({status})")));
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            return Err(fail("agent did not connect in time".into()));
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let result = agent_handshake(stream, pid, cfg.timeout);
    let _ = child.wait();
    let fd = result?;
    debug!("agent provided memory fd for pid {pid}");
    Ok(MemHandle::from_fd(pid, fd, MemSource::AgentProvided))
}

fn agent_handshake(mut stream: UnixStream, pid: i32, timeout: Duration) -> Result<OwnedFd, MemError> {
    let fail = |msg: String| MemError::AgentFailed(msg);
    stream.set_nonblocking(false).ok();
    stream.set_read_timeout(Some(timeout)).ok();
    writeln!(stream, "{pid}").map_err(|e| fail(format!("request: {e}")))?;
    let mut buf = [0u8; 256];
    let mut iov = [IoSliceMut::new(&mut buf)];
    let mut cmsg = nix::cmsg_space!([RawFd; 2]);
    let msg = recvmsg::<()>(stream.as_raw_fd(), &mut iov, Some(&mut cmsg), MsgFlags::MSG_CMSG_CLOEXEC)
        .map_err(|e| fail(format!("reply: {e}")))?;
    let mut fds = Vec::new();
    if let Ok(cmsgs) = msg.cmsgs() {
        for c in cmsgs {
            if let ControlMessageOwned::ScmRights(got) = c {
                // SAFETY: freshly received descriptors.
                fds.extend(got.into_iter().map(|fd| unsafe { OwnedFd::from_raw_fd(fd) }));
            }
        }
    }
    let n = msg.bytes;
    let text = String::from_utf8_lossy(&buf[..n]).to_string();
    match fds.len() {
        1 => Ok(fds.pop().unwrap()),
        _ if n == 0 => Err(fail("agent hung up mid-handshake".into())),
        _ => Err(fail(format!("agent reported: {}", text.trim()))),
    }
}

struct RemoveOnDrop(PathBuf);

impl Drop for RemoveOnDrop {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn userns_inode(pid: &str) -> io::Result<u64> {
    Ok(fs::metadata(format!("/proc/{pid}/ns/user"))?.ino())
}

/// Agent side of the protocol. Must run in a freshly exec'd, single-threaded
/// process: joining a user namespace is refused for multithreaded callers.
pub fn run_mem_agent(socket: &Path, target_pid: i32) -> io::Result<()> {
    let stream = UnixStream::connect(socket)?;

    let target_ns = userns_inode(&target_pid.to_string())?;
    if target_ns != userns_inode("self")? {
        let ns = File::open(format!("/proc/{target_pid}/ns/user"))?;
        nix::sched::setns(&ns, nix::sched::CloneFlags::CLONE_NEWUSER)?;
    } else if nix::unistd::geteuid().is_root() {
        let (uid, gid) = sys::creds_of(target_pid)?;
        let gid = nix::unistd::Gid::from_raw(gid);
        let uid = nix::unistd::Uid::from_raw(uid);
        nix::unistd::setgroups(&[gid])?;
        nix::unistd::setresgid(gid, gid, gid)?;
        nix::unistd::setresuid(uid, uid, uid)?;
    }

    let mut line = String::new();
    BufReader::new(&stream).read_line(&mut line)?;
    let requested: i32 = line
        .trim()
        .parse()
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, "bad request line"))?;
    if requested != target_pid {
        return reply_error(&stream, "pid mismatch");
    }
    match OpenOptions::new()
        .read(true)
        .write(true)
        .custom_flags(libc::O_CLOEXEC)
        .open(format!("/proc/{requested}/mem"))
    {
        Ok(f) => {
            let fds = [f.as_raw_fd()];
            let iov = [IoSlice::new(b"OK")];
            sendmsg::<()>(stream.as_raw_fd(), &iov, &[ControlMessage::ScmRights(&fds)], MsgFlags::empty(), None)?;
            Ok(())
        }
        Err(e) => reply_error(&stream, &e.to_string()),
    }
}

fn reply_error(mut stream: &UnixStream, msg: &str) -> io::Result<()> {
    stream.write_all(format!("ERR {msg}").as_bytes())
}
