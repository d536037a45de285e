//! Scripted socket client used as a supervised target.
//!
//! A script is a list of steps run against one socket fd, e.g.
//! `socket sndbuf=262144 nonblock connect=10.4.0.2:80 echo=4096 peer close`.
//! Each step prints one JSON line with its result. Syscalls are issued
//! directly so the hooked calls are exactly the ones named by the step.
//! With a trace sink, every syscall is also recorded as a trace event.

use std::io::Write;
use std::net::SocketAddrV4;
use std::os::fd::RawFd;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use xxhash_rust::xxh3::Xxh3;

use crate::net::{decode_sockaddr, to_libc_sockaddr, SockAddr};
use crate::trace::{TraceArgs, TraceEvent};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Socket,
    SndBuf(i32),
    RcvBuf(i32),
    NoDelay,
    /// `SO_SNDTIMEO` in milliseconds; bounds a blocking connect.
    SndTimeo(u64),
    /// `fcntl(F_SETFL, O_NONBLOCK)`.
    NonBlock,
    /// `ioctl(FIONBIO)`.
    Fionbio,
    /// Waits for completion if the socket is non-blocking.
    Connect(SocketAddrV4),
    Bind(SocketAddrV4),
    Listen,
    /// Accepts one connection and continues on the accepted fd.
    Accept,
    /// Writes this many bytes and reads them back, comparing digests.
    Echo(u64),
    /// Echoes everything received until the peer shuts down.
    Serve,
    Peer,
    Local,
    /// Reports non-blocking flag and buffer sizes.
    Readback,
    Shutdown,
    Close,
    SleepMs(u64),
    /// Later failures are reported but no longer end the script.
    KeepGoing,
}

impl FromStr for Step {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, arg) = s.split_once('=').map_or((s, None), |(n, a)| (n, Some(a)));
        let num = |a: Option<&str>| -> Result<u64, String> {
            a.ok_or_else(|| format!("{name} needs a value"))?.parse().map_err(|_| format!("bad value in {s:?}"))
        };
        let addr = |a: Option<&str>| -> Result<SocketAddrV4, String> {
            a.ok_or_else(|| format!("{name} needs an address"))?.parse().map_err(|_| format!("bad address in {s:?}"))
        };
        Ok(match name {
            "socket" => Step::Socket,
            "sndbuf" => Step::SndBuf(num(arg)? as i32),
            "rcvbuf" => Step::RcvBuf(num(arg)? as i32),
            "nodelay" => Step::NoDelay,
            "sndtimeo" => Step::SndTimeo(num(arg)?),
            "nonblock" => Step::NonBlock,
            "fionbio" => Step::Fionbio,
            "connect" => Step::Connect(addr(arg)?),
            "bind" => Step::Bind(addr(arg)?),
            "listen" => Step::Listen,
            "accept" => Step::Accept,
            "echo" => Step::Echo(num(arg)?),
            "serve" => Step::Serve,
            "peer" => Step::Peer,
            "local" => Step::Local,
            "readback" => Step::Readback,
            "shutdown" => Step::Shutdown,
            "close" => Step::Close,
            "sleep" => Step::SleepMs(num(arg)?),
            "keepgoing" => Step::KeepGoing,
            _ => return Err(format!("unknown step {s:?}")),
        })
    }
}

pub fn parse_script(steps: &[String]) -> Result<Vec<Step>, String> {
    steps.iter().map(|s| s.parse()).collect()
}

/// Output of one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepResult {
    pub step: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub errno: Option<i32>,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub data: Value,
}

fn errno() -> i32 {
    std::io::Error::last_os_error().raw_os_error().unwrap_or(0)
}

fn check(ret: libc::c_int) -> Result<libc::c_int, i32> {
    if ret < 0 { Err(errno()) } else { Ok(ret) }
}

struct Recorder<'a> {
    sink: Option<&'a mut dyn Write>,
    pid: i32,
    epoch: Instant,
}

impl Recorder<'_> {
    fn record(&mut self, syscall: &str, args: TraceArgs, ret: i64) {
        if let Some(w) = self.sink.as_deref_mut() {
            let ev = TraceEvent {
                ts: self.epoch.elapsed().as_nanos() as u64,
                pid: self.pid,
                tid: self.pid,
                syscall: syscall.into(),
                args,
                ret,
            };
            let _ = serde_json::to_writer(&mut *w, &ev);
            let _ = w.write_all(b"\n");
        }
    }

    fn fd(&mut self, syscall: &str, fd: RawFd, ret: Result<libc::c_int, i32>) {
        let r = ret.map_or(-1, i64::from);
        self.record(syscall, TraceArgs { fd: Some(fd), ..TraceArgs::default() }, r);
    }
}

fn sockname(fd: RawFd, peer: bool) -> Result<String, i32> {
    let mut ss: libc::sockaddr_storage = unsafe { std::mem::zeroed() };
    let mut len = std::mem::size_of::<libc::sockaddr_storage>() as libc::socklen_t;
    let p = &mut ss as *mut _ as *mut libc::sockaddr;
    let ret = unsafe { if peer { libc::getpeername(fd, p, &mut len) } else { libc::getsockname(fd, p, &mut len) } };
    check(ret)?;
    let bytes = unsafe { std::slice::from_raw_parts(&ss as *const _ as *const u8, len as usize) };
    match decode_sockaddr(bytes) {
        Some(SockAddr::Inet(a)) => Ok(a.to_string()),
        Some(other) => Ok(format!("{other:?}")),
        None => Err(libc::EAFNOSUPPORT),
    }
}

fn getsockopt(fd: RawFd, name: i32) -> Result<i32, i32> {
    crate::sys::getsockopt_int(fd, libc::SOL_SOCKET, name).map_err(|e| e.raw_os_error().unwrap_or(0))
}

fn setsockopt(fd: RawFd, level: i32, name: i32, v: i32) -> Result<libc::c_int, i32> {
    check(unsafe {
        libc::setsockopt(fd, level, name, &v as *const i32 as *const _, std::mem::size_of::<i32>() as libc::socklen_t)
    })
}

fn wait_fd(fd: RawFd, events: libc::c_short) -> Result<libc::c_short, i32> {
    let mut p = libc::pollfd { fd, events, revents: 0 };
    loop {
        match check(unsafe { libc::poll(&mut p, 1, -1) }) {
            Ok(_) => return Ok(p.revents),
            Err(libc::EINTR) => continue,
            Err(e) => return Err(e),
        }
    }
}

fn is_nonblocking(fd: RawFd) -> bool {
    unsafe { libc::fcntl(fd, libc::F_GETFL) & libc::O_NONBLOCK != 0 }
}

fn fill(buf: &mut [u8], seed: u64) {
    for (i, b) in buf.iter_mut().enumerate() {
        *b = (seed.wrapping_mul(31).wrapping_add(i as u64) % 251) as u8;
    }
}

/// Interleaves writes and reads so the peer's echo never stalls on a full
/// buffer. Returns (sent, received, digests equal).
fn echo(fd: RawFd, total: u64) -> Result<(u64, u64, bool), i32> {
    const BLK: usize = 64 * 1024;
    let mut out = vec![0u8; BLK];
    let mut inb = vec![0u8; BLK];
    let (mut sent, mut recvd) = (0u64, 0u64);
    let (mut hs, mut hr) = (Xxh3::new(), Xxh3::new());
    let mut pending = 0usize;
    let mut off = 0usize;
    let mut block = 0u64;
    while recvd < total {
        let mut events = libc::POLLIN;
        if sent < total {
            events |= libc::POLLOUT;
        }
        let rev = wait_fd(fd, events)?;
        if rev & libc::POLLOUT != 0 && sent < total {
            if pending == 0 {
                pending = (total - sent).min(BLK as u64) as usize;
                fill(&mut out[..pending], block);
                hs.update(&out[..pending]);
                block += 1;
                off = 0;
            }
            let n = unsafe { libc::send(fd, out[off..pending].as_ptr() as *const _, pending - off, libc::MSG_NOSIGNAL) };
            match n {
                n if n >= 0 => {
                    off += n as usize;
                    sent += n as u64;
                    if off == pending {
                        pending = 0;
                    }
                }
                _ => match errno() {
                    libc::EAGAIN | libc::EINTR => {}
                    e => return Err(e),
                },
            }
        }
        if rev & (libc::POLLIN | libc::POLLHUP | libc::POLLERR) != 0 {
            let n = unsafe { libc::recv(fd, inb.as_mut_ptr() as *mut _, BLK, 0) };
            match n {
                0 => break,
                n if n > 0 => {
                    hr.update(&inb[..n as usize]);
                    recvd += n as u64;
                }
                _ => match errno() {
                    libc::EAGAIN | libc::EINTR => {}
                    e => return Err(e),
                },
            }
        }
    }
    Ok((sent, recvd, recvd == total && hs.digest() == hr.digest()))
}

fn serve(fd: RawFd) -> Result<u64, i32> {
    let mut buf = vec![0u8; 64 * 1024];
    let mut total = 0u64;
    loop {
        if is_nonblocking(fd) {
            wait_fd(fd, libc::POLLIN)?;
        }
        let n = unsafe { libc::recv(fd, buf.as_mut_ptr() as *mut _, buf.len(), 0) };
        match n {
            0 => return Ok(total),
            n if n > 0 => {
                let mut off = 0usize;
                while off < n as usize {
                    let w = unsafe { libc::send(fd, buf[off..n as usize].as_ptr() as *const _, n as usize - off, libc::MSG_NOSIGNAL) };
                    match w {
                        w if w >= 0 => off += w as usize,
                        _ => match errno() {
                            libc::EAGAIN => {
                                wait_fd(fd, libc::POLLOUT)?;
                            }
                            libc::EINTR => {}
                            e => return Err(e),
                        },
                    }
                }
                total += n as u64;
            }
            _ => match errno() {
                libc::EAGAIN | libc::EINTR => {}
                e => return Err(e),
            },
        }
    }
}

/// Runs `steps`, writing one JSON line per step to `out`. Stops at the
/// first failing step. Returns whether every step succeeded.
pub fn run_script(steps: &[Step], out: &mut dyn Write, trace: Option<&mut dyn Write>) -> bool {
    let mut rec = Recorder { sink: trace, pid: std::process::id() as i32, epoch: Instant::now() };
    let mut fd: RawFd = -1;
    let (mut keep_going, mut all_ok) = (false, true);
    for step in steps {
        let name = format!("{step:?}").to_lowercase().split('(').next().unwrap_or_default().to_string();
        let mut data = Value::Null;
        let res: Result<(), i32> = (|| {
            match *step {
                Step::Socket => {
                    let r = check(unsafe { libc::socket(libc::AF_INET, libc::SOCK_STREAM, 0) });
                    rec.record(
                        "socket",
                        TraceArgs {
                            domain: Some("AF_INET".into()),
                            sock_type: Some("SOCK_STREAM".into()),
                            ..TraceArgs::default()
                        },
                        r.map_or(-1, i64::from),
                    );
                    fd = r?;
                    data = json!({ "fd": fd });
                }
                Step::SndBuf(v) | Step::RcvBuf(v) => {
                    let opt = if matches!(step, Step::SndBuf(_)) { libc::SO_SNDBUF } else { libc::SO_RCVBUF };
                    let r = setsockopt(fd, libc::SOL_SOCKET, opt, v);
                    rec.fd("setsockopt", fd, r);
                    r?;
                }
                Step::NoDelay => {
                    let r = setsockopt(fd, libc::IPPROTO_TCP, libc::TCP_NODELAY, 1);
                    rec.fd("setsockopt", fd, r);
                    r?;
                }
                Step::SndTimeo(ms) => {
                    let tv = libc::timeval { tv_sec: (ms / 1000) as _, tv_usec: ((ms % 1000) * 1000) as _ };
                    let r = check(unsafe {
                        libc::setsockopt(
                            fd,
                            libc::SOL_SOCKET,
                            libc::SO_SNDTIMEO,
                            &tv as *const _ as *const libc::c_void,
                            std::mem::size_of::<libc::timeval>() as libc::socklen_t,
                        )
                    });
                    rec.fd("setsockopt", fd, r);
                    r?;
                }
                Step::NonBlock => {
                    let fl = check(unsafe { libc::fcntl(fd, libc::F_GETFL) });
                    rec.fd("fcntl", fd, fl);
                    let r = check(unsafe { libc::fcntl(fd, libc::F_SETFL, fl? | libc::O_NONBLOCK) });
                    rec.fd("fcntl", fd, r);
                    r?;
                }
                Step::Fionbio => {
                    let mut on: libc::c_int = 1;
                    let r = check(unsafe { libc::ioctl(fd, libc::FIONBIO, &mut on) });
                    rec.fd("ioctl", fd, r);
                    r?;
                }
                Step::Connect(a) => {
                    let sa = to_libc_sockaddr(a);
                    let r = check(unsafe {
                        libc::connect(
                            fd,
                            &sa as *const _ as *const libc::sockaddr,
                            std::mem::size_of::<libc::sockaddr_in>() as libc::socklen_t,
                        )
                    });
                    rec.record(
                        "connect",
                        TraceArgs { fd: Some(fd), addr: Some(a.to_string()), ..TraceArgs::default() },
                        r.map_or(-1, i64::from),
                    );
                    match r {
                        Ok(_) => {}
                        // A blocking connect cut short by SO_SNDTIMEO also
                        // reports EINPROGRESS; only non-blocking sockets wait.
                        Err(libc::EINPROGRESS) if is_nonblocking(fd) => {
                            data = json!({ "in_progress": true });
                            let p = wait_fd(fd, libc::POLLOUT);
                            rec.fd("poll", fd, p.map(|_| 1));
                            p?;
                            let so = getsockopt(fd, libc::SO_ERROR);
                            rec.fd("getsockopt", fd, so.map(|_| 0));
                            match so? {
                                0 => {}
                                e => return Err(e),
                            }
                        }
                        Err(e) => return Err(e),
                    }
                }
                Step::Bind(a) => {
                    let sa = to_libc_sockaddr(a);
                    let r = check(unsafe {
                        libc::bind(
                            fd,
                            &sa as *const _ as *const libc::sockaddr,
                            std::mem::size_of::<libc::sockaddr_in>() as libc::socklen_t,
                        )
                    });
                    rec.record(
                        "bind",
                        TraceArgs { fd: Some(fd), addr: Some(a.to_string()), ..TraceArgs::default() },
                        r.map_or(-1, i64::from),
                    );
                    r?;
                }
                Step::Listen => {
                    let r = check(unsafe { libc::listen(fd, 16) });
                    rec.fd("listen", fd, r);
                    r?;
                    data = json!({ "local": sockname(fd, false).ok() });
                }
                Step::Accept => {
                    if is_nonblocking(fd) {
                        wait_fd(fd, libc::POLLIN)?;
                    }
                    let r = check(unsafe { libc::accept(fd, std::ptr::null_mut(), std::ptr::null_mut()) });
                    rec.fd("accept", fd, r);
                    fd = r?;
                    data = json!({ "fd": fd, "peer": sockname(fd, true).ok() });
                }
                Step::Echo(n) => {
                    let (sent, received, digest_ok) = echo(fd, n)?;
                    rec.fd("sendto", fd, Ok(sent.min(i32::MAX as u64) as i32));
                    rec.fd("recvfrom", fd, Ok(received.min(i32::MAX as u64) as i32));
                    data = json!({ "sent": sent, "received": received, "digest_ok": digest_ok });
                    if !digest_ok {
                        return Err(libc::EIO);
                    }
                }
                Step::Serve => {
                    let echoed = serve(fd)?;
                    rec.fd("recvfrom", fd, Ok(echoed.min(i32::MAX as u64) as i32));
                    rec.fd("sendto", fd, Ok(echoed.min(i32::MAX as u64) as i32));
                    data = json!({ "echoed": echoed });
                }
                Step::Peer | Step::Local => {
                    let peer = matches!(step, Step::Peer);
                    let r = sockname(fd, peer);
                    rec.fd(if peer { "getpeername" } else { "getsockname" }, fd, r.as_ref().map(|_| 0).map_err(|e| *e));
                    data = json!({ "addr": r? });
                }
                Step::Readback => {
                    let fl = check(unsafe { libc::fcntl(fd, libc::F_GETFL) })?;
                    data = json!({
                        "nonblock": fl & libc::O_NONBLOCK != 0,
                        "sndbuf": getsockopt(fd, libc::SO_SNDBUF)?,
                        "rcvbuf": getsockopt(fd, libc::SO_RCVBUF)?,
                    });
                }
                Step::Shutdown => {
                    let r = check(unsafe { libc::shutdown(fd, libc::SHUT_WR) });
                    rec.fd("shutdown", fd, r);
                    r?;
                }
                Step::Close => {
                    let r = check(unsafe { libc::close(fd) });
                    rec.fd("close", fd, r);
                    r?;
                }
                Step::SleepMs(ms) => std::thread::sleep(std::time::Duration::from_millis(ms)),
                Step::KeepGoing => keep_going = true,
            }
            Ok(())
        })();
        let result = StepResult { step: name, ok: res.is_ok(), errno: res.err(), data };
        let _ = serde_json::to_writer(&mut *out, &result);
        let _ = out.write_all(b"\n");
        let _ = out.flush();
        if res.is_err() {
            all_ok = false;
            if !keep_going {
                return false;
            }
        }
    }
    all_ok
}

/// Parses the JSON lines written by [`run_script`].
pub fn parse_output(raw: &[u8]) -> Vec<Value> {
    String::from_utf8_lossy(raw).lines().filter_map(|l| serde_json::from_str(l).ok()).collect()
}
