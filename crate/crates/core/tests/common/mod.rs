//! Fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod oracle;

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Ipv4Addr, SocketAddrV4, TcpListener};
use std::os::fd::AsRawFd;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde_json::Value;

use b4ns::engine::{Policy, SwitchEngine};
use b4ns::launch::{spawn_supervised, spawn_unsupervised, NetnsMode};
use b4ns::memory::{AgentConfig, MemoryBroker};
use b4ns::netns::NetNs;
use b4ns::socket_state::RecordSummary;
use b4ns::supervise::{SuperviseReport, SupervisedChild};

pub fn b4ns_exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_b4ns"))
}

pub fn bench_exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_b4ns-bench"))
}

pub fn trace_exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_b4ns-trace"))
}

pub fn b4nsd_exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_b4nsd"))
}

/// First non-loopback IPv4 address of the host, falling back to loopback.
pub fn host_addr() -> Ipv4Addr {
    nix::ifaddrs::getifaddrs()
        .ok()
        .and_then(|addrs| {
            addrs
                .filter_map(|a| a.address?.as_sockaddr_in().map(|s| s.ip()))
                .find(|ip| !ip.is_loopback())
        })
        .unwrap_or(Ipv4Addr::LOCALHOST)
}

/// Threaded TCP echo server.
pub struct EchoServer {
    addr: SocketAddrV4,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl EchoServer {
    pub fn start(bind: SocketAddrV4) -> io::Result<Self> {
        Self::start_on(TcpListener::bind(bind)?)
    }

    /// Starts the server on a listener bound inside `ns`.
    pub fn start_in(ns: &NetNs, bind: SocketAddrV4) -> io::Result<Self> {
        let l = ns.run(move || TcpListener::bind(bind))??;
        Self::start_on(l)
    }

    fn start_on(l: TcpListener) -> io::Result<Self> {
        let addr = match l.local_addr()? {
            std::net::SocketAddr::V4(a) => a,
            _ => unreachable!("bound to IPv4"),
        };
        l.set_nonblocking(true)?;
        let stop = Arc::new(AtomicBool::new(false));
        let st = stop.clone();
        let thread = std::thread::spawn(move || {
            while !st.load(Ordering::Relaxed) {
                match l.accept() {
                    Ok((mut s, _)) => {
                        std::thread::spawn(move || {
                            s.set_nonblocking(false).ok();
                            let mut buf = vec![0u8; 64 * 1024];
                            loop {
                                match s.read(&mut buf) {
                                    Ok(0) | Err(_) => break,
                                    Ok(n) => {
                                        if s.write_all(&buf[..n]).is_err() {
                                            break;
                                        }
                                    }
                                }
                            }
                        });
                    }
                    Err(_) => std::thread::sleep(Duration::from_millis(2)),
                }
            }
        });
        Ok(Self { addr, stop, thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddrV4 {
        self.addr
    }
}

impl Drop for EchoServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Output of one `b4ns __script` run.
#[derive(Debug)]
pub struct ScriptOutput {
    pub status: ExitStatus,
    pub lines: Vec<Value>,
}

impl ScriptOutput {
    pub fn from_raw(status: ExitStatus, raw: &[u8]) -> Self {
        Self { status, lines: b4ns::script::parse_output(raw) }
    }

    pub fn step(&self, name: &str) -> Option<&Value> {
        self.lines.iter().find(|l| l["step"] == name)
    }

    pub fn ok(&self, name: &str) -> bool {
        self.step(name).is_some_and(|l| l["ok"] == true)
    }

    pub fn errno(&self, name: &str) -> Option<i64> {
        self.step(name).and_then(|l| l["errno"].as_i64())
    }

    pub fn data(&self, name: &str) -> &Value {
        self.step(name).map(|l| &l["data"]).unwrap_or(&Value::Null)
    }

    /// Outcome of the connect step: `Ok` or the errno.
    pub fn connect_outcome(&self) -> Result<(), i64> {
        match self.step("connect") {
            Some(l) if l["ok"] == true => Ok(()),
            Some(l) => Err(l["errno"].as_i64().unwrap_or(-1)),
            None => Err(-1),
        }
    }
}

pub fn script_cmd(steps: &[String]) -> Command {
    let mut cmd = Command::new(b4ns_exe());
    cmd.arg("__script").args(steps).stdout(Stdio::piped()).stderr(Stdio::inherit());
    cmd
}

pub fn steps(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

pub fn run_unsupervised(steps: &[String], mode: NetnsMode) -> ScriptOutput {
    let child = spawn_unsupervised(&mut script_cmd(steps), mode).expect("spawn script");
    let out = child.wait_with_output().expect("wait script");
    ScriptOutput::from_raw(out.status, &out.stdout)
}

pub fn engine(policy: Policy, dir: &Path) -> Arc<SwitchEngine> {
    let agent = AgentConfig::for_exe(b4ns_exe(), dir);
    Arc::new(SwitchEngine::new(policy, Arc::new(MemoryBroker::new(Some(agent)))))
}

pub fn run_supervised(
    engine: Arc<SwitchEngine>,
    steps: &[String],
    mode: NetnsMode,
    dir: &Path,
) -> (ScriptOutput, SuperviseReport) {
    let sup = SupervisedChild::spawn(&mut script_cmd(steps), engine, mode, dir).expect("spawn supervised");
    let (status, raw, report) = sup.wait_with_stdout().expect("wait supervised");
    (ScriptOutput::from_raw(status, &raw), report)
}

/// Runs `script` under `eng` and audits the registry once `marker` has been
/// printed, while the script is still alive.
pub fn run_with_audit(
    eng: Arc<SwitchEngine>,
    script: &[String],
    mode: NetnsMode,
    dir: &Path,
    marker: &str,
) -> (ScriptOutput, SuperviseReport, Vec<RecordSummary>) {
    let mut sup = SupervisedChild::spawn(&mut script_cmd(script), eng.clone(), mode, dir).unwrap();
    let mut out = BufReader::new(sup.child().stdout.take().unwrap());
    let mut raw = Vec::new();
    let mut mid = None;
    loop {
        let mut line = String::new();
        if out.read_line(&mut line).unwrap() == 0 {
            break;
        }
        raw.extend_from_slice(line.as_bytes());
        if line.contains(&format!("\"step\":\"{marker}\"")) {
            mid = Some(eng.registry().audit());
            break;
        }
    }
    out.read_to_end(&mut raw).unwrap();
    let (status, rep) = sup.wait().unwrap();
    (ScriptOutput::from_raw(status, &raw), rep, mid.expect("marker step printed"))
}

/// A script started against a daemon-managed handoff socket.
pub struct HandedOff {
    pub child: Child,
    reader: BufReader<std::process::ChildStdout>,
    pub lines: Vec<Value>,
}

impl HandedOff {
    pub fn spawn(handoff: &Path, steps: &[String], mode: NetnsMode) -> io::Result<Self> {
        let mut child = spawn_supervised(&mut script_cmd(steps), handoff, mode)?;
        let stdout = child.stdout.take().expect("piped stdout");
        Ok(Self { child, reader: BufReader::new(stdout), lines: Vec::new() })
    }

    /// Reads output lines until one for `step` arrives.
    pub fn wait_step(&mut self, step: &str) -> Option<Value> {
        loop {
            let mut line = String::new();
            if self.reader.read_line(&mut line).ok()? == 0 {
                return None;
            }
            let v: Value = serde_json::from_str(&line).ok()?;
            self.lines.push(v.clone());
            if v["step"] == step {
                return Some(v);
            }
        }
    }

    pub fn finish(mut self) -> ScriptOutput {
        let mut rest = Vec::new();
        let _ = self.reader.read_to_end(&mut rest);
        let status = self.child.wait().expect("wait");
        self.lines.extend(b4ns::script::parse_output(&rest));
        ScriptOutput { status, lines: self.lines }
    }
}

/// Waits for `path` to exist.
pub fn wait_path(path: &Path, timeout: Duration) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if path.exists() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    false
}

/// An isolated namespace whose loopback carries extra /32 addresses, one
/// per container. Taking `lo` down cuts every in-namespace path.
pub struct AliasNetns {
    pub ns: NetNs,
}

fn ifreq(name: &str) -> libc::ifreq {
    // SAFETY: ifreq is plain old data.
    let mut req: libc::ifreq = unsafe { std::mem::zeroed() };
    for (d, s) in req.ifr_name.iter_mut().zip(name.bytes()) {
        *d = s as libc::c_char;
    }
    req
}

fn sockaddr_in_raw(ip: Ipv4Addr) -> libc::sockaddr {
    let sin = b4ns::net::to_libc_sockaddr(SocketAddrV4::new(ip, 0));
    // SAFETY: sockaddr_in and sockaddr have the same size.
    unsafe { std::mem::transmute::<libc::sockaddr_in, libc::sockaddr>(sin) }
}

fn ioctl_in_ns(req: libc::c_ulong, ifr: &mut libc::ifreq) -> io::Result<()> {
    // SAFETY: plain ioctl on a throwaway datagram socket.
    unsafe {
        let s = libc::socket(libc::AF_INET, libc::SOCK_DGRAM | libc::SOCK_CLOEXEC, 0);
        if s < 0 {
            return Err(io::Error::last_os_error());
        }
        let ret = libc::ioctl(s, req as _, ifr as *mut libc::ifreq);
        let err = io::Error::last_os_error();
        libc::close(s);
        if ret < 0 {
            return Err(err);
        }
    }
    Ok(())
}

impl AliasNetns {
    pub fn new(addrs: &[Ipv4Addr]) -> io::Result<Self> {
        let ns = NetNs::new_isolated()?;
        let addrs = addrs.to_vec();
        ns.run(move || -> io::Result<()> {
            for (i, ip) in addrs.iter().enumerate() {
                let label = format!("lo:{}", i + 1);
                let mut r = ifreq(&label);
                r.ifr_ifru.ifru_addr = sockaddr_in_raw(*ip);
                ioctl_in_ns(libc::SIOCSIFADDR, &mut r)?;
                let mut m = ifreq(&label);
                m.ifr_ifru.ifru_netmask = sockaddr_in_raw(Ipv4Addr::new(255, 255, 255, 255));
                ioctl_in_ns(libc::SIOCSIFNETMASK, &mut m)?;
            }
            Ok(())
        })??;
        Ok(Self { ns })
    }

    pub fn set_up(&self, up: bool) -> io::Result<()> {
        self.ns.run(move || -> io::Result<()> {
            let mut r = ifreq("lo");
            ioctl_in_ns(libc::SIOCGIFFLAGS, &mut r)?;
            // SAFETY: the flags member was just filled in by the kernel.
            unsafe {
                if up {
                    r.ifr_ifru.ifru_flags |= libc::IFF_UP as libc::c_short;
                } else {
                    r.ifr_ifru.ifru_flags &= !(libc::IFF_UP as libc::c_short);
                }
            }
            ioctl_in_ns(libc::SIOCSIFFLAGS, &mut r)
        })?
    }

    /// A path that opens this namespace from within the test process.
    pub fn path(&self) -> PathBuf {
        PathBuf::from(format!("/proc/{}/fd/{}", std::process::id(), self.ns.as_raw_fd()))
    }

    pub fn join(&self) -> NetnsMode {
        NetnsMode::Join(self.ns.try_clone().expect("clone netns fd"))
    }
}

/// Writes a small file and returns its path.
pub fn write_file(dir: &Path, name: &str, contents: &[u8]) -> PathBuf {
    let p = dir.join(name);
    std::fs::File::create(&p).and_then(|mut f| f.write_all(contents)).expect("write fixture file");
    p
}

/// Counts calls into the wrapped store.
pub struct CountingKvs<K> {
    pub inner: K,
    pub calls: std::sync::atomic::AtomicU64,
}

impl<K> CountingKvs<K> {
    pub fn new(inner: K) -> Self {
        Self { inner, calls: std::sync::atomic::AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn bump(&self) {
        self.calls.fetch_add(1, Ordering::SeqCst);
    }
}

impl<K: b4ns::multinode::KvsClient> b4ns::multinode::KvsClient for CountingKvs<K> {
    fn put(&self, key: &str, value: &str) -> Result<(), b4ns::multinode::KvsError> {
        self.bump();
        self.inner.put(key, value)
    }

    fn get(&self, key: &str) -> Result<Option<String>, b4ns::multinode::KvsError> {
        self.bump();
        self.inner.get(key)
    }

    fn list(&self, prefix: &str) -> Result<Vec<(String, String)>, b4ns::multinode::KvsError> {
        self.bump();
        self.inner.list(prefix)
    }

    fn delete(&self, key: &str) -> Result<(), b4ns::multinode::KvsError> {
        self.bump();
        self.inner.delete(key)
    }

    fn endpoint(&self) -> String {
        self.inner.endpoint()
    }
}
