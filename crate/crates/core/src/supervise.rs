//! Running one command under a switch engine, without the daemon.

use std::io::{self, Read};
use std::path::Path;
use std::process::{Child, Command, ExitStatus};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::engine::{CounterSnapshot, SwitchEngine};
use crate::gateway::{GatewayError, HandoffListener, NotificationChannel, SeccompListener};
use crate::launch::{spawn_supervised, NetnsMode};

static SEQ: AtomicU64 = AtomicU64::new(0);

/// CPU time consumed so far by the calling thread.
pub fn thread_cpu_time() -> Duration {
    use nix::sys::resource::{getrusage, UsageWho};
    match getrusage(UsageWho::RUSAGE_THREAD) {
        Ok(u) => {
            let tv = |t: nix::sys::time::TimeVal| Duration::new(t.tv_sec() as u64, t.tv_usec() as u32 * 1000);
            tv(u.user_time()) + tv(u.system_time())
        }
        Err(_) => Duration::ZERO,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SuperviseReport {
    pub counters: CounterSnapshot,
    /// CPU time of the supervisor thread.
    pub supervisor_cpu: Duration,
}

/// A child process whose hooked syscalls are served by `engine`.
pub struct SupervisedChild {
    child: Child,
    engine: Arc<SwitchEngine>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<Duration, GatewayError>>>,
}

impl SupervisedChild {
    /// Spawns `cmd` under the hooked filter. The handoff socket is created
    /// in `handoff_dir` and removed once the fd has been received.
    pub fn spawn(
        cmd: &mut Command,
        engine: Arc<SwitchEngine>,
        mode: NetnsMode,
        handoff_dir: &Path,
    ) -> io::Result<Self> {
        let path = handoff_dir.join(format!(
            "handoff-{}-{}.sock",
            std::process::id(),
            SEQ.fetch_add(1, Ordering::Relaxed)
        ));
        let listener = HandoffListener::bind(&path).map_err(io::Error::other)?;
        let stop = Arc::new(AtomicBool::new(false));
        let (eng, stop_t) = (engine.clone(), stop.clone());
        let thread = std::thread::spawn(move || -> Result<Duration, GatewayError> {
            let fd = listener.accept(Some(Duration::from_secs(30)))?;
            drop(listener);
            let ch = NotificationChannel::new(SeccompListener::new(fd))?;
            eng.serve(&ch, &stop_t)?;
            Ok(thread_cpu_time())
        });
        match spawn_supervised(cmd, &path, mode) {
            Ok(child) => Ok(Self { child, engine, stop, thread: Some(thread) }),
            Err(e) => {
                stop.store(true, Ordering::Relaxed);
                // Unblocks the accept if the child never connected.
                let _ = std::os::unix::net::UnixStream::connect(&path);
                let _ = thread.join();
                Err(e)
            }
        }
    }

    pub fn child(&mut self) -> &mut Child {
        &mut self.child
    }

    pub fn engine(&self) -> &Arc<SwitchEngine> {
        &self.engine
    }

    /// Waits for the child, then for the supervisor to drain.
    pub fn wait(mut self) -> io::Result<(ExitStatus, SuperviseReport)> {
        let status = self.child.wait()?;
        let report = self.finish();
        Ok((status, report))
    }

    /// Like [`wait`](Self::wait) but also drains a piped stdout. stderr
    /// must not be piped.
    pub fn wait_with_stdout(mut self) -> io::Result<(ExitStatus, Vec<u8>, SuperviseReport)> {
        let mut out = Vec::new();
        if let Some(mut s) = self.child.stdout.take() {
            s.read_to_end(&mut out)?;
        }
        let status = self.child.wait()?;
        let report = self.finish();
        Ok((status, out, report))
    }

    fn finish(&mut self) -> SuperviseReport {
        // The channel closes once every filtered process is gone; lingering
        // descendants are cut off after a grace period.
        let deadline = Instant::now() + Duration::from_secs(2);
        while self.thread.as_ref().is_some_and(|t| !t.is_finished()) && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(5));
        }
        self.stop.store(true, Ordering::Relaxed);
        let cpu = match self.thread.take().map(JoinHandle::join) {
            Some(Ok(Ok(cpu))) => cpu,
            Some(Ok(Err(e))) => {
                log::warn!("supervisor ended with {e}");
                Duration::ZERO
            }
            _ => Duration::ZERO,
        };
        SuperviseReport { counters: self.engine.counters(), supervisor_cpu: cpu }
    }
}

impl Drop for SupervisedChild {
    fn drop(&mut self) {
        if self.thread.is_some() {
            let _ = self.child.kill();
            let _ = self.child.wait();
            self.finish();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{NetEnvironment, Policy};
    use crate::memory::MemoryBroker;

    #[test]
    fn supervises_a_trivial_command() {
        let dir = tempfile::tempdir().unwrap();
        let engine = Arc::new(SwitchEngine::new(
            Policy::new("t", NetEnvironment::default()),
            Arc::new(MemoryBroker::new(None)),
        ));
        let mut cmd = Command::new("/bin/sh");
        cmd.args(["-c", "exec 3>/dev/null; exec 3>&-; exit 7"]);
        let sup = SupervisedChild::spawn(&mut cmd, engine, NetnsMode::Inherit, dir.path()).unwrap();
        let (status, report) = sup.wait().unwrap();
        assert_eq!(status.code(), Some(7));
        assert!(report.counters.events_handled > 0, "close is hooked");
        assert_eq!(report.counters.sockets_switched, 0);
    }

    #[test]
    fn thread_cpu_advances() {
        let before = thread_cpu_time();
        let mut x = 0u64;
        let start = Instant::now();
        while start.elapsed() < Duration::from_millis(30) {
            x = x.wrapping_add(std::hint::black_box(1));
        }
        assert!(x > 0);
        assert!(thread_cpu_time() > before);
    }
}
