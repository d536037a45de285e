//! Network namespace helpers.

use std::fs::File;
use std::io;
use std::os::fd::{AsFd, AsRawFd, OwnedFd, RawFd};
use std::path::Path;

use nix::sched::{setns, unshare, CloneFlags};

/// An open reference to a network namespace. The namespace stays alive as
/// long as the handle does.
#[derive(Debug)]
pub struct NetNs {
    fd: OwnedFd,
}

impl NetNs {
    /// Creates a fresh namespace with its loopback interface up.
    pub fn new_isolated() -> io::Result<Self> {
        std::thread::spawn(|| -> io::Result<NetNs> {
            unshare(CloneFlags::CLONE_NEWNET)?;
            bring_up_loopback()?;
            let f = File::open("/proc/thread-self/ns/net")?;
            Ok(NetNs { fd: f.into() })
        })
        .join()
        .map_err(|_| io::Error::other("netns thread panicked"))?
    }

    pub fn open(path: impl AsRef<Path>) -> io::Result<Self> {
        Ok(Self { fd: File::open(path)?.into() })
    }

    pub fn of_process(pid: i32) -> io::Result<Self> {
        Self::open(format!("/proc/{pid}/ns/net"))
    }

    pub fn current() -> io::Result<Self> {
        Self::open("/proc/thread-self/ns/net")
    }

    pub fn try_clone(&self) -> io::Result<Self> {
        Ok(Self { fd: self.fd.try_clone()? })
    }

    /// Moves the calling thread into this namespace.
    pub fn enter(&self) -> io::Result<()> {
        setns(self.fd.as_fd(), CloneFlags::CLONE_NEWNET)?;
        Ok(())
    }

    /// Inode identity, for comparing namespaces.
    pub fn inode(&self) -> io::Result<u64> {
        use std::os::unix::fs::MetadataExt;
        let f = File::from(self.fd.try_clone()?);
        Ok(f.metadata()?.ino())
    }

    /// Runs `f` on a short-lived thread inside this namespace.
    pub fn run<T: Send + 'static>(
        &self,
        f: impl FnOnce() -> T + Send + 'static,
    ) -> io::Result<T> {
        let me = self.try_clone()?;
        std::thread::spawn(move || -> io::Result<T> {
            me.enter()?;
            Ok(f())
        })
        .join()
        .map_err(|_| io::Error::other("netns thread panicked"))?
    }
}

impl AsRawFd for NetNs {
    fn as_raw_fd(&self) -> RawFd {
        self.fd.as_raw_fd()
    }
}

/// Sets IFF_UP on `lo` in the caller's namespace. Async-signal-safe.
pub fn bring_up_loopback() -> io::Result<()> {
    // SAFETY: raw socket/ioctl/close with a stack-allocated ifreq.
    unsafe {
        let sock = libc::socket(libc::AF_INET, libc::SOCK_DGRAM | libc::SOCK_CLOEXEC, 0);
        if sock < 0 {
            return Err(io::Error::last_os_error());
        }
        let mut req: libc::ifreq = std::mem::zeroed();
        req.ifr_name[0] = b'l' as libc::c_char;
        req.ifr_name[1] = b'o' as libc::c_char;
        let mut ret = libc::ioctl(sock, libc::SIOCGIFFLAGS as _, &mut req);
        if ret == 0 {
            req.ifr_ifru.ifru_flags |= libc::IFF_UP as libc::c_short;
            ret = libc::ioctl(sock, libc::SIOCSIFFLAGS as _, &mut req);
        }
        let err = io::Error::last_os_error();
        libc::close(sock);
        if ret != 0 {
            return Err(err);
        }
    }
    Ok(())
}
