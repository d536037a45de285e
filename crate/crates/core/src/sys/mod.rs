//! Thin wrappers over Linux interfaces not covered by `nix`.

pub mod seccomp;

use std::fs;
use std::io;
use std::os::fd::{AsRawFd, BorrowedFd, FromRawFd, OwnedFd, RawFd};

/// An open pidfd for a target process.
#[derive(Debug)]
pub struct Pidfd(OwnedFd);

impl Pidfd {
    pub fn open(pid: i32) -> io::Result<Self> {
        // SAFETY: pidfd_open(pid, flags) has no pointer arguments.
        let ret = unsafe { libc::syscall(libc::SYS_pidfd_open, pid, 0) };
        if ret < 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: the kernel returned a fresh descriptor we now own.
        Ok(Pidfd(unsafe { OwnedFd::from_raw_fd(ret as RawFd) }))
    }

    /// Duplicates `remote_fd` from the target into this process.
    pub fn get_fd(&self, remote_fd: i32) -> io::Result<OwnedFd> {
        // SAFETY: pidfd_getfd(pidfd, targetfd, flags) has no pointer arguments.
        let ret =
            unsafe { libc::syscall(libc::SYS_pidfd_getfd, self.0.as_raw_fd(), remote_fd, 0) };
        if ret < 0 {
            return Err(io::Error::last_os_error());
        }
        // SAFETY: fresh descriptor owned by us.
        Ok(unsafe { OwnedFd::from_raw_fd(ret as RawFd) })
    }

    pub fn as_fd(&self) -> BorrowedFd<'_> {
        use std::os::fd::AsFd;
        self.0.as_fd()
    }
}

/// Thread-group id of `tid`, read from procfs.
pub fn tgid_of(tid: i32) -> io::Result<i32> {
    let status = fs::read_to_string(format!("/proc/{tid}/status"))?;
    status
        .lines()
        .find_map(|l| l.strip_prefix("Tgid:"))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "no Tgid line"))
}

/// Real and effective uid/gid of a process as seen from our namespace.
pub fn creds_of(pid: i32) -> io::Result<(u32, u32)> {
    let status = fs::read_to_string(format!("/proc/{pid}/status"))?;
    let field = |name: &str| -> Option<u32> {
        status
            .lines()
            .find_map(|l| l.strip_prefix(name))
            .and_then(|v| v.split_whitespace().nth(1))
            .and_then(|v| v.parse().ok())
    };
    match (field("Uid:"), field("Gid:")) {
        (Some(u), Some(g)) => Ok((u, g)),
        _ => Err(io::Error::new(io::ErrorKind::InvalidData, "no Uid/Gid lines")),
    }
}

/// Octal `flags:` field of `/proc/<pid>/fdinfo/<fd>`.
pub fn fdinfo_flags(pid: i32, fd: i32) -> io::Result<i32> {
    let info = fs::read_to_string(format!("/proc/{pid}/fdinfo/{fd}"))?;
    info.lines()
        .find_map(|l| l.strip_prefix("flags:"))
        .and_then(|v| i32::from_str_radix(v.trim(), 8).ok())
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "no flags line"))
}

pub fn process_alive(pid: i32) -> bool {
    // SAFETY: signal 0 only probes for existence.
    let ret = unsafe { libc::kill(pid, 0) };
    ret == 0 || io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
}

pub fn getsockopt_int(fd: RawFd, level: i32, name: i32) -> io::Result<i32> {
    let mut val: libc::c_int = 0;
    let mut len = std::mem::size_of::<libc::c_int>() as libc::socklen_t;
    // SAFETY: val/len are valid out-pointers of the advertised size.
    let ret = unsafe { libc::getsockopt(fd, level, name, (&mut val as *mut i32).cast(), &mut len) };
    if ret < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(val)
    }
}

pub fn setsockopt_raw(fd: RawFd, level: i32, name: i32, value: &[u8]) -> io::Result<()> {
    // SAFETY: value points to value.len() readable bytes.
    let ret = unsafe {
        libc::setsockopt(fd, level, name, value.as_ptr().cast(), value.len() as libc::socklen_t)
    };
    if ret < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(())
    }
}

pub fn fcntl_getfl(fd: RawFd) -> io::Result<i32> {
    // SAFETY: F_GETFL takes no argument.
    let ret = unsafe { libc::fcntl(fd, libc::F_GETFL) };
    if ret < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(ret)
    }
}

pub fn fcntl_setfl(fd: RawFd, flags: i32) -> io::Result<()> {
    // SAFETY: F_SETFL takes an int argument.
    let ret = unsafe { libc::fcntl(fd, libc::F_SETFL, flags) };
    if ret < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(())
    }
}

/// Creates an `AF_INET`/`SOCK_STREAM` socket in the caller's network namespace.
pub fn tcp4_socket() -> io::Result<OwnedFd> {
    // SAFETY: plain socket(2).
    let fd = unsafe { libc::socket(libc::AF_INET, libc::SOCK_STREAM | libc::SOCK_CLOEXEC, 0) };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    // SAFETY: fresh descriptor owned by us.
    Ok(unsafe { OwnedFd::from_raw_fd(fd) })
}

/// True when `getpeername` succeeds, i.e. the socket has a peer.
pub fn peer_connected(fd: RawFd) -> bool {
    let mut addr: libc::sockaddr_storage = unsafe { std::mem::zeroed() };
    let mut len = std::mem::size_of::<libc::sockaddr_storage>() as libc::socklen_t;
    // SAFETY: addr/len describe a writable sockaddr_storage.
    unsafe { libc::getpeername(fd, (&mut addr as *mut libc::sockaddr_storage).cast(), &mut len) == 0 }
}

/// Local port of a bound inet socket (0 when unbound).
pub fn local_port(fd: RawFd) -> io::Result<u16> {
    let mut addr: libc::sockaddr_in = unsafe { std::mem::zeroed() };
    let mut len = std::mem::size_of::<libc::sockaddr_in>() as libc::socklen_t;
    // SAFETY: addr/len describe a writable sockaddr_in.
    let ret =
        unsafe { libc::getsockname(fd, (&mut addr as *mut libc::sockaddr_in).cast(), &mut len) };
    if ret < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(u16::from_be(addr.sin_port))
}

pub fn bind_v4(fd: RawFd, addr: std::net::SocketAddrV4) -> io::Result<()> {
    let sa = crate::net::to_libc_sockaddr(addr);
    // SAFETY: sa is a valid sockaddr_in of the advertised length.
    let ret = unsafe {
        libc::bind(
            fd,
            (&sa as *const libc::sockaddr_in).cast(),
            std::mem::size_of::<libc::sockaddr_in>() as libc::socklen_t,
        )
    };
    if ret < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(())
    }
}

/// Inode number of the object behind `fd`.
pub fn inode_of(fd: RawFd) -> io::Result<u64> {
    // SAFETY: st is a writable stat buffer.
    let mut st: libc::stat = unsafe { std::mem::zeroed() };
    if unsafe { libc::fstat(fd, &mut st) } < 0 {
        return Err(io::Error::last_os_error());
    }
    Ok(st.st_ino)
}

/// Host name, or `node` if unavailable.
pub fn hostname() -> String {
    nix::unistd::gethostname().ok().and_then(|h| h.into_string().ok()).unwrap_or_else(|| "node".into())
}
