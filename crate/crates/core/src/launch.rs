//! Runtime-side launcher: starts a command with the hooked filter installed
//! and hands the listener fd to a supervisor.
//!
//! This is the part a container runtime normally performs. It is provided
//! for daemonless use, demos and tests. Everything inside `pre_exec` uses
//! raw syscalls on buffers prepared before the fork.

use std::ffi::CString;
use std::io;
use std::os::fd::{AsRawFd, RawFd};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Child, Command};

use crate::gateway::{self, HANDOFF_ACK};
use crate::netns::{self, NetNs};
use crate::sys::seccomp::{self, SockFilter};

/// Network namespace placement of the launched command.
#[derive(Debug)]
pub enum NetnsMode {
    Inherit,
    Join(NetNs),
    /// A fresh namespace with only loopback. Unprivileged callers also get
    /// a user namespace mapping their uid to root.
    New,
}

#[repr(C, align(8))]
struct CmsgBuf([u8; 64]);

struct Prepared {
    addr: libc::sockaddr_un,
    addr_len: libc::socklen_t,
    filter: Vec<SockFilter>,
    join_fd: Option<RawFd>,
    new_netns: bool,
    /// setgroups, uid_map and gid_map contents for a rootless user namespace.
    id_maps: Option<(CString, CString, CString)>,
}

fn prepare(handoff: &Path, mode: &NetnsMode) -> io::Result<Prepared> {
    // SAFETY: sockaddr_un is plain old data.
    let mut addr: libc::sockaddr_un = unsafe { std::mem::zeroed() };
    addr.sun_family = libc::AF_UNIX as libc::sa_family_t;
    let bytes = handoff.as_os_str().as_bytes();
    if bytes.len() >= addr.sun_path.len() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "handoff path too long"));
    }
    for (dst, src) in addr.sun_path.iter_mut().zip(bytes) {
        *dst = *src as libc::c_char;
    }
    let addr_len = (std::mem::size_of::<libc::sa_family_t>() + bytes.len() + 1) as libc::socklen_t;
    // SAFETY: geteuid/getuid/getgid cannot fail.
    let (euid, uid, gid) = unsafe { (libc::geteuid(), libc::getuid(), libc::getgid()) };
    let new_netns = matches!(mode, NetnsMode::New);
    let id_maps = (new_netns && euid != 0).then(|| {
        (
            CString::new("deny").unwrap(),
            CString::new(format!("0 {uid} 1\n")).unwrap(),
            CString::new(format!("0 {gid} 1\n")).unwrap(),
        )
    });
    Ok(Prepared {
        addr,
        addr_len,
        filter: gateway::notify_filter(),
        join_fd: match mode {
            NetnsMode::Join(ns) => Some(ns.as_raw_fd()),
            _ => None,
        },
        new_netns,
        id_maps,
    })
}

fn cvt(ret: libc::c_int) -> io::Result<libc::c_int> {
    if ret < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(ret)
    }
}

unsafe fn write_file(path: &[u8], data: &CString) -> io::Result<()> {
    let fd = cvt(libc::open(path.as_ptr().cast(), libc::O_WRONLY | libc::O_CLOEXEC))?;
    let bytes = data.as_bytes();
    let n = libc::write(fd, bytes.as_ptr().cast(), bytes.len());
    libc::close(fd);
    if n as usize != bytes.len() {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

/// Runs in the child between fork and exec.
unsafe fn child_setup(p: &Prepared) -> io::Result<()> {
    if let Some(fd) = p.join_fd {
        cvt(libc::setns(fd, libc::CLONE_NEWNET))?;
    }
    if p.new_netns {
        if let Some((setgroups, uid_map, gid_map)) = &p.id_maps {
            cvt(libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNET))?;
            write_file(b"/proc/self/setgroups\0", setgroups)?;
            write_file(b"/proc/self/uid_map\0", uid_map)?;
            write_file(b"/proc/self/gid_map\0", gid_map)?;
        } else {
            cvt(libc::unshare(libc::CLONE_NEWNET))?;
        }
        netns::bring_up_loopback()?;
    }

    // Connect before the filter exists: connect(2) is a hooked syscall.
    let sock = cvt(libc::socket(libc::AF_UNIX, libc::SOCK_STREAM | libc::SOCK_CLOEXEC, 0))?;
    cvt(libc::connect(sock, (&p.addr as *const libc::sockaddr_un).cast(), p.addr_len))?;

    let listener = seccomp::install_listener_filter(&p.filter)?;
    let listener_fd = listener.as_raw_fd();
    // The listener is O_CLOEXEC; leaking it here avoids a hooked close(2).
    std::mem::forget(listener);

    let mut payload = *b"b4ns";
    let mut iov = libc::iovec { iov_base: payload.as_mut_ptr().cast(), iov_len: payload.len() };
    let mut cbuf = CmsgBuf([0; 64]);
    let mut msg: libc::msghdr = std::mem::zeroed();
    msg.msg_iov = &mut iov;
    msg.msg_iovlen = 1;
    msg.msg_control = cbuf.0.as_mut_ptr().cast();
    msg.msg_controllen = libc::CMSG_SPACE(std::mem::size_of::<RawFd>() as u32) as _;
    let cmsg = libc::CMSG_FIRSTHDR(&msg);
    (*cmsg).cmsg_level = libc::SOL_SOCKET;
    (*cmsg).cmsg_type = libc::SCM_RIGHTS;
    (*cmsg).cmsg_len = libc::CMSG_LEN(std::mem::size_of::<RawFd>() as u32) as _;
    std::ptr::write_unaligned(libc::CMSG_DATA(cmsg).cast::<RawFd>(), listener_fd);
    if libc::sendmsg(sock, &msg, 0) < 0 {
        return Err(io::Error::last_os_error());
    }
    let mut ack = 0u8;
    if libc::read(sock, (&mut ack as *mut u8).cast(), 1) != 1 || ack != HANDOFF_ACK {
        return Err(io::Error::from_raw_os_error(libc::EPROTO));
    }
    Ok(())
}

/// Spawns `cmd` under the hooked filter. Blocks until the supervisor
/// listening on `handoff` has acknowledged the listener fd.
pub fn spawn_supervised(cmd: &mut Command, handoff: &Path, mode: NetnsMode) -> io::Result<Child> {
    let prepared = prepare(handoff, &mode)?;
    // SAFETY: child_setup only issues raw syscalls on pre-built buffers.
    unsafe {
        cmd.pre_exec(move || child_setup(&prepared));
    }
    let child = cmd.spawn();
    drop(mode);
    child
}

/// Spawns `cmd` in the requested namespace without any supervision, for
/// baselines and control runs.
pub fn spawn_unsupervised(cmd: &mut Command, mode: NetnsMode) -> io::Result<Child> {
    let join_fd = match &mode {
        NetnsMode::Join(ns) => Some(ns.as_raw_fd()),
        _ => None,
    };
    let new_netns = matches!(mode, NetnsMode::New);
    // SAFETY: only raw syscalls run in the child.
    unsafe {
        cmd.pre_exec(move || {
            if let Some(fd) = join_fd {
                cvt(libc::setns(fd, libc::CLONE_NEWNET))?;
            }
            if new_netns {
                cvt(libc::unshare(libc::CLONE_NEWNET))?;
                netns::bring_up_loopback()?;
            }
            Ok(())
        });
    }
    let child = cmd.spawn();
    drop(mode);
    child
}
