//! Raw seccomp user-notification ABI.
//!
//! Mirrors the structures and ioctl numbers from `<linux/seccomp.h>`. The
//! BPF program built here routes exactly the hooked syscall numbers to the
//! listener and allows everything else.

use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd, RawFd};

pub const SECCOMP_SET_MODE_FILTER: libc::c_uint = 1;
pub const SECCOMP_FILTER_FLAG_NEW_LISTENER: libc::c_uint = 1 << 3;

pub const SECCOMP_RET_ALLOW: u32 = 0x7fff_0000;
pub const SECCOMP_RET_USER_NOTIF: u32 = 0x7fc0_0000;

pub const SECCOMP_USER_NOTIF_FLAG_CONTINUE: u32 = 1;
pub const SECCOMP_ADDFD_FLAG_SETFD: u32 = 1 << 0;
pub const SECCOMP_ADDFD_FLAG_SEND: u32 = 1 << 1;

const fn ioc(dir: u64, nr: u64, size: u64) -> u64 {
    // _IOC(dir, '!', nr, size) with the generic encoding used on x86_64 and aarch64.
    (dir << 30) | (size << 16) | ((b'!' as u64) << 8) | nr
}

const IOC_WRITE: u64 = 1;
const IOC_READ: u64 = 2;

pub const SECCOMP_IOCTL_NOTIF_RECV: u64 =
    ioc(IOC_READ | IOC_WRITE, 0, std::mem::size_of::<SeccompNotif>() as u64);
pub const SECCOMP_IOCTL_NOTIF_SEND: u64 =
    ioc(IOC_READ | IOC_WRITE, 1, std::mem::size_of::<SeccompNotifResp>() as u64);
pub const SECCOMP_IOCTL_NOTIF_ID_VALID: u64 = ioc(IOC_WRITE, 2, 8);
pub const SECCOMP_IOCTL_NOTIF_ADDFD: u64 =
    ioc(IOC_WRITE, 3, std::mem::size_of::<SeccompNotifAddfd>() as u64);

#[cfg(target_arch = "x86_64")]
pub const AUDIT_ARCH_NATIVE: u32 = 0xc000_003e;
#[cfg(target_arch = "aarch64")]
pub const AUDIT_ARCH_NATIVE: u32 = 0xc000_00b7;

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SeccompData {
    pub nr: i32,
    pub arch: u32,
    pub instruction_pointer: u64,
    pub args: [u64; 6],
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SeccompNotif {
    pub id: u64,
    pub pid: u32,
    pub flags: u32,
    pub data: SeccompData,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SeccompNotifResp {
    pub id: u64,
    pub val: i64,
    pub error: i32,
    pub flags: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SeccompNotifAddfd {
    pub id: u64,
    pub flags: u32,
    pub srcfd: u32,
    pub newfd: u32,
    pub newfd_flags: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SockFilter {
    pub code: u16,
    pub jt: u8,
    pub jf: u8,
    pub k: u32,
}

#[repr(C)]
pub struct SockFprog {
    pub len: u16,
    pub filter: *const SockFilter,
}

const BPF_LD: u16 = 0x00;
const BPF_W: u16 = 0x00;
const BPF_ABS: u16 = 0x20;
const BPF_JMP: u16 = 0x05;
const BPF_JEQ: u16 = 0x10;
const BPF_K: u16 = 0x00;
const BPF_RET: u16 = 0x06;

const OFFSET_NR: u32 = 0;
const OFFSET_ARCH: u32 = 4;

fn stmt(code: u16, k: u32) -> SockFilter {
    SockFilter { code, jt: 0, jf: 0, k }
}

fn jump(code: u16, k: u32, jt: u8, jf: u8) -> SockFilter {
    SockFilter { code, jt, jf, k }
}

/// Builds a filter that sends `hooked` syscalls to the user-notification
/// listener and allows every other syscall (including foreign-arch ones).
pub fn build_notify_filter(hooked: &[i64]) -> Vec<SockFilter> {
    assert!(hooked.len() < 250, "jump offsets are u8");
    let n = hooked.len() as u8;
    let mut prog = Vec::with_capacity(hooked.len() + 5);
    prog.push(stmt(BPF_LD | BPF_W | BPF_ABS, OFFSET_ARCH));
    // Foreign arch: skip straight to ALLOW (nr loads + n compares ahead).
    prog.push(jump(BPF_JMP | BPF_JEQ | BPF_K, AUDIT_ARCH_NATIVE, 0, n + 1));
    prog.push(stmt(BPF_LD | BPF_W | BPF_ABS, OFFSET_NR));
    for (i, nr) in hooked.iter().enumerate() {
        // On match jump to the USER_NOTIF return that follows ALLOW.
        let to_notify = n - i as u8;
        prog.push(jump(BPF_JMP | BPF_JEQ | BPF_K, *nr as u32, to_notify, 0));
    }
    prog.push(stmt(BPF_RET | BPF_K, SECCOMP_RET_ALLOW));
    prog.push(stmt(BPF_RET | BPF_K, SECCOMP_RET_USER_NOTIF));
    prog
}

/// Installs `prog` on the calling thread and returns the listener fd.
///
/// Only async-signal-safe calls are made, so this may run between fork and
/// exec.
pub fn install_listener_filter(prog: &[SockFilter]) -> io::Result<OwnedFd> {
    let fprog = SockFprog { len: prog.len() as u16, filter: prog.as_ptr() };
    // SAFETY: plain prctl/seccomp syscalls; `fprog` outlives both calls.
    unsafe {
        if libc::prctl(libc::PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0 {
            return Err(io::Error::last_os_error());
        }
        let ret = libc::syscall(
            libc::SYS_seccomp,
            SECCOMP_SET_MODE_FILTER,
            SECCOMP_FILTER_FLAG_NEW_LISTENER,
            &fprog as *const SockFprog,
        );
        if ret < 0 {
            return Err(io::Error::last_os_error());
        }
        Ok(OwnedFd::from_raw_fd(ret as RawFd))
    }
}

fn ioctl_ptr<T>(fd: RawFd, req: u64, arg: *mut T) -> io::Result<i32> {
    // SAFETY: callers pass pointers to the repr(C) struct matching `req`.
    let ret = unsafe { libc::ioctl(fd, req as _, arg) };
    if ret < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(ret)
    }
}

pub fn notif_recv(fd: &impl AsRawFd) -> io::Result<SeccompNotif> {
    let mut notif = SeccompNotif::default();
    ioctl_ptr(fd.as_raw_fd(), SECCOMP_IOCTL_NOTIF_RECV, &mut notif)?;
    Ok(notif)
}

pub fn notif_send(fd: &impl AsRawFd, resp: &SeccompNotifResp) -> io::Result<()> {
    let mut resp = *resp;
    ioctl_ptr(fd.as_raw_fd(), SECCOMP_IOCTL_NOTIF_SEND, &mut resp).map(|_| ())
}

pub fn notif_id_valid(fd: &impl AsRawFd, id: u64) -> bool {
    let mut id = id;
    ioctl_ptr(fd.as_raw_fd(), SECCOMP_IOCTL_NOTIF_ID_VALID, &mut id).is_ok()
}

pub fn notif_addfd(fd: &impl AsRawFd, req: &SeccompNotifAddfd) -> io::Result<i32> {
    let mut req = *req;
    ioctl_ptr(fd.as_raw_fd(), SECCOMP_IOCTL_NOTIF_ADDFD, &mut req)
}
