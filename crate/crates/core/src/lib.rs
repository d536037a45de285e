//! Socket switching for sandboxed processes.
//!
//! A supervisor receives a seccomp user-notification fd from the container
//! runtime, watches the target's socket configuration and connection
//! syscalls, and swaps in-namespace TCP sockets for sockets created in the
//! host network namespace so traffic skips the userspace relay.
// ioctl request constants are u64 on some targets and narrower on others.
#![allow(clippy::unnecessary_cast)]

pub mod bench;
pub mod clock;
pub mod daemon;
pub mod engine;
pub mod fault;
pub mod gateway;
pub mod launch;
pub mod memory;
pub mod multinode;
pub mod net;
pub mod netns;
pub mod probe;
pub mod script;
pub mod socket_state;
pub mod supervise;
pub mod sys;
pub mod trace;
