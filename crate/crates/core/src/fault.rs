//! Failpoints for exercising the rollback paths of the switch engine.
//!
//! A plan is shared between the engine and whoever arms it (tests, or an
//! operator through the `faults` field of a container spec). Each armed
//! point fires a fixed number of times and then disarms itself.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultPoint {
    /// Option replay onto the host socket fails.
    ReplayFailure,
    /// Reading a syscall argument from target memory faults.
    MemoryFault,
    /// The notification is reported invalid right before committing.
    StaleCookie,
    /// Creating the host socket fails.
    HostSocket,
    /// The syscall handler panics.
    HandlerPanic,
    /// The serve loop itself panics, taking the instance down.
    InstanceCrash,
}

impl FromStr for FaultPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "replay" => Ok(FaultPoint::ReplayFailure),
            "memory" => Ok(FaultPoint::MemoryFault),
            "stale" => Ok(FaultPoint::StaleCookie),
            "host-socket" => Ok(FaultPoint::HostSocket),
            "panic" => Ok(FaultPoint::HandlerPanic),
            "crash" => Ok(FaultPoint::InstanceCrash),
            other => Err(format!("unknown fault point {other:?}")),
        }
    }
}

#[derive(Debug, Default)]
pub struct FaultPlan {
    armed: Mutex<HashMap<FaultPoint, u64>>,
}

impl FaultPlan {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses `point[=count],...`, e.g. `replay=2,memory`.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let plan = Self::new();
        for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (name, count) = match item.split_once('=') {
                Some((n, c)) => (n, c.parse::<u64>().map_err(|_| format!("bad count in {item:?}"))?),
                None => (item, 1),
            };
            plan.arm(name.parse()?, count);
        }
        Ok(plan)
    }

    pub fn arm(&self, point: FaultPoint, times: u64) {
        *self.armed.lock().unwrap().entry(point).or_default() += times;
    }

    pub fn disarm_all(&self) {
        self.armed.lock().unwrap().clear();
    }

    /// Consumes one firing of `point`; true when the fault should happen.
    pub fn fire(&self, point: FaultPoint) -> bool {
        let mut armed = self.armed.lock().unwrap();
        match armed.get_mut(&point) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        }
    }

    pub fn remaining(&self, point: FaultPoint) -> u64 {
        self.armed.lock().unwrap().get(&point).copied().unwrap_or(0)
    }
}
