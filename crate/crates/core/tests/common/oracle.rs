//! Synthetic syscall traces and a brute-force fd-table oracle for the
//! lifecycle reconstruction.
//!
//! The oracle follows the reconstruction contract directly:
//! - `socket` opens a lifecycle on its return fd (stream sockets only).
//! - `accept`/`accept4`/`dup*` open a derived lifecycle on the new fd.
//! - `fork`/`clone`/`vfork` copy the parent's table into the child; the
//!   copies become fork-inherited lifecycles once the child shows up in the
//!   trace.
//! - `close` and `shutdown` end a lifecycle; later ops on a shut-down fd are
//!   trailing.
//! - Anything on an fd the trace never created is an orphan.
//!
//! Unlike the implementation it copies tables eagerly at the fork event and
//! identifies lifecycles by content rather than by index.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use b4ns::trace::{Lifecycle, Reconstruction, TraceArgs, TraceEvent};

/// Table 2 of the classification, transcribed independently of the crate.
pub const TABLE2: [(&str, &str); 26] = [
    ("socket", "creation"),
    ("fcntl", "configuration"),
    ("setsockopt", "configuration"),
    ("ioctl", "configuration"),
    ("connect", "connection"),
    ("bind", "connection"),
    ("getsockopt", "status"),
    ("getsockname", "status"),
    ("getpeername", "status"),
    ("accept", "derivation"),
    ("accept4", "derivation"),
    ("clone", "derivation"),
    ("poll", "communication"),
    ("recvfrom", "communication"),
    ("sendfile", "communication"),
    ("write", "communication"),
    ("select", "communication"),
    ("read", "communication"),
    ("listen", "communication"),
    ("lseek", "communication"),
    ("readv", "communication"),
    ("writev", "communication"),
    ("epoll_ctl", "communication"),
    ("epoll_wait", "communication"),
    ("close", "close"),
    ("shutdown", "close"),
];

fn class_of(name: &str) -> Option<&'static str> {
    if let Some((_, c)) = TABLE2.iter().find(|(n, _)| *n == name) {
        return Some(c);
    }
    match name {
        "fork" | "vfork" | "clone3" | "dup" | "dup2" | "dup3" => Some("derivation"),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Stream,
    Dgram,
    File,
}

/// Counts of generated event shapes, to check coverage.
#[derive(Debug, Default, Clone)]
pub struct Coverage {
    pub sockets: usize,
    pub forks: usize,
    pub forked_children_active: usize,
    pub accepts: usize,
    pub dups: usize,
    pub closes: usize,
    pub shutdowns: usize,
    pub orphan_ops: usize,
    pub dgram: usize,
    pub fd_reuse: usize,
}

/// Generates a kernel-consistent trace of `n` events.
pub fn generate(seed: u64, n: usize) -> (Vec<TraceEvent>, Coverage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut procs: BTreeMap<i32, BTreeMap<i32, Kind>> = BTreeMap::new();
    procs.insert(100, BTreeMap::new());
    let mut next_pid = 101;
    let mut cov = Coverage::default();
    let mut ever_used: HashMap<i32, HashSet<i32>> = HashMap::new();
    let mut events = Vec::with_capacity(n);
    let mut active: HashSet<i32> = HashSet::from([100]);

    let lowest_free = |t: &BTreeMap<i32, Kind>| (3..).find(|fd| !t.contains_key(fd)).unwrap();

    while events.len() < n {
        let pids: Vec<i32> = procs.keys().copied().collect();
        let pid = *pids.choose(&mut rng).unwrap();
        if pid != 100 && active.insert(pid) {
            cov.forked_children_active += 1;
        }
        let ts = events.len() as u64 * 1000 + rng.gen_range(0..500);
        let table = procs.get(&pid).unwrap().clone();
        let sockets: Vec<i32> = table.iter().filter(|(_, k)| **k != Kind::File).map(|(fd, _)| *fd).collect();
        let any_fd: Vec<i32> = table.keys().copied().collect();
        let pick = |rng: &mut ChaCha8Rng, v: &[i32]| v.choose(rng).copied();

        let ev = |syscall: &str, fd: Option<i32>, ret: i64| TraceEvent {
            ts,
            pid,
            tid: pid,
            syscall: syscall.into(),
            args: TraceArgs { fd, ..TraceArgs::default() },
            ret,
        };

        let roll = rng.gen_range(0..100);
        let e = match roll {
            0..=13 => {
                let fd = lowest_free(&table);
                if ever_used.entry(pid).or_default().contains(&fd) {
                    cov.fd_reuse += 1;
                }
                let dgram = rng.gen_bool(0.12);
                let failed = rng.gen_bool(0.04);
                let mut e = ev("socket", None, if failed { -24 } else { fd as i64 });
                e.args.domain = Some("AF_INET".into());
                e.args.sock_type = Some(if dgram { "SOCK_DGRAM" } else { "SOCK_STREAM|SOCK_CLOEXEC" }.into());
                if !failed {
                    cov.sockets += 1;
                    cov.dgram += dgram as usize;
                    procs.get_mut(&pid).unwrap().insert(fd, if dgram { Kind::Dgram } else { Kind::Stream });
                    ever_used.entry(pid).or_default().insert(fd);
                }
                e
            }
            14..=17 => {
                // An ordinary file, never tracked.
                let fd = lowest_free(&table);
                procs.get_mut(&pid).unwrap().insert(fd, Kind::File);
                ev("openat", None, fd as i64)
            }
            18..=23 if !sockets.is_empty() => {
                let fd = pick(&mut rng, &sockets).unwrap();
                let name = *["setsockopt", "fcntl", "ioctl"].choose(&mut rng).unwrap();
                ev(name, Some(fd), 0)
            }
            24..=29 if !sockets.is_empty() => {
                let fd = pick(&mut rng, &sockets).unwrap();
                let name = *["connect", "bind", "listen"].choose(&mut rng).unwrap();
                let ret = if name == "connect" && rng.gen_bool(0.3) { -115 } else { 0 };
                let mut e = ev(name, Some(fd), ret);
                if name != "listen" {
                    e.args.addr = Some(format!("10.4.0.{}:{}", rng.gen_range(2..9), rng.gen_range(1..100)));
                }
                e
            }
            30..=36 if !sockets.is_empty() => {
                let fd = pick(&mut rng, &sockets).unwrap();
                let name = *["accept", "accept4"].choose(&mut rng).unwrap();
                if rng.gen_bool(0.15) {
                    ev(name, Some(fd), -11)
                } else {
                    let new_fd = lowest_free(&table);
                    let kind = table[&fd];
                    procs.get_mut(&pid).unwrap().insert(new_fd, kind);
                    cov.accepts += 1;
                    ev(name, Some(fd), new_fd as i64)
                }
            }
            37..=41 if !any_fd.is_empty() => {
                let fd = pick(&mut rng, &any_fd).unwrap();
                let kind = table[&fd];
                let name = *["dup", "dup2", "dup3"].choose(&mut rng).unwrap();
                let target = if name == "dup" { lowest_free(&table) } else { rng.gen_range(3..12) };
                procs.get_mut(&pid).unwrap().insert(target, kind);
                if kind != Kind::File {
                    cov.dups += 1;
                }
                ev(name, Some(fd), target as i64)
            }
            42..=47 => {
                let child = next_pid;
                next_pid += 1;
                let copy = table.clone();
                procs.insert(child, copy);
                cov.forks += 1;
                let name = *["fork", "clone", "vfork"].choose(&mut rng).unwrap();
                ev(name, None, child as i64)
            }
            48..=69 if !any_fd.is_empty() => {
                let fd = pick(&mut rng, &any_fd).unwrap();
                let name = *["read", "write", "recvfrom", "sendfile", "readv", "writev", "poll", "epoll_ctl", "lseek"]
                    .choose(&mut rng)
                    .unwrap();
                ev(name, Some(fd), rng.gen_range(0..4096))
            }
            70..=73 => {
                let name = *["select", "epoll_wait"].choose(&mut rng).unwrap();
                ev(name, None, 1)
            }
            74..=79 if !sockets.is_empty() => {
                let fd = pick(&mut rng, &sockets).unwrap();
                let name = *["getsockopt", "getsockname", "getpeername"].choose(&mut rng).unwrap();
                ev(name, Some(fd), 0)
            }
            80..=89 if !any_fd.is_empty() => {
                let fd = pick(&mut rng, &any_fd).unwrap();
                procs.get_mut(&pid).unwrap().remove(&fd);
                cov.closes += 1;
                ev("close", Some(fd), 0)
            }
            90..=93 if !sockets.is_empty() => {
                let fd = pick(&mut rng, &sockets).unwrap();
                cov.shutdowns += 1;
                ev("shutdown", Some(fd), 0)
            }
            94..=97 => {
                // Inherited from before the trace started.
                let fd = *[0, 1, 2, 40, 41].choose(&mut rng).unwrap();
                if procs[&pid].contains_key(&fd) {
                    continue;
                }
                cov.orphan_ops += 1;
                let name = *["write", "read", "getsockopt", "shutdown", "close", "accept"].choose(&mut rng).unwrap();
                let ret = if name == "accept" { -9 } else { 0 };
                ev(name, Some(fd), ret)
            }
            _ => continue,
        };
        events.push(e);
    }
    (events, cov)
}

/// Lifecycle in a form independent of index assignment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Canon {
    pub first_event: usize,
    pub pid: i32,
    pub fd: i32,
    pub origin: String,
    /// `(pid, fd, first_event)` of the parent.
    pub parent: Option<(i32, i32, usize)>,
    /// `(event, syscall, class, synthetic)`.
    pub ops: Vec<(usize, String, String, bool)>,
    pub trailing: Vec<(usize, String, String, bool)>,
    pub closed: bool,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Entry {
    Life(usize),
    Untracked,
}

#[derive(Debug, Default)]
pub struct OracleResult {
    pub lifecycles: Vec<Canon>,
    pub orphans: Vec<Canon>,
    pub filtered_events: usize,
}

struct Oracle<'a> {
    events: &'a [TraceEvent],
    lives: Vec<Canon>,
    orphans: Vec<Canon>,
    tables: HashMap<i32, HashMap<i32, Entry>>,
    open_orphan: HashMap<(i32, i32), usize>,
    filtered: usize,
}

impl Oracle<'_> {
    fn op(&self, idx: usize, synthetic: bool) -> (usize, String, String, bool) {
        let name = &self.events[idx].syscall;
        (idx, name.clone(), class_of(name).unwrap().to_string(), synthetic)
    }

    fn key_of(&self, id: usize) -> (i32, i32, usize) {
        let l = &self.lives[id];
        (l.pid, l.fd, l.first_event)
    }

    fn create(&mut self, pid: i32, fd: i32, origin: &str, parent: Option<usize>, first: usize) {
        let table = self.tables.entry(pid).or_default();
        if let Some(Entry::Life(old)) = table.get(&fd).copied() {
            if !self.lives[old].closed {
                self.lives[old].notes.push(format!("fd {fd} reused without close"));
            }
        }
        let parent = parent.map(|p| self.key_of(p));
        let synthetic = origin != "socket-call";
        let op = self.op(first, synthetic);
        self.lives.push(Canon {
            first_event: first,
            pid,
            fd,
            origin: origin.into(),
            parent,
            ops: vec![op],
            trailing: vec![],
            closed: false,
            notes: vec![],
        });
        let id = self.lives.len() - 1;
        self.tables.entry(pid).or_default().insert(fd, Entry::Life(id));
    }

    fn append(list: &mut Canon, op: (usize, String, String, bool)) {
        if list.closed {
            list.trailing.push(op);
        } else {
            if op.2 == "close" {
                list.closed = true;
            }
            list.ops.push(op);
        }
    }
}

/// Runs the oracle over `events`.
pub fn oracle(events: &[TraceEvent]) -> OracleResult {
    // First appearance of every pid, to decide whether a forked child ever
    // materializes.
    let mut first_seen: HashMap<i32, usize> = HashMap::new();
    for (i, e) in events.iter().enumerate() {
        first_seen.entry(e.pid).or_insert(i);
    }
    let mut o = Oracle {
        events,
        lives: vec![],
        orphans: vec![],
        tables: HashMap::new(),
        open_orphan: HashMap::new(),
        filtered: 0,
    };
    // Child tables are copied at fork time and turned into lifecycles at
    // the child's first event, in ascending fd order.
    let mut pending_child: HashMap<i32, (usize, Vec<(i32, Entry)>)> = HashMap::new();

    for (i, e) in events.iter().enumerate() {
        if let Some((fork_idx, snapshot)) = pending_child.remove(&e.pid) {
            o.tables.insert(e.pid, HashMap::new());
            for (fd, entry) in snapshot {
                match entry {
                    Entry::Life(parent) => o.create(e.pid, fd, "fork-inherited", Some(parent), fork_idx),
                    Entry::Untracked => {
                        o.tables.get_mut(&e.pid).unwrap().insert(fd, Entry::Untracked);
                    }
                }
            }
        }
        let name = e.syscall.as_str();
        if class_of(name).is_none() {
            continue;
        }
        match name {
            "socket" => {
                if e.ret >= 0 {
                    let fd = e.ret as i32;
                    if e.args.sock_type.as_deref().is_some_and(|t| !t.contains("SOCK_STREAM")) {
                        o.tables.entry(e.pid).or_default().insert(fd, Entry::Untracked);
                        o.filtered += 1;
                    } else {
                        o.create(e.pid, fd, "socket-call", None, i);
                    }
                }
                continue;
            }
            "fork" | "vfork" | "clone" | "clone3" => {
                let child = e.ret as i32;
                if e.ret > 0 && first_seen.get(&child).is_some_and(|&f| f > i) {
                    let mut snap: Vec<(i32, Entry)> =
                        o.tables.get(&e.pid).map(|t| t.iter().map(|(a, b)| (*a, *b)).collect()).unwrap_or_default();
                    snap.sort_by_key(|(fd, _)| *fd);
                    pending_child.insert(child, (i, snap));
                }
                continue;
            }
            _ => {}
        }
        let Some(fd) = e.args.fd else { continue };
        let entry = o.tables.get(&e.pid).and_then(|t| t.get(&fd)).copied();
        let op = o.op(i, false);
        match entry {
            Some(Entry::Life(id)) => Oracle::append(&mut o.lives[id], op),
            Some(Entry::Untracked) => o.filtered += 1,
            None => {
                let id = match o.open_orphan.get(&(e.pid, fd)) {
                    Some(&id) => id,
                    None => {
                        o.orphans.push(Canon {
                            first_event: i,
                            pid: e.pid,
                            fd,
                            origin: "orphan".into(),
                            parent: None,
                            ops: vec![],
                            trailing: vec![],
                            closed: false,
                            notes: vec![],
                        });
                        o.open_orphan.insert((e.pid, fd), o.orphans.len() - 1);
                        o.orphans.len() - 1
                    }
                };
                Oracle::append(&mut o.orphans[id], op);
            }
        }
        let derived = matches!(name, "accept" | "accept4" | "dup" | "dup2" | "dup3");
        if derived && e.ret >= 0 && e.ret as i32 != fd {
            let new_fd = e.ret as i32;
            let origin = if name.starts_with("dup") { "dup-derived" } else { "accept-derived" };
            match entry {
                Some(Entry::Life(parent)) => o.create(e.pid, new_fd, origin, Some(parent), i),
                Some(Entry::Untracked) => {
                    o.tables.entry(e.pid).or_default().insert(new_fd, Entry::Untracked);
                }
                None => {
                    if let Some(t) = o.tables.get_mut(&e.pid) {
                        t.remove(&new_fd);
                    }
                }
            }
        }
        if name == "close" {
            if let Some(t) = o.tables.get_mut(&e.pid) {
                t.remove(&fd);
            }
            o.open_orphan.remove(&(e.pid, fd));
        }
    }
    let mut lifecycles = o.lives;
    lifecycles.sort();
    let mut orphans = o.orphans;
    orphans.sort();
    OracleResult { lifecycles, orphans, filtered_events: o.filtered }
}

fn canon_of(l: &Lifecycle, all: &[Lifecycle]) -> Canon {
    let first_event = l.ops.first().map(|o| o.event).unwrap_or(usize::MAX);
    let ops = |v: &[b4ns::trace::Op]| {
        v.iter().map(|o| (o.event, o.syscall.clone(), o.class.as_str().to_string(), o.synthetic)).collect()
    };
    Canon {
        first_event,
        pid: l.owner_pid,
        fd: l.fd,
        origin: l.origin.as_str().into(),
        parent: l.parent.map(|p| {
            let p = &all[p];
            (p.owner_pid, p.fd, p.ops[0].event)
        }),
        ops: ops(&l.ops),
        trailing: ops(&l.trailing),
        closed: l.closed,
        notes: l.notes.clone(),
    }
}

/// The implementation's result in oracle form.
pub fn canonical(r: &Reconstruction) -> OracleResult {
    let mut lifecycles: Vec<Canon> = r.lifecycles.iter().map(|l| canon_of(l, &r.lifecycles)).collect();
    lifecycles.sort();
    let mut orphans: Vec<Canon> = r.orphans.iter().map(|l| canon_of(l, &r.orphans)).collect();
    orphans.sort();
    OracleResult { lifecycles, orphans, filtered_events: r.stats.filtered_events }
}

/// Human-readable differences between two results; empty when equal.
pub fn diff(expected: &OracleResult, actual: &OracleResult) -> Vec<String> {
    let mut out = Vec::new();
    let cmp = |what: &str, a: &[Canon], b: &[Canon], out: &mut Vec<String>| {
        if a.len() != b.len() {
            out.push(format!("{what}: oracle has {}, reconstruction has {}", a.len(), b.len()));
        }
        for (x, y) in a.iter().zip(b) {
            if x != y {
                out.push(format!("{what}: oracle {x:?}\n  vs reconstruction {y:?}"));
                break;
            }
        }
    };
    cmp("lifecycles", &expected.lifecycles, &actual.lifecycles, &mut out);
    cmp("orphans", &expected.orphans, &actual.orphans, &mut out);
    if expected.filtered_events != actual.filtered_events {
        out.push(format!("filtered events: {} vs {}", expected.filtered_events, actual.filtered_events));
    }
    out
}
