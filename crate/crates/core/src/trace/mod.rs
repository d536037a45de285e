//! Offline socket-lifecycle analysis of syscall traces.
//!
//! Input is line-delimited JSON, one syscall per line:
//!
//! ```json
//! {"ts": 1000, "pid": 10, "tid": 10, "syscall": "connect",
//!  "args": {"fd": 3, "addr": "10.0.0.1:80"}, "ret": 0}
//! ```
//!
//! A per-process fd table is simulated over the events. Each socket's
//! operations are collected into a [`Lifecycle`]; operations on fds the
//! trace never created become orphans.

pub mod strace;

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::socket_state::{classify_syscall, SyscallClass};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("trace contains no valid events")]
    EmptyTrace,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceArgs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fd: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub addr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub sock_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    /// Monotonic nanoseconds.
    pub ts: u64,
    pub pid: i32,
    pub tid: i32,
    pub syscall: String,
    pub args: TraceArgs,
    pub ret: i64,
}

impl TraceEvent {
    pub fn new(ts: u64, pid: i32, syscall: &str, fd: Option<i32>, ret: i64) -> Self {
        Self {
            ts,
            pid,
            tid: pid,
            syscall: syscall.to_string(),
            args: TraceArgs { fd, ..TraceArgs::default() },
            ret,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedTrace {
    /// Stable-sorted by `ts`.
    pub events: Vec<TraceEvent>,
    pub skipped: Vec<SkippedLine>,
}

/// Parses JSONL. Malformed lines are skipped and listed; blank lines are
/// ignored.
pub fn parse_trace(input: impl BufRead) -> Result<ParsedTrace, TraceError> {
    let mut out = ParsedTrace::default();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceEvent>(&line) {
            Ok(ev) => out.events.push(ev),
            Err(e) => out.skipped.push(SkippedLine { line: i + 1, reason: e.to_string() }),
        }
    }
    if out.events.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    out.events.sort_by_key(|e| e.ts);
    Ok(out)
}

/// Writes events as JSONL.
pub fn write_trace(events: &[TraceEvent], out: &mut impl std::io::Write) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut *out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    SocketCall,
    AcceptDerived,
    ForkInherited,
    /// dup/dup2/dup3; not part of the classified set.
    DupDerived,
    /// Operations on an fd whose creation the trace does not show.
    Orphan,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::SocketCall => "socket-call",
            Origin::AcceptDerived => "accept-derived",
            Origin::ForkInherited => "fork-inherited",
            Origin::DupDerived => "dup-derived",
            Origin::Orphan => "orphan",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Op {
    pub syscall: String,
    pub class: SyscallClass,
    /// Index into the parsed event list.
    pub event: usize,
    /// Inherited from the event that created this lifecycle (fork, accept
    /// or dup on another fd) rather than issued on this fd.
    pub synthetic: bool,
    /// Labelled here though outside the classified set.
    pub extension: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Lifecycle {
    pub id: usize,
    pub origin: Origin,
    pub owner_pid: i32,
    pub fd: i32,
    /// Lifecycle this one was derived or inherited from.
    pub parent: Option<usize>,
    /// Ends at the first Close-class op.
    pub ops: Vec<Op>,
    /// Operations seen after a shutdown on the still-open fd.
    pub trailing: Vec<Op>,
    pub closed: bool,
    pub notes: Vec<String>,
}

impl Lifecycle {
    fn push(&mut self, op: Op) {
        if self.closed {
            self.trailing.push(op);
        } else {
            if op.class == SyscallClass::Close {
                self.closed = true;
            }
            self.ops.push(op);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ReconstructStats {
    pub events: usize,
    /// Events on non-stream sockets.
    pub filtered_events: usize,
    /// Classified syscalls without an fd argument.
    pub unattributed_events: usize,
    pub unclassified_events: usize,
    pub process_events: usize,
    pub failed_creations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Reconstruction {
    pub lifecycles: Vec<Lifecycle>,
    pub orphans: Vec<Lifecycle>,
    pub stats: ReconstructStats,
}

const PROCESS_DERIVATION: [&str; 4] = ["clone", "fork", "vfork", "clone3"];
const FD_DERIVATION: [&str; 3] = ["dup", "dup2", "dup3"];

/// Class used for a syscall in lifecycles: the classified set plus the
/// process and fd derivation extensions.
pub fn lifecycle_class(syscall: &str) -> Option<(SyscallClass, bool)> {
    match classify_syscall(syscall) {
        Some(c) => Some((c, false)),
        None if PROCESS_DERIVATION.contains(&syscall) || FD_DERIVATION.contains(&syscall) => {
            Some((SyscallClass::Derivation, true))
        }
        None => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Life(usize),
    /// A non-stream socket; its events are counted, not tracked.
    Filtered,
}

struct Pending {
    fork_event: usize,
    table: HashMap<i32, Slot>,
}

#[derive(Default)]
struct Builder {
    out: Reconstruction,
    tables: HashMap<i32, HashMap<i32, Slot>>,
    pending: HashMap<i32, Pending>,
    orphan_of: HashMap<(i32, i32), usize>,
}

impl Builder {
    fn op(ev: &TraceEvent, idx: usize, synthetic: bool) -> Op {
        let (class, extension) = lifecycle_class(&ev.syscall).expect("only classified events become ops");
        Op { syscall: ev.syscall.clone(), class, event: idx, synthetic, extension }
    }

    fn open(&mut self, pid: i32, fd: i32, origin: Origin, parent: Option<usize>, first: Op) -> usize {
        if let Some(Slot::Life(old)) = self.tables.get(&pid).and_then(|t| t.get(&fd)).copied() {
            let l = &mut self.out.lifecycles[old];
            if !l.closed {
                l.notes.push(format!("fd {fd} reused without close"));
            }
        }
        let id = self.out.lifecycles.len();
        self.out.lifecycles.push(Lifecycle {
            id,
            origin,
            owner_pid: pid,
            fd,
            parent,
            ops: vec![first],
            trailing: Vec::new(),
            closed: false,
            notes: Vec::new(),
        });
        self.tables.entry(pid).or_default().insert(fd, Slot::Life(id));
        id
    }

    fn materialize(&mut self, pid: i32, events: &[TraceEvent]) {
        let Some(p) = self.pending.remove(&pid) else { return };
        self.tables.insert(pid, HashMap::new());
        let mut fds: Vec<_> = p.table.into_iter().collect();
        fds.sort_by_key(|(fd, _)| *fd);
        for (fd, slot) in fds {
            match slot {
                Slot::Filtered => {
                    self.tables.get_mut(&pid).unwrap().insert(fd, Slot::Filtered);
                }
                Slot::Life(parent) => {
                    let first = Self::op(&events[p.fork_event], p.fork_event, true);
                    self.open(pid, fd, Origin::ForkInherited, Some(parent), first);
                }
            }
        }
    }

    fn slot(&self, pid: i32, fd: i32) -> Option<Slot> {
        self.tables.get(&pid).and_then(|t| t.get(&fd)).copied()
    }

    fn unmap(&mut self, pid: i32, fd: i32) {
        if let Some(t) = self.tables.get_mut(&pid) {
            t.remove(&fd);
        }
    }

    /// Appends `op` to whatever owns `fd`. Returns the owning slot.
    fn attribute(&mut self, pid: i32, fd: i32, op: Op) -> Option<Slot> {
        match self.slot(pid, fd) {
            Some(Slot::Life(id)) => {
                self.out.lifecycles[id].push(op);
                Some(Slot::Life(id))
            }
            Some(Slot::Filtered) => {
                self.out.stats.filtered_events += 1;
                Some(Slot::Filtered)
            }
            None => {
                let closes = op.syscall == "close";
                let id = *self.orphan_of.entry((pid, fd)).or_insert_with(|| {
                    let id = self.out.orphans.len();
                    self.out.orphans.push(Lifecycle {
                        id,
                        origin: Origin::Orphan,
                        owner_pid: pid,
                        fd,
                        parent: None,
                        ops: Vec::new(),
                        trailing: Vec::new(),
                        closed: false,
                        notes: Vec::new(),
                    });
                    id
                });
                self.out.orphans[id].push(op);
                if closes {
                    self.orphan_of.remove(&(pid, fd));
                }
                None
            }
        }
    }

    fn event(&mut self, idx: usize, events: &[TraceEvent]) {
        let ev = &events[idx];
        self.materialize(ev.pid, events);
        let name = ev.syscall.as_str();
        let Some((class, _)) = lifecycle_class(name) else {
            self.out.stats.unclassified_events += 1;
            return;
        };

        if name == "socket" {
            if ev.ret < 0 {
                self.out.stats.failed_creations += 1;
                return;
            }
            let fd = ev.ret as i32;
            let stream = ev.args.sock_type.as_deref().is_none_or(|t| t.contains("SOCK_STREAM"));
            if stream {
                self.open(ev.pid, fd, Origin::SocketCall, None, Self::op(ev, idx, false));
            } else {
                self.tables.entry(ev.pid).or_default().insert(fd, Slot::Filtered);
                self.out.stats.filtered_events += 1;
            }
            return;
        }

        if PROCESS_DERIVATION.contains(&name) {
            self.out.stats.process_events += 1;
            if ev.ret > 0 {
                let table = self.tables.get(&ev.pid).cloned().unwrap_or_default();
                self.pending.insert(ev.ret as i32, Pending { fork_event: idx, table });
            }
            return;
        }

        let Some(fd) = ev.args.fd else {
            self.out.stats.unattributed_events += 1;
            return;
        };
        let owner = self.attribute(ev.pid, fd, Self::op(ev, idx, false));

        let derives = name == "accept" || name == "accept4" || FD_DERIVATION.contains(&name);
        if derives && ev.ret >= 0 && ev.ret as i32 != fd {
            let new_fd = ev.ret as i32;
            let origin = if FD_DERIVATION.contains(&name) { Origin::DupDerived } else { Origin::AcceptDerived };
            match owner {
                Some(Slot::Life(parent)) => {
                    self.open(ev.pid, new_fd, origin, Some(parent), Self::op(ev, idx, true));
                }
                Some(Slot::Filtered) => {
                    self.tables.entry(ev.pid).or_default().insert(new_fd, Slot::Filtered);
                }
                None => self.unmap(ev.pid, new_fd),
            }
        }
        if name == "close" {
            self.unmap(ev.pid, fd);
        }
        debug_assert!(class == SyscallClass::Close || name != "close");
    }
}

/// Rebuilds per-socket lifecycles from time-ordered events.
pub fn reconstruct(events: &[TraceEvent]) -> Reconstruction {
    let mut b = Builder::default();
    b.out.stats.events = events.len();
    for idx in 0..events.len() {
        b.event(idx, events);
    }
    b.out
}

/// Ops whose label disagrees with the classified set. Empty on success.
pub fn label_mismatches(r: &Reconstruction) -> Vec<String> {
    let mut bad = Vec::new();
    for l in r.lifecycles.iter().chain(&r.orphans) {
        for op in l.ops.iter().chain(&l.trailing) {
            match classify_syscall(&op.syscall) {
                Some(c) if c == op.class && !op.extension => {}
                None if op.extension && op.class == SyscallClass::Derivation => {}
                other => bad.push(format!(
                    "lifecycle {} op {}: labelled {:?}, classified {other:?}",
                    l.id, op.syscall, op.class
                )),
            }
        }
    }
    bad
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassCount {
    pub class: SyscallClass,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LifecycleReport {
    pub id: usize,
    pub origin: Origin,
    pub pid: i32,
    pub fd: i32,
    pub parent: Option<usize>,
    /// `(syscall, class)` in order.
    pub ops: Vec<(String, SyscallClass)>,
    pub trailing: Vec<(String, SyscallClass)>,
    pub closed: bool,
    pub notes: Vec<String>,
}

impl From<&Lifecycle> for LifecycleReport {
    fn from(l: &Lifecycle) -> Self {
        let pairs = |ops: &[Op]| ops.iter().map(|o| (o.syscall.clone(), o.class)).collect();
        Self {
            id: l.id,
            origin: l.origin,
            pid: l.owner_pid,
            fd: l.fd,
            parent: l.parent,
            ops: pairs(&l.ops),
            trailing: pairs(&l.trailing),
            closed: l.closed,
            notes: l.notes.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Report {
    pub stats: ReconstructStats,
    pub skipped_lines: usize,
    /// Issued ops per class, in class order.
    pub histogram: Vec<ClassCount>,
    /// Distinct Configuration-class syscalls seen on sockets.
    pub configuration_syscalls: Vec<String>,
    /// Syscalls labelled outside the classified set.
    pub extensions_observed: Vec<String>,
    pub lifecycles: Vec<LifecycleReport>,
    pub orphans: Vec<LifecycleReport>,
}

pub fn report(r: &Reconstruction, skipped_lines: usize) -> Report {
    let mut counts: HashMap<SyscallClass, u64> = HashMap::new();
    let mut config = BTreeSet::new();
    let mut ext = BTreeSet::new();
    for l in r.lifecycles.iter().chain(&r.orphans) {
        for op in l.ops.iter().chain(&l.trailing) {
            if op.extension {
                ext.insert(op.syscall.clone());
            }
            if op.synthetic {
                continue;
            }
            *counts.entry(op.class).or_default() += 1;
            if op.class == SyscallClass::Configuration {
                config.insert(op.syscall.clone());
            }
        }
    }
    Report {
        stats: r.stats.clone(),
        skipped_lines,
        histogram: SyscallClass::ALL
            .iter()
            .map(|c| ClassCount { class: *c, count: counts.get(c).copied().unwrap_or(0) })
            .collect(),
        configuration_syscalls: config.into_iter().collect(),
        extensions_observed: ext.into_iter().collect(),
        lifecycles: r.lifecycles.iter().map(Into::into).collect(),
        orphans: r.orphans.iter().map(Into::into).collect(),
    }
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let st = &self.stats;
        let _ = writeln!(
            s,
            "{} events, {} socket lifecycles, {} orphans, {} skipped lines",
            st.events,
            self.lifecycles.len(),
            self.orphans.len(),
            self.skipped_lines
        );
        let _ = writeln!(
            s,
            "filtered {}, unattributed {}, unclassified {}, failed socket() {}",
            st.filtered_events, st.unattributed_events, st.unclassified_events, st.failed_creations
        );
        s.push_str("\nclass histogram\n");
        for c in &self.histogram {
            let _ = writeln!(s, "  {:<14} {}", c.class.as_str(), c.count);
        }
        let _ = writeln!(s, "\nconfiguration syscalls: {}", list_or_none(&self.configuration_syscalls));
        if !self.extensions_observed.is_empty() {
            let _ = writeln!(s, "outside the classified set: {}", self.extensions_observed.join(", "));
        }
        for (title, ls) in [("lifecycles", &self.lifecycles), ("orphans", &self.orphans)] {
            if ls.is_empty() {
                continue;
            }
            let _ = writeln!(s, "\n{title}");
            for l in ls {
                let parent = l.parent.map(|p| format!(" from #{p}")).unwrap_or_default();
                let _ = writeln!(s, "  #{} pid {} fd {} {}{}", l.id, l.pid, l.fd, l.origin.as_str(), parent);
                let seq: Vec<String> = l.ops.iter().map(|(n, c)| format!("{n}[{}]", c.as_str())).collect();
                let _ = writeln!(s, "    {}", seq.join(" -> "));
                if !l.trailing.is_empty() {
                    let tail: Vec<&str> = l.trailing.iter().map(|(n, _)| n.as_str()).collect();
                    let _ = writeln!(s, "    after close: {}", tail.join(", "));
                }
                for n in &l.notes {
                    let _ = writeln!(s, "    note: {n}");
                }
            }
        }
        s
    }
}

fn list_or_none(v: &[String]) -> String {
    if v.is_empty() {
        "none".into()
    } else {
        v.join(", ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use SyscallClass::*;

    fn ev(ts: u64, pid: i32, name: &str, fd: Option<i32>, ret: i64) -> TraceEvent {
        TraceEvent::new(ts, pid, name, fd, ret)
    }

    fn classes(l: &Lifecycle) -> Vec<SyscallClass> {
        l.ops.iter().map(|o| o.class).collect()
    }

    #[test]
    fn parse_counts_and_skips() {
        let input = r#"{"ts":1,"pid":1,"tid":1,"syscall":"socket","args":{"domain":"AF_INET","type":"SOCK_STREAM"},"ret":3}
{"ts":2,"pid":1,"tid":1,"syscall":"connect","args":{"fd":3,"addr":"10.0.0.1:80"}}

{"ts":3,"pid":1,"tid":1,"syscall":"close","args":{"fd":3},"ret":0}
not json
"#;
        let p = parse_trace(input.as_bytes()).unwrap();
        assert_eq!(p.events.len(), 2);
        assert_eq!(p.skipped.iter().map(|s| s.line).collect::<Vec<_>>(), vec![2, 5]);
        assert!(matches!(parse_trace("".as_bytes()), Err(TraceError::EmptyTrace)));
    }

    #[test]
    fn three_line_trace_parses_to_three_events() {
        let mut buf = Vec::new();
        write_trace(&[ev(3, 1, "close", Some(3), 0), ev(1, 1, "socket", None, 3), ev(2, 1, "write", Some(3), 5)], &mut buf)
            .unwrap();
        let p = parse_trace(buf.as_slice()).unwrap();
        assert_eq!(p.events.iter().map(|e| e.ts).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn basic_lifecycle() {
        let events = [
            ev(1, 10, "socket", None, 3),
            ev(2, 10, "connect", Some(3), 0),
            ev(3, 10, "write", Some(3), 4),
            ev(4, 10, "close", Some(3), 0),
        ];
        let r = reconstruct(&events);
        assert_eq!(r.lifecycles.len(), 1);
        assert_eq!(classes(&r.lifecycles[0]), vec![Creation, Connection, Communication, Close]);
        assert!(r.lifecycles[0].closed);
        assert!(label_mismatches(&r).is_empty());
    }

    #[test]
    fn fork_inherits_lifecycles() {
        let events = [
            ev(1, 10, "socket", None, 3),
            ev(2, 10, "fork", None, 11),
            ev(3, 11, "write", Some(3), 1),
            ev(4, 11, "close", Some(3), 0),
            ev(5, 10, "close", Some(3), 0),
        ];
        let r = reconstruct(&events);
        assert_eq!(r.lifecycles.len(), 2);
        let (parent, child) = (&r.lifecycles[0], &r.lifecycles[1]);
        assert_eq!(parent.origin, Origin::SocketCall);
        assert_eq!(classes(parent), vec![Creation, Close]);
        assert_eq!(child.origin, Origin::ForkInherited);
        assert_eq!(child.owner_pid, 11);
        assert_eq!(child.parent, Some(0));
        assert_eq!(classes(child), vec![Derivation, Communication, Close]);
        assert!(child.ops[0].synthetic && child.ops[0].extension);
        assert!(r.orphans.is_empty());
    }

    #[test]
    fn accept_and_dup_derive() {
        let events = [
            ev(1, 10, "socket", None, 5),
            ev(2, 10, "bind", Some(5), 0),
            ev(3, 10, "listen", Some(5), 0),
            ev(4, 10, "accept", Some(5), 7),
            ev(5, 10, "read", Some(7), 10),
            ev(6, 10, "dup2", Some(7), 9),
            ev(7, 10, "write", Some(9), 10),
        ];
        let r = reconstruct(&events);
        assert_eq!(r.lifecycles.len(), 3);
        assert_eq!(classes(&r.lifecycles[0]), vec![Creation, Connection, Communication, Derivation]);
        let acc = &r.lifecycles[1];
        assert_eq!((acc.origin, acc.fd, acc.parent), (Origin::AcceptDerived, 7, Some(0)));
        assert_eq!(classes(acc), vec![Derivation, Communication, Derivation]);
        let dup = &r.lifecycles[2];
        assert_eq!((dup.origin, dup.fd, dup.parent), (Origin::DupDerived, 9, Some(1)));
        let rep = report(&r, 0);
        assert_eq!(rep.extensions_observed, vec!["dup2".to_string()]);
    }

    #[test]
    fn orphans_filtering_and_reuse() {
        let events = [
            ev(1, 10, "write", Some(4), 1),
            ev(2, 10, "close", Some(4), 0),
            ev(3, 10, "read", Some(4), 0),
            TraceEvent {
                args: TraceArgs { sock_type: Some("SOCK_DGRAM".into()), ..TraceArgs::default() },
                ..ev(4, 10, "socket", None, 6)
            },
            ev(5, 10, "sendfile", Some(6), 1),
            ev(6, 10, "socket", None, 8),
            ev(7, 10, "socket", None, 8),
            ev(8, 10, "poll", None, 1),
            ev(9, 10, "mmap", None, 0),
            ev(10, 10, "shutdown", Some(8), 0),
            ev(11, 10, "close", Some(8), 0),
        ];
        let r = reconstruct(&events);
        assert_eq!(r.orphans.len(), 2, "close ends an orphan; reuse starts a new one");
        assert_eq!(r.stats.filtered_events, 2);
        assert_eq!(r.stats.unattributed_events, 1);
        assert_eq!(r.stats.unclassified_events, 1);
        assert_eq!(r.lifecycles.len(), 2);
        assert_eq!(r.lifecycles[0].notes, vec!["fd 8 reused without close".to_string()]);
        let second = &r.lifecycles[1];
        assert_eq!(classes(second), vec![Creation, Close]);
        assert_eq!(second.trailing.len(), 1);
    }

    #[test]
    fn report_histogram_and_configuration_set() {
        let events = [
            ev(1, 10, "socket", None, 3),
            ev(2, 10, "setsockopt", Some(3), 0),
            ev(3, 10, "fcntl", Some(3), 0),
            ev(4, 10, "setsockopt", Some(3), 0),
            ev(5, 10, "connect", Some(3), 0),
            ev(6, 10, "getpeername", Some(3), 0),
            ev(7, 10, "close", Some(3), 0),
        ];
        let rep = report(&reconstruct(&events), 0);
        let h: Vec<u64> = rep.histogram.iter().map(|c| c.count).collect();
        assert_eq!(h, vec![1, 3, 1, 1, 0, 0, 1]);
        assert_eq!(rep.configuration_syscalls, vec!["fcntl".to_string(), "setsockopt".to_string()]);
        assert!(rep.to_text().contains("socket[creation] -> setsockopt[configuration]"));
        assert_eq!(rep.to_json(), report(&reconstruct(&events), 0).to_json());
    }

    #[test]
    fn empty_socket_report() {
        let rep = report(&reconstruct(&[ev(1, 1, "mmap", None, 0)]), 0);
        assert!(rep.lifecycles.is_empty());
        assert!(rep.histogram.iter().all(|c| c.count == 0));
        assert!(rep.to_text().contains("configuration syscalls: none"));
    }

    fn arb_events() -> impl proptest::strategy::Strategy<Value = Vec<TraceEvent>> {
        use proptest::prelude::*;
        let names = prop::sample::select(vec![
            "socket", "connect", "write", "read", "close", "shutdown", "accept", "dup", "fork", "setsockopt", "poll",
            "mmap",
        ]);
        prop::collection::vec((0i32..3, names, 3i32..8, 3i64..9), 0..120).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (p, n, fd, ret))| {
                    let pid = 100 + p;
                    let ret = if n == "fork" { 100 + (p + 1) as i64 % 3 } else { ret };
                    let fd = (!matches!(n, "socket" | "fork" | "poll")).then_some(fd);
                    ev(i as u64, pid, n, fd, ret)
                })
                .collect()
        })
    }

    proptest::proptest! {
        #[test]
        fn every_fd_event_lands_exactly_once(events in arb_events()) {
            let r = reconstruct(&events);
            let mut seen = vec![0usize; events.len()];
            for l in r.lifecycles.iter().chain(&r.orphans) {
                for op in l.ops.iter().chain(&l.trailing).filter(|o| !o.synthetic) {
                    seen[op.event] += 1;
                }
            }
            for (i, e) in events.iter().enumerate() {
                let creates = e.syscall == "socket" && e.ret >= 0;
                let fd_op = e.args.fd.is_some() && lifecycle_class(&e.syscall).is_some();
                let expected = usize::from(creates || fd_op);
                proptest::prop_assert_eq!(seen[i], expected, "event {} {:?}", i, e);
            }
            for l in &r.lifecycles {
                proptest::prop_assert!(matches!(l.ops[0].class, Creation | Derivation));
                let first_close = l.ops.iter().position(|o| o.class == Close);
                if let Some(p) = first_close {
                    proptest::prop_assert_eq!(p, l.ops.len() - 1);
                }
            }
            proptest::prop_assert!(label_mismatches(&r).is_empty());
            let a = report(&r, 0).to_json();
            proptest::prop_assert_eq!(a, report(&reconstruct(&events), 0).to_json());
        }
    }
}
