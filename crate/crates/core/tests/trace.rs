mod common;

use std::net::{Ipv4Addr, SocketAddrV4};
use std::process::Command;

use b4ns::socket_state::{classify_syscall, SyscallClass, CLASSIFIED_SYSCALLS};
use b4ns::trace::{label_mismatches, parse_trace, reconstruct, report, write_trace, Origin, TraceEvent};
use common::oracle::{canonical, diff, generate, oracle, TABLE2};
use common::EchoServer;

#[test]
fn classification_matches_table() {
    assert_eq!(CLASSIFIED_SYSCALLS.len(), TABLE2.len());
    for (name, class) in TABLE2 {
        assert_eq!(classify_syscall(name).map(SyscallClass::as_str), Some(class), "{name}");
    }
    for other in ["openat", "dup", "fork", "sendto", "sendmsg", "recvmsg", "exit_group"] {
        assert_eq!(classify_syscall(other), None, "{other}");
    }
}

#[test]
fn reconstruction_matches_oracle_across_seeds() {
    for seed in 0..40 {
        let (events, cov) = generate(seed, 200);
        let d = diff(&oracle(&events), &canonical(&reconstruct(&events)));
        assert!(d.is_empty(), "seed {seed} ({cov:?}):\n{}", d.join("\n"));
    }
}

#[test]
fn generated_traces_cover_every_shape() {
    let mut total = common::oracle::Coverage::default();
    for seed in 0..40 {
        let (_, c) = generate(seed, 200);
        total.sockets += c.sockets;
        total.forks += c.forks;
        total.forked_children_active += c.forked_children_active;
        total.accepts += c.accepts;
        total.dups += c.dups;
        total.closes += c.closes;
        total.shutdowns += c.shutdowns;
        total.orphan_ops += c.orphan_ops;
        total.dgram += c.dgram;
        total.fd_reuse += c.fd_reuse;
    }
    for (what, n) in [
        ("sockets", total.sockets),
        ("forks", total.forks),
        ("active children", total.forked_children_active),
        ("accepts", total.accepts),
        ("dups", total.dups),
        ("closes", total.closes),
        ("shutdowns", total.shutdowns),
        ("orphan ops", total.orphan_ops),
        ("datagram sockets", total.dgram),
        ("fd reuse", total.fd_reuse),
    ] {
        assert!(n > 0, "no {what} generated");
    }
}

#[test]
fn every_socket_event_is_accounted_once() {
    for seed in 0..20 {
        let (events, _) = generate(seed, 200);
        let r = reconstruct(&events);
        let tracked: usize = r
            .lifecycles
            .iter()
            .chain(&r.orphans)
            .map(|l| l.ops.iter().chain(&l.trailing).filter(|o| !o.synthetic).count())
            .sum();
        let s = &r.stats;
        assert_eq!(
            tracked + s.filtered_events + s.unattributed_events + s.unclassified_events + s.process_events + s.failed_creations,
            events.len(),
            "seed {seed}"
        );
        assert!(label_mismatches(&r).is_empty());
    }
}

#[test]
fn shutdown_then_traffic_is_trailing() {
    let ev = vec![
        TraceEvent::new(1, 10, "socket", None, 3),
        TraceEvent::new(2, 10, "shutdown", Some(3), 0),
        TraceEvent::new(3, 10, "write", Some(3), 5),
        TraceEvent::new(4, 10, "close", Some(3), 0),
        TraceEvent::new(5, 10, "shutdown", Some(7), 0),
        TraceEvent::new(6, 10, "read", Some(7), 0),
    ];
    let r = reconstruct(&ev);
    let l = &r.lifecycles[0];
    assert!(l.closed);
    assert_eq!(l.ops.len(), 2);
    assert_eq!(l.trailing.iter().map(|o| o.syscall.as_str()).collect::<Vec<_>>(), ["write", "close"]);
    assert_eq!(r.orphans.len(), 1);
    assert_eq!(r.orphans[0].trailing.len(), 1);
}

#[test]
fn fork_inherits_only_for_children_that_run() {
    let ev = vec![
        TraceEvent::new(1, 10, "socket", None, 3),
        TraceEvent::new(2, 10, "fork", None, 11),
        TraceEvent::new(3, 10, "clone", None, 12),
        TraceEvent::new(4, 11, "write", Some(3), 1),
    ];
    let r = reconstruct(&ev);
    assert_eq!(r.lifecycles.len(), 2);
    let child = &r.lifecycles[1];
    assert_eq!((child.origin, child.owner_pid, child.parent), (Origin::ForkInherited, 11, Some(0)));
    assert!(child.ops[0].synthetic);
    assert!(child.ops[0].extension);
    assert_eq!(r.stats.process_events, 2);
}

#[test]
fn report_is_deterministic() {
    let (events, _) = generate(7, 200);
    let a = report(&reconstruct(&events), 0).to_json();
    let b = report(&reconstruct(&events), 0).to_json();
    assert_eq!(a, b);
}

#[test]
fn write_parse_round_trip() {
    let (events, _) = generate(3, 200);
    let mut buf = Vec::new();
    write_trace(&events, &mut buf).unwrap();
    let parsed = parse_trace(&buf[..]).unwrap();
    assert!(parsed.skipped.is_empty());
    assert_eq!(parsed.events, events);
}

#[test]
fn fixture_client_trace_reconstructs() {
    let echo = EchoServer::start(SocketAddrV4::new(Ipv4Addr::LOCALHOST, 0)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("client.jsonl");
    let target = format!("connect={}", echo.addr());
    let out = Command::new(common::b4ns_exe())
        .arg("__script")
        .arg("--trace")
        .arg(&trace)
        .args(["socket", "sndbuf=65536", "nonblock", &target, "echo=100000", "peer", "shutdown", "close"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let parsed = parse_trace(std::fs::File::open(&trace).map(std::io::BufReader::new).unwrap()).unwrap();
    let r = reconstruct(&parsed.events);
    assert_eq!(r.lifecycles.len(), 1);
    assert!(r.orphans.is_empty());
    let l = &r.lifecycles[0];
    assert!(l.closed);
    let classes: Vec<_> = l.ops.iter().map(|o| o.class).collect();
    assert_eq!(classes.first(), Some(&SyscallClass::Creation));
    let conn: Vec<_> = l.ops.iter().filter(|o| o.class == SyscallClass::Connection).map(|o| o.syscall.as_str()).collect();
    assert_eq!(conn, ["connect"]);
    for class in SyscallClass::ALL {
        if class != SyscallClass::Derivation {
            assert!(classes.contains(&class), "missing {class}");
        }
    }
}

#[test]
fn cli_analyze_reports_histogram() {
    let (events, _) = generate(11, 200);
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("t.jsonl");
    let mut buf = Vec::new();
    write_trace(&events, &mut buf).unwrap();
    std::fs::write(&input, buf).unwrap();
    let json = dir.path().join("r.json");
    let out = Command::new(common::trace_exe())
        .args(["analyze", "--input"])
        .arg(&input)
        .arg("--json")
        .arg(&json)
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(json).unwrap()).unwrap();
    assert_eq!(v["stats"]["events"], 200);
    assert!(String::from_utf8_lossy(&out.stdout).contains("communication"));
}
