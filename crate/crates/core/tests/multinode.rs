mod common;

use std::net::{Ipv4Addr, SocketAddrV4, TcpListener};
use std::sync::Arc;
use std::time::{Duration, Instant};

use b4ns::clock::{Clock, ManualClock, SystemClock};
use b4ns::engine::{NetEnvironment, Policy, RemoteResolver};
use b4ns::launch::NetnsMode;
use b4ns::multinode::{
    mapping_key, publish_mapping, FileKvs, HttpKvs, KvsClient, KvsMirror, KvsServer, Multinode, MultinodeConfig,
};
use b4ns::net::{Ipv4Cidr, PublishMapping};
use common::{engine, host_addr, run_supervised, steps, CountingKvs, EchoServer};

/// Lease long enough to outlive the test.
const FOREVER: Duration = Duration::from_secs(100 * 365 * 24 * 3600);
const REMOTE: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(10, 4, 0, 3), 80);

fn mapping(host_port: u16) -> PublishMapping {
    PublishMapping::parse(&format!("{host_port}:80"), *REMOTE.ip()).unwrap()
}

#[test]
fn cross_node_connect_is_rewritten() {
    let server = KvsServer::start("127.0.0.1:0").unwrap();
    let echo = EchoServer::start(SocketAddrV4::new(host_addr(), 0)).unwrap();

    let node_a = Multinode::new(
        MultinodeConfig::new("node-a", host_addr()),
        Arc::new(HttpKvs::new(server.url(), Duration::from_secs(2))),
        Arc::new(SystemClock),
    );
    node_a.add_local("web", mapping(echo.addr().port()));

    let node_b = Multinode::new(
        MultinodeConfig::new("node-b", Ipv4Addr::new(192, 0, 2, 20)),
        Arc::new(HttpKvs::new(server.url(), Duration::from_secs(2))),
        Arc::new(SystemClock),
    );
    assert_eq!(node_b.mirror().refresh(&**node_b.kvs()).unwrap(), 1);

    let dir = tempfile::tempdir().unwrap();
    let cidr = Ipv4Cidr::new(Ipv4Addr::new(10, 4, 0, 0), 16).unwrap();
    let mut policy = Policy::new("client", NetEnvironment::new(vec![cidr], vec![], false).unwrap());
    policy.remote = Some(node_b.mirror());
    let script = steps(&["socket", &format!("connect={REMOTE}"), "echo=500000", "peer", "close"]);
    let (out, rep) = run_supervised(engine(policy, dir.path()), &script, NetnsMode::New, dir.path());
    assert!(out.ok("echo"), "{:?}", out.lines);
    assert_eq!(out.data("peer")["addr"], REMOTE.to_string());
    assert_eq!((rep.counters.rewrites, rep.counters.spoofed), (1, 1));

    node_a.remove_owner("web").unwrap();
    node_b.mirror().refresh(&**node_b.kvs()).unwrap();
    assert_eq!(node_b.mirror().resolve(REMOTE), None);
}

#[test]
fn background_mirror_follows_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(FileKvs::open(dir.path()).unwrap());
    let mut cfg = MultinodeConfig::new("node-b", Ipv4Addr::new(192, 0, 2, 20));
    cfg.mirror_period = Duration::from_millis(100);
    let node_b = Multinode::new(cfg, store.clone(), Arc::new(SystemClock));
    let t = node_b.spawn();

    let node_a = Multinode::new(MultinodeConfig::new("node-a", Ipv4Addr::new(192, 0, 2, 10)), store, Arc::new(SystemClock));
    node_a.add_local("web", mapping(18080));
    let want = Some(SocketAddrV4::new(Ipv4Addr::new(192, 0, 2, 10), 18080));
    let deadline = Instant::now() + Duration::from_secs(3);
    while node_b.mirror().resolve(REMOTE) != want {
        assert!(Instant::now() < deadline, "mirror never picked up the mapping");
        std::thread::sleep(Duration::from_millis(20));
    }
    node_a.remove_owner("web").unwrap();
    let deadline = Instant::now() + Duration::from_secs(3);
    while node_b.mirror().resolve(REMOTE).is_some() {
        assert!(Instant::now() < deadline, "mirror kept a withdrawn mapping");
        std::thread::sleep(Duration::from_millis(20));
    }
    node_b.shutdown();
    t.join().unwrap();
}

#[test]
fn leases_lapse_without_heartbeat() {
    let dir = tempfile::tempdir().unwrap();
    let store = FileKvs::open(dir.path()).unwrap();
    let clock = Arc::new(ManualClock::new(Duration::from_secs(1000)));
    let ttl = Duration::from_secs(30);
    publish_mapping(&store, &mapping(18080), "node-a", Ipv4Addr::new(192, 0, 2, 10), clock.now(), ttl).unwrap();
    let mirror = KvsMirror::new(clock.clone());
    mirror.refresh(&store).unwrap();
    assert!(mirror.resolve(REMOTE).is_some());
    clock.advance(ttl + Duration::from_secs(1));
    assert_eq!(mirror.resolve(REMOTE), None);
}

/// 99th percentile of 10k lookups; the tail above it is scheduler noise on
/// a loaded single-CPU host.
fn resolve_p99(mirror: &KvsMirror) -> Duration {
    let mut samples: Vec<Duration> = (0..10_000)
        .map(|_| {
            let t = Instant::now();
            assert!(mirror.resolve(REMOTE).is_some());
            t.elapsed()
        })
        .collect();
    samples.sort();
    samples[samples.len() * 99 / 100]
}

#[test]
fn resolve_never_touches_a_dead_store() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("kvs");
    let inner = FileKvs::open(&root).unwrap();
    publish_mapping(&inner, &mapping(18080), "node-a", Ipv4Addr::new(192, 0, 2, 10), Duration::ZERO, FOREVER).unwrap();
    let counting = Arc::new(CountingKvs::new(inner));
    let mirror = Arc::new(KvsMirror::new(Arc::new(SystemClock)));
    mirror.refresh(&*counting).unwrap();
    std::fs::remove_dir_all(&root).unwrap();
    assert!(mirror.refresh(&*counting).is_err(), "store is gone");

    let before = counting.calls();
    let p99 = resolve_p99(&mirror);
    assert_eq!(counting.calls(), before);
    assert!(p99 < Duration::from_millis(1), "{p99:?}");
}

#[test]
fn resolve_stays_fast_while_refresh_hangs() {
    // Accepts into the backlog but never answers.
    let blackhole = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", blackhole.local_addr().unwrap());
    let mirror = Arc::new(KvsMirror::new(Arc::new(SystemClock)));
    let dir = tempfile::tempdir().unwrap();
    let seed = FileKvs::open(dir.path()).unwrap();
    publish_mapping(&seed, &mapping(18080), "node-a", Ipv4Addr::new(192, 0, 2, 10), Duration::ZERO, FOREVER).unwrap();
    mirror.refresh(&seed).unwrap();

    let m = mirror.clone();
    let hung = std::thread::spawn(move || m.refresh(&HttpKvs::new(&url, Duration::from_secs(2))));
    std::thread::sleep(Duration::from_millis(50));
    let p99 = resolve_p99(&mirror);
    assert!(p99 < Duration::from_millis(1), "{p99:?}");
    assert!(hung.join().unwrap().is_err());
    assert!(mirror.resolve(REMOTE).is_some(), "failed refresh keeps the last snapshot");
}

#[test]
fn kvs_server_round_trip() {
    let server = KvsServer::start("127.0.0.1:0").unwrap();
    let kvs = HttpKvs::new(server.url(), Duration::from_secs(2));
    let key = mapping_key(REMOTE);
    assert_eq!(kvs.get(&key).unwrap(), None);
    kvs.put(&key, "{\"x\":1}").unwrap();
    kvs.put("other/key", "v").unwrap();
    assert_eq!(kvs.get(&key).unwrap().as_deref(), Some("{\"x\":1}"));
    assert_eq!(kvs.list("b4ns/v1/").unwrap(), vec![(key.clone(), "{\"x\":1}".to_string())]);
    kvs.delete(&key).unwrap();
    kvs.delete(&key).unwrap();
    assert_eq!(kvs.get(&key).unwrap(), None);
}
