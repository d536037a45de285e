//! Sharing published-port mappings between hosts through a key/value store.
//!
//! Every node writes `b4ns/v1/{container_addr}:{container_port}` for the
//! containers it publishes and mirrors the whole prefix locally. Syscall
//! handlers only ever consult the mirror.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{debug, warn};
use percent_encoding::{percent_decode_str, utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::engine::RemoteResolver;
use crate::net::PublishMapping;

pub const KEY_PREFIX: &str = "b4ns/v1/";
pub const LEASE_TTL: Duration = Duration::from_secs(30);
pub const HEARTBEAT: Duration = Duration::from_secs(10);

const KEY_ENCODE: &AsciiSet = &NON_ALPHANUMERIC.remove(b'-').remove(b'_').remove(b'.');

#[derive(Debug, Error)]
pub enum KvsError {
    #[error("kvs unavailable: {0}")]
    Unavailable(String),
    #[error("kvs returned malformed data for {key}: {reason}")]
    Corrupt { key: String, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub trait KvsClient: Send + Sync {
    fn put(&self, key: &str, value: &str) -> Result<(), KvsError>;
    fn get(&self, key: &str) -> Result<Option<String>, KvsError>;
    fn list(&self, prefix: &str) -> Result<Vec<(String, String)>, KvsError>;
    fn delete(&self, key: &str) -> Result<(), KvsError>;
    fn endpoint(&self) -> String;
}

pub fn mapping_key(container: SocketAddrV4) -> String {
    format!("{KEY_PREFIX}{container}")
}

fn parse_key(key: &str) -> Option<SocketAddrV4> {
    key.strip_prefix(KEY_PREFIX)?.parse().ok()
}

fn encode_key(key: &str) -> String {
    utf8_percent_encode(key, KEY_ENCODE).to_string()
}

fn decode_key(enc: &str) -> Option<String> {
    percent_decode_str(enc).decode_utf8().ok().map(|s| s.into_owned())
}

/// One file per key under a directory. Writes are atomic renames, so
/// concurrent writers resolve to last-writer-wins.
#[derive(Debug, Clone)]
pub struct FileKvs {
    root: PathBuf,
}

static TMP_SEQ: AtomicU64 = AtomicU64::new(0);

impl FileKvs {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, KvsError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &str) -> PathBuf {
        self.root.join(encode_key(key))
    }
}

impl KvsClient for FileKvs {
    fn put(&self, key: &str, value: &str) -> Result<(), KvsError> {
        let seq = TMP_SEQ.fetch_add(1, Ordering::Relaxed);
        let tmp = self.root.join(format!(".tmp-{}-{seq}", std::process::id()));
        fs::write(&tmp, value)?;
        fs::rename(&tmp, self.path(key))?;
        Ok(())
    }

    fn get(&self, key: &str) -> Result<Option<String>, KvsError> {
        match fs::read_to_string(self.path(key)) {
            Ok(v) => Ok(Some(v)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn list(&self, prefix: &str) -> Result<Vec<(String, String)>, KvsError> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if name.starts_with(".tmp-") {
                continue;
            }
            let Some(key) = decode_key(name) else { continue };
            if !key.starts_with(prefix) {
                continue;
            }
            // Deleted between readdir and read.
            if let Ok(v) = fs::read_to_string(entry.path()) {
                out.push((key, v));
            }
        }
        out.sort();
        Ok(out)
    }

    fn delete(&self, key: &str) -> Result<(), KvsError> {
        match fs::remove_file(self.path(key)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }

    fn endpoint(&self) -> String {
        format!("file://{}", self.root.display())
    }
}

/// REST client: `PUT/GET/DELETE /kv/{key}`, `GET /kv?prefix=P` returning a
/// JSON object of key → value.
pub struct HttpKvs {
    base: String,
    agent: ureq::Agent,
}

impl HttpKvs {
    pub fn new(base: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { base: base.trim_end_matches('/').to_string(), agent }
    }

    fn key_url(&self, key: &str) -> String {
        format!("{}/kv/{}", self.base, encode_key(key))
    }
}

fn unavailable(e: impl std::fmt::Display) -> KvsError {
    KvsError::Unavailable(e.to_string())
}

fn check_status(status: u16, what: &str) -> Result<(), KvsError> {
    if (200..300).contains(&status) {
        Ok(())
    } else {
        Err(KvsError::Unavailable(format!("{what}: HTTP {status}")))
    }
}

impl KvsClient for HttpKvs {
    fn put(&self, key: &str, value: &str) -> Result<(), KvsError> {
        let resp = self
            .agent
            .put(&self.key_url(key))
            .content_type("application/json")
            .send(value)
            .map_err(unavailable)?;
        check_status(resp.status().as_u16(), "put")
    }

    fn get(&self, key: &str) -> Result<Option<String>, KvsError> {
        let mut resp = self.agent.get(&self.key_url(key)).call().map_err(unavailable)?;
        if resp.status().as_u16() == 404 {
            return Ok(None);
        }
        check_status(resp.status().as_u16(), "get")?;
        resp.body_mut().read_to_string().map(Some).map_err(unavailable)
    }

    fn list(&self, prefix: &str) -> Result<Vec<(String, String)>, KvsError> {
        let url = format!("{}/kv?prefix={}", self.base, encode_key(prefix));
        let mut resp = self.agent.get(&url).call().map_err(unavailable)?;
        check_status(resp.status().as_u16(), "list")?;
        let body = resp.body_mut().read_to_string().map_err(unavailable)?;
        let map: BTreeMap<String, String> = serde_json::from_str(&body)
            .map_err(|e| KvsError::Corrupt { key: prefix.to_string(), reason: e.to_string() })?;
        Ok(map.into_iter().filter(|(k, _)| k.starts_with(prefix)).collect())
    }

    fn delete(&self, key: &str) -> Result<(), KvsError> {
        let resp = self.agent.delete(&self.key_url(key)).call().map_err(unavailable)?;
        match resp.status().as_u16() {
            404 => Ok(()),
            s => check_status(s, "delete"),
        }
    }

    fn endpoint(&self) -> String {
        self.base.clone()
    }
}

/// Picks a client from an endpoint string: `http://...` or a directory path
/// (optionally `file://`).
pub fn kvs_from_endpoint(endpoint: &str, timeout: Duration) -> Result<Arc<dyn KvsClient>, KvsError> {
    if endpoint.starts_with("http://") || endpoint.starts_with("https://") {
        Ok(Arc::new(HttpKvs::new(endpoint, timeout)))
    } else {
        Ok(Arc::new(FileKvs::open(endpoint.strip_prefix("file://").unwrap_or(endpoint))?))
    }
}

/// In-memory REST store compatible with [`HttpKvs`], for demos and tests.
pub struct KvsServer {
    server: Arc<tiny_http::Server>,
    url: String,
    thread: Option<JoinHandle<()>>,
}

impl KvsServer {
    pub fn start(listen: &str) -> Result<Self, KvsError> {
        let server = Arc::new(tiny_http::Server::http(listen).map_err(|e| KvsError::Unavailable(e.to_string()))?);
        let url = match server.server_addr() {
            tiny_http::ListenAddr::IP(a) => format!("http://{a}"),
            other => return Err(KvsError::Unavailable(format!("unexpected listen address {other:?}"))),
        };
        let srv = server.clone();
        let thread = std::thread::spawn(move || {
            let mut store: BTreeMap<String, String> = BTreeMap::new();
            for req in srv.incoming_requests() {
                serve_kv_request(&mut store, req);
            }
        });
        Ok(Self { server, url, thread: Some(thread) })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for KvsServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve_kv_request(store: &mut BTreeMap<String, String>, mut req: tiny_http::Request) {
    use tiny_http::{Method, Response};
    let url = req.url().to_string();
    let (path, query) = url.split_once('?').unwrap_or((&url, ""));
    let reply = |req: tiny_http::Request, code: u16, body: String| {
        let _ = req.respond(Response::from_string(body).with_status_code(code));
    };
    if path == "/kv" && *req.method() == Method::Get {
        let prefix = query
            .split('&')
            .find_map(|kv| kv.strip_prefix("prefix="))
            .and_then(decode_key)
            .unwrap_or_default();
        let hits: BTreeMap<&String, &String> = store.range(prefix.clone()..).take_while(|(k, _)| k.starts_with(&prefix)).collect();
        return reply(req, 200, serde_json::to_string(&hits).unwrap_or_default());
    }
    let Some(key) = path.strip_prefix("/kv/").and_then(decode_key) else {
        return reply(req, 404, String::new());
    };
    match req.method() {
        Method::Put => {
            let mut body = String::new();
            if req.as_reader().read_to_string(&mut body).is_err() {
                return reply(req, 400, String::new());
            }
            store.insert(key, body);
            reply(req, 204, String::new())
        }
        Method::Get => match store.get(&key) {
            Some(v) => {
                let v = v.clone();
                reply(req, 200, v)
            }
            None => reply(req, 404, String::new()),
        },
        Method::Delete => {
            store.remove(&key);
            reply(req, 204, String::new())
        }
        _ => reply(req, 405, String::new()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingValue {
    pub host_addr: Ipv4Addr,
    pub host_port: u16,
    pub node_id: String,
    /// Unix seconds after which the entry is ignored.
    pub lease_expiry: u64,
}

impl MappingValue {
    pub fn live_at(&self, now_secs: u64) -> bool {
        now_secs < self.lease_expiry
    }

    pub fn endpoint(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.host_addr, self.host_port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PublishOutcome {
    /// Node whose live entry this write replaced.
    pub collided_with: Option<String>,
}

/// Writes one mapping with a fresh lease. The host address is the mapping's
/// own bind address unless that is unspecified.
pub fn publish_mapping(
    kvs: &dyn KvsClient,
    m: &PublishMapping,
    node_id: &str,
    node_addr: Ipv4Addr,
    now: Duration,
    ttl: Duration,
) -> Result<PublishOutcome, KvsError> {
    let key = mapping_key(m.container_endpoint());
    let mut outcome = PublishOutcome::default();
    if let Some(prev) = kvs.get(&key)? {
        if let Ok(prev) = serde_json::from_str::<MappingValue>(&prev) {
            if prev.node_id != node_id && prev.live_at(now.as_secs()) {
                warn!("{key} already published by node {}; overwriting", prev.node_id);
                outcome.collided_with = Some(prev.node_id);
            }
        }
    }
    let value = MappingValue {
        host_addr: if m.host_addr.is_unspecified() { node_addr } else { m.host_addr },
        host_port: m.host_port,
        node_id: node_id.to_string(),
        lease_expiry: (now + ttl).as_secs(),
    };
    kvs.put(&key, &serde_json::to_string(&value).expect("mapping value serializes"))?;
    Ok(outcome)
}

/// Deletes the key if this node still owns it.
pub fn withdraw_mapping(kvs: &dyn KvsClient, container: SocketAddrV4, node_id: &str) -> Result<bool, KvsError> {
    let key = mapping_key(container);
    let owned = match kvs.get(&key)? {
        Some(v) => serde_json::from_str::<MappingValue>(&v).map(|v| v.node_id == node_id).unwrap_or(true),
        None => return Ok(false),
    };
    if owned {
        kvs.delete(&key)?;
    }
    Ok(owned)
}

/// A point-in-time copy of the shared prefix.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MirrorSnapshot {
    pub entries: HashMap<SocketAddrV4, MappingValue>,
}

impl MirrorSnapshot {
    pub fn from_pairs(pairs: &[(String, String)]) -> Self {
        let mut entries = HashMap::new();
        for (k, v) in pairs {
            match (parse_key(k), serde_json::from_str::<MappingValue>(v)) {
                (Some(addr), Ok(val)) => {
                    entries.insert(addr, val);
                }
                _ => debug!("skipping malformed kvs entry {k}"),
            }
        }
        Self { entries }
    }

    /// Host endpoint for `dest` if a live lease exists at `now_secs`.
    pub fn resolve(&self, dest: SocketAddrV4, now_secs: u64) -> Option<SocketAddrV4> {
        self.entries.get(&dest).filter(|v| v.live_at(now_secs)).map(MappingValue::endpoint)
    }
}

/// Locally cached view of every node's mappings.
pub struct KvsMirror {
    snapshot: RwLock<Arc<MirrorSnapshot>>,
    clock: Arc<dyn Clock>,
}

impl KvsMirror {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self { snapshot: RwLock::new(Arc::new(MirrorSnapshot::default())), clock }
    }

    pub fn snapshot(&self) -> Arc<MirrorSnapshot> {
        self.snapshot.read().unwrap().clone()
    }

    pub fn replace(&self, snap: MirrorSnapshot) {
        *self.snapshot.write().unwrap() = Arc::new(snap);
    }

    /// Re-lists the prefix. On failure the previous snapshot stays; its
    /// entries still age out by lease.
    pub fn refresh(&self, kvs: &dyn KvsClient) -> Result<usize, KvsError> {
        let pairs = kvs.list(KEY_PREFIX)?;
        let snap = MirrorSnapshot::from_pairs(&pairs);
        let n = snap.entries.len();
        self.replace(snap);
        Ok(n)
    }
}

impl RemoteResolver for KvsMirror {
    fn resolve(&self, dest: SocketAddrV4) -> Option<SocketAddrV4> {
        self.snapshot().resolve(dest, self.clock.now().as_secs())
    }
}

#[derive(Debug, Clone)]
pub struct MultinodeConfig {
    pub node_id: String,
    /// Address other nodes use to reach this host.
    pub node_addr: Ipv4Addr,
    pub lease_ttl: Duration,
    pub heartbeat: Duration,
    pub mirror_period: Duration,
}

impl MultinodeConfig {
    pub fn new(node_id: impl Into<String>, node_addr: Ipv4Addr) -> Self {
        Self {
            node_id: node_id.into(),
            node_addr,
            lease_ttl: LEASE_TTL,
            heartbeat: HEARTBEAT,
            mirror_period: Duration::from_secs(2),
        }
    }
}

/// Publishes this node's mappings on a heartbeat and keeps the mirror fresh.
pub struct Multinode {
    cfg: MultinodeConfig,
    kvs: Arc<dyn KvsClient>,
    mirror: Arc<KvsMirror>,
    clock: Arc<dyn Clock>,
    local: Mutex<HashMap<SocketAddrV4, (String, PublishMapping)>>,
    wake: (Mutex<bool>, Condvar),
    stop: AtomicBool,
}

impl Multinode {
    pub fn new(cfg: MultinodeConfig, kvs: Arc<dyn KvsClient>, clock: Arc<dyn Clock>) -> Arc<Self> {
        Arc::new(Self {
            mirror: Arc::new(KvsMirror::new(clock.clone())),
            cfg,
            kvs,
            clock,
            local: Mutex::new(HashMap::new()),
            wake: (Mutex::new(false), Condvar::new()),
            stop: AtomicBool::new(false),
        })
    }

    pub fn config(&self) -> &MultinodeConfig {
        &self.cfg
    }

    pub fn mirror(&self) -> Arc<KvsMirror> {
        self.mirror.clone()
    }

    pub fn kvs(&self) -> &Arc<dyn KvsClient> {
        &self.kvs
    }

    fn nudge(&self) {
        let (flag, cv) = &self.wake;
        *flag.lock().unwrap() = true;
        cv.notify_all();
    }

    /// Starts advertising `m` on behalf of `owner`. A failed first write is
    /// retried by the heartbeat.
    pub fn add_local(&self, owner: &str, m: PublishMapping) {
        self.local.lock().unwrap().insert(m.container_endpoint(), (owner.to_string(), m));
        if let Err(e) = self.publish_one(&m) {
            warn!("publishing {}: {e}; will retry", m.container_endpoint());
            self.nudge();
        }
    }

    /// Stops advertising every mapping of `owner` and deletes the keys.
    pub fn remove_owner(&self, owner: &str) -> Result<(), KvsError> {
        let gone: Vec<SocketAddrV4> = {
            let mut local = self.local.lock().unwrap();
            let keys: Vec<_> = local.iter().filter(|(_, (o, _))| o == owner).map(|(k, _)| *k).collect();
            for k in &keys {
                local.remove(k);
            }
            keys
        };
        let mut first_err = None;
        for ep in gone {
            if let Err(e) = withdraw_mapping(&*self.kvs, ep, &self.cfg.node_id) {
                warn!("withdrawing {ep}: {e}; lease will lapse");
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    }

    pub fn local_mappings(&self) -> Vec<PublishMapping> {
        self.local.lock().unwrap().values().map(|(_, m)| *m).collect()
    }

    fn publish_one(&self, m: &PublishMapping) -> Result<PublishOutcome, KvsError> {
        publish_mapping(&*self.kvs, m, &self.cfg.node_id, self.cfg.node_addr, self.clock.now(), self.cfg.lease_ttl)
    }

    /// Re-publishes every local mapping.
    pub fn heartbeat(&self) -> Result<(), KvsError> {
        for m in self.local_mappings() {
            self.publish_one(&m)?;
        }
        Ok(())
    }

    pub fn spawn(self: &Arc<Self>) -> JoinHandle<()> {
        let me = self.clone();
        std::thread::spawn(move || me.run())
    }

    fn run(&self) {
        let base_backoff = Duration::from_millis(500);
        let mut backoff = base_backoff;
        let mut next_publish = Instant::now() + self.cfg.heartbeat;
        let mut next_mirror = Instant::now();
        let mut retry_publish = false;
        while !self.stop.load(Ordering::Relaxed) {
            let now = Instant::now();
            if now >= next_mirror {
                if let Err(e) = self.mirror.refresh(&*self.kvs) {
                    debug!("mirror refresh: {e}");
                }
                next_mirror = now + self.cfg.mirror_period;
            }
            if retry_publish || now >= next_publish {
                match self.heartbeat() {
                    Ok(()) => {
                        backoff = base_backoff;
                        retry_publish = false;
                        next_publish = Instant::now() + self.cfg.heartbeat;
                    }
                    Err(e) => {
                        warn!("heartbeat to {}: {e}; retrying in {backoff:?}", self.kvs.endpoint());
                        retry_publish = false;
                        next_publish = Instant::now() + backoff;
                        backoff = (backoff * 2).min(self.cfg.heartbeat);
                    }
                }
            }
            let wait = next_publish.min(next_mirror).saturating_duration_since(Instant::now());
            let (flag, cv) = &self.wake;
            let guard = flag.lock().unwrap();
            let (mut guard, _) = cv
                .wait_timeout_while(guard, wait, |w| !*w && !self.stop.load(Ordering::Relaxed))
                .unwrap();
            if std::mem::replace(&mut *guard, false) {
                retry_publish = true;
            }
        }
    }

    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::Relaxed);
        self.nudge();
    }
}
