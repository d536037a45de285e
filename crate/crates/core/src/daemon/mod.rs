//! The supervisor manager: one switching instance per container.
//!
//! Instances run as threads of the daemon by default. With
//! [`Isolation::Process`] each one is a separate `b4ns attach` process and
//! the daemon only tracks it through a status file.

pub mod api;

use std::collections::HashMap;
use std::fs;
use std::net::Ipv4Addr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SystemClock;
use crate::engine::{CounterSnapshot, NetEnvironment, Policy, PublishTable, SwitchEngine};
use crate::fault::FaultPlan;
use crate::gateway::{HandoffListener, NotificationChannel, SeccompListener};
use crate::memory::{AgentConfig, MemoryBroker};
use crate::multinode::{kvs_from_endpoint, Multinode, MultinodeConfig};
use crate::net::{Ipv4Cidr, PublishMapping};
use crate::netns::NetNs;
use crate::probe::{ProbeConfig, ProbeService};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DaemonError {
    #[error("container {0} already has a live instance")]
    DuplicateContainer(String),
    #[error("no instance for container {0}")]
    UnknownContainer(String),
    #[error("attach failed: {0}")]
    AttachFailed(String),
    #[error("invalid container spec: {0}")]
    InvalidSpec(String),
    #[error("daemon setup: {0}")]
    Setup(String),
}

impl DaemonError {
    pub fn kind(&self) -> &'static str {
        match self {
            DaemonError::DuplicateContainer(_) => "duplicate_container",
            DaemonError::UnknownContainer(_) => "unknown_container",
            DaemonError::AttachFailed(_) => "attach_failed",
            DaemonError::InvalidSpec(_) => "invalid_spec",
            DaemonError::Setup(_) => "setup",
        }
    }

    /// Inverse of [`kind`](Self::kind) plus the detail string.
    pub fn from_kind(kind: &str, detail: String) -> Self {
        match kind {
            "duplicate_container" => DaemonError::DuplicateContainer(detail),
            "unknown_container" => DaemonError::UnknownContainer(detail),
            "attach_failed" => DaemonError::AttachFailed(detail),
            "invalid_spec" => DaemonError::InvalidSpec(detail),
            _ => DaemonError::Setup(detail),
        }
    }

    fn detail(&self) -> String {
        match self {
            DaemonError::DuplicateContainer(s)
            | DaemonError::UnknownContainer(s)
            | DaemonError::AttachFailed(s)
            | DaemonError::InvalidSpec(s)
            | DaemonError::Setup(s) => s.clone(),
        }
    }
}

fn default_true() -> bool {
    true
}

/// What a runtime tells the daemon about one container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub container_id: String,
    /// Path of the container's network namespace; enables probing.
    #[serde(default)]
    pub netns: Option<PathBuf>,
    pub container_addr: Ipv4Addr,
    /// `[HOST_ADDR:]HOST_PORT:CONTAINER_PORT` entries.
    #[serde(default)]
    pub publish: Vec<String>,
    #[serde(default)]
    pub container_cidrs: Vec<Ipv4Cidr>,
    #[serde(default)]
    pub multinode_enabled: bool,
    /// Socket the supervisor listens on for the runtime's listener fd.
    pub seccomp_handoff_path: PathBuf,
    #[serde(default)]
    pub host_loopback_allowed: bool,
    #[serde(default = "default_true")]
    pub probe: bool,
    /// Fault plan for this instance only, e.g. `panic=1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub faults: Option<String>,
}

impl ContainerSpec {
    pub fn new(container_id: impl Into<String>, container_addr: Ipv4Addr, handoff: impl Into<PathBuf>) -> Self {
        Self {
            container_id: container_id.into(),
            netns: None,
            container_addr,
            publish: Vec::new(),
            container_cidrs: Vec::new(),
            multinode_enabled: false,
            seccomp_handoff_path: handoff.into(),
            host_loopback_allowed: false,
            probe: true,
            faults: None,
        }
    }

    pub fn mappings(&self) -> Result<Vec<PublishMapping>, DaemonError> {
        self.publish
            .iter()
            .map(|p| PublishMapping::parse(p, self.container_addr))
            .collect::<Result<_, _>>()
            .map_err(|e| DaemonError::InvalidSpec(e.to_string()))
    }

    pub fn environment(&self) -> Result<NetEnvironment, DaemonError> {
        if self.container_id.is_empty() || self.container_id.contains('/') {
            return Err(DaemonError::InvalidSpec(format!("bad container id {:?}", self.container_id)));
        }
        NetEnvironment::new(self.container_cidrs.clone(), self.mappings()?, self.host_loopback_allowed)
            .map_err(|e| DaemonError::InvalidSpec(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason", rename_all = "lowercase")]
pub enum InstanceState {
    Starting,
    Running,
    Stopping,
    Stopped,
    Failed(String),
}

impl InstanceState {
    pub fn is_live(&self) -> bool {
        matches!(self, InstanceState::Starting | InstanceState::Running | InstanceState::Stopping)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceStatus {
    pub container_id: String,
    #[serde(flatten)]
    pub state: InstanceState,
    pub counters: CounterSnapshot,
    pub published: Vec<PublishMapping>,
    /// Supervisor process, in per-process mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pid: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Isolation {
    #[default]
    Thread,
    Process,
}

#[derive(Debug, Clone)]
pub struct MultinodeSetup {
    pub config: MultinodeConfig,
    /// `http://...` or a directory for the file-backed store.
    pub endpoint: String,
}

#[derive(Debug, Clone)]
pub struct DaemonConfig {
    pub runtime_dir: PathBuf,
    pub isolation: Isolation,
    pub handoff_timeout: Duration,
    /// `None` disables reachability probing entirely.
    pub probe: Option<ProbeConfig>,
    pub multinode: Option<MultinodeSetup>,
    /// The `b4ns` binary, for memory agents and per-process instances.
    pub supervisor_exe: Option<PathBuf>,
}

impl DaemonConfig {
    pub fn new(runtime_dir: impl Into<PathBuf>) -> Self {
        let runtime_dir = runtime_dir.into();
        Self {
            probe: Some(ProbeConfig::new(&runtime_dir)),
            runtime_dir,
            isolation: Isolation::Thread,
            handoff_timeout: Duration::from_secs(60),
            multinode: None,
            supervisor_exe: None,
        }
    }
}

type SharedState = Arc<Mutex<InstanceState>>;

enum Backend {
    /// Never got off the ground.
    Inert,
    Thread { engine: Arc<SwitchEngine>, thread: Option<JoinHandle<()>> },
    Process { child: Child, status_file: PathBuf },
}

struct Instance {
    spec: ContainerSpec,
    mappings: Vec<PublishMapping>,
    state: SharedState,
    stop: Arc<AtomicBool>,
    backend: Backend,
    /// Counters as of the last observation; kept after the instance ends.
    last_counters: CounterSnapshot,
}

impl Instance {
    fn inert(spec: ContainerSpec, mappings: Vec<PublishMapping>, state: InstanceState) -> Self {
        Self {
            spec,
            mappings,
            state: Arc::new(Mutex::new(state)),
            stop: Arc::new(AtomicBool::new(true)),
            backend: Backend::Inert,
            last_counters: CounterSnapshot::default(),
        }
    }

    fn state(&self) -> InstanceState {
        self.state.lock().unwrap().clone()
    }

    fn set_state(&self, s: InstanceState) {
        *self.state.lock().unwrap() = s;
    }

    fn observe(&mut self) -> InstanceStatus {
        let mut pid = None;
        match &mut self.backend {
            Backend::Inert => {}
            Backend::Thread { engine, .. } => self.last_counters = engine.counters(),
            Backend::Process { child, status_file } => {
                pid = Some(child.id());
                if let Some(st) = read_status_file(status_file) {
                    self.last_counters = st.counters;
                    if !self.stop.load(Ordering::Relaxed) {
                        *self.state.lock().unwrap() = st.state;
                    }
                }
                if let Ok(Some(code)) = child.try_wait() {
                    let mut state = self.state.lock().unwrap();
                    if state.is_live() && !self.stop.load(Ordering::Relaxed) {
                        *state = InstanceState::Failed(format!("supervisor process exited: {code}"));
                    }
                }
            }
        }
        InstanceStatus {
            container_id: self.spec.container_id.clone(),
            state: self.state(),
            counters: self.last_counters,
            published: self.mappings.clone(),
            pid,
        }
    }
}

fn read_status_file(path: &Path) -> Option<InstanceStatus> {
    serde_json::from_slice(&fs::read(path).ok()?).ok()
}

/// Writes `status` to `path` atomically.
pub fn write_status_file(path: &Path, status: &InstanceStatus) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec(status).map_err(std::io::Error::other)?)?;
    fs::rename(tmp, path)
}

type Slot = Arc<Mutex<Option<Instance>>>;

/// Container-wide resources released when an instance ends.
#[derive(Clone)]
struct Shared {
    publish: Arc<PublishTable>,
    probe: Option<Arc<ProbeService>>,
    multinode: Option<Arc<Multinode>>,
}

impl Shared {
    fn release(&self, id: &str) {
        if let Some(mn) = &self.multinode {
            if let Err(e) = mn.remove_owner(id) {
                warn!("{id}: withdrawing mappings: {e}");
            }
        }
        if let Some(p) = &self.probe {
            p.remove_container(id);
        }
        self.publish.remove_owner(id);
    }
}

pub struct Daemon {
    cfg: DaemonConfig,
    slots: Mutex<HashMap<String, Slot>>,
    shared: Shared,
    background: Mutex<Vec<JoinHandle<()>>>,
}

impl Daemon {
    pub fn new(cfg: DaemonConfig) -> Result<Arc<Self>, DaemonError> {
        fs::create_dir_all(&cfg.runtime_dir)
            .map_err(|e| DaemonError::Setup(format!("{}: {e}", cfg.runtime_dir.display())))?;
        if cfg.isolation == Isolation::Process && cfg.supervisor_exe.is_none() {
            return Err(DaemonError::Setup("per-process isolation needs the supervisor binary".into()));
        }
        let mut background = Vec::new();
        // Per-process instances run their own probing and publishing.
        let in_process = cfg.isolation == Isolation::Thread;
        let probe = match (&cfg.probe, in_process) {
            (Some(pc), true) => {
                let svc = ProbeService::new(pc.clone(), Arc::new(SystemClock));
                background.push(svc.spawn_refresher());
                Some(svc)
            }
            _ => None,
        };
        let multinode = match (&cfg.multinode, in_process) {
            (Some(setup), true) => {
                let kvs = kvs_from_endpoint(&setup.endpoint, Duration::from_secs(2))
                    .map_err(|e| DaemonError::Setup(e.to_string()))?;
                let mn = Multinode::new(setup.config.clone(), kvs, Arc::new(SystemClock));
                background.push(mn.spawn());
                Some(mn)
            }
            _ => None,
        };
        Ok(Arc::new(Self {
            cfg,
            slots: Mutex::new(HashMap::new()),
            shared: Shared { publish: Arc::new(PublishTable::new()), probe, multinode },
            background: Mutex::new(background),
        }))
    }

    pub fn config(&self) -> &DaemonConfig {
        &self.cfg
    }

    pub fn publish_table(&self) -> &Arc<PublishTable> {
        &self.shared.publish
    }

    pub fn probe_service(&self) -> Option<&Arc<ProbeService>> {
        self.shared.probe.as_ref()
    }

    pub fn multinode(&self) -> Option<&Arc<Multinode>> {
        self.shared.multinode.as_ref()
    }

    fn slot(&self, id: &str) -> Slot {
        self.slots.lock().unwrap().entry(id.to_string()).or_default().clone()
    }

    fn existing_slot(&self, id: &str) -> Option<Slot> {
        self.slots.lock().unwrap().get(id).cloned()
    }

    /// Starts supervising a container. The instance is `starting` until the
    /// runtime hands over the listener fd.
    pub fn start_instance(&self, spec: ContainerSpec) -> Result<InstanceStatus, DaemonError> {
        let env = spec.environment()?;
        let mappings = env.published_ports.clone();
        if spec.multinode_enabled && self.cfg.multinode.is_none() {
            return Err(DaemonError::InvalidSpec("multinode requested but no KVS is configured".into()));
        }
        let slot = self.slot(&spec.container_id);
        let mut guard = slot.lock().unwrap();
        if let Some(inst) = guard.as_mut() {
            if inst.observe().state.is_live() {
                return Err(DaemonError::DuplicateContainer(spec.container_id));
            }
        }
        let started = match self.cfg.isolation {
            Isolation::Thread => self.start_thread(&spec, env),
            Isolation::Process => self.start_process(&spec),
        };
        let mut inst = match started {
            Ok(inst) => inst,
            Err(e) => {
                *guard = Some(Instance::inert(spec, mappings, InstanceState::Failed(e.to_string())));
                return Err(e);
            }
        };
        info!("{}: instance starting", spec.container_id);
        let status = inst.observe();
        *guard = Some(inst);
        Ok(status)
    }

    fn start_thread(&self, spec: &ContainerSpec, env: NetEnvironment) -> Result<Instance, DaemonError> {
        let id = spec.container_id.clone();
        let listener = HandoffListener::bind(&spec.seccomp_handoff_path)
            .map_err(|e| DaemonError::AttachFailed(e.to_string()))?;
        let faults = match &spec.faults {
            Some(f) => FaultPlan::parse(f).map_err(DaemonError::InvalidSpec)?,
            None => FaultPlan::new(),
        };

        if let (Some(probe), true) = (&self.shared.probe, spec.probe) {
            let ns = spec.netns.as_ref().and_then(|p| {
                NetNs::open(p).map_err(|e| warn!("{id}: netns {}: {e}", p.display())).ok()
            });
            let ports: Vec<u16> = env.published_ports.iter().map(|m| m.container_port).collect();
            let res = probe.add_container(&id, spec.container_addr, ns.as_ref(), &ports);
            if let Err(e) = res {
                warn!("{id}: probing disabled as a source: {e}");
            }
        }
        if let (Some(mn), true) = (&self.shared.multinode, spec.multinode_enabled) {
            for m in &env.published_ports {
                mn.add_local(&id, *m);
            }
        }

        let mut policy = Policy::new(&id, env.clone());
        policy.publish = self.shared.publish.clone();
        if spec.probe {
            policy.gate = self.shared.probe.clone().map(|p| p as _);
        }
        if spec.multinode_enabled {
            policy.remote = self.shared.multinode.as_ref().map(|m| m.mirror() as _);
        }
        let agent = self.cfg.supervisor_exe.as_ref().map(|exe| AgentConfig::for_exe(exe, &self.cfg.runtime_dir));
        let engine =
            Arc::new(SwitchEngine::new(policy, Arc::new(MemoryBroker::new(agent))).with_faults(Arc::new(faults)));

        let state: SharedState = Arc::new(Mutex::new(InstanceState::Starting));
        let stop = Arc::new(AtomicBool::new(false));
        let run = InstanceRun {
            id: id.clone(),
            listener,
            engine: engine.clone(),
            state: state.clone(),
            stop: stop.clone(),
            handoff_timeout: self.cfg.handoff_timeout,
            shared: self.shared.clone(),
        };
        let thread = std::thread::Builder::new()
            .name(format!("b4ns-{id}"))
            .spawn(move || run.run())
            .map_err(|e| DaemonError::AttachFailed(e.to_string()))?;
        Ok(Instance {
            spec: spec.clone(),
            mappings: env.published_ports,
            state,
            stop,
            backend: Backend::Thread { engine, thread: Some(thread) },
            last_counters: CounterSnapshot::default(),
        })
    }

    fn start_process(&self, spec: &ContainerSpec) -> Result<Instance, DaemonError> {
        let id = &spec.container_id;
        let exe = self.cfg.supervisor_exe.as_ref().expect("checked in Daemon::new");
        let spec_file = self.cfg.runtime_dir.join(format!("{id}.spec.json"));
        let status_file = self.cfg.runtime_dir.join(format!("{id}.status.json"));
        let _ = fs::remove_file(&status_file);
        fs::write(&spec_file, serde_json::to_vec(spec).expect("spec serializes"))
            .map_err(|e| DaemonError::AttachFailed(e.to_string()))?;
        let mut cmd = Command::new(exe);
        cmd.arg("attach")
            .arg("--spec")
            .arg(&spec_file)
            .arg("--status-file")
            .arg(&status_file)
            .arg("--runtime-dir")
            .arg(self.cfg.runtime_dir.join(id))
            .arg("--handoff-timeout")
            .arg(self.cfg.handoff_timeout.as_secs().to_string());
        if self.cfg.probe.is_none() {
            cmd.arg("--no-probe");
        }
        if let Some(setup) = &self.cfg.multinode {
            cmd.arg("--kvs")
                .arg(&setup.endpoint)
                .arg("--node-id")
                .arg(&setup.config.node_id)
                .arg("--host-addr")
                .arg(setup.config.node_addr.to_string());
        }
        let child = cmd.spawn().map_err(|e| DaemonError::AttachFailed(format!("{}: {e}", exe.display())))?;
        Ok(Instance {
            spec: spec.clone(),
            mappings: spec.mappings()?,
            state: Arc::new(Mutex::new(InstanceState::Starting)),
            stop: Arc::new(AtomicBool::new(false)),
            backend: Backend::Process { child, status_file },
            last_counters: CounterSnapshot::default(),
        })
    }

    /// Stops an instance. Stopping a stopped or failed instance is a no-op
    /// that reports `stopped`.
    pub fn stop_instance(&self, id: &str) -> Result<InstanceStatus, DaemonError> {
        let slot = self.existing_slot(id).ok_or_else(|| DaemonError::UnknownContainer(id.into()))?;
        let mut guard = slot.lock().unwrap();
        let inst = guard.as_mut().ok_or_else(|| DaemonError::UnknownContainer(id.into()))?;
        let was_live = inst.observe().state.is_live();
        if was_live {
            inst.set_state(InstanceState::Stopping);
        }
        inst.stop.store(true, Ordering::Relaxed);
        match &mut inst.backend {
            Backend::Inert => {}
            Backend::Thread { engine, thread } => {
                if let Some(t) = thread.take() {
                    let _ = t.join();
                }
                inst.last_counters = engine.counters();
            }
            Backend::Process { child, status_file } => {
                terminate(child);
                if let Some(st) = read_status_file(status_file) {
                    inst.last_counters = st.counters;
                }
            }
        }
        self.shared.release(id);
        inst.set_state(InstanceState::Stopped);
        info!("{id}: instance stopped");
        Ok(inst.observe())
    }

    /// Statuses of all instances, or of one.
    pub fn status(&self, id: Option<&str>) -> Result<Vec<InstanceStatus>, DaemonError> {
        let slots: Vec<Slot> = match id {
            Some(id) => vec![self.existing_slot(id).ok_or_else(|| DaemonError::UnknownContainer(id.into()))?],
            None => self.slots.lock().unwrap().values().cloned().collect(),
        };
        let mut out: Vec<InstanceStatus> =
            slots.iter().filter_map(|s| s.lock().unwrap().as_mut().map(Instance::observe)).collect();
        if let (Some(id), true) = (id, out.is_empty()) {
            return Err(DaemonError::UnknownContainer(id.into()));
        }
        out.sort_by(|a, b| a.container_id.cmp(&b.container_id));
        Ok(out)
    }

    /// Polls until `pred` holds for the instance or `timeout` passes.
    pub fn wait_for(
        &self,
        id: &str,
        timeout: Duration,
        pred: impl Fn(&InstanceStatus) -> bool,
    ) -> Result<InstanceStatus, DaemonError> {
        let deadline = Instant::now() + timeout;
        loop {
            let st = self.status(Some(id))?.remove(0);
            if pred(&st) || Instant::now() >= deadline {
                return Ok(st);
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    /// Stops every instance and background task.
    pub fn shutdown(&self) {
        let ids: Vec<String> = self.slots.lock().unwrap().keys().cloned().collect();
        for id in ids {
            let _ = self.stop_instance(&id);
        }
        if let Some(p) = &self.shared.probe {
            p.shutdown();
        }
        if let Some(m) = &self.shared.multinode {
            m.shutdown();
        }
        for t in self.background.lock().unwrap().drain(..) {
            let _ = t.join();
        }
    }
}

fn terminate(child: &mut Child) {
    if let Ok(Some(_)) = child.try_wait() {
        return;
    }
    let pid = nix::unistd::Pid::from_raw(child.id() as i32);
    let _ = nix::sys::signal::kill(pid, nix::sys::signal::Signal::SIGTERM);
    let deadline = Instant::now() + Duration::from_secs(5);
    while Instant::now() < deadline {
        if let Ok(Some(_)) = child.try_wait() {
            return;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    let _ = child.kill();
    let _ = child.wait();
}

/// Body of an in-process instance thread.
struct InstanceRun {
    id: String,
    listener: HandoffListener,
    engine: Arc<SwitchEngine>,
    state: SharedState,
    stop: Arc<AtomicBool>,
    handoff_timeout: Duration,
    shared: Shared,
}

impl InstanceRun {
    fn run(self) {
        let end = self.serve();
        let mut state = self.state.lock().unwrap();
        match end {
            Ok(()) => *state = InstanceState::Stopped,
            Err(reason) => {
                warn!("{}: instance failed: {reason}", self.id);
                *state = InstanceState::Failed(reason);
            }
        }
        drop(state);
        self.engine.evict_all();
        self.shared.release(&self.id);
    }

    fn serve(&self) -> Result<(), String> {
        let deadline = Instant::now() + self.handoff_timeout;
        loop {
            if self.stop.load(Ordering::Relaxed) {
                return Ok(());
            }
            if self.listener.wait_ready(Duration::from_millis(100)).map_err(|e| e.to_string())? {
                break;
            }
            if Instant::now() >= deadline {
                return Err(DaemonError::AttachFailed("runtime never handed over the listener".into()).to_string());
            }
        }
        let fd = self
            .listener
            .accept(None)
            .map_err(|e| DaemonError::AttachFailed(e.to_string()).to_string())?;
        let ch = NotificationChannel::new(SeccompListener::new(fd))
            .map_err(|e| DaemonError::AttachFailed(e.to_string()).to_string())?;
        *self.state.lock().unwrap() = InstanceState::Running;
        info!("{}: attached", self.id);
        match catch_unwind(AssertUnwindSafe(|| self.engine.serve(&ch, &self.stop))) {
            Ok(Ok(())) => {
                if !self.stop.load(Ordering::Relaxed) {
                    info!("{}: runtime closed the channel", self.id);
                }
                Ok(())
            }
            Ok(Err(e)) => Err(e.to_string()),
            Err(_) => Err("supervisor panicked".into()),
        }
    }
}

/// Runs one container's supervisor in the foreground until it ends or
/// `stop` is raised, mirroring its status into `status_file`.
pub fn run_attached(
    spec: ContainerSpec,
    cfg: DaemonConfig,
    status_file: Option<&Path>,
    stop: &AtomicBool,
) -> Result<InstanceStatus, DaemonError> {
    let daemon = Daemon::new(DaemonConfig { isolation: Isolation::Thread, ..cfg })?;
    let id = spec.container_id.clone();
    let write = |st: &InstanceStatus| {
        if let Some(p) = status_file {
            if let Err(e) = write_status_file(p, st) {
                warn!("status file {}: {e}", p.display());
            }
        }
    };
    let result = daemon.start_instance(spec);
    let mut last = match result {
        Ok(st) => st,
        Err(e) => {
            if let Ok(mut st) = daemon.status(Some(&id)) {
                write(&st.remove(0));
            }
            daemon.shutdown();
            return Err(e);
        }
    };
    write(&last);
    while last.state.is_live() && !stop.load(Ordering::Relaxed) {
        std::thread::sleep(Duration::from_millis(200));
        last = daemon.status(Some(&id))?.remove(0);
        write(&last);
    }
    if last.state.is_live() {
        last = daemon.stop_instance(&id)?;
        write(&last);
    }
    daemon.shutdown();
    Ok(last)
}
