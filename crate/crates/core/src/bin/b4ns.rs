use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use b4ns::daemon::api::{ApiClient, DEFAULT_API_SOCKET};
use b4ns::daemon::{run_attached, ContainerSpec, DaemonConfig, InstanceState, MultinodeSetup};
use b4ns::engine::{NetEnvironment, Policy, SwitchEngine};
use b4ns::launch::NetnsMode;
use b4ns::memory::{run_mem_agent, AgentConfig, MemoryBroker};
use b4ns::multinode::{KvsServer, MultinodeConfig};
use b4ns::net::{Ipv4Cidr, PublishMapping};
use b4ns::script::{parse_script, run_script};
use b4ns::supervise::SupervisedChild;

#[derive(Parser)]
#[command(name = "b4ns", version, about = "Socket-switching supervisor for sandboxed processes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Supervise one container in the foreground, without the daemon.
    Attach(Box<AttachArgs>),
    /// Run a command under supervision.
    Run(RunArgs),
    /// Ask the daemon to supervise a container described by a JSON spec.
    Start {
        #[arg(long, env = "B4NS_API_SOCKET", default_value = DEFAULT_API_SOCKET)]
        api_socket: PathBuf,
        spec: PathBuf,
    },
    /// Ask the daemon to stop supervising a container.
    Stop {
        #[arg(long, env = "B4NS_API_SOCKET", default_value = DEFAULT_API_SOCKET)]
        api_socket: PathBuf,
        id: String,
    },
    /// Show daemon instances as JSON.
    Status {
        #[arg(long, env = "B4NS_API_SOCKET", default_value = DEFAULT_API_SOCKET)]
        api_socket: PathBuf,
        id: Option<String>,
    },
    /// Serve an in-memory mapping store over HTTP.
    KvsServe {
        #[arg(long, default_value = "127.0.0.1:2379")]
        listen: String,
    },
    #[command(hide = true)]
    MemAgent {
        #[arg(long)]
        socket: PathBuf,
        #[arg(long)]
        pid: i32,
    },
    /// Scripted socket client; prints one JSON line per step.
    #[command(name = "__script", hide = true)]
    Script {
        #[arg(long)]
        trace: Option<PathBuf>,
        steps: Vec<String>,
    },
}

#[derive(Args)]
struct AttachArgs {
    /// JSON container spec; the flags below are ignored when given.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "container")]
    id: String,
    #[arg(long)]
    handoff: Option<PathBuf>,
    /// Container address the published ports belong to.
    #[arg(long)]
    addr: Option<Ipv4Addr>,
    /// `HOST:CONTAINER` or `HOSTIP:HOST:CONTAINER`; repeatable.
    #[arg(long)]
    publish: Vec<String>,
    /// Container network; repeatable.
    #[arg(long)]
    cidr: Vec<Ipv4Cidr>,
    /// Container network namespace, needed for probing.
    #[arg(long)]
    netns: Option<PathBuf>,
    /// Switch connections to host loopback.
    #[arg(long)]
    host_loopback: bool,
    #[arg(long)]
    multinode: bool,
    #[arg(long, env = "B4NS_KVS_ENDPOINT")]
    kvs: Option<String>,
    #[arg(long)]
    node_id: Option<String>,
    #[arg(long)]
    host_addr: Option<Ipv4Addr>,
    #[arg(long)]
    no_probe: bool,
    #[arg(long, default_value = "/run/b4ns")]
    runtime_dir: PathBuf,
    /// Seconds to wait for the runtime to hand over the notify fd.
    #[arg(long, default_value_t = 60)]
    handoff_timeout: u64,
    #[arg(long)]
    status_file: Option<PathBuf>,
    /// Fault injection plan, e.g. `replay=1,memory=2`.
    #[arg(long)]
    faults: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "10.0.0.2")]
    addr: Ipv4Addr,
    #[arg(long)]
    publish: Vec<String>,
    #[arg(long)]
    cidr: Vec<Ipv4Cidr>,
    /// Run in a fresh network namespace with only loopback.
    #[arg(long)]
    new_netns: bool,
    #[arg(long)]
    host_loopback: bool,
    #[arg(required = true, last = true)]
    command: Vec<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("b4ns: {e}");
            ExitCode::FAILURE
        }
    }
}

type BoxError = Box<dyn std::error::Error>;

fn run(cmd: Cmd) -> Result<ExitCode, BoxError> {
    match cmd {
        Cmd::Attach(a) => attach(*a),
        Cmd::Run(r) => run_command(r),
        Cmd::Start { api_socket, spec } => {
            let spec: ContainerSpec = serde_json::from_slice(&fs::read(spec)?)?;
            print_json(&ApiClient::new(api_socket).start(&spec)?)
        }
        Cmd::Stop { api_socket, id } => print_json(&ApiClient::new(api_socket).stop(&id)?),
        Cmd::Status { api_socket, id } => print_json(&ApiClient::new(api_socket).status(id.as_deref())?),
        Cmd::KvsServe { listen } => {
            let server = KvsServer::start(&listen)?;
            println!("{}", server.url());
            server.wait();
            Ok(ExitCode::SUCCESS)
        }
        Cmd::MemAgent { socket, pid } => {
            run_mem_agent(&socket, pid)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Script { trace, steps } => {
            let steps = parse_script(&steps)?;
            let mut trace = trace.map(fs::File::create).transpose()?.map(BufWriter::new);
            let stdout = io::stdout();
            let ok = run_script(&steps, &mut stdout.lock(), trace.as_mut().map(|w| w as &mut dyn Write));
            if let Some(mut t) = trace {
                t.flush()?;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<ExitCode, BoxError> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(ExitCode::SUCCESS)
}

fn own_exe() -> Option<PathBuf> {
    std::env::current_exe().ok()
}

fn attach(a: AttachArgs) -> Result<ExitCode, BoxError> {
    let spec = match &a.spec {
        Some(p) => serde_json::from_slice(&fs::read(p)?)?,
        None => {
            let handoff = a.handoff.clone().ok_or("--handoff or --spec is required")?;
            let addr = a.addr.ok_or("--addr or --spec is required")?;
            let mut s = ContainerSpec::new(&a.id, addr, handoff);
            s.publish = a.publish.clone();
            s.container_cidrs = a.cidr.clone();
            s.netns = a.netns.clone();
            s.host_loopback_allowed = a.host_loopback;
            s.multinode_enabled = a.multinode;
            s.probe = !a.no_probe;
            s.faults = a.faults.clone();
            s
        }
    };
    let mut cfg = DaemonConfig::new(&a.runtime_dir);
    cfg.handoff_timeout = Duration::from_secs(a.handoff_timeout);
    cfg.supervisor_exe = own_exe();
    if a.no_probe {
        cfg.probe = None;
    }
    if let Some(endpoint) = a.kvs.clone() {
        let host_addr = a.host_addr.ok_or("--host-addr is required with --kvs")?;
        let node_id = a.node_id.clone().unwrap_or_else(b4ns::sys::hostname);
        cfg.multinode = Some(MultinodeSetup { config: MultinodeConfig::new(node_id, host_addr), endpoint });
    } else if spec.multinode_enabled {
        return Err("--multinode needs --kvs or B4NS_KVS_ENDPOINT".into());
    }
    let stop = Arc::new(AtomicBool::new(false));
    signal_hook::flag::register(signal_hook::consts::SIGTERM, stop.clone())?;
    signal_hook::flag::register(signal_hook::consts::SIGINT, stop.clone())?;
    let last = run_attached(spec, cfg, a.status_file.as_deref(), &stop)?;
    println!("{}", serde_json::to_string(&last)?);
    Ok(match last.state {
        InstanceState::Failed(_) => ExitCode::FAILURE,
        _ => ExitCode::SUCCESS,
    })
}


fn run_command(r: RunArgs) -> Result<ExitCode, BoxError> {
    let mappings = r
        .publish
        .iter()
        .map(|p| PublishMapping::parse(p, r.addr))
        .collect::<Result<Vec<_>, _>>()?;
    let env = NetEnvironment::new(r.cidr.clone(), mappings, r.host_loopback)?;
    let policy = Policy::new("run", env);
    let dir = std::env::temp_dir();
    let agent = own_exe().map(|exe| AgentConfig::for_exe(exe, &dir));
    let engine = Arc::new(SwitchEngine::new(policy, Arc::new(MemoryBroker::new(agent))));
    let mode = if r.new_netns { NetnsMode::New } else { NetnsMode::Inherit };
    let mut cmd = Command::new(&r.command[0]);
    cmd.args(&r.command[1..]);
    let sup = SupervisedChild::spawn(&mut cmd, engine, mode, &dir)?;
    let (status, report) = sup.wait()?;
    eprintln!("{}", serde_json::to_string(&report.counters)?);
    Ok(ExitCode::from(status.code().unwrap_or(1).clamp(0, 255) as u8))
}
