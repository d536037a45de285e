use std::net::Ipv4Addr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use signal_hook::consts::{SIGINT, SIGTERM};
use signal_hook::iterator::Signals;

use b4ns::daemon::api::{ApiServer, DEFAULT_API_SOCKET};
use b4ns::daemon::{Daemon, DaemonConfig, Isolation, MultinodeSetup};
use b4ns::multinode::MultinodeConfig;

#[derive(Clone, Copy, ValueEnum)]
enum IsolationArg {
    /// One supervisor thread per container.
    Thread,
    /// One `b4ns attach` process per container.
    Process,
}

#[derive(Parser)]
#[command(name = "b4nsd", version, about = "Manages one socket-switching supervisor per container")]
struct Cli {
    #[arg(long, env = "B4NS_API_SOCKET", default_value = DEFAULT_API_SOCKET)]
    api_socket: PathBuf,
    #[arg(long, default_value = "/run/b4ns")]
    runtime_dir: PathBuf,
    #[arg(long, value_enum, default_value = "thread")]
    isolation: IsolationArg,
    /// Disables reachability probing; container traffic is then switched
    /// only for published ports and remote mappings.
    #[arg(long)]
    no_probe: bool,
    /// Mapping store for multi-node setups: `http://HOST:PORT` or a directory.
    #[arg(long, env = "B4NS_KVS_ENDPOINT")]
    kvs: Option<String>,
    #[arg(long)]
    node_id: Option<String>,
    /// Address under which this node's published ports are reachable.
    #[arg(long)]
    host_addr: Option<Ipv4Addr>,
    /// Seconds to wait for a runtime to hand over the notify fd.
    #[arg(long, default_value_t = 60)]
    handoff_timeout: u64,
    /// The `b4ns` binary; defaults to the one next to this executable.
    #[arg(long)]
    supervisor_exe: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("b4nsd: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = DaemonConfig::new(&cli.runtime_dir);
    cfg.isolation = match cli.isolation {
        IsolationArg::Thread => Isolation::Thread,
        IsolationArg::Process => Isolation::Process,
    };
    cfg.handoff_timeout = std::time::Duration::from_secs(cli.handoff_timeout);
    cfg.supervisor_exe = cli
        .supervisor_exe
        .or_else(|| std::env::current_exe().ok().map(|p| p.with_file_name("b4ns")))
        .filter(|p| p.exists());
    if cli.no_probe {
        cfg.probe = None;
    }
    if let Some(endpoint) = cli.kvs {
        let host_addr = cli.host_addr.ok_or("--host-addr is required with --kvs")?;
        let node_id = cli.node_id.unwrap_or_else(b4ns::sys::hostname);
        cfg.multinode = Some(MultinodeSetup { config: MultinodeConfig::new(node_id, host_addr), endpoint });
    }

    let daemon = Daemon::new(cfg)?;
    let server = ApiServer::start(daemon.clone(), &cli.api_socket)?;
    log::info!("listening on {}", cli.api_socket.display());

    let mut signals = Signals::new([SIGTERM, SIGINT])?;
    let unblock = server.unblocker();
    std::thread::spawn(move || {
        if signals.forever().next().is_some() {
            unblock();
        }
    });
    server.wait();
    log::info!("shutting down");
    daemon.shutdown();
    let _ = std::fs::remove_file(&cli.api_socket);
    Ok(())
}
