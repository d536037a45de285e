use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;

use b4ns::bench::{client_main, median, parse_size, Bench, BenchConfig, ComparisonReport, Mode};

#[derive(Parser)]
#[command(name = "b4ns-bench", version, about = "Compares relay, switched and direct TCP paths")]
struct Cli {
    /// Modes to run; repeatable. Defaults to all three.
    #[arg(long, value_parser = |s: &str| s.parse::<Mode>())]
    mode: Vec<Mode>,
    /// Total payload across streams, e.g. `1G`.
    #[arg(long, default_value = "1G", value_parser = parse_size)]
    bytes: u64,
    #[arg(long, default_value_t = 1)]
    streams: usize,
    /// Run 64-byte request/response rounds instead of a bulk transfer.
    #[arg(long)]
    latency: bool,
    #[arg(long, default_value_t = 10_000)]
    rounds: u32,
    /// Upper bound per run in seconds.
    #[arg(long)]
    duration: Option<u64>,
    /// Runs per mode; the median is reported.
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long)]
    json: Option<PathBuf>,
    /// Directory for handoff sockets.
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    if args.get(1).map(String::as_str) == Some("__client") {
        let spec = args.get(2).map(String::as_str).unwrap_or("");
        let mut out = std::io::stdout().lock();
        return match client_main(spec, &mut out).and_then(|_| out.flush().map_err(|e| b4ns::bench::BenchError::ClientFailed(e.to_string()))) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("b4ns-bench client: {e}");
                ExitCode::FAILURE
            }
        };
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("b4ns-bench: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let modes = if cli.mode.is_empty() { Mode::ALL.to_vec() } else { cli.mode };
    let exe = std::env::current_exe()?;
    let work_dir = cli.work_dir.unwrap_or_else(std::env::temp_dir);
    let bench = Bench::new(exe, work_dir);
    let mut results = Vec::new();
    for mode in modes {
        let mut cfg = BenchConfig::new(mode, cli.bytes, cli.streams);
        cfg.duration = cli.duration.map(Duration::from_secs);
        if cli.latency {
            cfg.latency_rounds = Some(cli.rounds);
        }
        let mut runs = Vec::new();
        for _ in 0..cli.runs.max(1) {
            runs.push(bench.run(&cfg)?);
        }
        results.extend(median(runs));
    }
    let rep = ComparisonReport::new(results);
    print!("{}", rep.to_text());
    if let Some(p) = cli.json {
        std::fs::write(p, rep.to_json())?;
    }
    Ok(())
}
