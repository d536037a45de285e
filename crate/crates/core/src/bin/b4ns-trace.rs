use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use b4ns::trace::{label_mismatches, parse_trace, reconstruct, report, strace, write_trace, TraceError};

#[derive(Parser)]
#[command(name = "b4ns-trace", version, about = "Socket lifecycle analysis of syscall traces")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Reconstruct socket lifecycles and print the class report.
    Analyze {
        /// JSONL trace; `-` for stdin.
        #[arg(long)]
        input: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Convert `strace -f` output into the JSONL trace format.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn open(path: &Path) -> io::Result<Box<dyn BufRead>> {
    if path.as_os_str() == "-" {
        Ok(Box::new(BufReader::new(io::stdin())))
    } else {
        Ok(Box::new(BufReader::new(File::open(path)?)))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("b4ns-trace: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Box<dyn std::error::Error>> {
    match cmd {
        Cmd::Analyze { input, json } => {
            let parsed = match parse_trace(open(&input)?) {
                Ok(p) => p,
                Err(TraceError::EmptyTrace) => return Err("trace contains no valid events".into()),
                Err(e) => return Err(e.into()),
            };
            for s in &parsed.skipped {
                log::warn!("line {}: {}", s.line, s.reason);
            }
            let r = reconstruct(&parsed.events);
            for m in label_mismatches(&r) {
                log::error!("{m}");
            }
            let rep = report(&r, parsed.skipped.len());
            print!("{}", rep.to_text());
            if let Some(path) = json {
                std::fs::write(path, rep.to_json())?;
            }
        }
        Cmd::Convert { input, output } => {
            let c = strace::convert(open(&input)?)?;
            if c.unparsed > 0 {
                log::warn!("{} lines could not be parsed", c.unparsed);
            }
            let mut out: Box<dyn Write> = match output {
                Some(p) => Box::new(BufWriter::new(File::create(p)?)),
                None => Box::new(BufWriter::new(io::stdout().lock())),
            };
            write_trace(&c.events, &mut out)?;
            out.flush()?;
        }
    }
    Ok(())
}
