//! Converts `strace -f` text output into trace events.
//!
//! Handles `-t`, `-tt` and `-ttt` timestamps, `[pid N]` and bare pid
//! prefixes, `-y` fd decorations and `<unfinished ...>` / `resumed` pairs.
//! strace reports thread ids, so each thread shows up as its own pid.

use std::collections::HashMap;
use std::io::BufRead;

use super::{TraceArgs, TraceEvent};

#[derive(Debug, Default)]
pub struct Converted {
    pub events: Vec<TraceEvent>,
    /// Lines that looked like syscalls but could not be parsed.
    pub unparsed: usize,
}

pub fn convert(input: impl BufRead) -> std::io::Result<Converted> {
    let mut out = Converted::default();
    let mut unfinished: HashMap<i32, String> = HashMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let (pid, ts, rest) = split_prefix(&line);
        let ts = ts.unwrap_or(i as u64 * 1000);
        let rest = rest.trim();
        if rest.starts_with("+++") || rest.starts_with("---") || rest.is_empty() {
            continue;
        }
        let pid = pid.unwrap_or(0);
        let full = if let Some(head) = rest.strip_suffix("<unfinished ...>") {
            unfinished.insert(pid, head.trim_end().to_string());
            continue;
        } else if let Some(tail) = rest.strip_prefix("<... ") {
            let Some((_, after)) = tail.split_once("resumed>") else {
                out.unparsed += 1;
                continue;
            };
            match unfinished.remove(&pid) {
                Some(head) => format!("{head}{after}"),
                None => {
                    out.unparsed += 1;
                    continue;
                }
            }
        } else {
            rest.to_string()
        };
        match parse_call(&full) {
            Some((name, args, ret)) => out.events.push(TraceEvent {
                ts,
                pid,
                tid: pid,
                args: decode_args(&name, &args),
                syscall: name,
                ret,
            }),
            None => out.unparsed += 1,
        }
    }
    Ok(out)
}

fn split_prefix(line: &str) -> (Option<i32>, Option<u64>, &str) {
    let mut rest = line.trim_start();
    let mut pid = None;
    if let Some(r) = rest.strip_prefix("[pid") {
        if let Some((n, r)) = r.split_once(']') {
            pid = n.trim().parse().ok();
            rest = r.trim_start();
        }
    } else if let Some((tok, r)) = rest.split_once(char::is_whitespace) {
        if !tok.is_empty() && tok.bytes().all(|b| b.is_ascii_digit()) {
            pid = tok.parse().ok();
            rest = r.trim_start();
        }
    }
    let mut ts = None;
    if let Some((tok, r)) = rest.split_once(char::is_whitespace) {
        if let Some(t) = parse_timestamp(tok) {
            ts = Some(t);
            rest = r;
        }
    }
    (pid, ts, rest)
}

/// `HH:MM:SS[.frac]` or `SECS.frac` to nanoseconds.
fn parse_timestamp(tok: &str) -> Option<u64> {
    if !tok.bytes().next()?.is_ascii_digit() || !tok.bytes().all(|b| b.is_ascii_digit() || b == b':' || b == b'.') {
        return None;
    }
    let (whole, frac) = tok.split_once('.').unwrap_or((tok, ""));
    let secs = if whole.contains(':') {
        let parts: Vec<u64> = whole.split(':').map(|p| p.parse().ok()).collect::<Option<_>>()?;
        let [h, m, s] = parts[..] else { return None };
        h * 3600 + m * 60 + s
    } else if frac.is_empty() {
        return None;
    } else {
        whole.parse().ok()?
    };
    let mut nanos = 0u64;
    for (i, d) in frac.bytes().take(9).enumerate() {
        nanos += (d - b'0') as u64 * 10u64.pow(8 - i as u32);
    }
    Some(secs * 1_000_000_000 + nanos)
}

/// `name(args) = ret ...` → (name, args, ret).
fn parse_call(s: &str) -> Option<(String, String, i64)> {
    let open = s.find('(')?;
    let name = &s[..open];
    if name.is_empty() || !name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_') {
        return None;
    }
    let eq = s.rfind(" = ")?;
    let close = s[..eq].rfind(')')?;
    let args = s[open + 1..close].to_string();
    let ret_tok = s[eq + 3..].split_whitespace().next()?;
    let ret = if let Some(hex) = ret_tok.strip_prefix("0x") {
        i64::from_str_radix(hex, 16).ok()?
    } else {
        ret_tok.parse().ok()?
    };
    Some((name.to_string(), args, ret))
}

/// Splits on top-level commas, respecting brackets and quotes.
fn split_args(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut quoted = false;
    let mut escaped = false;
    let mut cur = String::new();
    for c in s.chars() {
        if quoted {
            cur.push(c);
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => quoted = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => quoted = true,
            '(' | '[' | '{' | '<' => depth += 1,
            ')' | ']' | '}' | '>' => depth -= 1,
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn leading_int(s: &str) -> Option<i32> {
    let end = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
    s[..end].parse().ok()
}

fn field<'a>(s: &'a str, key: &str) -> Option<&'a str> {
    let start = s.find(key)? + key.len();
    let rest = &s[start..];
    let end = rest.find([',', '}']).unwrap_or(rest.len());
    Some(&rest[..end])
}

fn inner_quoted(s: &str) -> Option<&str> {
    let a = s.find('"')? + 1;
    let b = s[a..].find('"')? + a;
    Some(&s[a..b])
}

fn decode_sockaddr(s: &str) -> Option<String> {
    if s.contains("AF_UNIX") {
        return Some(format!("unix:{}", inner_quoted(field(s, "sun_path=")?)?));
    }
    let v6 = s.contains("AF_INET6");
    let port_key = if v6 { "sin6_port=htons(" } else { "sin_port=htons(" };
    let port = leading_int(field(s, port_key)?)?;
    let ip = if v6 {
        inner_quoted(&s[s.find("inet_pton(")?..])?.to_string()
    } else {
        inner_quoted(field(s, "sin_addr=")?)?.to_string()
    };
    Some(if v6 { format!("[{ip}]:{port}") } else { format!("{ip}:{port}") })
}

fn decode_args(name: &str, raw: &str) -> TraceArgs {
    let args = split_args(raw);
    let mut out = TraceArgs::default();
    match name {
        "socket" => {
            out.domain = args.first().cloned();
            out.sock_type = args.get(1).cloned();
        }
        "clone" | "clone3" | "fork" | "vfork" | "select" | "epoll_wait" | "epoll_pwait" => {}
        "epoll_ctl" => out.fd = args.get(2).and_then(|a| leading_int(a)),
        "poll" | "ppoll" => out.fd = field(raw, "fd=").and_then(leading_int),
        _ => {
            out.fd = args.first().and_then(|a| leading_int(a));
            if matches!(name, "connect" | "bind" | "accept" | "accept4") {
                out.addr = args.get(1).and_then(|a| decode_sockaddr(a));
            }
        }
    }
    out
}
