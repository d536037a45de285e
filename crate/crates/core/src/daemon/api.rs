//! Management API: JSON over HTTP/1.1 on a unix socket.
//!
//! `POST /containers`, `DELETE /containers/{id}`, `GET /containers`,
//! `GET /containers/{id}`. Errors are `{"error": kind, "message": detail}`.

use std::io::{self, Read, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tiny_http::{Header, Method, Request, Response};

use super::{ContainerSpec, Daemon, DaemonError, InstanceStatus};

pub const DEFAULT_API_SOCKET: &str = "/run/b4nsd.sock";

#[derive(Debug, Serialize, Deserialize)]
struct ErrorBody {
    error: String,
    message: String,
}

fn status_code(e: &DaemonError) -> u16 {
    match e {
        DaemonError::DuplicateContainer(_) => 409,
        DaemonError::UnknownContainer(_) => 404,
        DaemonError::InvalidSpec(_) => 400,
        DaemonError::AttachFailed(_) => 422,
        DaemonError::Setup(_) => 500,
    }
}

/// Routes one request. Returns status code and JSON body.
pub fn route(daemon: &Daemon, method: &Method, url: &str, body: &[u8]) -> (u16, String) {
    let path = url.split('?').next().unwrap_or(url).trim_end_matches('/');
    let result: Result<(u16, String), DaemonError> = match (method, path) {
        (Method::Get, "/containers") => daemon.status(None).map(|v| (200, to_json(&v))),
        (Method::Post, "/containers") => match serde_json::from_slice::<ContainerSpec>(body) {
            Ok(spec) => daemon.start_instance(spec).map(|s| (201, to_json(&s))),
            Err(e) => Err(DaemonError::InvalidSpec(e.to_string())),
        },
        (m, p) if p.starts_with("/containers/") => {
            let id = &p["/containers/".len()..];
            match m {
                Method::Get => daemon.status(Some(id)).map(|mut v| (200, to_json(&v.remove(0)))),
                Method::Delete => daemon.stop_instance(id).map(|s| (200, to_json(&s))),
                _ => return (405, error_json("method_not_allowed", m.as_str())),
            }
        }
        _ => return (404, error_json("not_found", path)),
    };
    match result {
        Ok(ok) => ok,
        Err(e) => (status_code(&e), error_json(e.kind(), &e.detail())),
    }
}

fn to_json(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("api types serialize")
}

fn error_json(kind: &str, message: &str) -> String {
    to_json(&ErrorBody { error: kind.into(), message: message.into() })
}

/// Serves the API for `daemon` on a unix socket.
pub struct ApiServer {
    server: Arc<tiny_http::Server>,
    path: PathBuf,
    thread: Option<JoinHandle<()>>,
}

impl ApiServer {
    pub fn start(daemon: Arc<Daemon>, path: impl AsRef<Path>) -> io::Result<Self> {
        let path = path.as_ref().to_path_buf();
        let _ = std::fs::remove_file(&path);
        let server = Arc::new(tiny_http::Server::http_unix(&path).map_err(io::Error::other)?);
        let srv = server.clone();
        let thread = std::thread::spawn(move || {
            for req in srv.incoming_requests() {
                let daemon = daemon.clone();
                // Distinct containers are handled concurrently; the daemon
                // serializes requests for the same id.
                std::thread::spawn(move || handle(&daemon, req));
            }
        });
        Ok(Self { server, path, thread: Some(thread) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Blocks until the server is unblocked from elsewhere.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Stops accepting requests.
    pub fn unblocker(&self) -> impl Fn() + Send + Sync + 'static {
        let srv = self.server.clone();
        move || srv.unblock()
    }
}

impl Drop for ApiServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        let _ = std::fs::remove_file(&self.path);
    }
}

fn handle(daemon: &Daemon, mut req: Request) {
    let mut body = Vec::new();
    if req.as_reader().take(1 << 20).read_to_end(&mut body).is_err() {
        let _ = req.respond(Response::from_string(error_json("bad_request", "unreadable body")).with_status_code(400));
        return;
    }
    let (code, json) = route(daemon, req.method(), req.url(), &body);
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let _ = req.respond(Response::from_string(json).with_status_code(code).with_header(header));
}

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("cannot reach daemon: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Daemon(#[from] DaemonError),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed response: {0}")]
    Decode(String),
}

/// Minimal client for the management API.
#[derive(Debug, Clone)]
pub struct ApiClient {
    path: PathBuf,
    timeout: Duration,
}

impl ApiClient {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into(), timeout: Duration::from_secs(30) }
    }

    fn request(&self, method: &str, target: &str, body: Option<&str>) -> Result<(u16, String), ApiError> {
        let mut s = UnixStream::connect(&self.path)?;
        s.set_read_timeout(Some(self.timeout))?;
        let body = body.unwrap_or("");
        write!(
            s,
            "{method} {target} HTTP/1.1\r\nHost: b4nsd\r\nContent-Type: application/json\r\n\
             Content-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )?;
        let mut raw = Vec::new();
        s.read_to_end(&mut raw)?;
        parse_response(&raw)
    }

    fn call<T: for<'de> Deserialize<'de>>(&self, method: &str, target: &str, body: Option<&str>) -> Result<T, ApiError> {
        let (status, body) = self.request(method, target, body)?;
        if (200..300).contains(&status) {
            return serde_json::from_str(&body).map_err(|e| ApiError::Decode(e.to_string()));
        }
        match serde_json::from_str::<ErrorBody>(&body) {
            Ok(e) if e.error != "not_found" && e.error != "bad_request" => {
                Err(DaemonError::from_kind(&e.error, e.message).into())
            }
            _ => Err(ApiError::Http { status, body }),
        }
    }

    pub fn start(&self, spec: &ContainerSpec) -> Result<InstanceStatus, ApiError> {
        self.call("POST", "/containers", Some(&to_json(spec)))
    }

    pub fn stop(&self, id: &str) -> Result<InstanceStatus, ApiError> {
        self.call("DELETE", &format!("/containers/{id}"), None)
    }

    pub fn status(&self, id: Option<&str>) -> Result<Vec<InstanceStatus>, ApiError> {
        match id {
            Some(id) => self.call("GET", &format!("/containers/{id}"), None).map(|s| vec![s]),
            None => self.call("GET", "/containers", None),
        }
    }
}

fn parse_response(raw: &[u8]) -> Result<(u16, String), ApiError> {
    let split = raw
        .windows(4)
        .position(|w| w == b"\r\n\r\n")
        .ok_or_else(|| ApiError::Decode("no header terminator".into()))?;
    let head = std::str::from_utf8(&raw[..split]).map_err(|e| ApiError::Decode(e.to_string()))?;
    let mut lines = head.split("\r\n");
    let status: u16 = lines
        .next()
        .and_then(|l| l.split_whitespace().nth(1))
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| ApiError::Decode("bad status line".into()))?;
    let mut body = &raw[split + 4..];
    let length = lines
        .filter_map(|l| l.split_once(':'))
        .find(|(k, _)| k.eq_ignore_ascii_case("content-length"))
        .and_then(|(_, v)| v.trim().parse::<usize>().ok());
    if let Some(n) = length {
        body = &body[..n.min(body.len())];
    }
    Ok((status, String::from_utf8_lossy(body).into_owned()))
}
