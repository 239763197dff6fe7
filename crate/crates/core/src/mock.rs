//! A stand-in for a small instrumented PHP script with one sink per
//! vulnerability class, selected by the second character of `m`:
//!
//! ```text
//!  1  $m = $_GET['m']; $d = $_GET['d'];
//!  2  if(substr($m, 0, 1) == "m") {
//!  3      if(substr($m, 1, 1) == "s") {
//!  4          mysqli_query($db,
//!  5                  "SELECT * FROM t WHERE id =  $d");
//!  7      if(substr($m, 1, 1) == "r") { system("echo $d"); }          // 8
//! 10      if(substr($m, 1, 1) == "u") { unserialize($d); }            // 11
//! 13      if(substr($m, 1, 1) == "f") { file_get_contents($d); }      // 14
//! 16      if(substr($m, 1, 1) == "e") {
//! 17          $doc = new DOMDocument();
//! 18          $doc->loadXML($d, LIBXML_NOENT); }
//! 20      if(substr($m, 1, 1) == "x") { echo "$d"; }                  // 21
//! 23      if(substr($m, 1, 1) == "o") { header("Location: " . $d); }  // 24
//! ```
//!
//! Requests carrying `X-Fuzzer-Covid` get a feedback file written to the
//! shared directory before the response is returned.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use axum::extract::{RawQuery, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::any;
use axum::Router;
use tokio::sync::oneshot;
use url::Url;

use crate::feedback::write_feedback;
use crate::model::{FeedbackRecord, HookEvent, PhpError, ResponseSummary};
use crate::request::{PreparedRequest, RequestError, Transport, FEEDBACK_HEADER};

pub const MOCK_FILE: &str = "vuln.php";
pub const MOCK_PATH: &str = "/vuln";

const GUARD_LINES: [u32; 7] = [3, 7, 10, 13, 16, 20, 23];
const WEB_ROOT: &str = "/var/www/html";
const VIRTUAL_FILES: [&str; 2] = ["/etc/passwd", "/var/www/html/data.txt"];
const KNOWN_COMMANDS: [&str; 12] = [
    "echo", "ls", "cat", "id", "whoami", "true", "false", "pwd", "uname", "printf", "test", "sleep",
];

/// Outcome of one request against the mock script.
#[derive(Debug, Clone, PartialEq)]
pub struct MockResponse {
    pub response: ResponseSummary,
    pub feedback: Option<FeedbackRecord>,
}

fn html_response(status: u16, body: Vec<u8>) -> ResponseSummary {
    let mut headers = BTreeMap::new();
    headers.insert(
        "content-type".to_string(),
        "text/html; charset=UTF-8".to_string(),
    );
    headers.insert("content-length".to_string(), body.len().to_string());
    ResponseSummary {
        status,
        headers,
        body,
        truncated: false,
    }
}

fn valid_feedback_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

/// Serves one request without any I/O. `query` is the raw query string.
pub fn handle(path: &str, query: &str, feedback_id: Option<&str>) -> MockResponse {
    if path != MOCK_PATH {
        return MockResponse {
            response: html_response(404, b"Not Found".to_vec()),
            feedback: None,
        };
    }
    let mut params: BTreeMap<String, String> = BTreeMap::new();
    for (k, v) in url::form_urlencoded::parse(query.as_bytes()) {
        params.entry(k.into_owned()).or_insert_with(|| v.into_owned());
    }

    let id = feedback_id.filter(|id| valid_feedback_id(id));
    let mut fb = FeedbackRecord::empty(id.unwrap_or_default());
    let mut lines = BTreeSet::from([1, 2]);
    let mut status = 200;
    let mut body = Vec::new();
    let mut location = None;

    let read = |name: &str, fb: &mut FeedbackRecord| match params.get(name) {
        Some(v) => v.clone(),
        None => {
            fb.php_errors.push(PhpError {
                message: format!("Undefined array key \"{name}\""),
                file: MOCK_FILE.to_string(),
                line: 1,
            });
            String::new()
        }
    };
    let m = read("m", &mut fb);
    let d = read("d", &mut fb);

    let mb = m.as_bytes();
    if mb.first() == Some(&b'm') {
        lines.extend(GUARD_LINES);
        match mb.get(1) {
            Some(b's') => {
                lines.extend([4, 5]);
                fb.hook_events.push(sql_query(&d));
            }
            Some(b'r') => {
                lines.insert(8);
                fb.hook_events.push(shell(&d));
            }
            Some(b'u') => {
                lines.insert(11);
                fb.hook_events.push(unserialize(&d));
            }
            Some(b'f') => {
                lines.insert(14);
                fb.hook_events.push(file_get_contents(&d));
            }
            Some(b'e') => {
                lines.extend([17, 18]);
                fb.hook_events.push(load_xml(&d));
            }
            Some(b'x') => {
                lines.insert(21);
                body = d.clone().into_bytes();
            }
            Some(b'o') => {
                lines.insert(24);
                if d.contains(['\r', '\n']) {
                    fb.php_errors.push(PhpError {
                        message: "Header may not contain more than a single header, new line detected"
                            .to_string(),
                        file: MOCK_FILE.to_string(),
                        line: 24,
                    });
                } else {
                    status = 302;
                    location = Some(d.clone());
                }
            }
            _ => {}
        }
    }
    fb.coverage.insert(MOCK_FILE.to_string(), lines);

    let page = if body.is_empty() {
        Vec::new()
    } else {
        let mut page = b"<html><body>".to_vec();
        page.extend_from_slice(&body);
        page.extend_from_slice(b"</body></html>");
        page
    };
    let mut response = html_response(status, page);
    if let Some(loc) = location {
        response.headers.insert("location".to_string(), loc);
    }
    MockResponse {
        response,
        feedback: id.map(|_| fb),
    }
}

fn unbalanced_quote(s: &str) -> Option<char> {
    ['\'', '"']
        .into_iter()
        .find(|q| s.chars().filter(|c| c == q).count() % 2 == 1)
}

fn sql_query(d: &str) -> HookEvent {
    let query = format!("SELECT * FROM t WHERE id =  {d}");
    let mut ev = HookEvent::new("mysqli_query", vec![query]);
    if let Some(q) = unbalanced_quote(d) {
        let near: String = d[d.find(q).unwrap_or(0)..].chars().take(80).collect();
        ev.error = Some(format!(
            "You have an error in your SQL syntax; check the manual that corresponds to your \
             MySQL server version for the right syntax to use near '{near}' at line 1"
        ));
        ev.returned_false = true;
    }
    ev
}

fn shell(d: &str) -> HookEvent {
    let cmd = format!("echo {d}");
    let mut ev = HookEvent::new("system", vec![cmd.clone()]);
    if unbalanced_quote(d).is_some() {
        ev.error = Some("sh: 1: Syntax error: Unterminated quoted string".to_string());
        return ev;
    }
    for segment in cmd.split(';').skip(1) {
        if let Some(word) = segment.split_whitespace().next() {
            if !KNOWN_COMMANDS.contains(&word) {
                ev.error = Some(format!("sh: 1: {word}: not found"));
                return ev;
            }
        }
    }
    ev
}

/// Byte offset where parsing of a serialized PHP value fails, if it does.
fn serialized_error_offset(s: &[u8]) -> Option<usize> {
    fn expect(s: &[u8], pos: usize, lit: &[u8]) -> Result<usize, usize> {
        if s.len() >= pos + lit.len() && &s[pos..pos + lit.len()] == lit {
            Ok(pos + lit.len())
        } else {
            Err(pos)
        }
    }
    fn number<'a>(s: &'a [u8], pos: usize, allow: &dyn Fn(u8) -> bool) -> Result<(usize, &'a str), usize> {
        let end = pos + s[pos..].iter().take_while(|&&b| allow(b)).count();
        if end == pos {
            return Err(pos);
        }
        Ok((end, std::str::from_utf8(&s[pos..end]).map_err(|_| pos)?))
    }
    fn length(s: &[u8], pos: usize) -> Result<(usize, usize), usize> {
        let (end, digits) = number(s, pos, &|b: u8| b.is_ascii_digit())?;
        Ok((end, digits.parse().map_err(|_| pos)?))
    }
    fn value(s: &[u8], pos: usize, depth: usize) -> Result<usize, usize> {
        if depth > 64 {
            return Err(pos);
        }
        let Some(&tag) = s.get(pos) else {
            return Err(pos);
        };
        match tag {
            b'N' => expect(s, pos + 1, b";"),
            b'b' => {
                let p = expect(s, pos + 1, b":")?;
                match s.get(p) {
                    Some(b'0' | b'1') => expect(s, p + 1, b";"),
                    _ => Err(p),
                }
            }
            b'i' => {
                let mut p = expect(s, pos + 1, b":")?;
                if matches!(s.get(p), Some(b'-' | b'+')) {
                    p += 1;
                }
                let (p, _) = number(s, p, &|b: u8| b.is_ascii_digit())?;
                expect(s, p, b";")
            }
            b'd' => {
                let p = expect(s, pos + 1, b":")?;
                let (p, _) = number(s, p, &|b: u8| {
                    b.is_ascii_alphanumeric() || matches!(b, b'.' | b'-' | b'+')
                })?;
                expect(s, p, b";")
            }
            b's' => {
                let p = expect(s, pos + 1, b":")?;
                let (p, len) = length(s, p)?;
                let p = expect(s, p, b":\"")?;
                if s.len() < p + len {
                    return Err(s.len());
                }
                expect(s, p + len, b"\";")
            }
            b'a' => {
                let p = expect(s, pos + 1, b":")?;
                let (p, n) = length(s, p)?;
                let mut p = expect(s, p, b":{")?;
                for _ in 0..n {
                    match s.get(p) {
                        Some(b'i' | b's') => p = value(s, p, depth + 1)?,
                        _ => return Err(p),
                    }
                    p = value(s, p, depth + 1)?;
                }
                expect(s, p, b"}")
            }
            b'O' => {
                let p = expect(s, pos + 1, b":")?;
                let (p, len) = length(s, p)?;
                let p = expect(s, p, b":\"")?;
                if s.len() < p + len || len == 0 {
                    return Err(p);
                }
                let p = expect(s, p + len, b"\":")?;
                let (p, n) = length(s, p)?;
                let mut p = expect(s, p, b":{")?;
                for _ in 0..n {
                    if s.get(p) != Some(&b's') {
                        return Err(p);
                    }
                    p = value(s, p, depth + 1)?;
                    p = value(s, p, depth + 1)?;
                }
                expect(s, p, b"}")
            }
            _ => Err(pos),
        }
    }
    value(s, 0, 0).err()
}

fn unserialize(d: &str) -> HookEvent {
    let mut ev = HookEvent::new("unserialize", vec![d.to_string()]);
    match serialized_error_offset(d.as_bytes()) {
        Some(offset) => {
            ev.error = Some(format!(
                "unserialize(): Error at offset {offset} of {} bytes",
                d.len()
            ));
            ev.returned_false = true;
        }
        None => ev.returned_false = d.starts_with("b:0;"),
    }
    ev
}

fn resolve(path: &str) -> String {
    let joined = if path.starts_with('/') {
        path.to_string()
    } else {
        format!("{WEB_ROOT}/{path}")
    };
    let mut parts: Vec<&str> = Vec::new();
    for seg in joined.split('/') {
        match seg {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            s => parts.push(s),
        }
    }
    format!("/{}", parts.join("/"))
}

fn file_get_contents(d: &str) -> HookEvent {
    let mut ev = HookEvent::new("file_get_contents", vec![d.to_string()]);
    if d.is_empty() {
        ev.error = Some("file_get_contents(): Path cannot be empty".to_string());
        ev.returned_false = true;
    } else if d.contains('\0') || !VIRTUAL_FILES.contains(&resolve(d).as_str()) {
        ev.error = Some(format!(
            "file_get_contents({d}): Failed to open stream: No such file or directory"
        ));
        ev.returned_false = true;
    }
    ev
}

fn system_identifier(d: &str) -> Option<String> {
    let at = d.find("SYSTEM")?;
    let rest = d[at + "SYSTEM".len()..].trim_start();
    let quote = rest.chars().next().filter(|c| *c == '"' || *c == '\'')?;
    let inner = &rest[1..];
    Some(inner[..inner.find(quote)?].to_string())
}

fn load_xml(d: &str) -> HookEvent {
    let mut ev = HookEvent::new(
        "DOMDocument::loadXML",
        vec![d.to_string(), "flags=NOENT".to_string()],
    );
    let trimmed = d.trim_start();
    ev.error = if d.is_empty() {
        Some("DOMDocument::loadXML(): Argument #1 ($source) must not be empty".to_string())
    } else if !trimmed.starts_with('<') {
        Some("DOMDocument::loadXML(): Start tag expected, '<' not found in Entity, line: 1".to_string())
    } else if (d.contains("<!ENTITY") || d.contains("<!DOCTYPE")) && system_identifier(d).is_some() {
        let uri = system_identifier(d).unwrap_or_default();
        Some(format!(
            "DOMDocument::loadXML(): I/O warning : failed to load external entity \"{uri}\""
        ))
    } else if !trimmed.trim_end().ends_with('>') {
        Some("DOMDocument::loadXML(): Premature end of data in tag in Entity, line: 1".to_string())
    } else {
        None
    };
    ev.returned_false = ev.error.is_some();
    ev
}

/// Runs [`handle`] and writes the feedback file, if any.
pub fn handle_and_record(
    shared_dir: &Path,
    path: &str,
    query: &str,
    feedback_id: Option<&str>,
) -> io::Result<ResponseSummary> {
    let out = handle(path, query, feedback_id);
    if let Some(fb) = &out.feedback {
        write_feedback(shared_dir, fb)?;
    }
    Ok(out.response)
}

/// Delivers requests straight to the mock script, skipping the network.
#[derive(Debug, Clone)]
pub struct InProcessTransport {
    shared_dir: PathBuf,
}

impl InProcessTransport {
    pub fn new(shared_dir: impl Into<PathBuf>) -> Self {
        InProcessTransport {
            shared_dir: shared_dir.into(),
        }
    }
}

impl Transport for InProcessTransport {
    fn send(
        &mut self,
        req: &PreparedRequest,
        _timeout: Duration,
    ) -> Result<ResponseSummary, RequestError> {
        let url = Url::parse(&req.url).map_err(|_| RequestError::InvalidUrl(req.url.clone()))?;
        handle_and_record(
            &self.shared_dir,
            url.path(),
            url.query().unwrap_or(""),
            req.feedback_id(),
        )
        .map_err(|e| RequestError::Io(e.to_string()))
    }
}

async fn serve_vuln(
    State(shared_dir): State<PathBuf>,
    uri: axum::http::Uri,
    RawQuery(query): RawQuery,
    headers: HeaderMap,
) -> Response {
    let id = headers
        .get(FEEDBACK_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let path = uri.path().to_string();
    let result = tokio::task::spawn_blocking(move || {
        handle_and_record(&shared_dir, &path, query.as_deref().unwrap_or(""), id.as_deref())
    })
    .await;
    let summary = match result {
        Ok(Ok(s)) => s,
        _ => return StatusCode::INTERNAL_SERVER_ERROR.into_response(),
    };
    let mut builder = Response::builder()
        .status(StatusCode::from_u16(summary.status).unwrap_or(StatusCode::OK));
    for (name, value) in &summary.headers {
        if name == "content-length" {
            continue;
        }
        builder = builder.header(name.as_str(), value.as_str());
    }
    builder
        .body(axum::body::Body::from(summary.body))
        .unwrap_or_else(|_| StatusCode::INTERNAL_SERVER_ERROR.into_response())
}

/// A mock server running on a background thread; stops when dropped.
pub struct MockServer {
    addr: SocketAddr,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<thread::JoinHandle<()>>,
}

impl MockServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}{MOCK_PATH}", self.addr)
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn router(shared_dir: PathBuf) -> Router {
    Router::new()
        .fallback(any(serve_vuln))
        .with_state(shared_dir)
}

/// Starts the mock on `127.0.0.1:port` (0 picks a free port).
pub fn serve(shared_dir: impl Into<PathBuf>, port: u16) -> io::Result<MockServer> {
    let shared_dir = shared_dir.into();
    std::fs::create_dir_all(&shared_dir)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(4)
        .enable_all()
        .build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(("127.0.0.1", port)))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = oneshot::channel::<()>();
    let app = router(shared_dir);
    let thread = thread::spawn(move || {
        runtime.block_on(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(MockServer {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}
