//! Turns candidates into HTTP requests and sends them.
//!
//! Plain `http://` targets are spoken to with a small HTTP/1.1 client that
//! writes header names exactly as given and never follows redirects.
//! `https://` targets go through `ureq` with redirects disabled.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use percent_encoding::{utf8_percent_encode, AsciiSet, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::model::{Candidate, HttpMethod, Location, ResponseSummary};

/// Name of the header carrying the feedback id.
pub const FEEDBACK_HEADER: &str = "X-Fuzzer-Covid";
/// Response bodies are cut at this size.
pub const MAX_BODY_BYTES: usize = 1024 * 1024;
const MAX_HEAD_BYTES: usize = 64 * 1024;

/// Everything except RFC 3986 unreserved characters.
const COMPONENT: &AsciiSet = &NON_ALPHANUMERIC
    .remove(b'-')
    .remove(b'.')
    .remove(b'_')
    .remove(b'~');

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RequestError {
    #[error("header {name} contains a control character")]
    InvalidHeaderValue { name: String },
    #[error("invalid target url {0}")]
    InvalidUrl(String),
    #[error("request timed out")]
    Timeout,
    #[error("could not connect after {attempts} attempts: {reason}")]
    ConnectError { attempts: u32, reason: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyEncoding {
    Urlencoded,
    Json,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreparedRequest {
    pub method: HttpMethod,
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Option<Vec<u8>>,
    pub body_encoding: BodyEncoding,
}

impl PreparedRequest {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn feedback_id(&self) -> Option<&str> {
        self.header(FEEDBACK_HEADER)
    }
}

pub fn percent_encode(s: &str) -> String {
    utf8_percent_encode(s, COMPONENT).to_string()
}

/// Values of one location, in config order first, then any extras.
fn ordered_values(c: &Candidate, location: Location) -> Vec<(&str, &str)> {
    let mut out: Vec<(&str, &str)> = Vec::new();
    if let Some(group) = c.endpoint.param_groups.get(&location) {
        for p in &group.params {
            if let Some(v) = c.value(location, &p.name) {
                out.push((&p.name, v));
            }
        }
    }
    for (k, v) in &c.values {
        if k.location == location && !out.iter().any(|(n, _)| *n == k.name) {
            out.push((&k.name, v));
        }
    }
    out
}

fn encode_pairs(pairs: &[(&str, &str)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{}={}", percent_encode(k), percent_encode(v)))
        .collect::<Vec<_>>()
        .join("&")
}

fn is_json_media_type(value: &str) -> bool {
    value
        .split(';')
        .next()
        .is_some_and(|t| t.trim().eq_ignore_ascii_case("application/json"))
}

/// Builds the request for a candidate. Pure: the same candidate always
/// yields the same request.
pub fn prepare_request(c: &Candidate) -> Result<PreparedRequest, RequestError> {
    let mut url = c.endpoint.target_url.clone();
    let query = ordered_values(c, Location::Query);
    if !query.is_empty() {
        url.push(if url.contains('?') { '&' } else { '?' });
        url.push_str(&encode_pairs(&query));
    }

    let mut headers: Vec<(String, String)> = Vec::new();
    for (name, value) in ordered_values(c, Location::Header) {
        if value.chars().any(|ch| ch.is_control() && ch != '\t') {
            return Err(RequestError::InvalidHeaderValue {
                name: name.to_string(),
            });
        }
        headers.push((name.to_string(), value.to_string()));
    }

    let cookies = ordered_values(c, Location::Cookie);
    if !cookies.is_empty() {
        let cookie = cookies
            .iter()
            .map(|(k, v)| format!("{k}={}", percent_encode(v)))
            .collect::<Vec<_>>()
            .join("; ");
        headers.push(("Cookie".to_string(), cookie));
    }

    let body_params = ordered_values(c, Location::Body);
    let (body, body_encoding) = if c.method.carries_body() && !body_params.is_empty() {
        let json = headers
            .iter()
            .any(|(n, v)| n.eq_ignore_ascii_case("content-type") && is_json_media_type(v));
        if json {
            let object: serde_json::Map<String, serde_json::Value> = body_params
                .iter()
                .map(|(k, v)| (k.to_string(), serde_json::Value::String(v.to_string())))
                .collect();
            let bytes = serde_json::to_vec(&object).expect("string map serializes");
            (Some(bytes), BodyEncoding::Json)
        } else {
            if !headers
                .iter()
                .any(|(n, _)| n.eq_ignore_ascii_case("content-type"))
            {
                headers.push((
                    "Content-Type".to_string(),
                    "application/x-www-form-urlencoded".to_string(),
                ));
            }
            (
                Some(encode_pairs(&body_params).into_bytes()),
                BodyEncoding::Urlencoded,
            )
        }
    } else {
        (None, BodyEncoding::None)
    };

    headers.push((FEEDBACK_HEADER.to_string(), c.feedback_id.clone()));

    Ok(PreparedRequest {
        method: c.method,
        url,
        headers,
        body,
        body_encoding,
    })
}

/// Something that can deliver a prepared request.
pub trait Transport: Send {
    fn send(
        &mut self,
        req: &PreparedRequest,
        timeout: Duration,
    ) -> Result<ResponseSummary, RequestError>;
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            backoff: Duration::from_millis(100),
        }
    }
}

struct Connection {
    host: String,
    port: u16,
    reader: BufReader<TcpStream>,
}

/// Blocking HTTP client holding at most one keep-alive connection.
pub struct HttpClient {
    retry: RetryPolicy,
    conn: Option<Connection>,
    tls: Option<ureq::Agent>,
}

impl Default for HttpClient {
    fn default() -> Self {
        Self::new(RetryPolicy::default())
    }
}

enum Failure {
    Connect(String),
    /// The reused connection went away before any response byte arrived.
    Stale,
    Fatal(RequestError),
}

impl HttpClient {
    pub fn new(retry: RetryPolicy) -> Self {
        HttpClient {
            retry,
            conn: None,
            tls: None,
        }
    }

    /// Sends the request, retrying connection failures with exponential
    /// backoff.
    pub fn execute(
        &mut self,
        req: &PreparedRequest,
        timeout: Duration,
    ) -> Result<ResponseSummary, RequestError> {
        let url = Url::parse(&req.url).map_err(|_| RequestError::InvalidUrl(req.url.clone()))?;
        match url.scheme() {
            "http" => {}
            "https" => return self.execute_tls(req, timeout),
            _ => return Err(RequestError::InvalidUrl(req.url.clone())),
        }
        let host = url
            .host_str()
            .ok_or_else(|| RequestError::InvalidUrl(req.url.clone()))?
            .to_string();
        let port = url.port_or_known_default().unwrap_or(80);

        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.retry.backoff * 2u32.pow(attempt - 1));
            }
            let mut outcome = self.try_once(&url, &host, port, req, timeout);
            if matches!(outcome, Err(Failure::Stale)) {
                self.conn = None;
                outcome = self.try_once(&url, &host, port, req, timeout);
            }
            match outcome {
                Ok(resp) => return Ok(resp),
                Err(Failure::Connect(reason)) => {
                    self.conn = None;
                    last = reason;
                }
                Err(Failure::Stale) => {
                    self.conn = None;
                    last = "connection closed".into();
                }
                Err(Failure::Fatal(e)) => {
                    self.conn = None;
                    return Err(e);
                }
            }
        }
        Err(RequestError::ConnectError {
            attempts,
            reason: last,
        })
    }

    fn connect(&mut self, host: &str, port: u16, timeout: Duration) -> Result<(), Failure> {
        if let Some(c) = &self.conn {
            if c.host == host && c.port == port {
                return Ok(());
            }
        }
        self.conn = None;
        let addrs = (host, port)
            .to_socket_addrs()
            .map_err(|e| Failure::Connect(e.to_string()))?;
        let mut last = String::from("no address");
        for addr in addrs {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(stream) => {
                    let _ = stream.set_nodelay(true);
                    self.conn = Some(Connection {
                        host: host.to_string(),
                        port,
                        reader: BufReader::new(stream),
                    });
                    return Ok(());
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(Failure::Connect(last))
    }

    fn try_once(
        &mut self,
        url: &Url,
        host: &str,
        port: u16,
        req: &PreparedRequest,
        timeout: Duration,
    ) -> Result<ResponseSummary, Failure> {
        let deadline = Instant::now() + timeout;
        let reused = self
            .conn
            .as_ref()
            .is_some_and(|c| c.host == host && c.port == port);
        self.connect(host, port, timeout)?;
        let conn = self.conn.as_mut().expect("connected");

        let head = encode_head(url, host, port, req);
        let stream = conn.reader.get_mut();
        let _ = stream.set_write_timeout(Some(timeout));
        let write = stream
            .write_all(head.as_bytes())
            .and_then(|_| match &req.body {
                Some(b) => stream.write_all(b),
                None => Ok(()),
            })
            .and_then(|_| stream.flush());
        if let Err(e) = write {
            return Err(if reused {
                Failure::Stale
            } else {
                Failure::Fatal(io_error(e))
            });
        }

        match read_response(&mut conn.reader, req.method, deadline) {
            Ok((resp, keep_alive)) => {
                if !keep_alive {
                    self.conn = None;
                }
                Ok(resp)
            }
            Err(ReadError::Eof) if reused => Err(Failure::Stale),
            Err(ReadError::Eof) => Err(Failure::Fatal(RequestError::Protocol(
                "connection closed before response".into(),
            ))),
            Err(ReadError::Failed(e)) => Err(Failure::Fatal(e)),
        }
    }

    fn execute_tls(
        &mut self,
        req: &PreparedRequest,
        timeout: Duration,
    ) -> Result<ResponseSummary, RequestError> {
        let agent = self.tls.get_or_insert_with(|| {
            ureq::Agent::config_builder()
                .max_redirects(0)
                .http_status_as_error(false)
                .build()
                .into()
        });
        let mut builder = ureq::http::Request::builder()
            .method(req.method.as_str())
            .uri(&req.url);
        for (name, value) in &req.headers {
            builder = builder.header(name.as_str(), value.as_str());
        }
        let request = builder
            .body(req.body.clone().unwrap_or_default())
            .map_err(|e| RequestError::InvalidUrl(e.to_string()))?;
        let request = agent
            .configure_request(request)
            .timeout_global(Some(timeout))
            .build();

        let attempts = self.retry.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.retry.backoff * 2u32.pow(attempt - 1));
            }
            match agent.run(request.clone()) {
                Ok(resp) => return tls_summary(resp),
                Err(ureq::Error::Timeout(_)) => return Err(RequestError::Timeout),
                Err(e @ (ureq::Error::ConnectionFailed | ureq::Error::HostNotFound)) => {
                    last = e.to_string()
                }
                Err(ureq::Error::Io(e)) if e.kind() == io::ErrorKind::ConnectionRefused => {
                    last = e.to_string()
                }
                Err(e) => return Err(RequestError::Io(e.to_string())),
            }
        }
        Err(RequestError::ConnectError {
            attempts,
            reason: last,
        })
    }
}

impl Transport for HttpClient {
    fn send(
        &mut self,
        req: &PreparedRequest,
        timeout: Duration,
    ) -> Result<ResponseSummary, RequestError> {
        self.execute(req, timeout)
    }
}

fn tls_summary(resp: ureq::http::Response<ureq::Body>) -> Result<ResponseSummary, RequestError> {
    let status = resp.status().as_u16();
    let mut headers = std::collections::BTreeMap::new();
    for (name, value) in resp.headers() {
        let value = String::from_utf8_lossy(value.as_bytes()).into_owned();
        insert_header(&mut headers, name.as_str(), value);
    }
    let mut body = Vec::new();
    resp.into_body()
        .into_reader()
        .take(MAX_BODY_BYTES as u64 + 1)
        .read_to_end(&mut body)
        .map_err(io_error)?;
    let truncated = body.len() > MAX_BODY_BYTES;
    body.truncate(MAX_BODY_BYTES);
    Ok(ResponseSummary {
        status,
        headers,
        body,
        truncated,
    })
}

fn io_error(e: io::Error) -> RequestError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => RequestError::Timeout,
        _ => RequestError::Io(e.to_string()),
    }
}

fn encode_head(url: &Url, host: &str, port: u16, req: &PreparedRequest) -> String {
    let mut target = url.path().to_string();
    if let Some(q) = url.query() {
        target.push('?');
        target.push_str(q);
    }
    let mut head = format!("{} {} HTTP/1.1\r\n", req.method, target);
    let host_header = if url.port().is_some() {
        format!("{host}:{port}")
    } else {
        host.to_string()
    };
    if req.header("host").is_none() {
        head.push_str(&format!("Host: {host_header}\r\n"));
    }
    for (name, value) in &req.headers {
        if name.eq_ignore_ascii_case("content-length")
            || name.eq_ignore_ascii_case("transfer-encoding")
        {
            continue;
        }
        head.push_str(name);
        head.push_str(": ");
        head.push_str(value);
        head.push_str("\r\n");
    }
    match &req.body {
        Some(b) => head.push_str(&format!("Content-Length: {}\r\n", b.len())),
        None if matches!(req.method, HttpMethod::Post | HttpMethod::Put | HttpMethod::Patch) => {
            head.push_str("Content-Length: 0\r\n")
        }
        None => {}
    }
    head.push_str("\r\n");
    head
}

fn insert_header(
    headers: &mut std::collections::BTreeMap<String, String>,
    name: &str,
    value: String,
) {
    headers
        .entry(name.to_ascii_lowercase())
        .and_modify(|v| {
            v.push_str(", ");
            v.push_str(&value);
        })
        .or_insert(value);
}

enum ReadError {
    Eof,
    Failed(RequestError),
}

impl From<io::Error> for ReadError {
    fn from(e: io::Error) -> Self {
        ReadError::Failed(io_error(e))
    }
}

fn protocol(msg: impl Into<String>) -> ReadError {
    ReadError::Failed(RequestError::Protocol(msg.into()))
}

fn set_deadline(reader: &mut BufReader<TcpStream>, deadline: Instant) -> Result<(), ReadError> {
    let left = deadline.saturating_duration_since(Instant::now());
    if left.is_zero() {
        return Err(ReadError::Failed(RequestError::Timeout));
    }
    reader.get_ref().set_read_timeout(Some(left))?;
    Ok(())
}

fn read_line(
    reader: &mut BufReader<TcpStream>,
    deadline: Instant,
    buf: &mut Vec<u8>,
) -> Result<usize, ReadError> {
    set_deadline(reader, deadline)?;
    let n = reader.read_until(b'\n', buf)?;
    if buf.len() > MAX_HEAD_BYTES {
        return Err(protocol("header section too large"));
    }
    Ok(n)
}

/// Reads one response; the flag says whether the connection is reusable.
fn read_response(
    reader: &mut BufReader<TcpStream>,
    method: HttpMethod,
    deadline: Instant,
) -> Result<(ResponseSummary, bool), ReadError> {
    let mut head = Vec::new();
    loop {
        let n = read_line(reader, deadline, &mut head)?;
        if n == 0 {
            if head.is_empty() {
                return Err(ReadError::Eof);
            }
            return Err(protocol("truncated header section"));
        }
        if head.ends_with(b"\r\n\r\n") || head.ends_with(b"\n\n") {
            break;
        }
    }

    let mut parsed = [httparse::EMPTY_HEADER; 128];
    let mut response = httparse::Response::new(&mut parsed);
    match response.parse(&head) {
        Ok(httparse::Status::Complete(_)) => {}
        Ok(httparse::Status::Partial) => return Err(protocol("incomplete header section")),
        Err(e) => return Err(protocol(e.to_string())),
    }
    let status = response.code.unwrap_or(0);
    let http10 = response.version == Some(0);
    let mut headers = std::collections::BTreeMap::new();
    for h in response.headers.iter() {
        insert_header(
            &mut headers,
            h.name,
            String::from_utf8_lossy(h.value).into_owned(),
        );
    }

    let mut keep_alive = match headers.get("connection") {
        Some(v) if v.eq_ignore_ascii_case("close") => false,
        Some(v) if v.eq_ignore_ascii_case("keep-alive") => true,
        _ => !http10,
    };

    let no_body = method == HttpMethod::Head
        || (100..200).contains(&status)
        || status == 204
        || status == 304;
    let mut body = Vec::new();
    let mut truncated = false;
    if !no_body {
        let chunked = headers
            .get("transfer-encoding")
            .is_some_and(|v| v.to_ascii_lowercase().contains("chunked"));
        if chunked {
            truncated = read_chunked(reader, deadline, &mut body)?;
        } else if let Some(len) = headers.get("content-length") {
            let len: u64 = len
                .trim()
                .parse()
                .map_err(|_| protocol("bad content-length"))?;
            truncated = read_exact_capped(reader, deadline, len, &mut body)?;
        } else {
            truncated = read_to_eof_capped(reader, deadline, &mut body)?;
            keep_alive = false;
        }
    }
    if truncated {
        keep_alive = false;
    }
    Ok((
        ResponseSummary {
            status,
            headers,
            body,
            truncated,
        },
        keep_alive,
    ))
}

/// Appends up to `len` bytes, keeping at most the body cap. Returns true if
/// the body was cut.
fn read_exact_capped(
    reader: &mut BufReader<TcpStream>,
    deadline: Instant,
    len: u64,
    body: &mut Vec<u8>,
) -> Result<bool, ReadError> {
    let room = MAX_BODY_BYTES.saturating_sub(body.len()) as u64;
    let want = len.min(room);
    let mut remaining = want;
    let mut buf = [0u8; 16 * 1024];
    while remaining > 0 {
        set_deadline(reader, deadline)?;
        let take = remaining.min(buf.len() as u64) as usize;
        let n = reader.read(&mut buf[..take])?;
        if n == 0 {
            return Err(protocol("body shorter than content-length"));
        }
        body.extend_from_slice(&buf[..n]);
        remaining -= n as u64;
    }
    Ok(len > want)
}

fn read_to_eof_capped(
    reader: &mut BufReader<TcpStream>,
    deadline: Instant,
    body: &mut Vec<u8>,
) -> Result<bool, ReadError> {
    let mut buf = [0u8; 16 * 1024];
    loop {
        set_deadline(reader, deadline)?;
        let n = reader.read(&mut buf)?;
        if n == 0 {
            return Ok(false);
        }
        let room = MAX_BODY_BYTES - body.len();
        if n > room {
            body.extend_from_slice(&buf[..room]);
            return Ok(true);
        }
        body.extend_from_slice(&buf[..n]);
    }
}

fn read_chunked(
    reader: &mut BufReader<TcpStream>,
    deadline: Instant,
    body: &mut Vec<u8>,
) -> Result<bool, ReadError> {
    loop {
        let mut line = Vec::new();
        if read_line(reader, deadline, &mut line)? == 0 {
            return Err(protocol("truncated chunked body"));
        }
        let text = String::from_utf8_lossy(&line);
        let size_str = text.trim().split(';').next().unwrap_or("");
        let size =
            u64::from_str_radix(size_str, 16).map_err(|_| protocol("bad chunk size"))?;
        if size == 0 {
            // Trailer section.
            loop {
                let mut t = Vec::new();
                let n = read_line(reader, deadline, &mut t)?;
                if n == 0 || t == b"\r\n" || t == b"\n" {
                    return Ok(false);
                }
            }
        }
        if read_exact_capped(reader, deadline, size, body)? {
            return Ok(true);
        }
        let mut crlf = Vec::new();
        read_line(reader, deadline, &mut crlf)?;
    }
}
