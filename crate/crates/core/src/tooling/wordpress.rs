//! Finding `wp_ajax_` API handlers in WordPress plugin sources.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::Serialize;
use thiserror::Error;
use walkdir::WalkDir;

use crate::model::{EndpointConfig, HttpMethod, Location, ParamSpec};

pub const AJAX_PATH: &str = "/wp-admin/admin-ajax.php";
pub const DEFAULT_SEED: &str = "fuzz";

static REGISTRATION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"add_action\s*\(\s*(['"])wp_ajax_(nopriv_)?([A-Za-z0-9_\-]+)['"]\s*,\s*"#).unwrap()
});
static SUPERGLOBAL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#"\$_(REQUEST|GET|POST|COOKIE)\s*\[\s*(['"])([^'"]+)['"]\s*\]"#).unwrap()
});
static QUOTED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#"['"]([^'"]*)['"]"#).unwrap());

#[derive(Debug, Error)]
pub enum WpError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Superglobal {
    Request,
    Get,
    Post,
    Cookie,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WpEndpoint {
    pub api_name: String,
    pub privileged: bool,
    pub handler: Option<String>,
    /// Parameter names with the superglobal they are read from.
    pub params: Vec<(Superglobal, String)>,
    pub file: PathBuf,
}

impl WpEndpoint {
    pub fn param_names(&self) -> Vec<&str> {
        self.params.iter().map(|(_, n)| n.as_str()).collect()
    }
}

#[derive(Debug, Default)]
pub struct WpExtraction {
    pub endpoints: Vec<WpEndpoint>,
    pub warnings: Vec<String>,
}

/// Handler name from the callback argument of `add_action`, if it names a
/// function or method rather than a closure.
fn handler_name(rest: &str) -> Option<String> {
    let rest = rest.trim_start();
    if rest.starts_with('\'') || rest.starts_with('"') {
        let name = QUOTED.captures(rest)?.get(1)?.as_str();
        let name = name.rsplit("::").next().unwrap_or(name);
        return (!name.is_empty()).then(|| name.to_string());
    }
    let lower = rest.to_ascii_lowercase();
    if lower.starts_with("array(") || rest.starts_with('[') {
        let close = if rest.starts_with('[') { ']' } else { ')' };
        let inner = &rest[..rest.find(close)?];
        return QUOTED
            .captures_iter(inner)
            .last()
            .map(|c| c[1].to_string())
            .filter(|n| !n.is_empty());
    }
    None
}

/// Body of `function name(...) { ... }` found by brace matching.
fn function_body<'a>(source: &'a str, name: &str) -> Option<&'a str> {
    let re = Regex::new(&format!(r"(?i)function\s+&?{}\s*\(", regex::escape(name))).ok()?;
    let m = re.find(source)?;
    let open = m.end() + source[m.end()..].find('{')?;
    let bytes = source.as_bytes();
    let mut depth = 0usize;
    let mut quote: Option<u8> = None;
    let mut i = open;
    while i < bytes.len() {
        let b = bytes[i];
        match quote {
            Some(q) => {
                if b == b'\\' {
                    i += 1;
                } else if b == q {
                    quote = None;
                }
            }
            None => match b {
                b'\'' | b'"' => quote = Some(b),
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(&source[open + 1..i]);
                    }
                }
                _ => {}
            },
        }
        i += 1;
    }
    Some(&source[open + 1..])
}

fn read_params(body: &str) -> Vec<(Superglobal, String)> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for c in SUPERGLOBAL.captures_iter(body) {
        let global = match &c[1] {
            "REQUEST" => Superglobal::Request,
            "GET" => Superglobal::Get,
            "POST" => Superglobal::Post,
            _ => Superglobal::Cookie,
        };
        let name = c[3].to_string();
        if seen.insert((global.clone(), name.clone())) {
            out.push((global, name));
        }
    }
    out
}

fn php_files(dir: &Path) -> Result<Vec<(PathBuf, String)>, WpError> {
    let mut files = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| WpError::Io {
            path: e.path().map(Path::to_path_buf).unwrap_or_else(|| dir.to_path_buf()),
            source: e.into_io_error().unwrap_or_else(|| io::Error::other("walk error")),
        })?;
        let path = entry.path();
        if entry.file_type().is_file()
            && path.extension().is_some_and(|e| e.eq_ignore_ascii_case("php"))
        {
            let bytes = fs::read(path).map_err(|source| WpError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            files.push((path.to_path_buf(), String::from_utf8_lossy(&bytes).into_owned()));
        }
    }
    Ok(files)
}

/// Scans a plugin tree for AJAX API registrations and the request
/// parameters their handlers read.
pub fn extract_wp_endpoints(plugin_dir: &Path) -> Result<WpExtraction, WpError> {
    let files = php_files(plugin_dir)?;
    let mut out = WpExtraction::default();
    let mut seen = BTreeSet::new();
    for (path, source) in &files {
        for m in REGISTRATION.captures_iter(source) {
            let privileged = m.get(2).is_none();
            let api_name = m[3].to_string();
            if !seen.insert((api_name.clone(), privileged)) {
                continue;
            }
            let rest = &source[m.get(0).unwrap().end()..];
            let handler = handler_name(rest);
            let body = handler.as_deref().and_then(|h| {
                files.iter().find_map(|(_, src)| function_body(src, h))
            });
            let params = match body {
                Some(b) => read_params(b),
                None => {
                    out.warnings.push(format!(
                        "handler for {api_name} not found ({})",
                        handler.as_deref().unwrap_or("closure or dynamic callback")
                    ));
                    Vec::new()
                }
            };
            out.endpoints.push(WpEndpoint {
                api_name,
                privileged,
                handler,
                params,
                file: path.strip_prefix(plugin_dir).unwrap_or(path).to_path_buf(),
            });
        }
    }
    Ok(out)
}

/// Fuzzer config for one API: `action` fixed, every read parameter fuzzed.
pub fn endpoint_config(ep: &WpEndpoint, base_url: &str, login_profile: Option<&str>) -> EndpointConfig {
    let post = ep
        .params
        .iter()
        .any(|(g, _)| matches!(g, Superglobal::Post | Superglobal::Request));
    let method = if post { HttpMethod::Post } else { HttpMethod::Get };
    let request_location = if post { Location::Body } else { Location::Query };

    let mut groups: Vec<(Location, Vec<ParamSpec>)> = vec![
        (Location::Query, Vec::new()),
        (Location::Body, Vec::new()),
        (Location::Cookie, Vec::new()),
    ];
    let mut push = |location: Location, spec: ParamSpec| {
        let group = groups.iter_mut().find(|(l, _)| *l == location).unwrap();
        if !group.1.iter().any(|p| p.name == spec.name) {
            group.1.push(spec);
        }
    };
    push(
        request_location,
        ParamSpec::fixed("action", &ep.api_name, request_location).expect("action is a valid name"),
    );
    for (global, name) in &ep.params {
        let location = match global {
            Superglobal::Get => Location::Query,
            Superglobal::Post => Location::Body,
            Superglobal::Request => request_location,
            Superglobal::Cookie => Location::Cookie,
        };
        if let Ok(spec) = ParamSpec::fuzz(name, &[DEFAULT_SEED], location) {
            if name != "action" {
                push(location, spec);
            }
        }
    }
    let fuzz_groups = groups
        .iter()
        .filter(|(_, ps)| ps.iter().any(|p| p.mode == crate::model::ParamMode::Fuzz))
        .count();
    let mut cfg = EndpointConfig::new(
        format!("{}{AJAX_PATH}", base_url.trim_end_matches('/')),
        vec![method],
    );
    if ep.privileged {
        cfg.login_profile = login_profile.map(str::to_string);
    }
    for (location, params) in groups {
        if params.is_empty() && location != Location::Cookie {
            continue;
        }
        let weight = if params.iter().any(|p| p.mode == crate::model::ParamMode::Fuzz) {
            1.0 / fuzz_groups as f64
        } else {
            0.0
        };
        cfg = cfg.with_group(location, params, weight);
    }
    cfg
}

/// CSV summary of extracted endpoints.
pub fn endpoints_csv(endpoints: &[WpEndpoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["api_name", "privileged", "handler", "params", "file"])
        .expect("in-memory write");
    for ep in endpoints {
        w.write_record([
            ep.api_name.as_str(),
            if ep.privileged { "true" } else { "false" },
            ep.handler.as_deref().unwrap_or(""),
            &ep.param_names().join(";"),
            &ep.file.to_string_lossy(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv of utf-8 fields")
}
