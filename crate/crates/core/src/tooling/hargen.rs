//! Turning captured requests into fuzzer configs.

use std::collections::BTreeSet;

use regex::Regex;
use thiserror::Error;

use super::har::CapturedRequest;
use crate::config::resolve_mode;
use crate::model::{EndpointConfig, Location, ParamMode, ParamSpec};

pub const STATIC_EXTENSIONS: [&str; 12] = [
    ".css", ".js", ".png", ".jpg", ".jpeg", ".gif", ".svg", ".ico", ".woff", ".woff2", ".ttf",
    ".map",
];
pub const STATIC_MIME_PREFIXES: [&str; 2] = ["image/", "font/"];
pub const SESSION_COOKIE_PATTERN: &str = "(?i)PHPSESSID|.*session.*";

#[derive(Debug, Error)]
pub enum HargenError {
    #[error("invalid name pattern {pattern:?}: {source}")]
    Regex {
        pattern: String,
        #[source]
        source: regex::Error,
    },
}

fn full_match(pattern: &str) -> Result<Regex, HargenError> {
    Regex::new(&format!("^(?:{pattern})$")).map_err(|source| HargenError::Regex {
        pattern: pattern.to_string(),
        source,
    })
}

#[derive(Debug, Clone)]
pub struct FilterOptions {
    pub static_extensions: Vec<String>,
    pub static_mime_prefixes: Vec<String>,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            static_extensions: STATIC_EXTENSIONS.iter().map(|s| s.to_string()).collect(),
            static_mime_prefixes: STATIC_MIME_PREFIXES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn has_request_params(r: &CapturedRequest) -> bool {
    r.params.iter().any(|p| p.location != Location::Cookie)
}

fn is_static(r: &CapturedRequest, opts: &FilterOptions) -> bool {
    let path = r.path().to_ascii_lowercase();
    if opts.static_extensions.iter().any(|e| path.ends_with(e.as_str())) {
        return true;
    }
    // A parameterised request is kept even if it answered with an image.
    !has_request_params(r)
        && r.response_mime.as_deref().is_some_and(|m| {
            let m = m.to_ascii_lowercase();
            opts.static_mime_prefixes.iter().any(|p| m.starts_with(p.as_str()))
        })
}

type EndpointKey = (crate::model::HttpMethod, String, BTreeSet<(Location, String)>);

fn endpoint_key(r: &CapturedRequest) -> EndpointKey {
    let names = r
        .params
        .iter()
        .filter(|p| p.location != Location::Cookie)
        .map(|p| (p.location, p.name.clone()))
        .collect();
    (r.method, r.path(), names)
}

/// Drops static resources and merges requests to the same endpoint with
/// the same parameter names, pooling their observed values.
pub fn filter_endpoints(requests: Vec<CapturedRequest>, opts: &FilterOptions) -> Vec<CapturedRequest> {
    let mut kept: Vec<(EndpointKey, CapturedRequest)> = Vec::new();
    for r in requests {
        if is_static(&r, opts) {
            continue;
        }
        let key = endpoint_key(&r);
        match kept.iter_mut().find(|(k, _)| *k == key) {
            Some((_, existing)) => {
                for p in r.params {
                    match existing
                        .params
                        .iter_mut()
                        .find(|e| e.location == p.location && e.name == p.name)
                    {
                        Some(e) => {
                            for v in p.values {
                                if !e.values.contains(&v) {
                                    e.values.push(v);
                                }
                            }
                        }
                        None => existing.params.push(p),
                    }
                }
            }
            None => kept.push((key, r)),
        }
    }
    kept.into_iter().map(|(_, r)| r).collect()
}

/// How observed parameters are marked when emitting configs.
#[derive(Debug, Clone)]
pub struct Markings {
    /// Patterns over query/body names forced to fixed.
    pub fixed: Vec<String>,
    /// Patterns over query/body names to fuzz.
    pub fuzz: Vec<String>,
    /// Cookies matching this are filled in by the login profile.
    pub login_cookie: String,
    pub login_profile: Option<String>,
    /// Replaces the observed values of fuzz params.
    pub seed_override: Option<String>,
}

impl Default for Markings {
    fn default() -> Self {
        Markings {
            fixed: Vec::new(),
            fuzz: vec![".*".to_string()],
            login_cookie: SESSION_COOKIE_PATTERN.to_string(),
            login_profile: None,
            seed_override: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmittedConfig {
    pub config: EndpointConfig,
    pub warnings: Vec<String>,
}

pub fn emit_fuzzer_config(r: &CapturedRequest, markings: &Markings) -> Result<EmittedConfig, HargenError> {
    let fixed = markings
        .fixed
        .iter()
        .map(|p| full_match(p))
        .collect::<Result<Vec<_>, _>>()?;
    let fuzz = markings
        .fuzz
        .iter()
        .map(|p| full_match(p))
        .collect::<Result<Vec<_>, _>>()?;
    let login = full_match(&markings.login_cookie)?;

    let mut warnings = Vec::new();
    let mut cfg = EndpointConfig::new(r.url.clone(), vec![r.method]);
    cfg.login_profile = markings.login_profile.clone();

    let mut groups: Vec<(Location, Vec<ParamSpec>)> = Vec::new();
    for location in [Location::Query, Location::Body] {
        let mut params = Vec::new();
        for p in r.params_at(location) {
            let spec = match resolve_mode(&p.name, &fixed, &fuzz) {
                ParamMode::Fuzz => {
                    let seeds = match &markings.seed_override {
                        Some(s) => vec![s.clone()],
                        None => p.values.clone(),
                    };
                    ParamSpec::new(&p.name, seeds, ParamMode::Fuzz, location)
                }
                _ => ParamSpec::new(&p.name, vec![p.values[0].clone()], ParamMode::Fixed, location),
            };
            match spec {
                Ok(s) => params.push(s),
                Err(e) => warnings.push(format!("skipping {}: {e}", p.name)),
            }
        }
        if !params.is_empty() {
            groups.push((location, params));
        }
    }

    let mut cookies = Vec::new();
    for p in r.params_at(Location::Cookie) {
        let spec = if login.is_match(&p.name) {
            ParamSpec::login(&p.name)
        } else {
            ParamSpec::fixed(&p.name, &p.values[0], Location::Cookie)
        };
        match spec {
            Ok(s) => cookies.push(s),
            Err(e) => warnings.push(format!("skipping cookie {}: {e}", p.name)),
        }
    }
    groups.push((Location::Cookie, cookies));

    if r.json_body && r.params_at(Location::Body).next().is_some() {
        groups.push((
            Location::Header,
            vec![ParamSpec::fixed("Content-Type", "application/json", Location::Header)
                .expect("static header is valid")],
        ));
    }

    let fuzz_groups = groups
        .iter()
        .filter(|(_, ps)| ps.iter().any(|p| p.mode == ParamMode::Fuzz))
        .count();
    for (location, params) in groups {
        let has_fuzz = params.iter().any(|p| p.mode == ParamMode::Fuzz);
        let weight = if has_fuzz { 1.0 / fuzz_groups as f64 } else { 0.0 };
        cfg = cfg.with_group(location, params, weight);
    }
    if fuzz_groups == 0 {
        warnings.push(format!("{} {} has no fuzz parameters", r.method, r.url));
    }
    Ok(EmittedConfig {
        config: cfg,
        warnings,
    })
}

/// File name for an emitted config, derived from method and path.
pub fn config_file_name(cfg: &EndpointConfig, index: usize) -> String {
    let slug: String = cfg
        .path()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect::<String>()
        .trim_matches('_')
        .to_string();
    let method = cfg.methods.first().map(|m| m.as_str()).unwrap_or("ANY");
    let slug = if slug.is_empty() { "root".to_string() } else { slug };
    format!("{index:03}_{}_{slug}.json", method.to_ascii_lowercase())
}
