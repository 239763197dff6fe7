//! Reading and writing fuzzer config files.
//!
//! A config names the target, its methods and up to four parameter groups
//! (`query_params`, `body_params`, `cookies`, `headers`). Each group lists
//! observed parameters under `data` and decides their mode with two regex
//! lists over names: a name fully matching a `fixed` pattern is fixed,
//! otherwise one matching a `fuzz` pattern is fuzzed, otherwise it is
//! fixed. Names under `login` are filled in by the login profile.

use std::fs;
use std::io;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    EndpointConfig, HttpMethod, Location, ModelError, ParamGroup, ParamMode, ParamSpec,
    DEFAULT_TIMEOUT_S,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid name pattern {pattern:?}: {source}")]
    Regex {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("parameter {0:?} has neither a value nor seeds")]
    NoSeed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DataEntry {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seeds: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GroupFile {
    #[serde(default)]
    data: Vec<DataEntry>,
    #[serde(default)]
    fixed: Vec<String>,
    #[serde(default)]
    fuzz: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    login: Vec<String>,
    #[serde(default)]
    weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConfigFile {
    target: String,
    #[serde(default)]
    login: Option<String>,
    methods: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timeout_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coverage_path_constraint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    query_params: Option<GroupFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    body_params: Option<GroupFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cookies: Option<GroupFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    headers: Option<GroupFile>,
}

fn full_match(patterns: &[String]) -> Result<Vec<Regex>, ConfigError> {
    patterns
        .iter()
        .map(|p| {
            Regex::new(&format!("^(?:{p})$")).map_err(|source| ConfigError::Regex {
                pattern: p.clone(),
                source,
            })
        })
        .collect()
}

/// Mode a name gets from a group's `fixed` and `fuzz` patterns.
pub fn resolve_mode(name: &str, fixed: &[Regex], fuzz: &[Regex]) -> ParamMode {
    if fixed.iter().any(|r| r.is_match(name)) {
        ParamMode::Fixed
    } else if fuzz.iter().any(|r| r.is_match(name)) {
        ParamMode::Fuzz
    } else {
        ParamMode::Fixed
    }
}

fn group_from_file(location: Location, g: &GroupFile) -> Result<ParamGroup, ConfigError> {
    let fixed = full_match(&g.fixed)?;
    let fuzz = full_match(&g.fuzz)?;
    let mut params = Vec::new();
    for entry in &g.data {
        let mut seeds: Vec<String> = match (&entry.value, &entry.seeds) {
            (_, Some(s)) if !s.is_empty() => s.clone(),
            (Some(v), _) => vec![v.clone()],
            _ => return Err(ConfigError::NoSeed(entry.name.clone())),
        };
        let mode = resolve_mode(&entry.name, &fixed, &fuzz);
        if mode == ParamMode::Fixed {
            seeds.truncate(1);
        }
        params.push(ParamSpec::new(&entry.name, seeds, mode, location)?);
    }
    for name in &g.login {
        if location != Location::Cookie {
            return Err(ModelError::LoginOutsideCookies(name.clone()).into());
        }
        params.push(ParamSpec::login(name)?);
    }
    Ok(ParamGroup {
        params,
        weight: g.weight,
    })
}

/// Group key used in config files for a location.
pub fn location_key(location: Location) -> &'static str {
    match location {
        Location::Query => "query_params",
        Location::Body => "body_params",
        Location::Cookie => "cookies",
        Location::Header => "headers",
    }
}

fn file_groups(file: &ConfigFile) -> [(Location, &Option<GroupFile>); 4] {
    [
        (Location::Query, &file.query_params),
        (Location::Body, &file.body_params),
        (Location::Cookie, &file.cookies),
        (Location::Header, &file.headers),
    ]
}

/// Parses and validates a config file.
pub fn parse_config(bytes: &[u8]) -> Result<EndpointConfig, ConfigError> {
    let file: ConfigFile = serde_json::from_slice(bytes)?;
    let methods = file
        .methods
        .iter()
        .map(|m| m.parse::<HttpMethod>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut cfg = EndpointConfig::new(file.target.clone(), methods);
    cfg.login_profile = file.login.clone().filter(|l| !l.is_empty());
    cfg.timeout_s = file.timeout_s.unwrap_or(DEFAULT_TIMEOUT_S);
    cfg.coverage_path_constraint = file.coverage_path_constraint.clone();
    for (location, group) in file_groups(&file) {
        if let Some(g) = group {
            cfg.param_groups
                .insert(location, group_from_file(location, g)?);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn group_to_file(group: &ParamGroup) -> GroupFile {
    let mut data = Vec::new();
    let mut fixed_names = Vec::new();
    let mut fuzz_count = 0;
    let mut login = Vec::new();
    for p in &group.params {
        match p.mode {
            ParamMode::Fixed => {
                fixed_names.push(regex::escape(&p.name));
                data.push(DataEntry {
                    name: p.name.clone(),
                    value: p.seeds.first().cloned(),
                    seeds: None,
                });
            }
            ParamMode::Fuzz => {
                fuzz_count += 1;
                data.push(DataEntry {
                    name: p.name.clone(),
                    value: None,
                    seeds: Some(p.seeds.clone()),
                });
            }
            ParamMode::Login => login.push(p.name.clone()),
        }
    }
    let (fixed, fuzz) = if fuzz_count == 0 {
        (vec![".*".to_string()], Vec::new())
    } else {
        (fixed_names, vec![".*".to_string()])
    };
    GroupFile {
        data,
        fixed,
        fuzz,
        login,
        weight: group.weight,
    }
}

/// Renders a config in the file format read by [`parse_config`].
pub fn config_to_json(cfg: &EndpointConfig) -> String {
    let group = |l: Location| cfg.param_groups.get(&l).map(group_to_file);
    let file = ConfigFile {
        target: cfg.target_url.clone(),
        login: cfg.login_profile.clone(),
        methods: cfg.methods.iter().map(|m| m.as_str().to_string()).collect(),
        timeout_s: (cfg.timeout_s != DEFAULT_TIMEOUT_S).then_some(cfg.timeout_s),
        coverage_path_constraint: cfg.coverage_path_constraint.clone(),
        query_params: group(Location::Query),
        body_params: group(Location::Body),
        cookies: group(Location::Cookie),
        headers: group(Location::Header),
    };
    let mut out = serde_json::to_string_pretty(&file).expect("config serializes");
    out.push('\n');
    out
}

pub fn load_config(path: &Path) -> Result<EndpointConfig, ConfigError> {
    parse_config(&fs::read(path)?)
}

pub fn save_config(path: &Path, cfg: &EndpointConfig) -> Result<(), ConfigError> {
    fs::write(path, config_to_json(cfg))?;
    Ok(())
}
