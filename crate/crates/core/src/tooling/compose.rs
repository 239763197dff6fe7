//! Generating a docker-compose file for a fuzzing campaign.

use serde_yaml::{Mapping, Value};
use thiserror::Error;

use crate::model::EndpointConfig;

pub const SHARED_MOUNT: &str = "/shared";
pub const CONFIG_MOUNT: &str = "/configs";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ComposeError {
    #[error("no fuzzer configs given")]
    EmptyCampaign,
    #[error("instances must be at least 1")]
    NoInstances,
}

#[derive(Debug, Clone)]
pub struct ComposeOptions {
    /// Fuzzer instances per config.
    pub instances: u32,
    pub web_image: String,
    pub db_image: String,
    pub fuzzer_image: String,
    /// Host directory with the application source.
    pub target_source: String,
    /// Host directory holding the config files.
    pub config_dir: String,
    pub duration_s: Option<u64>,
    pub policy: String,
}

impl Default for ComposeOptions {
    fn default() -> Self {
        ComposeOptions {
            instances: 1,
            web_image: "webphuzz/web:latest".into(),
            db_image: "mysql:8".into(),
            fuzzer_image: "webphuzz/fuzzer:latest".into(),
            target_source: "./src".into(),
            config_dir: "./configs".into(),
            duration_s: None,
            policy: "param_based".into(),
        }
    }
}

fn s(v: impl Into<String>) -> Value {
    Value::String(v.into())
}

fn map<const N: usize>(entries: [(&str, Value); N]) -> Value {
    let mut m = Mapping::new();
    for (k, v) in entries {
        m.insert(s(k), v);
    }
    Value::Mapping(m)
}

fn seq<I: IntoIterator<Item = Value>>(items: I) -> Value {
    Value::Sequence(items.into_iter().collect())
}

fn service_slug(file_name: &str) -> String {
    let stem = file_name.strip_suffix(".json").unwrap_or(file_name);
    let slug: String = stem
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    slug.trim_matches('-').to_string()
}

/// Renders the compose file. `configs` pairs each config with the file
/// name it is stored under inside the config directory.
pub fn emit_compose(
    configs: &[(String, EndpointConfig)],
    opts: &ComposeOptions,
) -> Result<String, ComposeError> {
    if configs.is_empty() {
        return Err(ComposeError::EmptyCampaign);
    }
    if opts.instances == 0 {
        return Err(ComposeError::NoInstances);
    }
    let constraint = configs
        .iter()
        .filter_map(|(_, c)| c.coverage_path_constraint.clone())
        .collect::<Vec<_>>()
        .join(":");

    let mut services = Mapping::new();
    services.insert(
        s("web"),
        map([
            ("image", s(&opts.web_image)),
            (
                "volumes",
                seq([
                    s(format!("{}:/var/www/html", opts.target_source)),
                    s(format!("shared:{SHARED_MOUNT}")),
                ]),
            ),
            (
                "environment",
                map([
                    ("FUZZ_SHARED_DIR", s(SHARED_MOUNT)),
                    ("FUZZ_COVERAGE_DRIVER", s("pcov")),
                    ("FUZZ_COVERAGE_PATHS", s(constraint)),
                ]),
            ),
            ("depends_on", seq([s("db")])),
        ]),
    );
    services.insert(
        s("db"),
        map([
            ("image", s(&opts.db_image)),
            (
                "environment",
                map([
                    ("MYSQL_ROOT_PASSWORD", s("root")),
                    ("MYSQL_DATABASE", s("app")),
                ]),
            ),
            ("tmpfs", seq([s("/var/lib/mysql")])),
        ]),
    );

    for (file_name, cfg) in configs {
        let mut command = vec![
            s("fuzz"),
            s("--config"),
            s(format!("{CONFIG_MOUNT}/{file_name}")),
            s("--shared-dir"),
            s(SHARED_MOUNT),
            s("--instances"),
            s(opts.instances.to_string()),
            s("--timeout-s"),
            s(cfg.timeout_s.to_string()),
            s("--policy"),
            s(&opts.policy),
            s("--instance-id"),
            s(service_slug(file_name)),
        ];
        if let Some(d) = opts.duration_s {
            command.push(s("--duration-s"));
            command.push(s(d.to_string()));
        }
        services.insert(
            s(format!("fuzzer-{}", service_slug(file_name))),
            map([
                ("image", s(&opts.fuzzer_image)),
                ("command", seq(command)),
                (
                    "volumes",
                    seq([
                        s(format!("{}:{CONFIG_MOUNT}:ro", opts.config_dir)),
                        s(format!("shared:{SHARED_MOUNT}")),
                    ]),
                ),
                (
                    "environment",
                    map([
                        ("WEBPHUZZ_SHARED_DIR", s(SHARED_MOUNT)),
                        ("FUZZ_INSTANCES", s(opts.instances.to_string())),
                        ("FUZZ_TIMEOUT", s(cfg.timeout_s.to_string())),
                        (
                            "FUZZ_COVERAGE_PATHS",
                            s(cfg.coverage_path_constraint.clone().unwrap_or_default()),
                        ),
                    ]),
                ),
                ("depends_on", seq([s("web")])),
            ]),
        );
    }

    let doc = map([
        ("version", s("3")),
        ("services", Value::Mapping(services)),
        (
            "volumes",
            map([(
                "shared",
                map([(
                    "driver_opts",
                    map([("type", s("tmpfs")), ("device", s("tmpfs"))]),
                )]),
            )]),
        ),
    ]);
    Ok(serde_yaml::to_string(&doc).expect("yaml value serializes"))
}
