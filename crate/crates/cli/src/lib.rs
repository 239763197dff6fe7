//! Command implementations behind the `webphuzz` binary.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use webphuzz_core::campaign::{run_campaign, CampaignConfig, ReportLine, Selection};
use webphuzz_core::config::{load_config, save_config};
use webphuzz_core::detect::{PolicyMode, VulnCheckPolicy};
use webphuzz_core::mock;
use webphuzz_core::model::EndpointConfig;
use webphuzz_core::request::{HttpClient, Transport};
use webphuzz_core::tooling::compose::{emit_compose, ComposeOptions};
use webphuzz_core::tooling::har::parse_har;
use webphuzz_core::tooling::hargen::{
    config_file_name, emit_fuzzer_config, filter_endpoints, FilterOptions, Markings,
};
use webphuzz_core::tooling::login::run_login;
use webphuzz_core::tooling::wordpress::{endpoint_config, endpoints_csv, extract_wp_endpoints};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FATAL: i32 = 1;
pub const EXIT_ALERTS: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "webphuzz", version, about = "Coverage-guided fuzzer for PHP web applications")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a HAR capture into fuzzer configs.
    Hargen(HargenArgs),
    /// Write a docker-compose file for a set of configs.
    Compose(ComposeArgs),
    /// Run a fuzzing campaign.
    Fuzz(FuzzArgs),
    /// Extract AJAX endpoints from a WordPress plugin.
    Wpext(WpextArgs),
    /// Serve the built-in vulnerable mock target.
    Mock(MockArgs),
}

#[derive(Debug, Args)]
pub struct HargenArgs {
    pub har: PathBuf,
    pub out_dir: PathBuf,
    /// Query/body parameter names (regex) to keep fixed.
    #[arg(long = "fixed-regex")]
    pub fixed_regex: Vec<String>,
    /// Query/body parameter names (regex) to fuzz.
    #[arg(long = "fuzz-regex")]
    pub fuzz_regex: Vec<String>,
    /// Cookie names (regex) supplied by the login profile.
    #[arg(long)]
    pub login_cookie_regex: Option<String>,
    #[arg(long)]
    pub login_profile: Option<String>,
    /// Seed value used for every fuzz parameter instead of the observed ones.
    #[arg(long)]
    pub seed_value: Option<String>,
    /// File extensions treated as static resources.
    #[arg(long = "static-ext")]
    pub static_ext: Vec<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    #[arg(required = true)]
    pub configs: Vec<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub instances: u32,
    #[arg(long)]
    pub duration_s: Option<u64>,
    #[arg(long, default_value = "param_based")]
    pub policy: PolicyMode,
    #[arg(long)]
    pub web_image: Option<String>,
    #[arg(long)]
    pub db_image: Option<String>,
    #[arg(long)]
    pub fuzzer_image: Option<String>,
    /// Host directory with the application source.
    #[arg(long)]
    pub target_source: Option<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectionArg {
    Guided,
    Random,
}

#[derive(Debug, Args)]
pub struct FuzzArgs {
    /// Config file or directory of config files; repeatable.
    #[arg(long, required = true)]
    pub config: Vec<PathBuf>,
    #[arg(long, env = "WEBPHUZZ_SHARED_DIR")]
    pub shared_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub instances: usize,
    /// Per-request timeout; overrides the configs.
    #[arg(long)]
    pub timeout_s: Option<f64>,
    #[arg(long)]
    pub duration_s: Option<f64>,
    #[arg(long, default_value = "param_based")]
    pub policy: PolicyMode,
    /// JSONL file receiving the alerts and a final stats line.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many candidates across all instances.
    #[arg(long)]
    pub max_candidates: Option<u64>,
    /// Stop once every vulnerability class has been reported.
    #[arg(long)]
    pub until_all_classes: bool,
    /// Write every evaluated candidate as a JSON line.
    #[arg(long)]
    pub candidate_log: Option<PathBuf>,
    #[arg(long, default_value = "fuzzer")]
    pub instance_id: String,
    #[arg(long, default_value = "login")]
    pub login_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub feedback_wait_ms: u64,
    #[arg(long, value_enum, default_value = "guided")]
    pub selection: SelectionArg,
}

#[derive(Debug, Args)]
pub struct WpextArgs {
    pub plugin_dir: PathBuf,
    pub out_dir: PathBuf,
    #[arg(long, default_value = "http://localhost")]
    pub base_url: String,
    /// Login profile for endpoints that need an authenticated user.
    #[arg(long)]
    pub login_profile: Option<String>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct MockArgs {
    #[arg(long, env = "WEBPHUZZ_SHARED_DIR")]
    pub shared_dir: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Hargen(a) => cmd_hargen(&a),
        Command::Compose(a) => cmd_compose(&a),
        Command::Fuzz(a) => cmd_fuzz(&a),
        Command::Wpext(a) => cmd_wpext(&a),
        Command::Mock(a) => cmd_mock(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_FATAL
        }
    }
}

/// Creates `dir`, refusing to touch a non-empty one unless `force` is set.
fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
        if occupied && !force {
            bail!("{} is not empty; use --force to overwrite", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!("{} exists; use --force to overwrite", path.display());
    }
    Ok(())
}

pub fn cmd_hargen(a: &HargenArgs) -> Result<i32> {
    let bytes = fs::read(&a.har).with_context(|| format!("reading {}", a.har.display()))?;
    let parsed = parse_har(&bytes).context("parsing HAR")?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    let total = parsed.requests.len();
    let mut filter = FilterOptions::default();
    if !a.static_ext.is_empty() {
        filter.static_extensions = a.static_ext.clone();
    }
    let kept = filter_endpoints(parsed.requests, &filter);

    let mut markings = Markings {
        fixed: a.fixed_regex.clone(),
        login_profile: a.login_profile.clone(),
        seed_override: a.seed_value.clone(),
        ..Markings::default()
    };
    if !a.fuzz_regex.is_empty() {
        markings.fuzz = a.fuzz_regex.clone();
    }
    if let Some(r) = &a.login_cookie_regex {
        markings.login_cookie = r.clone();
    }

    prepare_out_dir(&a.out_dir, a.force)?;
    println!("{:<8} {:<40} {:>6}", "METHOD", "PATH", "PARAMS");
    for (i, req) in kept.iter().enumerate() {
        let emitted = emit_fuzzer_config(req, &markings)?;
        for w in &emitted.warnings {
            eprintln!("warning: {w}");
        }
        let path = a.out_dir.join(config_file_name(&emitted.config, i));
        save_config(&path, &emitted.config)?;
        println!(
            "{:<8} {:<40} {:>6}",
            req.method.as_str(),
            req.path(),
            emitted.config.params().count()
        );
    }
    println!("kept {} of {} requests, dropped {}", kept.len(), total, total - kept.len());
    if kept.is_empty() {
        eprintln!("warning: no endpoints survived filtering");
    }
    Ok(EXIT_OK)
}

pub fn cmd_compose(a: &ComposeArgs) -> Result<i32> {
    let mut configs = Vec::new();
    for path in &a.configs {
        let cfg = load_config(path).with_context(|| format!("loading {}", path.display()))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        configs.push((name, cfg));
    }
    let mut opts = ComposeOptions {
        instances: a.instances,
        duration_s: a.duration_s,
        policy: policy_name(a.policy).to_string(),
        ..ComposeOptions::default()
    };
    if let Some(v) = &a.web_image {
        opts.web_image = v.clone();
    }
    if let Some(v) = &a.db_image {
        opts.db_image = v.clone();
    }
    if let Some(v) = &a.fuzzer_image {
        opts.fuzzer_image = v.clone();
    }
    if let Some(v) = &a.target_source {
        opts.target_source = v.clone();
    }
    let yaml = emit_compose(&configs, &opts)?;
    refuse_existing(&a.out, a.force)?;
    fs::write(&a.out, yaml).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {} with {} fuzzer services", a.out.display(), configs.len());
    Ok(EXIT_OK)
}

fn policy_name(mode: PolicyMode) -> &'static str {
    match mode {
        PolicyMode::ParamBased => "param_based",
        PolicyMode::Default => "default",
    }
}

/// Loads config files, expanding directories to their sorted `*.json` files.
pub fn load_configs(paths: &[PathBuf]) -> Result<Vec<EndpointConfig>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "json"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    files
        .iter()
        .map(|f| load_config(f).with_context(|| format!("loading {}", f.display())))
        .collect()
}

pub fn cmd_fuzz(a: &FuzzArgs) -> Result<i32> {
    let mut endpoints = load_configs(&a.config)?;
    if let Some(t) = a.timeout_s {
        if !(t.is_finite() && t > 0.0) {
            bail!("--timeout-s must be positive");
        }
        for e in &mut endpoints {
            e.timeout_s = t;
        }
    }
    let mut login_cookies = BTreeMap::new();
    for e in &endpoints {
        if let Some(profile) = &e.login_profile {
            if login_cookies.contains_key(profile) {
                continue;
            }
            let env = vec![("WEBPHUZZ_TARGET".to_string(), e.target_url.clone())];
            let cookies = run_login(profile, &a.login_dir, &env)?;
            login_cookies.insert(profile.clone(), cookies);
        }
    }

    let seed = a.seed.unwrap_or_else(|| {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos() as u64)
            .unwrap_or(0)
    });
    tracing::info!(seed, "starting campaign");

    let transport = Arc::new(|_| Box::new(HttpClient::default()) as Box<dyn Transport>);
    let mut cfg = CampaignConfig::new(
        endpoints.into_iter().map(Arc::new).collect(),
        &a.shared_dir,
        transport,
    );
    cfg.instances = a.instances;
    cfg.instance_prefix = a.instance_id.clone();
    cfg.duration = a.duration_s.map(Duration::from_secs_f64);
    cfg.max_candidates = a.max_candidates;
    cfg.until_all_classes = a.until_all_classes;
    cfg.policy = VulnCheckPolicy::with_mode(a.policy);
    cfg.seed = seed;
    cfg.selection = match a.selection {
        SelectionArg::Guided => Selection::CoverageGuided,
        SelectionArg::Random => Selection::Random,
    };
    cfg.feedback_wait = Duration::from_millis(a.feedback_wait_ms);
    cfg.login_cookies = login_cookies;
    cfg.candidate_log = a.candidate_log.clone();

    let report = run_campaign(cfg)?;

    if let Some(path) = &a.report {
        let mut out = std::io::BufWriter::new(
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        );
        for alert in &report.alerts {
            serde_json::to_writer(&mut out, &ReportLine::Alert(alert.clone()))?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut out, &ReportLine::Stats(report.stats.clone()))?;
        out.write_all(b"\n")?;
        out.flush()?;
    }

    let s = &report.stats;
    eprintln!(
        "seed {seed}: {} candidates, {} requests, {:.1} exec/s, {} alerts ({})",
        s.candidates_evaluated,
        s.requests_sent,
        s.exec_per_sec,
        s.alerts,
        s.classes_found
            .iter()
            .map(|c| c.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(if report.alerts.is_empty() { EXIT_OK } else { EXIT_ALERTS })
}

pub fn cmd_wpext(a: &WpextArgs) -> Result<i32> {
    let extraction = extract_wp_endpoints(&a.plugin_dir)
        .with_context(|| format!("scanning {}", a.plugin_dir.display()))?;
    for w in &extraction.warnings {
        eprintln!("warning: {w}");
    }
    prepare_out_dir(&a.out_dir, a.force)?;
    for (i, ep) in extraction.endpoints.iter().enumerate() {
        let cfg = endpoint_config(ep, &a.base_url, a.login_profile.as_deref());
        let name = format!("{i:03}_{}.json", ep.api_name);
        save_config(&a.out_dir.join(name), &cfg)?;
    }
    fs::write(a.out_dir.join("endpoints.csv"), endpoints_csv(&extraction.endpoints))?;
    println!("extracted {} endpoints", extraction.endpoints.len());
    Ok(EXIT_OK)
}

pub fn cmd_mock(a: &MockArgs) -> Result<i32> {
    fs::create_dir_all(&a.shared_dir)?;
    let server = mock::serve(&a.shared_dir, a.port)?;
    println!("mock target listening on {}", server.url());
    server.wait();
    Ok(EXIT_OK)
}
