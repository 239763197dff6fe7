//! The fuzzing loop: seed evaluation, selection, mutation, feedback
//! collection, scoring and vulnerability checks, run by one or more
//! worker instances that share a coverage directory.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::detect::{informational, VulnCheckPolicy, VulnChecker};
use crate::feedback::{collect, FeedbackError, DEFAULT_WAIT};
use crate::model::{
    Candidate, CandidateHash, EndpointConfig, Evidence, FeedbackRecord, HttpMethod, ParamMode,
    VulnAlert, VulnClass,
};
use crate::mutation::{expand_seeds, mutate_candidate, MutationBudget, MutatorKind};
use crate::request::{prepare_request, PreparedRequest, RequestError, Transport};
use crate::scheduler::{
    energy_for, score_candidate, CandidatePool, GlobalCoverageStore, ScoreReport, MIN_ENERGY,
};

const SYNC_DIR: &str = "sync";
const REPORT_DIR: &str = "reports";

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("no endpoint has a fuzzable parameter")]
    NothingToFuzz,
    #[error("instance count must be at least 1")]
    NoInstances,
    #[error("invalid coverage path constraint {pattern:?}: {source}")]
    Constraint {
        pattern: String,
        source: regex::Error,
    },
    #[error("target unreachable: {0}")]
    Unreachable(String),
    #[error("missing login cookies for profile {0}")]
    MissingLogin(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// How the next parent is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Highest score among the least exhausted, fed back by coverage.
    #[default]
    CoverageGuided,
    /// Uniform choice over every evaluated candidate; scores are ignored
    /// for selection, admission and energy.
    Random,
}

pub type TransportFactory = Arc<dyn Fn(usize) -> Box<dyn Transport> + Send + Sync>;

#[derive(Clone)]
pub struct CampaignConfig {
    pub endpoints: Vec<Arc<EndpointConfig>>,
    pub shared_dir: PathBuf,
    pub instances: usize,
    /// Prefix of instance ids; instance `i` is `<prefix>-<i>`.
    pub instance_prefix: String,
    pub duration: Option<Duration>,
    /// Total candidates evaluated across all instances.
    pub max_candidates: Option<u64>,
    pub until_all_classes: bool,
    pub policy: VulnCheckPolicy,
    /// Instance `i` draws from a generator seeded with `seed + i`.
    pub seed: u64,
    pub selection: Selection,
    pub feedback_wait: Duration,
    /// Cookies obtained by the login scripts, keyed by profile.
    pub login_cookies: BTreeMap<String, Vec<(String, String)>>,
    /// One JSON line per evaluated candidate. With several instances the
    /// instance index is appended to the file name.
    pub candidate_log: Option<PathBuf>,
    pub transport: TransportFactory,
}

impl CampaignConfig {
    pub fn new(
        endpoints: Vec<Arc<EndpointConfig>>,
        shared_dir: impl Into<PathBuf>,
        transport: TransportFactory,
    ) -> Self {
        CampaignConfig {
            endpoints,
            shared_dir: shared_dir.into(),
            instances: 1,
            instance_prefix: "fuzzer".to_string(),
            duration: None,
            max_candidates: None,
            until_all_classes: false,
            policy: VulnCheckPolicy::default(),
            seed: 0,
            selection: Selection::CoverageGuided,
            feedback_wait: DEFAULT_WAIT,
            login_cookies: BTreeMap::new(),
            candidate_log: None,
            transport,
        }
    }

    pub fn instance_id(&self, idx: usize) -> String {
        format!("{}-{idx}", self.instance_prefix)
    }

    pub fn report_path(&self, idx: usize) -> PathBuf {
        self.shared_dir
            .join(REPORT_DIR)
            .join(format!("{}.jsonl", self.instance_id(idx)))
    }

    pub fn sync_dir(&self) -> PathBuf {
        self.shared_dir.join(SYNC_DIR)
    }

    fn candidate_log_path(&self, idx: usize) -> Option<PathBuf> {
        let path = self.candidate_log.as_ref()?;
        if self.instances == 1 {
            return Some(path.clone());
        }
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(format!(".{idx}"));
        Some(path.with_file_name(name))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceStats {
    pub instance_id: String,
    pub candidates_evaluated: u64,
    pub requests_sent: u64,
    pub duplicates_skipped: u64,
    pub invalid_header_skipped: u64,
    pub hung: u64,
    pub request_errors: u64,
    pub feedback_missing: u64,
    pub feedback_malformed: u64,
    pub sync_errors: u64,
    pub alerts: u64,
    pub pool_size: u64,
    pub covered_files: u64,
    pub covered_lines: u64,
    pub seen_hashes: u64,
    /// SHA-256 over the sorted seen hashes after the final sync.
    pub seen_digest: String,
    pub elapsed_s: f64,
    pub exec_per_sec: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignStats {
    pub candidates_evaluated: u64,
    pub requests_sent: u64,
    pub alerts: u64,
    pub classes_found: Vec<VulnClass>,
    pub elapsed_s: f64,
    pub exec_per_sec: f64,
    pub instances: Vec<InstanceStats>,
}

/// One line of a report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReportLine {
    Alert(VulnAlert),
    Informational {
        candidate_hash: CandidateHash,
        evidence: Evidence,
    },
    Stats(CampaignStats),
}

/// One line of the candidate log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateLogEntry {
    pub seq: u64,
    pub hash: CandidateHash,
    pub parent: Option<CandidateHash>,
    pub method: HttpMethod,
    pub values: Vec<(String, String, String)>,
    pub mutation: Option<MutatorKind>,
    pub score: u64,
}

#[derive(Debug, Clone, Default)]
pub struct CampaignReport {
    pub alerts: Vec<VulnAlert>,
    pub stats: CampaignStats,
}

impl CampaignReport {
    pub fn classes(&self) -> BTreeSet<VulnClass> {
        self.alerts.iter().map(|a| a.vuln_class).collect()
    }
}

/// Identifies alerts that describe the same finding.
fn alert_key(c: &Candidate, alert: &VulnAlert) -> String {
    let mut names: Vec<String> = alert
        .matched_params
        .iter()
        .map(|p| format!("{}:{}", p.location.as_str(), p.name))
        .collect();
    names.sort();
    names.dedup();
    let site = match &alert.evidence {
        Evidence::Hook(h) => h.function.clone(),
        Evidence::Response { .. } => "response".to_string(),
        Evidence::PhpError(_) => "php_error".to_string(),
        Evidence::PhpException(e) => e.class.clone(),
    };
    format!(
        "{}|{}|{}|{}|{}",
        alert.vuln_class,
        c.endpoint.target_url,
        c.method.as_str(),
        names.join(","),
        site
    )
}

fn class_bit(class: VulnClass) -> u8 {
    1 << VulnClass::ALL.iter().position(|&c| c == class).expect("known class")
}

const ALL_CLASSES: u8 = (1 << VulnClass::ALL.len()) - 1;

struct Shared {
    cfg: CampaignConfig,
    constraints: Vec<Option<Regex>>,
    stop: AtomicBool,
    evaluated: AtomicU64,
    classes: AtomicU8,
    started: Instant,
}

impl Shared {
    fn should_stop(&self) -> bool {
        if self.stop.load(Ordering::Relaxed) {
            return true;
        }
        if let Some(d) = self.cfg.duration {
            if self.started.elapsed() >= d {
                self.stop.store(true, Ordering::Relaxed);
                return true;
            }
        }
        false
    }

    /// Reserves one evaluation from the global candidate budget.
    fn reserve(&self) -> bool {
        if self.should_stop() {
            return false;
        }
        if let Some(max) = self.cfg.max_candidates {
            if self.evaluated.fetch_add(1, Ordering::Relaxed) >= max {
                self.stop.store(true, Ordering::Relaxed);
                return false;
            }
        }
        true
    }

    /// Returns a reservation that was not used.
    fn release(&self) {
        if self.cfg.max_candidates.is_some() {
            self.evaluated.fetch_sub(1, Ordering::Relaxed);
        }
    }

    fn record_class(&self, class: VulnClass) {
        let all = self.classes.fetch_or(class_bit(class), Ordering::Relaxed) | class_bit(class);
        if self.cfg.until_all_classes && all == ALL_CLASSES {
            self.stop.store(true, Ordering::Relaxed);
        }
    }
}

enum Outcome {
    Evaluated(ScoreReport),
    Skipped,
}

struct Worker {
    idx: usize,
    shared: Arc<Shared>,
    store: GlobalCoverageStore,
    pool: CandidatePool,
    rng: ChaCha8Rng,
    transport: Box<dyn Transport>,
    checker: VulnChecker,
    stats: InstanceStats,
    alert_keys: HashSet<String>,
    info_keys: HashSet<String>,
    alerts: Vec<VulnAlert>,
    report: BufWriter<File>,
    candidate_log: Option<BufWriter<File>>,
    first_request: bool,
}

impl Worker {
    fn new(idx: usize, shared: Arc<Shared>) -> Result<Self, CampaignError> {
        let cfg = &shared.cfg;
        let id = cfg.instance_id(idx);
        let store = GlobalCoverageStore::open(cfg.sync_dir(), id.clone())?;
        let report_path = cfg.report_path(idx);
        fs::create_dir_all(report_path.parent().expect("report dir"))?;
        let report = BufWriter::new(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(&report_path)?,
        );
        let candidate_log = match cfg.candidate_log_path(idx) {
            Some(p) => {
                if let Some(parent) = p.parent() {
                    if !parent.as_os_str().is_empty() {
                        fs::create_dir_all(parent)?;
                    }
                }
                Some(BufWriter::new(File::create(p)?))
            }
            None => None,
        };
        Ok(Worker {
            idx,
            store,
            pool: CandidatePool::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(idx as u64)),
            transport: (cfg.transport)(idx),
            checker: VulnChecker::standard(),
            stats: InstanceStats {
                instance_id: id,
                ..Default::default()
            },
            alert_keys: HashSet::new(),
            info_keys: HashSet::new(),
            alerts: Vec::new(),
            report,
            candidate_log,
            first_request: true,
            shared,
        })
    }

    fn cfg(&self) -> &CampaignConfig {
        &self.shared.cfg
    }

    fn add_login_cookies(&self, c: &Candidate, req: &mut PreparedRequest) -> Result<(), CampaignError> {
        let Some(profile) = &c.endpoint.login_profile else {
            return Ok(());
        };
        let cookies = self
            .cfg()
            .login_cookies
            .get(profile)
            .ok_or_else(|| CampaignError::MissingLogin(profile.clone()))?;
        let declared: Vec<&str> = c
            .endpoint
            .params()
            .filter(|p| p.mode == ParamMode::Login)
            .map(|p| p.name.as_str())
            .collect();
        let extra: Vec<String> = cookies
            .iter()
            .filter(|(n, _)| declared.is_empty() || declared.contains(&n.as_str()))
            .map(|(n, v)| format!("{n}={v}"))
            .collect();
        if extra.is_empty() {
            return Ok(());
        }
        let extra = extra.join("; ");
        match req
            .headers
            .iter_mut()
            .find(|(n, _)| n.eq_ignore_ascii_case("cookie"))
        {
            Some((_, v)) => {
                v.push_str("; ");
                v.push_str(&extra);
            }
            None => {
                let at = req.headers.len().saturating_sub(1);
                req.headers.insert(at, ("Cookie".to_string(), extra));
            }
        }
        Ok(())
    }

    fn constrain(&self, c: &Candidate, fb: &mut FeedbackRecord) {
        let pos = self
            .cfg()
            .endpoints
            .iter()
            .position(|e| Arc::ptr_eq(e, &c.endpoint));
        if let Some(Some(re)) = pos.map(|p| &self.shared.constraints[p]) {
            fb.coverage.retain(|file, _| re.is_match(file));
        }
    }

    /// Sends one candidate and processes its feedback. The hash is recorded
    /// before the request goes out.
    fn evaluate(&mut self, c: &mut Candidate) -> Result<Outcome, CampaignError> {
        let hash = c.hash();
        self.store.insert_hash(hash);
        self.stats.candidates_evaluated += 1;
        c.assign_feedback_id();

        let mut req = match prepare_request(c) {
            Ok(r) => r,
            Err(RequestError::InvalidHeaderValue { name }) => {
                tracing::debug!(header = %name, "skipping candidate with invalid header value");
                self.stats.invalid_header_skipped += 1;
                self.log_candidate(c, &hash, 0)?;
                return Ok(Outcome::Skipped);
            }
            Err(e) => return Err(CampaignError::Unreachable(e.to_string())),
        };
        self.add_login_cookies(c, &mut req)?;

        let timeout = Duration::from_secs_f64(c.endpoint.timeout_s);
        self.stats.requests_sent += 1;
        match self.transport.send(&req, timeout) {
            Ok(resp) => c.response = Some(resp),
            Err(RequestError::Timeout) => {
                tracing::warn!(candidate = %hash, "request timed out");
                self.stats.hung += 1;
            }
            Err(e @ RequestError::ConnectError { .. }) if self.first_request => {
                self.shared.stop.store(true, Ordering::Relaxed);
                return Err(CampaignError::Unreachable(e.to_string()));
            }
            Err(e) => {
                tracing::warn!(candidate = %hash, error = %e, "request failed");
                self.stats.request_errors += 1;
            }
        }
        self.first_request = false;

        let mut fb = match collect(&c.feedback_id, &self.cfg().shared_dir, self.cfg().feedback_wait) {
            Ok(fb) => fb,
            Err(FeedbackError::Missing(_)) => {
                self.stats.feedback_missing += 1;
                FeedbackRecord::empty(c.feedback_id.clone())
            }
            Err(e @ FeedbackError::Parse { .. }) => {
                tracing::warn!(candidate = %hash, error = %e, "malformed feedback");
                self.stats.feedback_malformed += 1;
                FeedbackRecord::empty(c.feedback_id.clone())
            }
            Err(FeedbackError::Io(e)) => return Err(e.into()),
        };
        self.constrain(c, &mut fb);

        let report = score_candidate(&fb, &mut self.store);
        c.score = report.score;
        self.log_candidate(c, &hash, report.score)?;
        self.handle_alerts(c, &fb)?;
        Ok(Outcome::Evaluated(report))
    }

    fn log_candidate(&mut self, c: &Candidate, hash: &CandidateHash, score: u64) -> io::Result<()> {
        let Some(log) = &mut self.candidate_log else {
            return Ok(());
        };
        let entry = CandidateLogEntry {
            seq: self.stats.candidates_evaluated,
            hash: *hash,
            parent: c.parent_hash,
            method: c.method,
            values: c
                .values
                .iter()
                .map(|(k, v)| (k.location.as_str().to_string(), k.name.clone(), v.clone()))
                .collect(),
            mutation: c.mutation.as_ref().map(|m| m.kind),
            score,
        };
        serde_json::to_writer(&mut *log, &entry).map_err(io::Error::other)?;
        log.write_all(b"\n")
    }

    fn write_line(&mut self, line: &ReportLine) -> io::Result<()> {
        serde_json::to_writer(&mut self.report, line).map_err(io::Error::other)?;
        self.report.write_all(b"\n")?;
        self.report.flush()
    }

    fn handle_alerts(&mut self, c: &Candidate, fb: &FeedbackRecord) -> io::Result<()> {
        for alert in self.checker.run(c, fb, &self.cfg().policy) {
            if !self.alert_keys.insert(alert_key(c, &alert)) {
                continue;
            }
            tracing::info!(class = %alert.vuln_class, candidate = %alert.candidate_hash, "alert");
            self.shared.record_class(alert.vuln_class);
            self.stats.alerts += 1;
            self.write_line(&ReportLine::Alert(alert.clone()))?;
            self.alerts.push(alert);
        }
        for evidence in informational(fb) {
            let key = serde_json::to_string(&evidence).map_err(io::Error::other)?;
            if self.info_keys.insert(key) {
                self.write_line(&ReportLine::Informational {
                    candidate_hash: c.hash(),
                    evidence,
                })?;
            }
        }
        Ok(())
    }

    fn sync(&mut self) {
        if let Err(e) = self.store.sync() {
            tracing::warn!(error = %e, "coverage sync failed");
            self.stats.sync_errors += 1;
        }
    }

    fn seed_pool(&mut self) -> Result<(), CampaignError> {
        let n = self.cfg().instances;
        let mut seeds = Vec::new();
        for ep in &self.cfg().endpoints {
            if !ep.has_fuzz_params() {
                continue;
            }
            seeds.extend(expand_seeds(ep).map_err(|_| CampaignError::NothingToFuzz)?);
        }
        if seeds.is_empty() {
            return Err(CampaignError::NothingToFuzz);
        }
        let total = seeds.len();
        let mine: Vec<Candidate> = seeds
            .iter()
            .enumerate()
            .filter(|(i, _)| i % n == self.idx)
            .map(|(_, c)| c.clone())
            .collect();
        for mut c in mine {
            if !self.shared.reserve() {
                break;
            }
            let score = match self.evaluate(&mut c)? {
                Outcome::Evaluated(r) => r.score,
                Outcome::Skipped => continue,
            };
            self.pool.insert(c, score);
        }
        if self.pool.is_empty() {
            // More instances than seeds: start from the shared seeds
            // without re-sending them.
            for c in seeds.into_iter().skip(self.idx % total).take(1) {
                self.pool.insert(c, 0);
            }
        }
        self.sync();
        Ok(())
    }

    fn round(&mut self) -> Result<bool, CampaignError> {
        let random = self.cfg().selection == Selection::Random;
        let id = if random {
            self.pool.select_random(&mut self.rng)
        } else {
            self.pool.select_next()
        };
        let Ok(id) = id else { return Ok(false) };
        let parent = self.pool.get(id).expect("selected id exists");
        let energy = if random {
            MIN_ENERGY
        } else {
            energy_for(self.pool.score(id).unwrap_or(0))
        };
        let budget = MutationBudget::new(energy, self.rng.random());
        let children = match mutate_candidate(parent, budget, &self.store) {
            Ok(c) => c,
            Err(_) => {
                self.pool.mark_exhausted(id, &[]);
                return Ok(true);
            }
        };

        let mut scores = Vec::with_capacity(children.len());
        for mut child in children {
            if self.store.has_seen(&child.hash()) {
                self.stats.duplicates_skipped += 1;
                continue;
            }
            if !self.shared.reserve() {
                break;
            }
            match self.store.claim(child.hash()) {
                Ok(true) => {}
                Ok(false) => {
                    self.shared.release();
                    self.stats.duplicates_skipped += 1;
                    continue;
                }
                Err(e) => {
                    tracing::warn!(error = %e, "claim failed");
                    self.stats.sync_errors += 1;
                }
            }
            let report = match self.evaluate(&mut child)? {
                Outcome::Evaluated(r) => r,
                Outcome::Skipped => continue,
            };
            scores.push(report);
            if random || report.score > 0 {
                self.pool.insert(child, report.score);
            }
        }
        self.pool.mark_exhausted(id, &scores);
        self.sync();
        Ok(true)
    }

    fn run(&mut self) -> Result<(), CampaignError> {
        self.seed_pool()?;
        while !self.shared.should_stop() {
            if !self.round()? {
                break;
            }
        }
        Ok(())
    }

    fn finish(&mut self) -> io::Result<()> {
        self.sync();
        let mut hashes: Vec<&CandidateHash> = self.store.seen_hashes().iter().collect();
        hashes.sort();
        let mut digest = Sha256::new();
        for h in &hashes {
            digest.update(h.0);
        }
        let elapsed = self.shared.started.elapsed().as_secs_f64();
        self.stats.seen_hashes = hashes.len() as u64;
        self.stats.seen_digest = hex::encode(digest.finalize());
        self.stats.pool_size = self.pool.len() as u64;
        self.stats.covered_files = self.store.known_files() as u64;
        self.stats.covered_lines = self.store.covered_lines() as u64;
        self.stats.elapsed_s = elapsed;
        self.stats.exec_per_sec = if elapsed > 0.0 {
            self.stats.requests_sent as f64 / elapsed
        } else {
            0.0
        };
        self.report.flush()?;
        if let Some(log) = &mut self.candidate_log {
            log.flush()?;
        }
        Ok(())
    }
}

fn compile_constraints(endpoints: &[Arc<EndpointConfig>]) -> Result<Vec<Option<Regex>>, CampaignError> {
    endpoints
        .iter()
        .map(|e| match &e.coverage_path_constraint {
            None => Ok(None),
            Some(p) => Regex::new(p).map(Some).map_err(|source| CampaignError::Constraint {
                pattern: p.clone(),
                source,
            }),
        })
        .collect()
}

/// Runs a campaign to completion and returns the merged findings.
///
/// Every instance runs on its own thread. Instances exchange seen hashes
/// and coverage only through the sync directory; once all have stopped,
/// each performs a last sync so their views converge.
pub fn run_campaign(cfg: CampaignConfig) -> Result<CampaignReport, CampaignError> {
    if cfg.instances == 0 {
        return Err(CampaignError::NoInstances);
    }
    if !cfg.endpoints.iter().any(|e| e.has_fuzz_params()) {
        return Err(CampaignError::NothingToFuzz);
    }
    fs::create_dir_all(&cfg.shared_dir)?;
    let n = cfg.instances;
    let shared = Arc::new(Shared {
        constraints: compile_constraints(&cfg.endpoints)?,
        cfg,
        stop: AtomicBool::new(false),
        evaluated: AtomicU64::new(0),
        classes: AtomicU8::new(0),
        started: Instant::now(),
    });
    let barrier = Arc::new(Barrier::new(n));

    let handles: Vec<_> = (0..n)
        .map(|idx| {
            let shared = shared.clone();
            let barrier = barrier.clone();
            thread::Builder::new()
                .name(shared.cfg.instance_id(idx))
                .spawn(move || {
                    let mut worker = match Worker::new(idx, shared.clone()) {
                        Ok(w) => w,
                        Err(e) => {
                            shared.stop.store(true, Ordering::Relaxed);
                            barrier.wait();
                            return Err(e);
                        }
                    };
                    let result = worker.run();
                    if result.is_err() {
                        shared.stop.store(true, Ordering::Relaxed);
                    }
                    worker.sync();
                    barrier.wait();
                    worker.finish()?;
                    result.map(|_| (worker.stats, worker.alerts))
                })
                .expect("spawn worker thread")
        })
        .collect();

    let mut report = CampaignReport::default();
    let mut first_err = None;
    let mut keys = HashSet::new();
    for h in handles {
        match h.join().expect("worker thread panicked") {
            Ok((stats, alerts)) => {
                for a in alerts {
                    let key = (a.vuln_class, a.candidate_hash);
                    if keys.insert(key) {
                        report.alerts.push(a);
                    }
                }
                report.stats.instances.push(stats);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    if let Some(e) = first_err {
        return Err(e);
    }

    let s = &mut report.stats;
    s.candidates_evaluated = s.instances.iter().map(|i| i.candidates_evaluated).sum();
    s.requests_sent = s.instances.iter().map(|i| i.requests_sent).sum();
    s.alerts = report.alerts.len() as u64;
    s.classes_found = report.alerts.iter().map(|a| a.vuln_class).collect::<BTreeSet<_>>().into_iter().collect();
    s.elapsed_s = shared.started.elapsed().as_secs_f64();
    s.exec_per_sec = if s.elapsed_s > 0.0 {
        s.requests_sent as f64 / s.elapsed_s
    } else {
        0.0
    };
    Ok(report)
}

/// Reads every line of a report file written by a campaign.
pub fn read_report(path: &Path) -> io::Result<Vec<ReportLine>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(io::Error::other))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::InProcessTransport;
    use crate::model::{HookEvent, Location, MatchedParam, ParamSpec};

    fn config(instances: usize) -> CampaignConfig {
        let ep = EndpointConfig::new("http://127.0.0.1/vuln", vec![HttpMethod::Get]).with_group(
            Location::Query,
            vec![ParamSpec::fuzz("d", &["fuzz"], Location::Query).unwrap()],
            1.0,
        );
        let mut cfg = CampaignConfig::new(
            vec![Arc::new(ep)],
            "/tmp/shared",
            Arc::new(|_| Box::new(InProcessTransport::new("/tmp/shared")) as Box<dyn Transport>),
        );
        cfg.instances = instances;
        cfg
    }

    #[test]
    fn paths_per_instance() {
        let mut cfg = config(1);
        cfg.candidate_log = Some(PathBuf::from("/x/log.jsonl"));
        assert_eq!(cfg.candidate_log_path(0), Some(PathBuf::from("/x/log.jsonl")));
        assert_eq!(cfg.report_path(0), PathBuf::from("/tmp/shared/reports/fuzzer-0.jsonl"));
        cfg.instances = 3;
        assert_eq!(cfg.candidate_log_path(2), Some(PathBuf::from("/x/log.jsonl.2")));
        assert_eq!(cfg.sync_dir(), PathBuf::from("/tmp/shared/sync"));
    }

    #[test]
    fn class_bits_are_distinct() {
        let all = VulnClass::ALL.iter().fold(0u8, |acc, &c| {
            assert_eq!(acc & class_bit(c), 0);
            acc | class_bit(c)
        });
        assert_eq!(all, ALL_CLASSES);
    }

    #[test]
    fn alert_key_ignores_values_but_not_params() {
        let cfg = config(1);
        let values = [(crate::model::ParamKey::new(Location::Query, "d"), "x".to_string())]
            .into_iter()
            .collect();
        let c = Candidate::new(cfg.endpoints[0].clone(), HttpMethod::Get, values);
        let alert = |value: &str, name: &str| VulnAlert {
            vuln_class: VulnClass::Sqli,
            candidate_hash: c.hash(),
            evidence: Evidence::Hook(HookEvent::new("mysqli_query", vec![value.into()])),
            matched_params: vec![MatchedParam {
                location: Location::Query,
                name: name.into(),
                value: value.into(),
            }],
            confidence: crate::model::Confidence::ConfirmedParamFlow,
        };
        assert_eq!(alert_key(&c, &alert("a'", "d")), alert_key(&c, &alert("b'", "d")));
        assert_ne!(alert_key(&c, &alert("a'", "d")), alert_key(&c, &alert("a'", "e")));
    }

    #[test]
    fn report_lines_round_trip() {
        let line = ReportLine::Stats(CampaignStats {
            classes_found: vec![VulnClass::Xss],
            ..Default::default()
        });
        let text = serde_json::to_string(&line).unwrap();
        assert!(text.starts_with("{\"type\":\"stats\""));
        assert_eq!(serde_json::from_str::<ReportLine>(&text).unwrap(), line);
    }

    #[test]
    fn zero_instances_rejected() {
        assert!(matches!(run_campaign(config(0)), Err(CampaignError::NoInstances)));
    }
}
