//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use webphuzz_cli::{cmd_fuzz, cmd_hargen, FuzzArgs, HargenArgs, SelectionArg, EXIT_ALERTS};
use webphuzz_core::campaign::{
    read_report, run_campaign, CampaignConfig, CandidateLogEntry, ReportLine, Selection,
};
use webphuzz_core::config::{config_to_json, parse_config};
use webphuzz_core::detect::{run_checks, PolicyMode, VulnCheckPolicy};
use webphuzz_core::mock::{self, InProcessTransport};
use webphuzz_core::model::{
    Candidate, CandidateHash, Confidence, EndpointConfig, FeedbackRecord, HookEvent,
    HookException, HttpMethod, Location, MarkerClass, MarkerToken, ParamKey, ParamSpec,
    ResponseSummary, VulnAlert, VulnClass,
};
use webphuzz_core::mutation::{mutate_candidate, MutationBudget, MutatorKind};
use webphuzz_core::request::Transport;
use webphuzz_core::scheduler::{score_candidate, GlobalCoverageStore};

const SEED: u64 = 20240601;
/// Lines of the mock script holding the seven sinks.
const SINK_LINES: [u32; 7] = [5, 8, 11, 14, 18, 21, 24];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn mock_endpoint(target: &str) -> EndpointConfig {
    EndpointConfig::new(target, vec![HttpMethod::Get]).with_group(
        Location::Query,
        vec![
            ParamSpec::fuzz("m", &["fuzz"], Location::Query).unwrap(),
            ParamSpec::fuzz("d", &["fuzz"], Location::Query).unwrap(),
        ],
        1.0,
    )
}

fn write_mock_config(dir: &Path, target: &str) -> PathBuf {
    let path = dir.join("vuln.json");
    fs::write(&path, config_to_json(&mock_endpoint(target))).unwrap();
    path
}

fn fuzz_args(config: PathBuf, shared: PathBuf, seed: u64) -> FuzzArgs {
    FuzzArgs {
        config: vec![config],
        shared_dir: shared,
        instances: 1,
        timeout_s: Some(10.0),
        duration_s: None,
        policy: PolicyMode::ParamBased,
        report: None,
        seed: Some(seed),
        max_candidates: None,
        until_all_classes: false,
        candidate_log: None,
        instance_id: "acc".into(),
        login_dir: PathBuf::from("login"),
        feedback_wait_ms: 2000,
        selection: SelectionArg::Guided,
    }
}

fn report_alerts(path: &Path) -> Vec<VulnAlert> {
    read_report(path)
        .unwrap()
        .into_iter()
        .filter_map(|l| match l {
            ReportLine::Alert(a) => Some(a),
            _ => None,
        })
        .collect()
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let shared = tmp.path().join("shared");
    fs::create_dir_all(&shared).unwrap();
    let server = mock::serve(&shared, 0).unwrap();
    let config = write_mock_config(tmp.path(), &server.url());
    let report = tmp.path().join("report.jsonl");
    let mut args = fuzz_args(config, shared, SEED);
    args.max_candidates = Some(50_000);
    args.until_all_classes = true;
    args.report = Some(report.clone());

    let start = Instant::now();
    let code = cmd_fuzz(&args).unwrap();
    let elapsed = start.elapsed();
    let lines = read_report(&report).unwrap();
    let evaluated = lines
        .iter()
        .find_map(|l| match l {
            ReportLine::Stats(s) => Some(s.candidates_evaluated),
            _ => None,
        })
        .unwrap_or(u64::MAX);
    let classes: BTreeSet<VulnClass> = report_alerts(&report).iter().map(|a| a.vuln_class).collect();
    outcome(
        code == EXIT_ALERTS
            && classes.len() == 7
            && evaluated <= 50_000
            && elapsed <= Duration::from_secs(120),
        format!(
            "{} classes, {evaluated} candidates, {:.1}s, exit {code}",
            classes.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn sinks_reached(selection: Selection, seed: u64, budget: u64) -> usize {
    let tmp = tempfile::tempdir().unwrap();
    let shared = tmp.path().to_path_buf();
    let transport_dir = shared.clone();
    let mut cfg = CampaignConfig::new(
        vec![Arc::new(mock_endpoint("http://127.0.0.1/vuln"))],
        &shared,
        Arc::new(move |_| Box::new(InProcessTransport::new(transport_dir.clone())) as Box<dyn Transport>),
    );
    cfg.seed = seed;
    cfg.selection = selection;
    cfg.max_candidates = Some(budget);
    cfg.until_all_classes = true;
    cfg.feedback_wait = Duration::from_millis(100);
    let sync = cfg.sync_dir();
    run_campaign(cfg).unwrap();
    let probe = GlobalCoverageStore::open(sync, "probe").unwrap();
    SINK_LINES
        .iter()
        .filter(|&&l| probe.is_covered(mock::MOCK_FILE, l))
        .count()
}

fn guidance_superiority() -> Outcome {
    const RUNS: u64 = 20;
    const BUDGET: u64 = 20_000;
    let guided: Vec<usize> = (0..RUNS)
        .map(|i| sinks_reached(Selection::CoverageGuided, SEED + i * 1000, BUDGET))
        .collect();
    let random: Vec<usize> = (0..RUNS)
        .map(|i| sinks_reached(Selection::Random, SEED + i * 1000, BUDGET))
        .collect();
    let complete = guided.iter().filter(|&&n| n == 7).count();
    let mean = |v: &[usize]| v.iter().sum::<usize>() as f64 / v.len() as f64;
    outcome(
        complete as f64 >= 0.95 * RUNS as f64 && mean(&random) < mean(&guided),
        format!(
            "guided all-7 in {complete}/{RUNS}, mean sinks guided {:.2} vs random {:.2} (budget {BUDGET})",
            mean(&guided),
            mean(&random)
        ),
    )
}

fn mutator_rates() -> Outcome {
    const DRAWS: u64 = 100_000;
    let parent = {
        let ep = Arc::new(mock_endpoint("http://127.0.0.1/vuln"));
        let values = [("m", "fuzz"), ("d", "fuzz")]
            .into_iter()
            .map(|(k, v)| (ParamKey::new(Location::Query, k), v.to_string()))
            .collect();
        Candidate::new(ep, HttpMethod::Get, values)
    };
    let store = GlobalCoverageStore::in_memory();
    let mut counts: HashMap<MutatorKind, u64> = HashMap::new();
    for i in 0..DRAWS {
        let children = mutate_candidate(&parent, MutationBudget::new(1, i), &store).unwrap();
        if let Some(m) = children.first().and_then(|c| c.mutation.as_ref()) {
            *counts.entry(m.kind).or_default() += 1;
        }
    }
    let rate = |k| *counts.get(&k).unwrap_or(&0) as f64 / DRAWS as f64;
    let patr = rate(MutatorKind::PatrPayload);
    let xss = rate(MutatorKind::XssPayload);
    outcome(
        (patr - 0.05).abs() <= 0.005 && (xss - 0.0475).abs() <= 0.005,
        format!("patr {patr:.4}, xss {xss:.4} over {DRAWS} draws"),
    )
}

fn random_feedback(rng: &mut ChaCha8Rng) -> FeedbackRecord {
    let mut fb = FeedbackRecord::empty("x");
    for _ in 0..rng.random_range(0..4) {
        let file = format!("f{}.php", rng.random_range(0..5));
        let lines: BTreeSet<u32> = (0..rng.random_range(1..8))
            .map(|_| rng.random_range(1..30))
            .collect();
        fb.coverage.entry(file).or_default().extend(lines);
    }
    fb
}

fn scoring_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let mut store = GlobalCoverageStore::in_memory();
        let mut files: BTreeSet<String> = BTreeSet::new();
        let mut lines: BTreeSet<(String, u32)> = BTreeSet::new();
        for _ in 0..rng.random_range(0..4) {
            let prior = random_feedback(&mut rng);
            score_candidate(&prior, &mut store);
            for (f, ls) in &prior.coverage {
                files.insert(f.clone());
                lines.extend(ls.iter().map(|&l| (f.clone(), l)));
            }
        }
        let fb = random_feedback(&mut rng);
        let fb_files: BTreeSet<String> = fb.coverage.keys().cloned().collect();
        let fb_lines: BTreeSet<(String, u32)> = fb
            .coverage
            .iter()
            .flat_map(|(f, ls)| ls.iter().map(move |&l| (f.clone(), l)))
            .collect();
        let new_files = fb_files.difference(&files).count() as u64;
        let new_lines = fb_lines.difference(&lines).count() as u64;
        let got = score_candidate(&fb, &mut store);
        if (got.new_files, got.new_lines, got.score) != (new_files, new_lines, 10 * new_files + new_lines) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches in 1000 instances"))
}

fn sync_convergence() -> Outcome {
    const WORKERS: usize = 10;
    let tmp = tempfile::tempdir().unwrap();
    let shared = tmp.path().join("shared");
    // One random seed per worker keeps the workloads disjoint.
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let seeds: Vec<String> = (0..WORKERS)
        .map(|_| (0..24).map(|_| rng.random_range(b'a'..=b'z') as char).collect())
        .collect();
    let seed_refs: Vec<&str> = seeds.iter().map(String::as_str).collect();
    let ep = EndpointConfig::new("http://127.0.0.1/vuln", vec![HttpMethod::Get]).with_group(
        Location::Query,
        vec![
            ParamSpec::fuzz("m", &["fuzz"], Location::Query).unwrap(),
            ParamSpec::fuzz("d", &seed_refs, Location::Query).unwrap(),
        ],
        1.0,
    );
    let transport_dir = shared.clone();
    let mut cfg = CampaignConfig::new(
        vec![Arc::new(ep)],
        &shared,
        Arc::new(move |_| Box::new(InProcessTransport::new(transport_dir.clone())) as Box<dyn Transport>),
    );
    cfg.instances = WORKERS;
    cfg.seed = SEED;
    cfg.max_candidates = Some(10_000);
    cfg.feedback_wait = Duration::from_millis(100);
    cfg.candidate_log = Some(tmp.path().join("log/candidates.jsonl"));
    let sync = cfg.sync_dir();
    let prefix = cfg.instance_prefix.clone();
    let report = run_campaign(cfg).unwrap();

    let digests: BTreeSet<&str> = report.stats.instances.iter().map(|s| s.seen_digest.as_str()).collect();

    let mut evaluated: HashMap<CandidateHash, usize> = HashMap::new();
    for i in 0..WORKERS {
        let text = fs::read_to_string(tmp.path().join(format!("log/candidates.jsonl.{i}"))).unwrap();
        for line in text.lines() {
            let entry: CandidateLogEntry = serde_json::from_str(line).unwrap();
            *evaluated.entry(entry.hash).or_default() += 1;
        }
    }
    let duplicates = evaluated.values().filter(|&&n| n > 1).count();
    let union: HashSet<CandidateHash> = evaluated.keys().copied().collect();
    let reopened: Vec<HashSet<CandidateHash>> = (0..WORKERS)
        .map(|i| {
            GlobalCoverageStore::open(&sync, format!("{prefix}-{i}"))
                .unwrap()
                .seen_hashes()
                .clone()
        })
        .collect();
    let identical = reopened.iter().all(|s| *s == union);
    outcome(
        digests.len() == 1 && identical && duplicates == 0,
        format!(
            "{} distinct final views, {} hashes in union, {duplicates} duplicate evaluations",
            digests.len(),
            union.len()
        ),
    )
}

fn candidate(m: &str, d: &str) -> Candidate {
    let values = [("m", m), ("d", d)]
        .into_iter()
        .map(|(k, v)| (ParamKey::new(Location::Query, k), v.to_string()))
        .collect();
    Candidate::new(Arc::new(mock_endpoint("http://127.0.0.1/vuln")), HttpMethod::Get, values)
}

fn response(status: u16, headers: &[(&str, &str)], body: &str) -> ResponseSummary {
    ResponseSummary {
        status,
        headers: headers
            .iter()
            .map(|(k, v)| (k.to_ascii_lowercase(), v.to_string()))
            .collect(),
        body: body.as_bytes().to_vec(),
        truncated: false,
    }
}

fn with_hooks(events: Vec<HookEvent>) -> FeedbackRecord {
    let mut fb = FeedbackRecord::empty("x");
    fb.hook_events = events;
    fb
}

fn alerts_of(c: &Candidate, fb: &FeedbackRecord, policy: &VulnCheckPolicy, class: VulnClass) -> Vec<VulnAlert> {
    run_checks(c, fb, policy)
        .into_iter()
        .filter(|a| a.vuln_class == class)
        .collect()
}

fn with_marker(mut c: Candidate, token: &str, resp: ResponseSummary) -> Candidate {
    c.markers.push(MarkerToken {
        token: token.into(),
        vuln_class: MarkerClass::Xss,
        param: ParamKey::new(Location::Query, "d"),
    });
    c.response = Some(resp);
    c
}

fn detection_rows() -> Vec<(&'static str, bool)> {
    use VulnClass::*;
    let pb = VulnCheckPolicy::default();
    let df = VulnCheckPolicy::with_mode(PolicyMode::Default);
    let ok200 = response(200, &[("Content-Type", "text/html")], "ok");
    let mut rows = Vec::new();

    let mut c = candidate("ms", "1'");
    c.response = Some(ok200.clone());
    let sql = HookEvent::new("mysqli_query", vec!["SELECT * FROM users WHERE id = 1'".into()])
        .with_error("You have an error in your SQL syntax");
    let a = run_checks(&c, &with_hooks(vec![sql.clone()]), &pb);
    rows.push((
        "sqli error with flow, param_based: one confirmed alert",
        a.len() == 1 && a[0].vuln_class == Sqli && a[0].confidence == Confidence::ConfirmedParamFlow,
    ));

    let mut c2 = candidate("ms", "zzzz");
    c2.response = Some(ok200.clone());
    let a_pb = run_checks(&c2, &with_hooks(vec![sql.clone()]), &pb);
    let a_df = run_checks(&c2, &with_hooks(vec![sql.clone()]), &df);
    rows.push(("sqli error without flow, param_based: none", a_pb.is_empty()));
    rows.push((
        "sqli error without flow, default: one heuristic alert",
        a_df.len() == 1 && a_df[0].confidence == Confidence::Heuristic,
    ));
    rows.push((
        "empty feedback, 200: none",
        run_checks(&c, &FeedbackRecord::empty("x"), &pb).is_empty()
            && run_checks(&c, &FeedbackRecord::empty("x"), &df).is_empty(),
    ));

    rows.push(("sqli syntax error text alerts", alerts_of(&c, &with_hooks(vec![sql]), &pb, Sqli).len() == 1));
    let mut falsy = HookEvent::new("mysqli_query", vec!["SELECT 1'".into()]);
    falsy.returned_false = true;
    rows.push((
        "sqli returned_false without error: none",
        alerts_of(&c, &with_hooks(vec![falsy.clone()]), &pb, Sqli).is_empty()
            && alerts_of(&c, &with_hooks(vec![falsy]), &df, Sqli).is_empty(),
    ));
    let mut pdo = HookEvent::new("PDO::exec", vec!["DELETE FROM t WHERE a = 1'".into()]);
    pdo.exception = Some(HookException {
        class: "PDOException".into(),
        message: "SQLSTATE[42000]: Syntax error".into(),
    });
    rows.push(("PDOException from PDO::exec alerts", alerts_of(&c, &with_hooks(vec![pdo]), &pb, Sqli).len() == 1));

    let cr = candidate("mr", "fu'zz");
    let quote = HookEvent::new("system", vec!["echo fu'zz".into()])
        .with_error("sh: 1: Syntax error: Unterminated quoted string");
    rows.push(("rce unterminated quote alerts", alerts_of(&cr, &with_hooks(vec![quote]), &pb, Rce).len() == 1));
    let clean = HookEvent::new("system", vec!["echo hello".into()]);
    rows.push((
        "rce clean exit: none",
        alerts_of(&cr, &with_hooks(vec![clean.clone()]), &pb, Rce).is_empty()
            && alerts_of(&cr, &with_hooks(vec![clean]), &df, Rce).is_empty(),
    ));
    let cr2 = candidate("mr", "fuzzcmd");
    let missing = HookEvent::new("system", vec!["echo x;fuzzcmd".into()]).with_error("sh: 1: fuzzcmd: not found");
    rows.push(("rce 'not found' alerts", alerts_of(&cr2, &with_hooks(vec![missing]), &pb, Rce).len() == 1));

    let cp = candidate("mf", "../../etc/passwd");
    let trav = HookEvent::new("file_get_contents", vec!["../../etc/passwd".into()]);
    rows.push(("patr traversal with flow alerts", alerts_of(&cp, &with_hooks(vec![trav]), &pb, Patr).len() == 1));
    let cp2 = candidate("mf", "fuzz");
    let exists = HookEvent::new("file_exists", vec!["uploads/fuzz".into()]);
    let d = alerts_of(&cp2, &with_hooks(vec![exists.clone()]), &df, Patr);
    rows.push((
        "patr plain flow: default heuristic only",
        alerts_of(&cp2, &with_hooks(vec![exists]), &pb, Patr).is_empty()
            && d.len() == 1
            && d[0].confidence == Confidence::Heuristic,
    ));
    let fopen = HookEvent::new("fopen", vec!["/var/log/app.log".into()]).with_error("failed to open stream");
    rows.push(("patr error without flow, param_based: none", alerts_of(&cp2, &with_hooks(vec![fopen]), &pb, Patr).is_empty()));

    let ci = candidate("mu", "O:4:\"fu");
    let bad = HookEvent::new("unserialize", vec!["O:4:\"fu".into()]).with_error("unserialize(): Error at offset 0 of 6 bytes");
    rows.push(("ides malformed object alerts", alerts_of(&ci, &with_hooks(vec![bad]), &pb, Ides).len() == 1));
    let ci2 = candidate("mu", "b:1;");
    let valid = HookEvent::new("unserialize", vec!["b:1;".into()]);
    rows.push(("ides valid b:1; : none", alerts_of(&ci2, &with_hooks(vec![valid]), &df, Ides).is_empty()));
    let constant = HookEvent::new("unserialize", vec!["a:0:{".into()]).with_error("unserialize(): Error at offset 5 of 5 bytes");
    rows.push(("ides constant input without flow, param_based: none", alerts_of(&ci, &with_hooks(vec![constant]), &pb, Ides).is_empty()));

    let payload = r#"<!DOCTYPE a [<!ENTITY e SYSTEM "file:///etc/passwd">]><a>&e;</a>"#;
    let cx = candidate("me", payload);
    let xxe = HookEvent::new("DOMDocument::loadXML", vec![payload.into(), "flags=NOENT".into()]);
    rows.push(("xxe entity payload with NOENT alerts", alerts_of(&cx, &with_hooks(vec![xxe]), &pb, Xxe).len() == 1));
    let cx2 = candidate("me", "<a/>");
    let plain = HookEvent::new("DOMDocument::loadXML", vec!["<a/>".into(), "flags=NOENT".into()]);
    rows.push(("xxe plain <a/> with NOENT: none", alerts_of(&cx2, &with_hooks(vec![plain]), &df, Xxe).is_empty()));
    let cx3 = candidate("me", "fuzz");
    let no_flag = HookEvent::new("DOMDocument::loadXML", vec!["fuzz".into()])
        .with_error("Start tag expected, '<' not found in Entity, line: 1");
    rows.push(("xxe entity error without NOENT: none", alerts_of(&cx3, &with_hooks(vec![no_flag]), &df, Xxe).is_empty()));

    let html = |b: &str| response(200, &[("Content-Type", "text/html")], b);
    let script = "<script>fzdeadbeef()</script>";
    let c = with_marker(candidate("mx", script), "fzdeadbeef", html(&format!("<p>{script}</p>")));
    rows.push(("xss script body alerts", alerts_of(&c, &FeedbackRecord::empty("x"), &pb, Xss).len() == 1));
    let c = with_marker(candidate("mx", script), "fzdeadbeef", html("&lt;script&gt;fzdeadbeef()&lt;/script&gt;"));
    rows.push(("xss escaped output: none", alerts_of(&c, &FeedbackRecord::empty("x"), &pb, Xss).is_empty()));
    let json = response(200, &[("Content-Type", "application/json")], &format!("{{\"a\":\"{script}\"}}"));
    let c = with_marker(candidate("mx", script), "fzdeadbeef", json);
    let strict = VulnCheckPolicy {
        xss_respect_content_type: true,
        ..VulnCheckPolicy::default()
    };
    rows.push((
        "xss in json: alert by default, suppressed when flag set",
        alerts_of(&c, &FeedbackRecord::empty("x"), &pb, Xss).len() == 1
            && alerts_of(&c, &FeedbackRecord::empty("x"), &strict, Xss).is_empty(),
    ));

    let mut c = candidate("mo", "http://fz.example/");
    c.response = Some(response(302, &[("Location", "http://fz.example/")], ""));
    rows.push(("opre 302 to fuzz url alerts", alerts_of(&c, &FeedbackRecord::empty("x"), &pb, Opre).len() == 1));
    let mut c = candidate("mo", "fuzz");
    c.response = Some(response(302, &[("Location", "/home?from=fuzz")], ""));
    rows.push(("opre value only in query: none", alerts_of(&c, &FeedbackRecord::empty("x"), &pb, Opre).is_empty()));
    let mut c = candidate("mo", "http://fz.example/");
    c.response = Some(response(200, &[("Location", "http://fz.example/")], ""));
    rows.push(("opre status 200: none", alerts_of(&c, &FeedbackRecord::empty("x"), &pb, Opre).is_empty()));
    rows
}

const HOOKS: [&str; 10] = [
    "mysqli_query",
    "PDO::query",
    "system",
    "shell_exec",
    "unserialize",
    "DOMDocument::loadXML",
    "file_get_contents",
    "fopen",
    "file_exists",
    "strlen",
];

fn random_value(rng: &mut ChaCha8Rng) -> String {
    const PARTS: [&str; 10] = ["fuzz", "'", "../", "/etc/passwd", "O:4:", "<!ENTITY", "http://x.y/", "ab", ";ls", "zz"];
    (0..rng.random_range(1..4))
        .map(|_| PARTS[rng.random_range(0..PARTS.len())])
        .collect()
}

fn random_case(rng: &mut ChaCha8Rng) -> (Candidate, FeedbackRecord) {
    let m = random_value(rng);
    let d = random_value(rng);
    let mut c = candidate(&m, &d);
    let mut fb = FeedbackRecord::empty("x");
    for _ in 0..rng.random_range(0..4) {
        let mut args = Vec::new();
        for _ in 0..rng.random_range(0..3) {
            args.push(match rng.random_range(0..4) {
                0 => format!("prefix {d}"),
                1 => m.clone(),
                2 => "flags=NOENT|DTDLOAD".to_string(),
                _ => random_value(rng),
            });
        }
        let mut ev = HookEvent::new(HOOKS[rng.random_range(0..HOOKS.len())], args);
        if rng.random_bool(0.5) {
            const ERRORS: [&str; 4] = [
                "You have an error in your SQL syntax",
                "sh: 1: x: not found",
                "failed to load external entity",
                "Error at offset 0 of 4 bytes",
            ];
            ev.error = Some(ERRORS[rng.random_range(0..ERRORS.len())].to_string());
        }
        if rng.random_bool(0.1) {
            ev.exception = Some(HookException {
                class: "Exception".into(),
                message: "entity boom".into(),
            });
        }
        ev.returned_false = rng.random_bool(0.3);
        fb.hook_events.push(ev);
    }
    let status = [200, 302][rng.random_range(0..2)];
    let location = if rng.random_bool(0.5) { d.clone() } else { "/home".into() };
    let token = format!("fz{:08x}", rng.random::<u32>());
    let body = if rng.random_bool(0.5) {
        format!("<script>{token}()</script>")
    } else {
        "<p>ok</p>".to_string()
    };
    c = with_marker(c, &token, response(status, &[("Location", &location), ("Content-Type", "text/html")], &body));
    (c, fb)
}

fn detection_matrix() -> Outcome {
    let rows = detection_rows();
    let failed: Vec<&str> = rows.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();

    let pb = VulnCheckPolicy::default();
    let df = VulnCheckPolicy::with_mode(PolicyMode::Default);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut violations = 0;
    let mut pb_alerts = 0;
    for _ in 0..10_000 {
        let (c, fb) = random_case(&mut rng);
        let strict = run_checks(&c, &fb, &pb);
        let loose: Vec<(VulnClass, String)> = run_checks(&c, &fb, &df)
            .iter()
            .map(|a| (a.vuln_class, serde_json::to_string(&a.evidence).unwrap()))
            .collect();
        pb_alerts += strict.len();
        for a in &strict {
            let key = (a.vuln_class, serde_json::to_string(&a.evidence).unwrap());
            if !loose.contains(&key) {
                violations += 1;
            }
        }
    }
    let mut detail = format!(
        "{}/{} example cases, subset violations {violations} over 10000 records ({pb_alerts} param_based alerts)",
        rows.len() - failed.len(),
        rows.len()
    );
    if !failed.is_empty() {
        detail.push_str(&format!("; failing: {}", failed.join("; ")));
    }
    outcome(failed.is_empty() && violations == 0 && pb_alerts > 0, detail)
}

fn config_round_trip() -> Outcome {
    let bytes = fs::read(fixture("dvwa_exec.json")).unwrap();
    let first = parse_config(&bytes).unwrap();
    let emitted = config_to_json(&first);
    let second = parse_config(emitted.as_bytes()).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("configs");
    let args = HargenArgs {
        har: fixture("capture.har"),
        out_dir: out.clone(),
        fixed_regex: Vec::new(),
        fuzz_regex: Vec::new(),
        login_cookie_regex: None,
        login_profile: None,
        seed_value: None,
        static_ext: Vec::new(),
        force: false,
    };
    let code = cmd_hargen(&args).unwrap();
    let configs = fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "json"))
        .count();
    let har: serde_json::Value = serde_json::from_slice(&fs::read(fixture("capture.har")).unwrap()).unwrap();
    let entries = har["log"]["entries"].as_array().unwrap().len();
    outcome(
        first == second && code == 0 && entries == 12 && configs == 8,
        format!(
            "listing round-trip {}, HAR {entries} entries -> {configs} configs",
            if first == second { "equal" } else { "differs" }
        ),
    )
}

fn determinism() -> Outcome {
    let run = || {
        let tmp = tempfile::tempdir().unwrap();
        let shared = tmp.path().join("shared");
        fs::create_dir_all(&shared).unwrap();
        let server = mock::serve(&shared, 0).unwrap();
        let config = write_mock_config(tmp.path(), &server.url());
        let mut args = fuzz_args(config, shared, SEED + 7);
        args.max_candidates = Some(4000);
        args.report = Some(tmp.path().join("report.jsonl"));
        args.candidate_log = Some(tmp.path().join("candidates.jsonl"));
        cmd_fuzz(&args).unwrap();
        let log = fs::read(tmp.path().join("candidates.jsonl")).unwrap();
        let alerts: BTreeMap<String, ()> = report_alerts(&tmp.path().join("report.jsonl"))
            .iter()
            .map(|a| (serde_json::to_string(a).unwrap(), ()))
            .collect();
        (log, alerts)
    };
    let (log_a, alerts_a) = run();
    let (log_b, alerts_b) = run();
    let lines = log_a.iter().filter(|&&b| b == b'\n').count();
    outcome(
        log_a == log_b && alerts_a == alerts_b && lines > 0,
        format!(
            "{lines} candidates, logs {}, {} alerts {}",
            if log_a == log_b { "identical" } else { "differ" },
            alerts_a.len(),
            if alerts_a == alerts_b { "identical" } else { "differ" }
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("end-to-end discovery on the mock target", end_to_end),
        ("coverage guidance beats random selection", guidance_superiority),
        ("mutator payload rates", mutator_rates),
        ("scoring matches set-difference oracle", scoring_oracle),
        ("multi-instance sync convergence", sync_convergence),
        ("detection rule matrix", detection_matrix),
        ("config round-trip and HAR conversion", config_round_trip),
        ("seeded runs are deterministic", determinism),
    ];
    let mut failures = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let result = check();
        if !result.pass {
            failures += 1;
        }
        println!(
            "{} {name}: {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
