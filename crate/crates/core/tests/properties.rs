use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::Arc;

use proptest::prelude::*;

use webphuzz_core::config::{config_to_json, parse_config};
use webphuzz_core::detect::{run_checks, PolicyMode, VulnCheckPolicy};
use webphuzz_core::mock;
use webphuzz_core::model::{
    candidate_hash, Candidate, EndpointConfig, FeedbackRecord, HookEvent, HttpMethod, Location,
    ParamKey, ParamSpec, ResponseSummary,
};
use webphuzz_core::mutation::{mutate_candidate, MutationBudget};
use webphuzz_core::request::{prepare_request, FEEDBACK_HEADER};
use webphuzz_core::scheduler::{score_candidate, CandidatePool, GlobalCoverageStore};
use webphuzz_core::tooling::har::{CapturedParam, CapturedRequest};
use webphuzz_core::tooling::hargen::{filter_endpoints, FilterOptions};

fn endpoint(fixed: &[(&str, &str)]) -> Arc<EndpointConfig> {
    let mut params = vec![
        ParamSpec::fuzz("m", &["fuzz"], Location::Query).unwrap(),
        ParamSpec::fuzz("d", &["fuzz"], Location::Query).unwrap(),
    ];
    for (k, v) in fixed {
        params.push(ParamSpec::fixed(k, v, Location::Query).unwrap());
    }
    Arc::new(EndpointConfig::new("http://127.0.0.1/vuln", vec![HttpMethod::Get]).with_group(
        Location::Query,
        params,
        1.0,
    ))
}

fn candidate_with(ep: Arc<EndpointConfig>, values: &[(&str, &str)]) -> Candidate {
    let values = values
        .iter()
        .map(|(k, v)| (ParamKey::new(Location::Query, *k), v.to_string()))
        .collect();
    Candidate::new(ep, HttpMethod::Get, values)
}

#[test]
fn single_byte_flips_never_collide() {
    let ep = endpoint(&[]);
    let base = "abcdefghijklmnopqrstuvwxyz0123456789ABCDEFGHIJ";
    let mut hashes = HashSet::new();
    hashes.insert(candidate_hash(&candidate_with(ep.clone(), &[("m", base), ("d", base)])));
    let mut variants = 1;
    'outer: for param in ["m", "d"] {
        for pos in 0..base.len() {
            for flip in 0..128u8 {
                let mut bytes = base.as_bytes().to_vec();
                let flipped = (bytes[pos] ^ flip) & 0x7f;
                if flipped == bytes[pos] {
                    continue;
                }
                bytes[pos] = flipped;
                let v = String::from_utf8(bytes).unwrap();
                let c = if param == "m" {
                    candidate_with(ep.clone(), &[("m", &v), ("d", base)])
                } else {
                    candidate_with(ep.clone(), &[("m", base), ("d", &v)])
                };
                assert!(hashes.insert(candidate_hash(&c)), "collision for {param}={v:?}");
                variants += 1;
                if variants >= 10_000 {
                    break 'outer;
                }
            }
        }
    }
    assert_eq!(hashes.len(), 10_000);
}

#[test]
fn gate_adds_coverage_for_every_second_char() {
    for ch in (b' '..=b'~').map(char::from) {
        let lines = |m: String| {
            let q = format!("m={}&d=fuzz", webphuzz_core::request::percent_encode(&m));
            mock::handle(mock::MOCK_PATH, &q, Some("id-1"))
                .feedback
                .unwrap()
                .coverage[mock::MOCK_FILE]
                .clone()
        };
        let gated = lines(format!("m{ch}"));
        let ungated = lines(format!("z{ch}"));
        assert!(gated.is_superset(&ungated) && gated.len() > ungated.len(), "{ch:?}");
    }
}

fn value() -> impl Strategy<Value = String> {
    prop_oneof![
        "[ -~]{0,12}",
        Just("fuzz".to_string()),
        Just("../etc/passwd".to_string()),
        "\\PC{0,6}",
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn hash_ignores_feedback_id_and_tracks_values(m in value(), d in value(), id in "[a-z0-9-]{1,20}") {
        let ep = endpoint(&[]);
        let c = candidate_with(ep.clone(), &[("m", &m), ("d", &d)]);
        let mut same = c.clone();
        same.feedback_id = id;
        prop_assert_eq!(c.hash(), same.hash());
        let reordered = candidate_with(ep.clone(), &[("d", &d), ("m", &m)]);
        prop_assert_eq!(c.hash(), reordered.hash());
        let changed = candidate_with(ep, &[("m", &format!("{m}x")), ("d", &d)]);
        prop_assert_ne!(c.hash(), changed.hash());
        let mut post = c.clone();
        post.method = HttpMethod::Post;
        prop_assert_ne!(c.hash(), post.hash());
    }

    #[test]
    fn mutation_invariants(m in value(), d in value(), energy in 1u32..50, seed: u64) {
        let ep = endpoint(&[("token", "fixed-value")]);
        let parent = candidate_with(ep, &[("m", &m), ("d", &d), ("token", "fixed-value")]);
        let store = GlobalCoverageStore::in_memory();
        let budget = MutationBudget::new(energy, seed);
        let children = mutate_candidate(&parent, budget, &store).unwrap();
        let again = mutate_candidate(&parent, budget, &store).unwrap();
        prop_assert_eq!(
            children.iter().map(|c| c.hash()).collect::<Vec<_>>(),
            again.iter().map(|c| c.hash()).collect::<Vec<_>>()
        );
        prop_assert!(children.len() <= energy as usize);
        let mut hashes = HashSet::new();
        for child in &children {
            prop_assert!(hashes.insert(child.hash()));
            prop_assert_eq!(child.parent_hash, Some(parent.hash()));
            prop_assert_eq!(child.value(Location::Query, "token"), Some("fixed-value"));
            let changed = parent
                .values
                .iter()
                .filter(|(k, v)| child.values.get(*k) != Some(*v))
                .count();
            prop_assert_eq!(changed, 1);
            let applied = child.mutation.as_ref().unwrap();
            let new_value = &child.values[&applied.param];
            if let Some(payload) = &applied.payload {
                prop_assert!(new_value.contains(payload.as_str()));
            }
            for marker in &child.markers {
                prop_assert!(child.values[&marker.param].contains(&marker.token));
            }
        }
    }

    #[test]
    fn dedup_snapshot_is_respected(seed: u64) {
        let ep = endpoint(&[]);
        let parent = candidate_with(ep, &[("m", "fuzz"), ("d", "fuzz")]);
        let mut store = GlobalCoverageStore::in_memory();
        let first = mutate_candidate(&parent, MutationBudget::new(20, seed), &store).unwrap();
        for c in &first {
            store.insert_hash(c.hash());
        }
        let second = mutate_candidate(&parent, MutationBudget::new(20, seed), &store).unwrap();
        prop_assert!(second.is_empty());
    }

    #[test]
    fn scoring_matches_set_difference(
        prior in proptest::collection::vec(proptest::collection::btree_map(0u8..4, proptest::collection::btree_set(1u32..20, 1..6), 0..4), 0..4),
        next in proptest::collection::btree_map(0u8..4, proptest::collection::btree_set(1u32..20, 1..6), 0..4),
    ) {
        let to_fb = |m: &BTreeMap<u8, BTreeSet<u32>>| {
            let mut fb = FeedbackRecord::empty("x");
            for (f, ls) in m {
                fb.coverage.insert(format!("f{f}.php"), ls.clone());
            }
            fb
        };
        let mut store = GlobalCoverageStore::in_memory();
        let mut files = BTreeSet::new();
        let mut lines = BTreeSet::new();
        let mut covered_before = 0;
        for p in &prior {
            score_candidate(&to_fb(p), &mut store);
            for (f, ls) in p {
                files.insert(*f);
                lines.extend(ls.iter().map(|l| (*f, *l)));
            }
            prop_assert!(store.covered_lines() >= covered_before);
            covered_before = store.covered_lines();
        }
        let new_files = next.keys().filter(|f| !files.contains(*f)).count() as u64;
        let new_lines = next
            .iter()
            .flat_map(|(f, ls)| ls.iter().map(move |l| (*f, *l)))
            .filter(|k| !lines.contains(k))
            .count() as u64;
        let report = score_candidate(&to_fb(&next), &mut store);
        prop_assert_eq!((report.new_files, report.new_lines), (new_files, new_lines));
        prop_assert_eq!(report.score, 10 * new_files + new_lines);
    }

    #[test]
    fn select_next_is_fifo_argmax(scores in proptest::collection::vec(0u64..20, 1..30)) {
        let ep = endpoint(&[]);
        let mut pool = CandidatePool::new();
        let ids: Vec<_> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| pool.insert(candidate_with(ep.clone(), &[("m", &i.to_string()), ("d", "x")]), *s))
            .collect();
        let max = *scores.iter().max().unwrap();
        let first = scores.iter().position(|s| *s == max).unwrap();
        prop_assert_eq!(pool.select_next().unwrap(), ids[first]);
    }

    #[test]
    fn prepared_request_carries_feedback_id(m in value(), d in value()) {
        let mut c = candidate_with(endpoint(&[]), &[("m", &m), ("d", &d)]);
        let id = c.assign_feedback_id().to_string();
        let a = prepare_request(&c).unwrap();
        let b = prepare_request(&c).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.header(FEEDBACK_HEADER), Some(id.as_str()));
    }

    #[test]
    fn param_based_never_alerts_without_fuzz_params(arg in "[ -~]{0,30}", err in "[ -~]{1,30}") {
        let ep = Arc::new(EndpointConfig::new("http://127.0.0.1/x", vec![HttpMethod::Get]).with_group(
            Location::Query,
            vec![ParamSpec::fixed("a", "fuzz", Location::Query).unwrap()],
            1.0,
        ));
        let mut c = candidate_with(ep, &[("a", "fuzz")]);
        c.response = Some(ResponseSummary {
            status: 302,
            headers: BTreeMap::from([("location".to_string(), "fuzz".to_string())]),
            body: b"fuzz".to_vec(),
            truncated: false,
        });
        let mut fb = FeedbackRecord::empty("x");
        for f in ["mysqli_query", "system", "unserialize", "fopen", "DOMDocument::loadXML"] {
            fb.hook_events.push(HookEvent::new(f, vec![arg.clone(), "flags=NOENT".into()]).with_error(err.clone()));
        }
        let policy = VulnCheckPolicy::default();
        prop_assert!(run_checks(&c, &fb, &policy).is_empty());
        let loose = VulnCheckPolicy::with_mode(PolicyMode::Default);
        prop_assert_eq!(run_checks(&c, &fb, &loose), run_checks(&c, &fb, &loose));
    }

    #[test]
    fn emitted_configs_reparse_equal(
        fuzz_names in proptest::collection::btree_set("[a-z][a-z0-9_]{0,6}", 1..4),
        fixed_names in proptest::collection::btree_set("[A-Z][A-Z0-9]{0,6}", 0..3),
        cookie in proptest::option::of("[a-z]{1,8}"),
        seeds in proptest::collection::vec("[ -~]{0,10}", 1..3),
        timeout in prop_oneof![Just(300.0), 1.0f64..1000.0],
    ) {
        let seed_refs: Vec<&str> = seeds.iter().map(String::as_str).collect();
        let mut params: Vec<ParamSpec> = fuzz_names
            .iter()
            .map(|n| ParamSpec::fuzz(n, &seed_refs, Location::Body).unwrap())
            .collect();
        params.extend(fixed_names.iter().map(|n| ParamSpec::fixed(n, "v", Location::Body).unwrap()));
        let mut cfg = EndpointConfig::new("http://web/app.php", vec![HttpMethod::Post])
            .with_group(Location::Body, params, 1.0);
        if let Some(name) = cookie {
            cfg = cfg.with_group(Location::Cookie, vec![ParamSpec::fixed(&name, "c", Location::Cookie).unwrap()], 0.0);
        }
        cfg.timeout_s = timeout;
        let first = config_to_json(&cfg);
        let parsed = parse_config(first.as_bytes()).unwrap();
        prop_assert_eq!(&parsed, &cfg);
        prop_assert_eq!(config_to_json(&parsed), first);
    }

    #[test]
    fn filter_keeps_parameterised_dynamic_requests(
        reqs in proptest::collection::vec(
            (
                prop_oneof![Just("php"), Just("css"), Just("png"), Just(""), Just("html")],
                "[a-z]{1,5}",
                proptest::collection::vec(("[a-z]{1,3}", prop_oneof![Just(Location::Query), Just(Location::Body), Just(Location::Cookie)]), 0..3),
                proptest::option::of(prop_oneof![Just("image/png"), Just("text/html"), Just("font/woff")]),
            ),
            0..15,
        )
    ) {
        let requests: Vec<CapturedRequest> = reqs
            .iter()
            .map(|(ext, stem, params, mime)| CapturedRequest {
                method: HttpMethod::Get,
                url: if ext.is_empty() { format!("http://web/{stem}") } else { format!("http://web/{stem}.{ext}") },
                params: params
                    .iter()
                    .map(|(n, l)| CapturedParam { location: *l, name: n.clone(), values: vec!["1".into()] })
                    .collect(),
                headers: Vec::new(),
                json_body: false,
                response_mime: mime.map(str::to_string),
            })
            .collect();
        let opts = FilterOptions::default();
        let kept = filter_endpoints(requests.clone(), &opts);
        let names = |r: &CapturedRequest| {
            r.params
                .iter()
                .filter(|p| p.location != Location::Cookie)
                .map(|p| (p.location, p.name.clone()))
                .collect::<BTreeSet<_>>()
        };
        for r in &requests {
            let dynamic = !opts.static_extensions.iter().any(|e| r.path().ends_with(e.as_str()));
            let has_params = r.params.iter().any(|p| p.location != Location::Cookie);
            if dynamic && has_params {
                prop_assert!(kept.iter().any(|k| k.path() == r.path() && names(k) == names(r)));
            }
        }
    }
}
