//! Shared inputs for the engine benchmarks.

use std::collections::BTreeSet;
use std::sync::Arc;

use webphuzz_core::model::{
    Candidate, EndpointConfig, FeedbackRecord, HookEvent, HttpMethod, Location, MarkerClass,
    MarkerToken, ParamKey, ParamSpec, ResponseSummary,
};

pub fn endpoint() -> Arc<EndpointConfig> {
    Arc::new(
        EndpointConfig::new("http://127.0.0.1/vuln", vec![HttpMethod::Get]).with_group(
            Location::Query,
            vec![
                ParamSpec::fuzz("m", &["fuzz"], Location::Query).unwrap(),
                ParamSpec::fuzz("d", &["fuzz"], Location::Query).unwrap(),
            ],
            1.0,
        ),
    )
}

pub fn candidate(m: &str, d: &str) -> Candidate {
    let values = [("m", m), ("d", d)]
        .into_iter()
        .map(|(k, v)| (ParamKey::new(Location::Query, k), v.to_string()))
        .collect();
    Candidate::new(endpoint(), HttpMethod::Get, values)
}

/// A feedback record covering `files` files of `lines` lines each.
pub fn feedback(files: usize, lines: u32) -> FeedbackRecord {
    let mut fb = FeedbackRecord::empty("1700000000-bench");
    for f in 0..files {
        fb.coverage
            .insert(format!("src/file{f}.php"), (1..=lines).collect::<BTreeSet<_>>());
    }
    fb.hook_events.push(
        HookEvent::new("mysqli_query", vec!["SELECT * FROM t WHERE id = 1'".into()])
            .with_error("You have an error in your SQL syntax"),
    );
    fb
}

pub fn feedback_json(files: usize, lines: u32) -> Vec<u8> {
    serde_json::to_vec(&feedback(files, lines)).unwrap()
}

/// A candidate whose marker appears inside a script element of a page of
/// roughly `padding` bytes.
pub fn xss_candidate(padding: usize) -> Candidate {
    let token = "fzdeadbeef";
    let payload = format!("<script>{token}()</script>");
    let mut c = candidate("mx", &payload);
    c.markers.push(MarkerToken {
        token: token.into(),
        vuln_class: MarkerClass::Xss,
        param: ParamKey::new(Location::Query, "d"),
    });
    let filler = "<p>lorem ipsum dolor sit amet</p>".repeat(padding / 32 + 1);
    let body = format!("<html><body>{filler}{payload}{filler}</body></html>");
    c.response = Some(ResponseSummary {
        status: 200,
        headers: [("content-type".to_string(), "text/html".to_string())].into(),
        body: body.into_bytes(),
        truncated: false,
    });
    c
}
