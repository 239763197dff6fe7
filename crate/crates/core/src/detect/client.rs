use scraper::{ElementRef, Html};

use super::VulnCheckPolicy;
use crate::model::{
    Candidate, Confidence, Evidence, MarkerClass, MatchedParam, ResponseSummary, VulnAlert,
    VulnClass,
};

const EXCERPT_CONTEXT: usize = 80;
const REDIRECT_SCHEMES: [&str; 3] = ["http://", "https://", "ftp://"];

fn excerpt(text: &str, needle: &str) -> String {
    let Some(at) = text.find(needle) else {
        return String::new();
    };
    let mut start = at.saturating_sub(EXCERPT_CONTEXT);
    while !text.is_char_boundary(start) {
        start -= 1;
    }
    let mut end = (at + needle.len() + EXCERPT_CONTEXT).min(text.len());
    while !text.is_char_boundary(end) {
        end += 1;
    }
    text[start..end].to_string()
}

fn is_json(resp: &ResponseSummary) -> bool {
    resp.header("content-type").is_some_and(|ct| {
        let media = ct.split(';').next().unwrap_or("").trim().to_ascii_lowercase();
        media == "application/json" || media.ends_with("+json")
    })
}

/// Whether `token` sits somewhere in the parsed document where a browser
/// would treat it as code or markup rather than text.
pub(crate) fn token_is_executable(doc: &Html, token: &str) -> bool {
    doc.root_element()
        .descendants()
        .filter_map(ElementRef::wrap)
        .any(|el| {
            let e = el.value();
            if e.name().contains(token) {
                return true;
            }
            if e.name() == "script" && el.text().any(|t| t.contains(token)) {
                return true;
            }
            e.attrs().any(|(name, value)| {
                let name = name.to_ascii_lowercase();
                name.contains(token)
                    || (name.starts_with("on") && value.contains(token))
                    || ((name == "href" || name == "src")
                        && value.trim_start().to_ascii_lowercase().starts_with("javascript:")
                        && value.contains(token))
            })
        })
}

pub fn check_xss(c: &Candidate, policy: &VulnCheckPolicy) -> Vec<VulnAlert> {
    let Some(resp) = &c.response else {
        return Vec::new();
    };
    if policy.xss_respect_content_type && is_json(resp) {
        return Vec::new();
    }
    let body = resp.body_text();
    let markers: Vec<_> = c
        .markers
        .iter()
        .filter(|m| m.vuln_class == MarkerClass::Xss && body.contains(&m.token))
        .collect();
    if markers.is_empty() {
        return Vec::new();
    }
    let doc = Html::parse_document(&body);
    markers
        .into_iter()
        .filter(|m| token_is_executable(&doc, &m.token))
        .map(|m| VulnAlert {
            vuln_class: VulnClass::Xss,
            candidate_hash: c.hash(),
            evidence: Evidence::Response {
                status: resp.status,
                location: None,
                excerpt: excerpt(&body, &m.token),
            },
            matched_params: c
                .values
                .get(&m.param)
                .map(|v| MatchedParam {
                    location: m.param.location,
                    name: m.param.name.clone(),
                    value: v.clone(),
                })
                .into_iter()
                .collect(),
            confidence: Confidence::ConfirmedParamFlow,
        })
        .collect()
}

fn controls_location(value: &str, location: &str) -> bool {
    if location.starts_with(value) {
        return true;
    }
    let lower = value.to_ascii_lowercase();
    REDIRECT_SCHEMES.iter().any(|s| lower.starts_with(s)) && location.contains(value)
}

pub fn check_opre(c: &Candidate, policy: &VulnCheckPolicy) -> Vec<VulnAlert> {
    let Some(resp) = &c.response else {
        return Vec::new();
    };
    if !(300..=399).contains(&resp.status) {
        return Vec::new();
    }
    let Some(location) = resp.header("location") else {
        return Vec::new();
    };
    let matched: Vec<MatchedParam> = c
        .fuzz_values()
        .filter(|(_, v)| v.len() >= policy.min_fuzz_match_len && controls_location(v, location))
        .map(|(k, v)| MatchedParam {
            location: k.location,
            name: k.name.clone(),
            value: v.to_string(),
        })
        .collect();
    if matched.is_empty() {
        return Vec::new();
    }
    vec![VulnAlert {
        vuln_class: VulnClass::Opre,
        candidate_hash: c.hash(),
        evidence: Evidence::Response {
            status: resp.status,
            location: Some(location.to_string()),
            excerpt: String::new(),
        },
        matched_params: matched,
        confidence: Confidence::ConfirmedParamFlow,
    }]
}
