use regex::Regex;
use std::sync::LazyLock;

use super::{matched_params, VulnCheckPolicy};
use crate::model::{
    Candidate, Confidence, Evidence, FeedbackRecord, HookEvent, MatchedParam, VulnAlert, VulnClass,
};

pub const SQLI_HOOKS: [&str; 4] = ["mysqli_query", "mysqli::query", "PDO::query", "PDO::exec"];
pub const RCE_HOOKS: [&str; 4] = ["shell_exec", "system", "passthru", "exec"];
pub const IDES_HOOKS: [&str; 1] = ["unserialize"];
pub const XXE_HOOKS: [&str; 2] = ["DOMDocument::load", "DOMDocument::loadXML"];
pub const PATR_HOOKS: [&str; 48] = [
    "chgrp",
    "chmod",
    "chown",
    "clearstatcache",
    "copy",
    "disk_free_space",
    "disk_total_space",
    "file_exists",
    "file_get_contents",
    "file_put_contents",
    "file",
    "fileatime",
    "filectime",
    "filegroup",
    "fileinode",
    "filemtime",
    "fileowner",
    "fileperms",
    "filesize",
    "filetype",
    "fnmatch",
    "fopen",
    "is_dir",
    "is_executable",
    "is_file",
    "is_link",
    "is_readable",
    "is_uploaded_file",
    "is_writable",
    "lchgrp",
    "lchown",
    "link",
    "linkinfo",
    "lstat",
    "mkdir",
    "move_uploaded_file",
    "parse_ini_file",
    "parse_ini_string",
    "readfile",
    "readlink",
    "realpath",
    "rename",
    "rmdir",
    "stat",
    "symlink",
    "tempnam",
    "touch",
    "unlink",
];

const TRAVERSAL_TOKENS: [&str; 2] = ["../", "/etc/"];
const NOENT_FLAG: &str = "NOENT";

static ENTITY_ERROR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)entit").unwrap());

fn is_hook(ev: &HookEvent, set: &[&str]) -> bool {
    set.iter().any(|h| h.eq_ignore_ascii_case(&ev.function))
}

fn alert(
    class: VulnClass,
    c: &Candidate,
    ev: &HookEvent,
    matched: Vec<MatchedParam>,
    confidence: Confidence,
) -> VulnAlert {
    VulnAlert {
        vuln_class: class,
        candidate_hash: c.hash(),
        evidence: Evidence::Hook(ev.clone()),
        matched_params: matched,
        confidence,
    }
}

fn flow_confidence(matched: &[MatchedParam]) -> Confidence {
    if matched.is_empty() {
        Confidence::Heuristic
    } else {
        Confidence::ConfirmedParamFlow
    }
}

/// Shared rule for classes that alert on a failing hooked call.
fn failing_calls(
    class: VulnClass,
    hooks: &[&str],
    fb: &FeedbackRecord,
    c: &Candidate,
    policy: &VulnCheckPolicy,
    failed: impl Fn(&HookEvent) -> bool,
) -> Vec<VulnAlert> {
    fb.hook_events
        .iter()
        .filter(|ev| is_hook(ev, hooks) && failed(ev))
        .filter_map(|ev| {
            let matched = matched_params(c, &ev.args, policy);
            if policy.param_based() && matched.is_empty() {
                return None;
            }
            let confidence = flow_confidence(&matched);
            Some(alert(class, c, ev, matched, confidence))
        })
        .collect()
}

pub fn check_sqli(fb: &FeedbackRecord, c: &Candidate, policy: &VulnCheckPolicy) -> Vec<VulnAlert> {
    failing_calls(VulnClass::Sqli, &SQLI_HOOKS, fb, c, policy, HookEvent::failed)
}

pub fn check_rce(fb: &FeedbackRecord, c: &Candidate, policy: &VulnCheckPolicy) -> Vec<VulnAlert> {
    let patterns: Vec<String> = policy
        .shell_error_patterns
        .iter()
        .map(|p| p.to_lowercase())
        .collect();
    failing_calls(VulnClass::Rce, &RCE_HOOKS, fb, c, policy, |ev| {
        ev.failure_texts().any(|t| {
            let t = t.to_lowercase();
            patterns.iter().any(|p| t.contains(p.as_str()))
        })
    })
}

pub fn check_ides(fb: &FeedbackRecord, c: &Candidate, policy: &VulnCheckPolicy) -> Vec<VulnAlert> {
    fb.hook_events
        .iter()
        .filter(|ev| is_hook(ev, &IDES_HOOKS))
        .filter_map(|ev| {
            let matched = matched_params(c, &ev.args, policy);
            let fires = if policy.param_based() {
                ev.failed() && !matched.is_empty()
            } else {
                ev.failed() || (ev.returned_false && !matched.is_empty())
            };
            fires.then(|| {
                let confidence = flow_confidence(&matched);
                alert(VulnClass::Ides, c, ev, matched, confidence)
            })
        })
        .collect()
}

fn has_noent(ev: &HookEvent) -> bool {
    ev.args.iter().any(|a| {
        a.strip_prefix("flags=")
            .is_some_and(|flags| flags.split('|').any(|f| f.trim() == NOENT_FLAG))
    })
}

pub fn check_xxe(fb: &FeedbackRecord, c: &Candidate, policy: &VulnCheckPolicy) -> Vec<VulnAlert> {
    fb.hook_events
        .iter()
        .filter(|ev| is_hook(ev, &XXE_HOOKS) && has_noent(ev))
        .filter_map(|ev| {
            let entity_error = ev.failure_texts().any(|t| ENTITY_ERROR.is_match(t));
            let declares = ev
                .args
                .iter()
                .any(|a| a.contains("<!ENTITY") || a.contains("<!DOCTYPE"));
            if !(entity_error || declares) {
                return None;
            }
            let matched = matched_params(c, &ev.args, policy);
            if policy.param_based() && matched.is_empty() {
                return None;
            }
            let confidence = flow_confidence(&matched);
            Some(alert(VulnClass::Xxe, c, ev, matched, confidence))
        })
        .collect()
}

pub fn check_patr(fb: &FeedbackRecord, c: &Candidate, policy: &VulnCheckPolicy) -> Vec<VulnAlert> {
    fb.hook_events
        .iter()
        .filter(|ev| is_hook(ev, &PATR_HOOKS))
        .filter_map(|ev| {
            let matched = matched_params(c, &ev.args, policy);
            let traversal = matched
                .iter()
                .any(|m| TRAVERSAL_TOKENS.iter().any(|t| m.value.contains(t)));
            let confidence = if traversal {
                Confidence::ConfirmedParamFlow
            } else {
                Confidence::Heuristic
            };
            let fires = if policy.param_based() {
                traversal || (ev.failed() && !matched.is_empty())
            } else {
                traversal || ev.failed() || !matched.is_empty()
            };
            fires.then(|| alert(VulnClass::Patr, c, ev, matched, confidence))
        })
        .collect()
}
