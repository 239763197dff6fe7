//! Vulnerability checks over a candidate, its response and its feedback.
//!
//! Server-side classes (SQLi, RCE, path traversal, insecure
//! deserialization, XXE) look at hooked function calls reported by the
//! target. Client-side classes (XSS, open redirect) look at the response.

mod client;
mod server;

pub use client::{check_opre, check_xss};
pub use server::{
    check_ides, check_patr, check_rce, check_sqli, check_xxe, IDES_HOOKS, PATR_HOOKS, RCE_HOOKS,
    SQLI_HOOKS, XXE_HOOKS,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Candidate, Evidence, FeedbackRecord, MatchedParam, VulnAlert, VulnClass};

pub const DEFAULT_MIN_FUZZ_MATCH_LEN: usize = 4;

pub const DEFAULT_SHELL_ERROR_PATTERNS: [&str; 5] = [
    "syntax error",
    "not found",
    "No such file or directory",
    "Permission denied",
    "unexpected token",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    /// Server-side alerts need a fuzz value to reach the hooked call.
    #[default]
    ParamBased,
    /// Any failing hooked call alerts.
    Default,
}

impl std::str::FromStr for PolicyMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "param_based" => Ok(PolicyMode::ParamBased),
            "default" => Ok(PolicyMode::Default),
            other => Err(format!("unknown policy {other:?}")),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PolicyError {
    #[error("min_fuzz_match_len must be at least 1")]
    MatchLenZero,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VulnCheckPolicy {
    pub mode: PolicyMode,
    pub min_fuzz_match_len: usize,
    pub shell_error_patterns: Vec<String>,
    /// Skip XSS checks on JSON responses.
    pub xss_respect_content_type: bool,
}

impl Default for VulnCheckPolicy {
    fn default() -> Self {
        VulnCheckPolicy {
            mode: PolicyMode::ParamBased,
            min_fuzz_match_len: DEFAULT_MIN_FUZZ_MATCH_LEN,
            shell_error_patterns: DEFAULT_SHELL_ERROR_PATTERNS
                .iter()
                .map(|s| s.to_string())
                .collect(),
            xss_respect_content_type: false,
        }
    }
}

impl VulnCheckPolicy {
    pub fn with_mode(mode: PolicyMode) -> Self {
        VulnCheckPolicy {
            mode,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.min_fuzz_match_len == 0 {
            return Err(PolicyError::MatchLenZero);
        }
        Ok(())
    }

    pub fn param_based(&self) -> bool {
        self.mode == PolicyMode::ParamBased
    }
}

const TOKEN_SEPARATORS: &[char] = &[',', '(', ')', '=', ';', '&'];

/// Whether a fuzz value shows up in a hooked argument.
///
/// Values of at least `min_len` bytes match anywhere. Shorter values only
/// match as a whole token, so that e.g. `1'` is found in
/// `... WHERE id = 1'` but `1` is not found in `100`.
pub fn value_flows(value: &str, arg: &str, min_len: usize) -> bool {
    if value.is_empty() {
        return false;
    }
    if value.len() >= min_len {
        return arg.contains(value);
    }
    arg.split(|c: char| c.is_whitespace() || TOKEN_SEPARATORS.contains(&c))
        .any(|tok| tok == value)
}

/// Fuzz parameters of `c` whose values reach any of `args`.
pub fn matched_params(c: &Candidate, args: &[String], policy: &VulnCheckPolicy) -> Vec<MatchedParam> {
    c.fuzz_values()
        .filter(|(_, v)| {
            args.iter()
                .any(|a| value_flows(v, a, policy.min_fuzz_match_len))
        })
        .map(|(k, v)| MatchedParam {
            location: k.location,
            name: k.name.clone(),
            value: v.to_string(),
        })
        .collect()
}

/// One detection rule.
pub trait VulnCheck: Send + Sync {
    fn class(&self) -> VulnClass;
    fn check(&self, c: &Candidate, fb: &FeedbackRecord, policy: &VulnCheckPolicy) -> Vec<VulnAlert>;
}

struct FnCheck {
    class: VulnClass,
    f: fn(&Candidate, &FeedbackRecord, &VulnCheckPolicy) -> Vec<VulnAlert>,
}

impl VulnCheck for FnCheck {
    fn class(&self) -> VulnClass {
        self.class
    }

    fn check(&self, c: &Candidate, fb: &FeedbackRecord, policy: &VulnCheckPolicy) -> Vec<VulnAlert> {
        (self.f)(c, fb, policy)
    }
}

/// Runs every registered check on a candidate.
pub struct VulnChecker {
    checks: Vec<Box<dyn VulnCheck>>,
}

impl Default for VulnChecker {
    fn default() -> Self {
        Self::standard()
    }
}

impl VulnChecker {
    pub fn empty() -> Self {
        VulnChecker { checks: Vec::new() }
    }

    /// The seven built-in checks.
    pub fn standard() -> Self {
        let mut checker = Self::empty();
        let builtin: [(VulnClass, fn(&Candidate, &FeedbackRecord, &VulnCheckPolicy) -> Vec<VulnAlert>); 7] = [
            (VulnClass::Sqli, |c, fb, p| check_sqli(fb, c, p)),
            (VulnClass::Rce, |c, fb, p| check_rce(fb, c, p)),
            (VulnClass::Patr, |c, fb, p| check_patr(fb, c, p)),
            (VulnClass::Ides, |c, fb, p| check_ides(fb, c, p)),
            (VulnClass::Xxe, |c, fb, p| check_xxe(fb, c, p)),
            (VulnClass::Xss, |c, _, p| check_xss(c, p)),
            (VulnClass::Opre, |c, _, p| check_opre(c, p)),
        ];
        for (class, f) in builtin {
            checker.register(Box::new(FnCheck { class, f }));
        }
        checker
    }

    pub fn register(&mut self, check: Box<dyn VulnCheck>) {
        self.checks.push(check);
    }

    pub fn classes(&self) -> Vec<VulnClass> {
        self.checks.iter().map(|c| c.class()).collect()
    }

    pub fn run(&self, c: &Candidate, fb: &FeedbackRecord, policy: &VulnCheckPolicy) -> Vec<VulnAlert> {
        self.checks
            .iter()
            .flat_map(|check| check.check(c, fb, policy))
            .collect()
    }
}

pub fn run_checks(c: &Candidate, fb: &FeedbackRecord, policy: &VulnCheckPolicy) -> Vec<VulnAlert> {
    VulnChecker::standard().run(c, fb, policy)
}

/// PHP errors and uncaught exceptions, reported for information only.
pub fn informational(fb: &FeedbackRecord) -> Vec<Evidence> {
    fb.php_errors
        .iter()
        .cloned()
        .map(Evidence::PhpError)
        .chain(fb.php_exceptions.iter().cloned().map(Evidence::PhpException))
        .collect()
}
