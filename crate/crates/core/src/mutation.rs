//! Seed expansion and parameter mutation.
//!
//! Ten generic mutators edit characters or digits at random positions. Three
//! special mutators plant payloads that the detectors look for later: a
//! protocol prefix for open redirects, a traversal fragment for path
//! traversal, and an XSS template carrying a fresh marker token.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AppliedMutation, Candidate, CandidateHash, EndpointConfig, MarkerClass, MarkerToken, ParamKey,
    ParamMode,
};
use crate::scheduler::GlobalCoverageStore;

/// Initial candidates beyond this are dropped in product order.
pub const MAX_INITIAL_CANDIDATES: usize = 1024;
/// Parameter values are never grown past this many bytes.
pub const MAX_VALUE_LEN: usize = 64 * 1024;

pub const PATR_PAYLOAD_RATE: f64 = 0.05;
pub const XSS_PAYLOAD_RATE: f64 = 1.0 / 20.0;
pub const PROTOCOL_PREFIX_RATE: f64 = 1.0 / 40.0;

pub const PROTOCOL_PREFIXES: [&str; 3] = ["http://", "https://", "ftp://"];
pub const PATR_PAYLOADS: [&str; 2] = ["../", "/etc/passwd"];
pub const XSS_TEMPLATES: [&str; 3] = [
    "<script>TOKEN()</script>",
    "\"><img src=x onerror=TOKEN()>",
    "'onmouseover='TOKEN()",
];

/// Longest slice copied by `DuplicateSlice`.
const MAX_DUPLICATE: usize = 64;

#[derive(Debug, Error, PartialEq)]
pub enum MutationError {
    #[error("endpoint config has no methods")]
    EmptyConfig,
    #[error("candidate has no fuzz parameters")]
    NoFuzzParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutatorKind {
    InsertChar,
    DeleteChar,
    ReplaceChar,
    SwapChars,
    InsertDigit,
    DeleteDigit,
    ReplaceDigit,
    SwapDigits,
    DuplicateSlice,
    TruncateTail,
    ProtocolPrefix,
    PatrPayload,
    XssPayload,
}

impl MutatorKind {
    pub const GENERIC: [MutatorKind; 10] = [
        MutatorKind::InsertChar,
        MutatorKind::DeleteChar,
        MutatorKind::ReplaceChar,
        MutatorKind::SwapChars,
        MutatorKind::InsertDigit,
        MutatorKind::DeleteDigit,
        MutatorKind::ReplaceDigit,
        MutatorKind::SwapDigits,
        MutatorKind::DuplicateSlice,
        MutatorKind::TruncateTail,
    ];

    pub const SPECIAL: [MutatorKind; 3] = [
        MutatorKind::ProtocolPrefix,
        MutatorKind::PatrPayload,
        MutatorKind::XssPayload,
    ];

    pub fn is_generic(self) -> bool {
        !self.is_special()
    }

    pub fn is_special(self) -> bool {
        Self::SPECIAL.contains(&self)
    }
}

/// Energy granted to one selected candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MutationBudget {
    pub energy: u32,
    pub rng_seed: u64,
}

impl MutationBudget {
    pub fn new(energy: u32, rng_seed: u64) -> Self {
        MutationBudget {
            energy: energy.max(1),
            rng_seed,
        }
    }
}

/// Result of applying one mutator to one value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mutated {
    pub value: String,
    /// Literal payload inserted by a special mutator.
    pub payload: Option<String>,
    /// Marker token embedded in an XSS payload.
    pub token: Option<String>,
}

impl Mutated {
    fn plain(value: String) -> Self {
        Mutated {
            value,
            payload: None,
            token: None,
        }
    }
}

/// Cartesian product of methods and seed choices.
pub fn expand_seeds(cfg: &Arc<EndpointConfig>) -> Result<Vec<Candidate>, MutationError> {
    if cfg.methods.is_empty() {
        return Err(MutationError::EmptyConfig);
    }
    let mut out = Vec::new();
    'methods: for &method in &cfg.methods {
        let slots: Vec<(ParamKey, &[String])> = cfg
            .groups_for(method)
            .flat_map(|(loc, g)| g.params.iter().map(move |p| (loc, p)))
            .filter(|(_, p)| p.mode != ParamMode::Login)
            .map(|(loc, p)| {
                let seeds: &[String] = match p.mode {
                    ParamMode::Fixed => &p.seeds[..1],
                    _ => &p.seeds,
                };
                (ParamKey::new(*loc, p.name.clone()), seeds)
            })
            .collect();

        let mut odometer = vec![0usize; slots.len()];
        loop {
            if out.len() >= MAX_INITIAL_CANDIDATES {
                break 'methods;
            }
            let values: BTreeMap<ParamKey, String> = slots
                .iter()
                .zip(&odometer)
                .map(|((key, seeds), &i)| (key.clone(), seeds[i].clone()))
                .collect();
            out.push(Candidate::new(cfg.clone(), method, values));

            // Last slot varies fastest.
            let mut i = slots.len();
            loop {
                if i == 0 {
                    continue 'methods;
                }
                i -= 1;
                odometer[i] += 1;
                if odometer[i] < slots[i].1.len() {
                    break;
                }
                odometer[i] = 0;
            }
        }
    }
    Ok(out)
}

fn random_printable<R: Rng + ?Sized>(rng: &mut R) -> char {
    // 0x20..=0x7e: printable ASCII, no CR/LF.
    rng.random_range(0x20u8..=0x7e) as char
}

fn random_digit<R: Rng + ?Sized>(rng: &mut R) -> char {
    rng.random_range(b'0'..=b'9') as char
}

fn digit_positions(chars: &[char]) -> Vec<usize> {
    chars
        .iter()
        .enumerate()
        .filter(|(_, c)| c.is_ascii_digit())
        .map(|(i, _)| i)
        .collect()
}

fn insert_at<R: Rng + ?Sized>(chars: &mut Vec<char>, insert: &str, rng: &mut R) {
    let at = rng.random_range(0..=chars.len());
    chars.splice(at..at, insert.chars());
}

/// Swaps two positions holding different characters; false if none exist.
fn swap_distinct<R: Rng + ?Sized>(chars: &mut [char], positions: &[usize], rng: &mut R) -> bool {
    let Some(&i) = positions.choose(rng) else {
        return false;
    };
    // If nothing differs from chars[i], every position holds the same char.
    let others: Vec<usize> = positions
        .iter()
        .copied()
        .filter(|&j| chars[j] != chars[i])
        .collect();
    match others.choose(rng) {
        Some(&j) => {
            chars.swap(i, j);
            true
        }
        None => false,
    }
}

fn fresh_token<R: Rng + ?Sized>(rng: &mut R) -> String {
    format!("fz{:08x}", rng.next_u32())
}

fn apply_generic<R: Rng + ?Sized>(value: &str, kind: MutatorKind, rng: &mut R) -> String {
    let mut chars: Vec<char> = value.chars().collect();
    match kind {
        MutatorKind::InsertChar => {
            let at = rng.random_range(0..=chars.len());
            chars.insert(at, random_printable(rng));
        }
        MutatorKind::DeleteChar => {
            if chars.is_empty() {
                return String::new();
            }
            let at = rng.random_range(0..chars.len());
            chars.remove(at);
        }
        MutatorKind::ReplaceChar => {
            if chars.is_empty() {
                return apply_generic(value, MutatorKind::InsertChar, rng);
            }
            let at = rng.random_range(0..chars.len());
            let old = chars[at];
            chars[at] = loop {
                let c = random_printable(rng);
                if c != old {
                    break c;
                }
            };
        }
        MutatorKind::SwapChars => {
            if chars.is_empty() {
                return String::new();
            }
            let all: Vec<usize> = (0..chars.len()).collect();
            if !swap_distinct(&mut chars, &all, rng) {
                return apply_generic(value, MutatorKind::ReplaceChar, rng);
            }
        }
        MutatorKind::InsertDigit => {
            let at = rng.random_range(0..=chars.len());
            chars.insert(at, random_digit(rng));
        }
        MutatorKind::DeleteDigit => {
            let digits = digit_positions(&chars);
            match digits.choose(rng) {
                Some(&at) => {
                    chars.remove(at);
                }
                None => return apply_generic(value, MutatorKind::DeleteChar, rng),
            }
        }
        MutatorKind::ReplaceDigit => {
            let digits = digit_positions(&chars);
            match digits.choose(rng) {
                Some(&at) => {
                    let old = chars[at];
                    chars[at] = loop {
                        let d = random_digit(rng);
                        if d != old {
                            break d;
                        }
                    };
                }
                None => return apply_generic(value, MutatorKind::ReplaceChar, rng),
            }
        }
        MutatorKind::SwapDigits => {
            let digits = digit_positions(&chars);
            if !swap_distinct(&mut chars, &digits, rng) {
                return apply_generic(value, MutatorKind::SwapChars, rng);
            }
        }
        MutatorKind::DuplicateSlice => {
            if chars.is_empty() {
                return apply_generic(value, MutatorKind::InsertChar, rng);
            }
            let start = rng.random_range(0..chars.len());
            let max_len = (chars.len() - start).min(MAX_DUPLICATE);
            let len = rng.random_range(1..=max_len);
            let slice: Vec<char> = chars[start..start + len].to_vec();
            let at = rng.random_range(0..=chars.len());
            chars.splice(at..at, slice);
        }
        MutatorKind::TruncateTail => {
            if chars.is_empty() {
                return apply_generic(value, MutatorKind::InsertChar, rng);
            }
            let keep = rng.random_range(0..chars.len());
            chars.truncate(keep);
        }
        MutatorKind::ProtocolPrefix | MutatorKind::PatrPayload | MutatorKind::XssPayload => {
            unreachable!("special mutators are handled by apply_mutator")
        }
    }
    chars.into_iter().collect()
}

/// Applies one mutator and reports any payload or marker it inserted.
pub fn apply_mutator<R: Rng + ?Sized>(value: &str, kind: MutatorKind, rng: &mut R) -> Mutated {
    let mut out = match kind {
        MutatorKind::ProtocolPrefix => {
            let prefix = *PROTOCOL_PREFIXES.choose(rng).expect("non-empty");
            Mutated {
                value: format!("{prefix}{value}"),
                payload: Some(prefix.to_string()),
                token: None,
            }
        }
        MutatorKind::PatrPayload => {
            let payload = *PATR_PAYLOADS.choose(rng).expect("non-empty");
            let mut chars: Vec<char> = value.chars().collect();
            insert_at(&mut chars, payload, rng);
            Mutated {
                value: chars.into_iter().collect(),
                payload: Some(payload.to_string()),
                token: None,
            }
        }
        MutatorKind::XssPayload => {
            let token = fresh_token(rng);
            let template = *XSS_TEMPLATES.choose(rng).expect("non-empty");
            let payload = template.replace("TOKEN", &token);
            let mut chars: Vec<char> = value.chars().collect();
            insert_at(&mut chars, &payload, rng);
            Mutated {
                value: chars.into_iter().collect(),
                payload: Some(payload),
                token: Some(token),
            }
        }
        generic => Mutated::plain(apply_generic(value, generic, rng)),
    };
    if out.value.len() > MAX_VALUE_LEN {
        let mut end = MAX_VALUE_LEN;
        while !out.value.is_char_boundary(end) {
            end -= 1;
        }
        out.value.truncate(end);
    }
    out
}

/// Mutates one parameter value.
pub fn mutate_param<R: Rng + ?Sized>(value: &str, kind: MutatorKind, rng: &mut R) -> String {
    apply_mutator(value, kind, rng).value
}

/// Draw order: path traversal, then XSS, then protocol prefix, then a
/// uniformly chosen generic mutator.
pub fn draw_kind<R: Rng + ?Sized>(rng: &mut R) -> MutatorKind {
    if rng.random_bool(PATR_PAYLOAD_RATE) {
        MutatorKind::PatrPayload
    } else if rng.random_bool(XSS_PAYLOAD_RATE) {
        MutatorKind::XssPayload
    } else if rng.random_bool(PROTOCOL_PREFIX_RATE) {
        MutatorKind::ProtocolPrefix
    } else {
        *MutatorKind::GENERIC.choose(rng).expect("non-empty")
    }
}

/// Fuzzable slots of a candidate grouped by location, with group weights.
fn fuzz_slots(parent: &Candidate) -> Vec<(f64, Vec<ParamKey>)> {
    parent
        .endpoint
        .groups_for(parent.method)
        .filter_map(|(loc, group)| {
            let keys: Vec<ParamKey> = group
                .params
                .iter()
                .filter(|p| p.mode == ParamMode::Fuzz)
                .map(|p| ParamKey::new(*loc, p.name.clone()))
                .filter(|k| parent.values.contains_key(k))
                .collect();
            (!keys.is_empty()).then_some((group.weight, keys))
        })
        .collect()
}

fn pick_group<'a, R: Rng + ?Sized>(
    groups: &'a [(f64, Vec<ParamKey>)],
    rng: &mut R,
) -> &'a [ParamKey] {
    let total: f64 = groups.iter().map(|(w, _)| *w).sum();
    if total <= 0.0 {
        return &groups[rng.random_range(0..groups.len())].1;
    }
    let mut roll = rng.random::<f64>() * total;
    for (weight, keys) in groups {
        if roll < *weight {
            return keys;
        }
        roll -= weight;
    }
    &groups.last().expect("non-empty").1
}

/// Produces up to `budget.energy` children of `parent`, one mutated
/// parameter each. Children already known to `dedup`, or duplicated within
/// this batch, are dropped rather than redrawn.
pub fn mutate_candidate(
    parent: &Candidate,
    budget: MutationBudget,
    dedup: &GlobalCoverageStore,
) -> Result<Vec<Candidate>, MutationError> {
    let groups = fuzz_slots(parent);
    if groups.is_empty() {
        return Err(MutationError::NoFuzzParams);
    }
    let parent_hash = parent.hash();
    let mut rng = ChaCha8Rng::seed_from_u64(budget.rng_seed);
    let mut batch: HashSet<CandidateHash> = HashSet::new();
    let mut children = Vec::with_capacity(budget.energy as usize);

    for _ in 0..budget.energy {
        let keys = pick_group(&groups, &mut rng);
        let key = keys[rng.random_range(0..keys.len())].clone();
        let kind = draw_kind(&mut rng);
        let old = &parent.values[&key];
        let mutated = apply_mutator(old, kind, &mut rng);
        if &mutated.value == old {
            continue;
        }

        let mut child = parent.clone();
        child.values.insert(key.clone(), mutated.value);
        child.feedback_id.clear();
        child.parent_hash = Some(parent_hash);
        child.score = 0;
        child.response = None;
        child.markers.retain(|m| {
            child
                .values
                .get(&m.param)
                .is_some_and(|v| v.contains(&m.token))
        });
        if let Some(token) = mutated.token {
            child.markers.push(MarkerToken {
                token,
                vuln_class: MarkerClass::Xss,
                param: key.clone(),
            });
        }
        child.mutation = Some(AppliedMutation {
            kind,
            param: key,
            payload: mutated.payload,
        });

        let hash = child.hash();
        if dedup.has_seen(&hash) || !batch.insert(hash) {
            continue;
        }
        children.push(child);
    }
    Ok(children)
}
