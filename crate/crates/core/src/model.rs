//! Domain types shared by every stage of a campaign.
//!
//! Everything in here is a plain value object. Candidates hold their endpoint
//! behind an `Arc` so that children can be produced cheaply by the mutation
//! engine and handed between worker loops.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Upper bound for a single stringified hook argument.
pub const MAX_HOOK_ARG_BYTES: usize = 4096;

/// Default per-request timeout in seconds.
pub const DEFAULT_TIMEOUT_S: f64 = 300.0;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter name {name:?} for {location}")]
    InvalidParamName { name: String, location: Location },
    #[error("fixed parameter {0:?} must have exactly one seed value")]
    FixedSeedCount(String),
    #[error("fuzz parameter {0:?} has no seed values")]
    MissingSeeds(String),
    #[error("login parameter {0:?} must be a cookie")]
    LoginOutsideCookies(String),
    #[error("unsupported HTTP method {0:?}")]
    UnsupportedMethod(String),
    #[error("target url {0:?} is not an absolute http(s) URL")]
    InvalidTarget(String),
    #[error("endpoint has no methods")]
    NoMethods,
    #[error("group weight {weight} for {location} outside [0, 1]")]
    WeightOutOfRange { location: Location, weight: f64 },
    #[error("weights of fuzzable groups sum to {0}, expected 1.0")]
    WeightSum(f64),
    #[error("timeout must be positive, got {0}")]
    InvalidTimeout(f64),
    #[error("invalid candidate hash {0:?}")]
    InvalidHash(String),
}

/// Where a parameter travels in the HTTP request.
///
/// The declaration order is the canonical order used for hashing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    Query,
    Body,
    Cookie,
    Header,
}

impl Location {
    pub const ALL: [Location; 4] = [
        Location::Query,
        Location::Body,
        Location::Cookie,
        Location::Header,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Location::Query => "query",
            Location::Body => "body",
            Location::Cookie => "cookie",
            Location::Header => "header",
        }
    }
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamMode {
    Fixed,
    Fuzz,
    Login,
}

/// A named request parameter together with its seed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub seeds: Vec<String>,
    pub mode: ParamMode,
    pub location: Location,
}

impl ParamSpec {
    pub fn new(
        name: impl Into<String>,
        seeds: Vec<String>,
        mode: ParamMode,
        location: Location,
    ) -> Result<Self, ModelError> {
        let spec = ParamSpec {
            name: name.into(),
            seeds,
            mode,
            location,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn fixed(name: &str, value: &str, location: Location) -> Result<Self, ModelError> {
        Self::new(name, vec![value.to_string()], ParamMode::Fixed, location)
    }

    pub fn fuzz(name: &str, seeds: &[&str], location: Location) -> Result<Self, ModelError> {
        let seeds = seeds.iter().map(|s| s.to_string()).collect();
        Self::new(name, seeds, ParamMode::Fuzz, location)
    }

    pub fn login(name: &str) -> Result<Self, ModelError> {
        Self::new(name, Vec::new(), ParamMode::Login, Location::Cookie)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !is_legal_name(&self.name, self.location) {
            return Err(ModelError::InvalidParamName {
                name: self.name.clone(),
                location: self.location,
            });
        }
        match self.mode {
            ParamMode::Fixed if self.seeds.len() != 1 => {
                Err(ModelError::FixedSeedCount(self.name.clone()))
            }
            ParamMode::Fuzz if self.seeds.is_empty() => {
                Err(ModelError::MissingSeeds(self.name.clone()))
            }
            ParamMode::Login if self.location != Location::Cookie => {
                Err(ModelError::LoginOutsideCookies(self.name.clone()))
            }
            _ => Ok(()),
        }
    }
}

/// RFC 7230 `tchar`.
fn is_tchar(c: char) -> bool {
    c.is_ascii_alphanumeric() || "!#$%&'*+-.^_`|~".contains(c)
}

fn is_legal_name(name: &str, location: Location) -> bool {
    if name.is_empty() {
        return false;
    }
    match location {
        Location::Header | Location::Cookie => name.chars().all(is_tchar),
        // Query and body names are percent-encoded on the wire; only forbid
        // control characters.
        Location::Query | Location::Body => !name.chars().any(|c| c.is_control()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum HttpMethod {
    #[serde(rename = "GET")]
    Get,
    #[serde(rename = "POST")]
    Post,
    #[serde(rename = "PUT")]
    Put,
    #[serde(rename = "DELETE")]
    Delete,
    #[serde(rename = "OPTIONS")]
    Options,
    #[serde(rename = "TRACE")]
    Trace,
    #[serde(rename = "HEAD")]
    Head,
    #[serde(rename = "PATCH")]
    Patch,
}

impl HttpMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            HttpMethod::Get => "GET",
            HttpMethod::Post => "POST",
            HttpMethod::Put => "PUT",
            HttpMethod::Delete => "DELETE",
            HttpMethod::Options => "OPTIONS",
            HttpMethod::Trace => "TRACE",
            HttpMethod::Head => "HEAD",
            HttpMethod::Patch => "PATCH",
        }
    }

    /// Body parameters are only sent with these methods.
    pub fn carries_body(self) -> bool {
        matches!(self, HttpMethod::Post | HttpMethod::Put | HttpMethod::Delete)
    }
}

impl fmt::Display for HttpMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HttpMethod {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "GET" => HttpMethod::Get,
            "POST" => HttpMethod::Post,
            "PUT" => HttpMethod::Put,
            "DELETE" => HttpMethod::Delete,
            "OPTIONS" => HttpMethod::Options,
            "TRACE" => HttpMethod::Trace,
            "HEAD" => HttpMethod::Head,
            "PATCH" => HttpMethod::Patch,
            _ => return Err(ModelError::UnsupportedMethod(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamGroup {
    pub params: Vec<ParamSpec>,
    pub weight: f64,
}

impl ParamGroup {
    pub fn has_fuzz_params(&self) -> bool {
        self.params.iter().any(|p| p.mode == ParamMode::Fuzz)
    }
}

/// Everything the fuzzer needs to know about one endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub target_url: String,
    pub methods: Vec<HttpMethod>,
    pub param_groups: BTreeMap<Location, ParamGroup>,
    pub login_profile: Option<String>,
    pub timeout_s: f64,
    pub coverage_path_constraint: Option<String>,
}

impl EndpointConfig {
    pub fn new(target_url: impl Into<String>, methods: Vec<HttpMethod>) -> Self {
        EndpointConfig {
            target_url: target_url.into(),
            methods,
            param_groups: BTreeMap::new(),
            login_profile: None,
            timeout_s: DEFAULT_TIMEOUT_S,
            coverage_path_constraint: None,
        }
    }

    pub fn with_group(mut self, location: Location, params: Vec<ParamSpec>, weight: f64) -> Self {
        self.param_groups
            .insert(location, ParamGroup { params, weight });
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let url = url::Url::parse(&self.target_url)
            .map_err(|_| ModelError::InvalidTarget(self.target_url.clone()))?;
        if !matches!(url.scheme(), "http" | "https") || url.host_str().is_none() {
            return Err(ModelError::InvalidTarget(self.target_url.clone()));
        }
        if self.methods.is_empty() {
            return Err(ModelError::NoMethods);
        }
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(ModelError::InvalidTimeout(self.timeout_s));
        }
        for (location, group) in &self.param_groups {
            if !(0.0..=1.0).contains(&group.weight) {
                return Err(ModelError::WeightOutOfRange {
                    location: *location,
                    weight: group.weight,
                });
            }
            for param in &group.params {
                param.validate()?;
                if param.location != *location {
                    return Err(ModelError::InvalidParamName {
                        name: param.name.clone(),
                        location: *location,
                    });
                }
            }
        }
        let fuzzable: Vec<f64> = self
            .param_groups
            .values()
            .filter(|g| g.has_fuzz_params())
            .map(|g| g.weight)
            .collect();
        if fuzzable.len() > 1 {
            let sum: f64 = fuzzable.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(ModelError::WeightSum(sum));
            }
        }
        Ok(())
    }

    /// Path component of the target URL, used in the canonical hash.
    pub fn path(&self) -> String {
        url::Url::parse(&self.target_url)
            .map(|u| u.path().to_string())
            .unwrap_or_else(|_| self.target_url.clone())
    }

    pub fn params(&self) -> impl Iterator<Item = &ParamSpec> {
        self.param_groups.values().flat_map(|g| g.params.iter())
    }

    /// Groups whose parameters are sent with `method`.
    pub fn groups_for(&self, method: HttpMethod) -> impl Iterator<Item = (&Location, &ParamGroup)> {
        self.param_groups
            .iter()
            .filter(move |(loc, _)| **loc != Location::Body || method.carries_body())
    }

    pub fn mode_of(&self, key: &ParamKey) -> Option<ParamMode> {
        self.param_groups
            .get(&key.location)?
            .params
            .iter()
            .find(|p| p.name == key.name)
            .map(|p| p.mode)
    }

    pub fn has_fuzz_params(&self) -> bool {
        self.params().any(|p| p.mode == ParamMode::Fuzz)
    }
}

/// Identifies one parameter slot of a candidate.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamKey {
    pub location: Location,
    pub name: String,
}

impl ParamKey {
    pub fn new(location: Location, name: impl Into<String>) -> Self {
        ParamKey {
            location,
            name: name.into(),
        }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.location, self.name)
    }
}

/// SHA-256 digest identifying a candidate's request semantics.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CandidateHash(pub [u8; 32]);

impl CandidateHash {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for CandidateHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for CandidateHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CandidateHash({})", self.to_hex())
    }
}

impl FromStr for CandidateHash {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut out = [0u8; 32];
        if s.len() != 64 {
            return Err(ModelError::InvalidHash(s.to_string()));
        }
        hex::decode_to_slice(s, &mut out).map_err(|_| ModelError::InvalidHash(s.to_string()))?;
        Ok(CandidateHash(out))
    }
}

impl Serialize for CandidateHash {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for CandidateHash {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerClass {
    Xss,
    Patr,
    Opre,
}

/// A unique token planted by a special mutator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerToken {
    pub token: String,
    pub vuln_class: MarkerClass,
    pub param: ParamKey,
}

impl MarkerToken {
    pub fn is_well_formed(token: &str) -> bool {
        token.len() == 10
            && token.starts_with("fz")
            && token[2..]
                .bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
    }
}

/// Status, headers and (possibly truncated) body of a response.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResponseSummary {
    pub status: u16,
    /// Header names are stored lowercase; repeated headers are joined with ", ".
    pub headers: BTreeMap<String, String>,
    #[serde(with = "lossy_body")]
    pub body: Vec<u8>,
    #[serde(default)]
    pub truncated: bool,
}

impl ResponseSummary {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .get(&name.to_ascii_lowercase())
            .map(String::as_str)
    }

    pub fn body_text(&self) -> std::borrow::Cow<'_, str> {
        String::from_utf8_lossy(&self.body)
    }
}

mod lossy_body {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(body: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&String::from_utf8_lossy(body))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(String::deserialize(d)?.into_bytes())
    }
}

/// The mutation that produced a candidate from its parent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedMutation {
    pub kind: crate::mutation::MutatorKind,
    pub param: ParamKey,
    /// Payload inserted by a special mutator.
    pub payload: Option<String>,
}

/// One concrete, fully resolved HTTP request to fuzz.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub endpoint: Arc<EndpointConfig>,
    pub method: HttpMethod,
    pub values: BTreeMap<ParamKey, String>,
    pub feedback_id: String,
    pub parent_hash: Option<CandidateHash>,
    pub score: u64,
    pub markers: Vec<MarkerToken>,
    pub mutation: Option<AppliedMutation>,
    pub response: Option<ResponseSummary>,
}

impl Candidate {
    pub fn new(
        endpoint: Arc<EndpointConfig>,
        method: HttpMethod,
        values: BTreeMap<ParamKey, String>,
    ) -> Self {
        Candidate {
            endpoint,
            method,
            values,
            feedback_id: String::new(),
            parent_hash: None,
            score: 0,
            markers: Vec::new(),
            mutation: None,
            response: None,
        }
    }

    pub fn value(&self, location: Location, name: &str) -> Option<&str> {
        self.values
            .get(&ParamKey::new(location, name))
            .map(String::as_str)
    }

    /// Current values of every fuzz parameter.
    pub fn fuzz_values(&self) -> impl Iterator<Item = (&ParamKey, &str)> {
        self.values.iter().filter_map(|(k, v)| {
            (self.endpoint.mode_of(k) == Some(ParamMode::Fuzz)).then_some((k, v.as_str()))
        })
    }

    /// Canonical digest of method, path and non-login parameters.
    pub fn hash(&self) -> CandidateHash {
        candidate_hash(self)
    }

    /// Assigns a fresh `<unix-timestamp>-<UUIDv4>` feedback id.
    pub fn assign_feedback_id(&mut self) -> &str {
        self.feedback_id = new_feedback_id();
        &self.feedback_id
    }
}

pub fn new_feedback_id() -> String {
    format!(
        "{}-{}",
        chrono::Utc::now().timestamp(),
        uuid::Uuid::new_v4()
    )
}

/// `%`, `&`, `=` and line breaks would make the joined form ambiguous.
fn push_escaped(out: &mut String, s: &str) {
    for c in s.chars() {
        match c {
            '%' => out.push_str("%25"),
            '&' => out.push_str("%26"),
            '=' => out.push_str("%3D"),
            '\n' => out.push_str("%0A"),
            '\r' => out.push_str("%0D"),
            _ => out.push(c),
        }
    }
}

/// The byte string that [`candidate_hash`] digests.
pub fn canonical_form(c: &Candidate) -> String {
    let mut out = String::new();
    out.push_str(c.method.as_str());
    out.push('\n');
    out.push_str(&c.endpoint.path());
    for location in Location::ALL {
        let mut pairs: Vec<String> = c
            .values
            .iter()
            .filter(|(k, _)| k.location == location)
            .filter(|(k, _)| c.endpoint.mode_of(k) != Some(ParamMode::Login))
            .map(|(k, v)| {
                let mut pair = String::with_capacity(k.name.len() + v.len() + 1);
                push_escaped(&mut pair, &k.name);
                pair.push('=');
                push_escaped(&mut pair, v);
                pair
            })
            .collect();
        pairs.sort();
        out.push('\n');
        out.push_str(&pairs.join("&"));
    }
    out
}

/// SHA-256 over [`canonical_form`]; ignores feedback id, score and lineage.
pub fn candidate_hash(c: &Candidate) -> CandidateHash {
    let digest = Sha256::digest(canonical_form(c).as_bytes());
    CandidateHash(digest.into())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookException {
    pub class: String,
    pub message: String,
}

/// One call to an instrumented PHP function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookEvent {
    pub function: String,
    #[serde(default, deserialize_with = "truncated_args")]
    pub args: Vec<String>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub exception: Option<HookException>,
    #[serde(default)]
    pub returned_false: bool,
}

impl HookEvent {
    pub fn new(function: &str, args: Vec<String>) -> Self {
        HookEvent {
            function: function.to_string(),
            args: args.into_iter().map(truncate_arg).collect(),
            error: None,
            exception: None,
            returned_false: false,
        }
    }

    pub fn with_error(mut self, error: impl Into<String>) -> Self {
        self.error = Some(error.into());
        self
    }

    pub fn failed(&self) -> bool {
        self.error.is_some() || self.exception.is_some()
    }

    /// Error text and exception message, whichever are present.
    pub fn failure_texts(&self) -> impl Iterator<Item = &str> {
        self.error
            .as_deref()
            .into_iter()
            .chain(self.exception.as_ref().map(|e| e.message.as_str()))
    }
}

pub fn truncate_arg(mut arg: String) -> String {
    if arg.len() > MAX_HOOK_ARG_BYTES {
        let mut end = MAX_HOOK_ARG_BYTES;
        while !arg.is_char_boundary(end) {
            end -= 1;
        }
        arg.truncate(end);
    }
    arg
}

fn truncated_args<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    let args = Vec::<String>::deserialize(d)?;
    Ok(args.into_iter().map(truncate_arg).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhpError {
    pub message: String,
    pub file: String,
    pub line: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhpException {
    pub class: String,
    pub message: String,
    pub file: String,
    pub line: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    #[default]
    Normal,
    Exit,
    Error,
    Shutdown,
}

/// Parsed contents of one `<ID>.json` feedback file.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub id: String,
    pub coverage: BTreeMap<String, BTreeSet<u32>>,
    #[serde(rename = "hooks")]
    pub hook_events: Vec<HookEvent>,
    pub php_errors: Vec<PhpError>,
    pub php_exceptions: Vec<PhpException>,
    pub termination: Termination,
}

impl FeedbackRecord {
    pub fn empty(id: impl Into<String>) -> Self {
        FeedbackRecord {
            id: id.into(),
            ..Default::default()
        }
    }

    pub fn covered_lines(&self) -> usize {
        self.coverage.values().map(BTreeSet::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VulnClass {
    Sqli,
    Rce,
    Patr,
    Ides,
    Xxe,
    Xss,
    Opre,
}

impl VulnClass {
    pub const ALL: [VulnClass; 7] = [
        VulnClass::Sqli,
        VulnClass::Rce,
        VulnClass::Patr,
        VulnClass::Ides,
        VulnClass::Xxe,
        VulnClass::Xss,
        VulnClass::Opre,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VulnClass::Sqli => "sqli",
            VulnClass::Rce => "rce",
            VulnClass::Patr => "patr",
            VulnClass::Ides => "ides",
            VulnClass::Xxe => "xxe",
            VulnClass::Xss => "xss",
            VulnClass::Opre => "opre",
        }
    }
}

impl fmt::Display for VulnClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    ConfirmedParamFlow,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MatchedParam {
    pub location: Location,
    pub name: String,
    pub value: String,
}

/// What triggered an alert.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    Hook(HookEvent),
    Response {
        status: u16,
        location: Option<String>,
        excerpt: String,
    },
    PhpError(PhpError),
    PhpException(PhpException),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnAlert {
    pub vuln_class: VulnClass,
    pub candidate_hash: CandidateHash,
    pub evidence: Evidence,
    pub matched_params: Vec<MatchedParam>,
    pub confidence: Confidence,
}
