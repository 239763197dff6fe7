//! Reading requests out of HAR 1.2 captures.

use serde::Deserialize;
use thiserror::Error;
use url::Url;

use crate::model::{HttpMethod, Location};

#[derive(Debug, Error)]
pub enum HarError {
    #[error("invalid HAR: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Deserialize)]
struct Har {
    log: Log,
}

#[derive(Debug, Deserialize)]
struct Log {
    #[serde(default)]
    entries: Vec<Entry>,
}

#[derive(Debug, Deserialize)]
struct Entry {
    request: Request,
    #[serde(default)]
    response: Option<Response>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(default)]
struct NameValue {
    name: String,
    value: String,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Request {
    method: String,
    url: String,
    #[serde(default)]
    headers: Vec<NameValue>,
    #[serde(default)]
    query_string: Vec<NameValue>,
    #[serde(default)]
    cookies: Vec<NameValue>,
    #[serde(default)]
    post_data: Option<PostData>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct PostData {
    #[serde(default)]
    mime_type: String,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    params: Vec<NameValue>,
}

#[derive(Debug, Deserialize)]
struct Response {
    #[serde(default)]
    content: Option<Content>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Content {
    #[serde(default)]
    mime_type: Option<String>,
}

/// One parameter seen in a captured request, with every value observed
/// for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedParam {
    pub location: Location,
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapturedRequest {
    pub method: HttpMethod,
    /// URL without query string or fragment.
    pub url: String,
    pub params: Vec<CapturedParam>,
    pub headers: Vec<(String, String)>,
    pub json_body: bool,
    pub response_mime: Option<String>,
}

impl CapturedRequest {
    pub fn path(&self) -> String {
        Url::parse(&self.url)
            .map(|u| u.path().to_string())
            .unwrap_or_else(|_| self.url.clone())
    }

    pub fn params_at(&self, location: Location) -> impl Iterator<Item = &CapturedParam> {
        self.params.iter().filter(move |p| p.location == location)
    }

    fn push(&mut self, location: Location, name: &str, value: &str) {
        match self
            .params
            .iter_mut()
            .find(|p| p.location == location && p.name == name)
        {
            Some(p) => {
                if !p.values.iter().any(|v| v == value) {
                    p.values.push(value.to_string());
                }
            }
            None => self.params.push(CapturedParam {
                location,
                name: name.to_string(),
                values: vec![value.to_string()],
            }),
        }
    }
}

#[derive(Debug, Default)]
pub struct HarParse {
    pub requests: Vec<CapturedRequest>,
    pub warnings: Vec<String>,
}

fn json_scalar(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn convert(entry: Entry) -> Result<CapturedRequest, String> {
    let req = entry.request;
    let method: HttpMethod = req
        .method
        .parse()
        .map_err(|_| format!("unsupported method {} for {}", req.method, req.url))?;
    let mut url = Url::parse(&req.url).map_err(|_| format!("invalid url {}", req.url))?;
    let url_pairs: Vec<(String, String)> = url.query_pairs().into_owned().collect();
    url.set_query(None);
    url.set_fragment(None);

    let mut out = CapturedRequest {
        method,
        url: url.to_string(),
        params: Vec::new(),
        headers: req
            .headers
            .iter()
            .map(|h| (h.name.clone(), h.value.clone()))
            .collect(),
        json_body: false,
        response_mime: entry
            .response
            .and_then(|r| r.content)
            .and_then(|c| c.mime_type)
            .filter(|m| !m.is_empty()),
    };

    if req.query_string.is_empty() {
        for (k, v) in &url_pairs {
            out.push(Location::Query, k, v);
        }
    } else {
        for nv in &req.query_string {
            out.push(Location::Query, &nv.name, &nv.value);
        }
    }

    if let Some(post) = req.post_data {
        let mime = post.mime_type.split(';').next().unwrap_or("").trim().to_ascii_lowercase();
        let text = post.text.unwrap_or_default();
        match mime.as_str() {
            "application/json" => {
                let value: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|_| format!("unparseable JSON body for {}", req.url))?;
                let serde_json::Value::Object(map) = value else {
                    return Err(format!("non-object JSON body for {}", req.url));
                };
                for (k, v) in &map {
                    out.push(Location::Body, k, &json_scalar(v));
                }
                out.json_body = true;
            }
            "application/x-www-form-urlencoded" | "" => {
                if post.params.is_empty() {
                    for (k, v) in url::form_urlencoded::parse(text.as_bytes()) {
                        out.push(Location::Body, &k, &v);
                    }
                } else {
                    for nv in &post.params {
                        out.push(Location::Body, &nv.name, &nv.value);
                    }
                }
            }
            other => return Err(format!("unsupported body type {other} for {}", req.url)),
        }
    }

    if req.cookies.is_empty() {
        for (name, value) in &out.headers.clone() {
            if name.eq_ignore_ascii_case("cookie") {
                for pair in value.split(';') {
                    if let Some((k, v)) = pair.trim().split_once('=') {
                        out.push(Location::Cookie, k.trim(), v.trim());
                    }
                }
            }
        }
    } else {
        for nv in &req.cookies {
            out.push(Location::Cookie, &nv.name, &nv.value);
        }
    }
    Ok(out)
}

/// Parses a HAR file. Entries that cannot be fuzzed (unsupported body
/// types, unknown methods) are skipped with a warning.
pub fn parse_har(bytes: &[u8]) -> Result<HarParse, HarError> {
    let har: Har = serde_json::from_slice(bytes)?;
    let mut out = HarParse::default();
    for entry in har.log.entries {
        match convert(entry) {
            Ok(r) => out.requests.push(r),
            Err(w) => out.warnings.push(w),
        }
    }
    Ok(out)
}
