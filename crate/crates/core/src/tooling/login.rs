//! Running login profiles to obtain session cookies.

use std::io;
use std::path::Path;
use std::process::Command;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LoginError {
    #[error("invalid login profile name {0:?}")]
    InvalidProfile(String),
    #[error("login profile {profile} failed: {reason}")]
    LoginFailed { profile: String, reason: String },
    #[error("could not run login profile {profile}: {source}")]
    Spawn {
        profile: String,
        #[source]
        source: io::Error,
    },
}

/// Cookie lines (`name=value`) from a login program's output. Blank lines
/// and `#` comments are ignored.
pub fn parse_cookie_lines(stdout: &str) -> Vec<(String, String)> {
    stdout
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('='))
        .filter(|(k, _)| !k.trim().is_empty())
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Runs `<login_dir>/<profile>` and returns the cookies it printed.
pub fn run_login(
    profile: &str,
    login_dir: &Path,
    env: &[(String, String)],
) -> Result<Vec<(String, String)>, LoginError> {
    if profile.is_empty() || profile.contains(['/', '\\']) || profile == "." || profile == ".." {
        return Err(LoginError::InvalidProfile(profile.to_string()));
    }
    let output = Command::new(login_dir.join(profile))
        .envs(env.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .output()
        .map_err(|source| LoginError::Spawn {
            profile: profile.to_string(),
            source,
        })?;
    if !output.status.success() {
        return Err(LoginError::LoginFailed {
            profile: profile.to_string(),
            reason: format!(
                "exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            ),
        });
    }
    let cookies = parse_cookie_lines(&String::from_utf8_lossy(&output.stdout));
    if cookies.is_empty() {
        return Err(LoginError::LoginFailed {
            profile: profile.to_string(),
            reason: "no cookies printed".into(),
        });
    }
    Ok(cookies)
}
