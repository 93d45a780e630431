//! Plumbing shared by the external model clients.
//!
//! Every client (generator, repair model, text embedder, visual backbone)
//! runs in one of three modes: a live external runtime reached through a
//! [`CommandTransport`], replay of recorded fixtures, or a deterministic stub.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClientMode {
    Live,
    #[default]
    Replay,
    Stub,
}

impl std::str::FromStr for ClientMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(ClientMode::Live),
            "replay" | "fixture" => Ok(ClientMode::Replay),
            "stub" => Ok(ClientMode::Stub),
            other => Err(format!("unknown client mode {other:?}")),
        }
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    /// Neither a reachable runtime nor a recorded fixture exists.
    #[error("client unavailable: {0}")]
    Unavailable(String),
    /// No backend is configured, so the request is never attempted.
    #[error("client disabled: {0}")]
    Disabled(String),
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Delegates requests to an external program: the request is written to its
/// stdin and the response read from its stdout.
#[derive(Debug, Clone)]
pub struct CommandTransport {
    program: String,
    args: Vec<String>,
}

impl CommandTransport {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
        }
    }

    /// Parses a shell-like command line split on whitespace.
    pub fn from_command_line(line: &str) -> Option<Self> {
        let mut parts = line.split_whitespace().map(str::to_string);
        let program = parts.next()?;
        Some(Self::new(program, parts.collect()))
    }

    pub fn call(&self, request: &str) -> Result<String, ClientError> {
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| ClientError::Unavailable(format!("{}: {e}", self.program)))?;
        {
            let mut stdin = child.stdin.take().expect("stdin piped");
            stdin.write_all(request.as_bytes())?;
        }
        let out = child.wait_with_output()?;
        if !out.status.success() {
            return Err(ClientError::Unavailable(format!(
                "{} exited with {}: {}",
                self.program,
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        String::from_utf8(out.stdout).map_err(|e| ClientError::Protocol(e.to_string()))
    }
}

/// Hex SHA-256 of a request key; used to name fixture files.
pub fn fixture_key(input: &str) -> String {
    hex::encode(Sha256::digest(input.as_bytes()))
}

/// A recorded request/response pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureRecord {
    pub request: String,
    pub response: String,
}

/// Directory of `<key>.json` files each holding one [`FixtureRecord`].
#[derive(Debug, Clone)]
pub struct FixtureDir {
    root: PathBuf,
}

impl FixtureDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.json"))
    }

    pub fn load(&self, key: &str) -> Result<Option<FixtureRecord>, ClientError> {
        let path = self.path_for(key);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| ClientError::Protocol(format!("{}: {e}", path.display())))
    }

    pub fn store(&self, key: &str, record: &FixtureRecord) -> Result<(), ClientError> {
        std::fs::create_dir_all(&self.root)?;
        let text = serde_json::to_string_pretty(record).expect("record serializes");
        std::fs::write(self.path_for(key), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_transport_round_trips_stdin() {
        let t = CommandTransport::new("cat", vec![]);
        assert_eq!(t.call("hello").unwrap(), "hello");
    }

    #[test]
    fn missing_program_is_unavailable() {
        let t = CommandTransport::new("/nonexistent/model-runtime", vec![]);
        assert!(matches!(t.call("x"), Err(ClientError::Unavailable(_))));
    }

    #[test]
    fn fixture_dir_store_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let fx = FixtureDir::new(dir.path());
        let key = fixture_key("abc");
        assert!(fx.load(&key).unwrap().is_none());
        let rec = FixtureRecord {
            request: "abc".into(),
            response: "def".into(),
        };
        fx.store(&key, &rec).unwrap();
        assert_eq!(fx.load(&key).unwrap(), Some(rec));
    }

    #[test]
    fn parses_modes() {
        assert_eq!("stub".parse::<ClientMode>().unwrap(), ClientMode::Stub);
        assert!("bogus".parse::<ClientMode>().is_err());
    }
}
