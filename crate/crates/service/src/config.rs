use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Settings for `study-serve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    /// Annotation log created by `study-init`.
    pub store: PathBuf,
    /// JSON object mapping reader id to session token.
    pub tokens: PathBuf,
    /// Built reader UI, served at `/` when set.
    pub ui_dir: Option<PathBuf>,
    /// Seed for per-reader presentation order, consumed when the study is
    /// initialised.
    pub presentation_seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
            store: PathBuf::from("study/annotations.jsonl"),
            tokens: PathBuf::from("study/tokens.json"),
            ui_dir: None,
            presentation_seed: 0,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }
}

/// Minimum token length in hex characters (128 bits).
pub const MIN_TOKEN_HEX: usize = 32;

/// Reader id to token, as written by `study-init`.
pub type TokenFile = BTreeMap<String, String>;

pub fn read_tokens(path: &Path) -> Result<TokenFile, ServiceError> {
    let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))
}

pub fn write_tokens(path: &Path, tokens: &TokenFile) -> Result<(), ServiceError> {
    let text = serde_json::to_string_pretty(tokens).expect("string map serializes");
    std::fs::write(path, text + "\n").map_err(|e| ServiceError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Inverts the token file into a token lookup, rejecting short or shared
/// tokens.
pub(crate) fn token_index(tokens: &TokenFile) -> Result<HashMap<String, String>, ServiceError> {
    let mut index = HashMap::with_capacity(tokens.len());
    for (reader, token) in tokens {
        if token.len() < MIN_TOKEN_HEX || !token.bytes().all(|c| c.is_ascii_hexdigit()) {
            return Err(ServiceError::Config(format!(
                "token for reader {reader} must be at least {MIN_TOKEN_HEX} hex characters"
            )));
        }
        if index.insert(token.clone(), reader.clone()).is_some() {
            return Err(ServiceError::Config(format!(
                "reader {reader} shares a token with another reader"
            )));
        }
    }
    Ok(index)
}
