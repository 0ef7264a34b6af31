//! Client configuration.
//!
//! Read from `$AIBOMGEN_CONFIG`, else `$XDG_CONFIG_HOME/aibomgen/config.toml`,
//! else `~/.config/aibomgen/config.toml`. `AIBOMGEN_GATEWAY_URL`,
//! `AIBOMGEN_TOKEN` and `AIBOMGEN_PUBLIC_KEY` override the file; command-line
//! flags override both.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

pub const DEFAULT_GATEWAY_URL: &str = "http://127.0.0.1:8080";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub gateway_url: Option<String>,
    pub token: Option<String>,
    pub public_key: Option<PathBuf>,
}

pub fn default_path() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os("AIBOMGEN_CONFIG") {
        return Some(PathBuf::from(p));
    }
    if let Some(x) = std::env::var_os("XDG_CONFIG_HOME").filter(|x| !x.is_empty()) {
        return Some(PathBuf::from(x).join("aibomgen").join("config.toml"));
    }
    std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".config").join("aibomgen").join("config.toml"))
}

impl Config {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Missing files yield an empty config; unreadable or malformed ones are errors.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::from_toml(&text).with_context(|| format!("parsing {}", path.display())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e).with_context(|| format!("reading {}", path.display())),
        }
    }

    /// Layers environment variables over `self`.
    pub fn with_env(mut self) -> Self {
        if let Ok(v) = std::env::var("AIBOMGEN_GATEWAY_URL") {
            self.gateway_url = Some(v);
        }
        if let Ok(v) = std::env::var("AIBOMGEN_TOKEN") {
            self.token = Some(v);
        }
        if let Some(v) = std::env::var_os("AIBOMGEN_PUBLIC_KEY") {
            self.public_key = Some(v.into());
        }
        self
    }

    pub fn resolve(explicit: Option<&Path>) -> anyhow::Result<Self> {
        let file = match explicit.map(Path::to_path_buf).or_else(default_path) {
            Some(p) => Self::load(&p)?,
            None => Self::default(),
        };
        Ok(file.with_env())
    }

    pub fn gateway_url(&self) -> &str {
        self.gateway_url.as_deref().unwrap_or(DEFAULT_GATEWAY_URL)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_defaults() {
        let c = Config::from_toml("gateway_url = \"http://h:1\"\ntoken = \"t\"\npublic_key = \"/k.pem\"\n").unwrap();
        assert_eq!(c.gateway_url(), "http://h:1");
        assert_eq!(c.public_key.as_deref(), Some(Path::new("/k.pem")));
        assert_eq!(Config::default().gateway_url(), DEFAULT_GATEWAY_URL);
        assert!(Config::from_toml("tokn = \"typo\"").is_err());
    }

    #[test]
    fn missing_file_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(Config::load(&dir.path().join("absent.toml")).unwrap(), Config::default());
    }
}
