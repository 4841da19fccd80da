use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::ServiceError;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    /// Model checkpoint; `/predict` and `/report` answer 503 without one.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Exported diagnostic set (JSONL).
    #[serde(default)]
    pub diagnostic: Option<PathBuf>,
    pub annotation_log: PathBuf,
    /// Known annotator ids. Empty accepts any id. The first two complete
    /// annotators in this order are compared in `/report`.
    #[serde(default)]
    pub annotators: Vec<String>,
}

fn default_listen() -> SocketAddr {
    "127.0.0.1:8080".parse().expect("static address")
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    /// Reads a TOML file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.checkpoint.as_mut().map(fix);
        cfg.diagnostic.as_mut().map(fix);
        fix(&mut cfg.annotation_log);
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_minimal_and_full() {
        let c = ServiceConfig::from_toml("annotation_log = \"a.jsonl\"").unwrap();
        assert_eq!(c.listen.port(), 8080);
        assert!(c.annotators.is_empty());
        let c = ServiceConfig::from_toml(
            "listen = \"0.0.0.0:9000\"\ncheckpoint = \"m.ckpt\"\ndiagnostic = \"d.jsonl\"\n\
             annotation_log = \"a.jsonl\"\nannotators = [\"a1\", \"a2\"]",
        )
        .unwrap();
        assert_eq!(c.listen.port(), 9000);
        assert_eq!(c.annotators, ["a1", "a2"]);
        assert!(ServiceConfig::from_toml("annotation_log = \"a\"\nbogus = 1").is_err());
    }
}
