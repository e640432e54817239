use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rematch::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses a JSON config; errors name the offending field path.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        Error::Config {
            path: if field == "." { path.display().to_string() } else { field },
            message: e.into_inner().to_string(),
        }
    })
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// `<path>.<suffix>` next to `path`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Resolved configuration plus everything a command reads and writes.
#[derive(Serialize)]
pub struct RunManifest<'a, C: Serialize> {
    pub command: &'a str,
    pub tool_version: &'static str,
    pub seed: u64,
    pub config: &'a C,
    pub inputs: BTreeMap<&'a str, String>,
    pub artifacts: BTreeMap<&'a str, String>,
}

impl<'a, C: Serialize> RunManifest<'a, C> {
    pub fn new(command: &'a str, seed: u64, config: &'a C) -> Self {
        Self {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            inputs: BTreeMap::new(),
            artifacts: BTreeMap::new(),
        }
    }

    pub fn input(mut self, key: &'a str, path: &Path) -> Self {
        self.inputs.insert(key, path.display().to_string());
        self
    }

    pub fn artifact(mut self, key: &'a str, path: &Path) -> Self {
        self.artifacts.insert(key, path.display().to_string());
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        write(path, json.as_bytes())
    }
}
