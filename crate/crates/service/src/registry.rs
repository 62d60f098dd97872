//! Content-addressed checkpoint store with a prompt → checkpoint mapping.
//!
//! Files live at `<root>/<id>.wsck` where `id` is the SHA-256 of the bytes.
//! Mappings are held in memory; the service journal makes them durable.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;
use wordsmith_core::amp::PolicyCheckpoint;
use wordsmith_core::checkpoint::{content_id, CheckpointError, Container};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("checkpoint {id}: {source}")]
    Invalid { id: String, source: CheckpointError },
    #[error("checkpoint {0} not found")]
    NotFound(String),
    #[error("checkpoint {id} is stored under the wrong id (content hashes to {actual})")]
    Mismatch { id: String, actual: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Mapping {
    pub prompt: String,
    pub id: String,
}

#[derive(Debug)]
pub struct Registry {
    root: PathBuf,
    map: BTreeMap<String, String>,
}

fn valid_id(id: &str) -> bool {
    id.len() == 64 && id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

impl Registry {
    pub fn open(root: &Path) -> Result<Self, RegistryError> {
        std::fs::create_dir_all(root).map_err(|source| RegistryError::Io { path: root.into(), source })?;
        Ok(Self { root: root.into(), map: BTreeMap::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.wsck"))
    }

    /// Validates and stores `bytes`, returning their id. Storing the same
    /// bytes again is a no-op.
    pub fn store(&self, bytes: &[u8]) -> Result<String, RegistryError> {
        let id = content_id(bytes);
        Container::from_bytes(bytes).map_err(|source| RegistryError::Invalid { id: id.clone(), source })?;
        let path = self.path_of(&id);
        if !path.exists() {
            // Write-then-rename so a crash never leaves a partial file under a valid id.
            let tmp = self.root.join(format!(".{id}.tmp"));
            let io = |source| RegistryError::Io { path: tmp.clone(), source };
            let mut f = std::fs::File::create(&tmp).map_err(io)?;
            f.write_all(bytes).map_err(io)?;
            f.sync_all().map_err(io)?;
            std::fs::rename(&tmp, &path).map_err(|source| RegistryError::Io { path: path.clone(), source })?;
        }
        Ok(id)
    }

    /// Stores `bytes` and points `prompt` at them, replacing any earlier
    /// mapping. The earlier file stays in the store.
    pub fn register(&mut self, prompt: &str, bytes: &[u8]) -> Result<String, RegistryError> {
        let id = self.store(bytes)?;
        self.map.insert(prompt.to_string(), id.clone());
        Ok(id)
    }

    /// Points `prompt` at an already stored checkpoint.
    pub fn bind(&mut self, prompt: &str, id: &str) -> Result<(), RegistryError> {
        if !self.contains(id) {
            return Err(RegistryError::NotFound(id.into()));
        }
        self.map.insert(prompt.to_string(), id.to_string());
        Ok(())
    }

    pub fn lookup(&self, prompt: &str) -> Option<&str> {
        self.map.get(prompt).map(String::as_str)
    }

    pub fn contains(&self, id: &str) -> bool {
        valid_id(id) && self.path_of(id).is_file()
    }

    /// Bytes of `id`, checked against both the container checksum and the id.
    pub fn fetch(&self, id: &str) -> Result<Vec<u8>, RegistryError> {
        if !valid_id(id) {
            return Err(RegistryError::NotFound(id.into()));
        }
        let path = self.path_of(id);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(RegistryError::NotFound(id.into())),
            Err(source) => return Err(RegistryError::Io { path, source }),
        };
        Container::from_bytes(&bytes).map_err(|source| RegistryError::Invalid { id: id.into(), source })?;
        let actual = content_id(&bytes);
        if actual != id {
            return Err(RegistryError::Mismatch { id: id.into(), actual });
        }
        Ok(bytes)
    }

    pub fn load(&self, id: &str) -> Result<PolicyCheckpoint, RegistryError> {
        let bytes = self.fetch(id)?;
        PolicyCheckpoint::from_bytes(&bytes).map_err(|source| RegistryError::Invalid { id: id.into(), source })
    }

    pub fn mappings(&self) -> Vec<Mapping> {
        self.map.iter().map(|(p, id)| Mapping { prompt: p.clone(), id: id.clone() }).collect()
    }

    /// Every id in the store, sorted.
    pub fn ids(&self) -> Result<Vec<String>, RegistryError> {
        let io = |source| RegistryError::Io { path: self.root.clone(), source };
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&self.root).map_err(io)? {
            let name = entry.map_err(io)?.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".wsck")) {
                if valid_id(id) {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }
}
