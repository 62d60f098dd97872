//! Versioned checkpoint container.
//!
//! ```text
//! magic      b"WSCK"
//! u32 LE     header length H
//! H bytes    JSON header (format version, component tag, blob table, metadata)
//! blobs      concatenated in header order
//! 32 bytes   SHA-256 of everything above
//! ```
//!
//! Weight blobs use the `WNN1` layout; their hidden activation is recorded
//! in the blob table.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::motion::hex_digest;
use crate::nn::{read_wnn, write_wnn, Activation, Mlp, NnError};

pub const MAGIC: &[u8; 4] = b"WSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("checksum mismatch")]
    Checksum,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("expected component {expected:?}, found {found:?}")]
    Component { expected: String, found: String },
    #[error("missing blob {0:?}")]
    MissingBlob(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub len: u64,
    /// Hidden activation code for `WNN1` blobs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub component: String,
    pub blobs: Vec<BlobEntry>,
    pub meta: serde_json::Value,
}

/// Decoded container: header metadata plus named blobs.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub component: String,
    pub meta: serde_json::Value,
    blobs: Vec<(BlobEntry, Vec<u8>)>,
}

impl Container {
    pub fn new(component: &str, meta: serde_json::Value) -> Self {
        Self { component: component.into(), meta, blobs: Vec::new() }
    }

    pub fn push_blob(&mut self, name: &str, bytes: Vec<u8>) {
        let entry = BlobEntry { name: name.into(), len: bytes.len() as u64, activation: None };
        self.blobs.push((entry, bytes));
    }

    pub fn push_net(&mut self, name: &str, net: &Mlp) {
        let bytes = write_wnn(net);
        let entry =
            BlobEntry { name: name.into(), len: bytes.len() as u64, activation: Some(net.hidden_activation().code()) };
        self.blobs.push((entry, bytes));
    }

    pub fn blob_names(&self) -> Vec<&str> {
        self.blobs.iter().map(|(e, _)| e.name.as_str()).collect()
    }

    pub fn blob(&self, name: &str) -> Result<&[u8], CheckpointError> {
        self.blobs
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(_, b)| b.as_slice())
            .ok_or_else(|| CheckpointError::MissingBlob(name.into()))
    }

    pub fn net(&self, name: &str) -> Result<Mlp, CheckpointError> {
        let (entry, bytes) =
            self.blobs.iter().find(|(e, _)| e.name == name).ok_or_else(|| CheckpointError::MissingBlob(name.into()))?;
        let act = entry
            .activation
            .and_then(Activation::from_code)
            .ok_or_else(|| CheckpointError::Format(format!("blob {name:?} has no activation")))?;
        Ok(read_wnn(bytes, act)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            component: self.component.clone(),
            blobs: self.blobs.iter().map(|(e, _)| e.clone()).collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + self.blobs.iter().map(|(_, b)| b.len()).sum::<usize>() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, b) in &self.blobs {
            out.extend_from_slice(b);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 + 32 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Format("bad magic or truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let hlen = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes")) as usize;
        let json = body.get(8..8 + hlen).ok_or_else(|| CheckpointError::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version(header.format_version));
        }
        let mut pos = 8 + hlen;
        let mut blobs = Vec::with_capacity(header.blobs.len());
        for e in header.blobs {
            let end = usize::try_from(e.len).ok().and_then(|l| pos.checked_add(l)).filter(|&end| end <= body.len());
            let end = end.ok_or_else(|| CheckpointError::Format(format!("blob {:?} overruns file", e.name)))?;
            blobs.push((e, body[pos..end].to_vec()));
            pos = end;
        }
        if pos != body.len() {
            return Err(CheckpointError::Format("trailing bytes after blobs".into()));
        }
        Ok(Self { component: header.component, meta: header.meta, blobs })
    }

    /// Checks the component tag.
    pub fn expect(self, component: &str) -> Result<Self, CheckpointError> {
        if self.component == component {
            Ok(self)
        } else {
            Err(CheckpointError::Component { expected: component.into(), found: self.component })
        }
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Content address of an encoded checkpoint.
pub fn content_id(bytes: &[u8]) -> String {
    hex_digest(bytes)
}
