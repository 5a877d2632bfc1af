use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{to_jsonl, write_atomic};

use super::policy::ToyPolicy;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Sft,
    Ppo,
    Dpo,
    Orpo,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Sft => "sft",
            Stage::Ppo => "ppo",
            Stage::Dpo => "dpo",
            Stage::Orpo => "orpo",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Stage::Init, Stage::Sft, Stage::Ppo, Stage::Dpo, Stage::Orpo]
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown stage `{s}`")))
    }
}

/// Immutable snapshot of a policy after some epoch of some stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub stage: Stage,
    pub epoch: usize,
    /// SHA-256 of the training data, hex encoded.
    pub corpus_digest: String,
    pub policy: ToyPolicy,
}

impl Checkpoint {
    pub fn new(stage: Stage, epoch: usize, corpus_digest: impl Into<String>, policy: ToyPolicy) -> Self {
        Self { format_version: CHECKPOINT_FORMAT_VERSION, stage, epoch, corpus_digest: corpus_digest.into(), policy }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint format version {}", ck.format_version)));
        }
        Ok(ck)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a training set, taken over its JSONL encoding.
pub fn corpus_digest<T: Serialize>(items: &[T]) -> Result<String> {
    Ok(sha256_hex(&to_jsonl(items)?))
}
