//! Binary shard files and the JSON manifest that indexes them.
//!
//! A shard is a fixed 32-byte header followed by two little-endian `f32`
//! arrays, latents first, then embeddings:
//!
//! ```text
//! offset  size  field
//!      0     8  magic "LPSHARD\0"
//!      8     4  format_version (u32)
//!     12     4  latent_width (u32)   num_latent_blocks × latent_dim
//!     16     4  embed_dim (u32)
//!     20     4  reserved, zero
//!     24     8  rows (u64)
//!     32     …  rows × latent_width f32, then rows × embed_dim f32
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SHARD_MAGIC: [u8; 8] = *b"LPSHARD\0";
pub const FORMAT_VERSION: u32 = 1;
pub const SHARD_ROWS: usize = 65_536;
pub const HEADER_LEN: usize = 32;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Upper bound on rows accepted from a shard header, to reject absurd sizes
/// before allocating.
const MAX_ROWS: u64 = 1 << 32;

pub fn shard_file_name(index: usize) -> String {
    format!("shard_{index:05}.bin")
}

/// In-memory contents of one shard.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardData {
    pub latent_width: usize,
    pub embed_dim: usize,
    pub w: Vec<f32>,
    pub emb: Vec<f32>,
}

impl ShardData {
    pub fn rows(&self) -> usize {
        if self.latent_width == 0 {
            0
        } else {
            self.w.len() / self.latent_width
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let rows = self.rows();
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * (self.w.len() + self.emb.len()));
        out.extend_from_slice(&SHARD_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.latent_width as u32).to_le_bytes());
        out.extend_from_slice(&(self.embed_dim as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(rows as u64).to_le_bytes());
        for v in self.w.iter().chain(&self.emb) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::format("shard", reason);
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if bytes[..8] != SHARD_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(8);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let latent_width = u32_at(12) as usize;
        let embed_dim = u32_at(16) as usize;
        let rows = u64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes"));
        if latent_width == 0 || embed_dim == 0 {
            return Err(bad("zero-width arrays".into()));
        }
        if rows > MAX_ROWS {
            return Err(bad(format!("row count {rows} exceeds limit")));
        }
        let rows = rows as usize;
        let expected = (latent_width + embed_dim)
            .checked_mul(rows)
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(HEADER_LEN))
            .ok_or_else(|| bad("size overflow".into()))?;
        if bytes.len() != expected {
            return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let floats = |start: usize, count: usize| -> Vec<f32> {
            bytes[start..start + 4 * count]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        };
        let w = floats(HEADER_LEN, rows * latent_width);
        let emb = floats(HEADER_LEN + 4 * rows * latent_width, rows * embed_dim);
        Ok(ShardData { latent_width, embed_dim, w, emb })
    }

    pub fn write(&self, path: &Path) -> Result<String> {
        let bytes = self.encode();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub rows: usize,
    pub sha256: String,
}

/// Dataset manifest (`manifest.json`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub generator_id: String,
    pub encoder_id: String,
    pub seed: u64,
    pub count: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub num_latent_blocks: usize,
    pub shard_rows: usize,
    pub shards: Vec<ShardEntry>,
}

impl Manifest {
    pub fn latent_width(&self) -> usize {
        self.latent_dim * self.num_latent_blocks
    }

    /// Parses and structurally validates a manifest.
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::format("manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |r: String| Error::format("manifest", r);
        if self.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format_version {}", self.format_version)));
        }
        if self.latent_dim == 0 || self.embed_dim == 0 || self.num_latent_blocks == 0 {
            return Err(bad("dimensions must be positive".into()));
        }
        let total: usize = self.shards.iter().map(|s| s.rows).sum();
        if total != self.count {
            return Err(bad(format!("shards hold {total} rows but count is {}", self.count)));
        }
        for s in &self.shards {
            if s.file.contains('/') || s.file.contains('\\') || s.file.contains("..") {
                return Err(bad(format!("shard path `{}` escapes the dataset directory", s.file)));
            }
        }
        Ok(())
    }

    /// Digest of the manifest JSON, recorded in checkpoints for provenance.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn shard_round_trip(rows in 0usize..20, lw in 1usize..6, ed in 1usize..6, seed in any::<u32>()) {
            let val = |i: usize| ((i as u32).wrapping_mul(2_654_435_761) ^ seed) as f32 / u32::MAX as f32;
            let shard = ShardData {
                latent_width: lw,
                embed_dim: ed,
                w: (0..rows * lw).map(val).collect(),
                emb: (0..rows * ed).map(|i| val(i + 7)).collect(),
            };
            let back = ShardData::decode(&shard.encode()).unwrap();
            prop_assert_eq!(back, shard);
        }
    }

    #[test]
    fn decode_rejects_truncation_and_bad_headers() {
        let shard = ShardData { latent_width: 2, embed_dim: 3, w: vec![1.0; 4], emb: vec![0.5; 6] };
        let bytes = shard.encode();
        assert!(ShardData::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(ShardData::decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(ShardData::decode(&bad).is_err());
        let mut bad = bytes;
        bad[24..32].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(ShardData::decode(&bad).is_err());
    }

    #[test]
    fn manifest_rejects_inconsistent_counts_and_paths() {
        let mut m = Manifest {
            format_version: 1,
            generator_id: "toy".into(),
            encoder_id: "toy".into(),
            seed: 7,
            count: 3,
            latent_dim: 16,
            embed_dim: 16,
            num_latent_blocks: 1,
            shard_rows: SHARD_ROWS,
            shards: vec![ShardEntry { file: shard_file_name(0), rows: 3, sha256: String::new() }],
        };
        assert_eq!(Manifest::from_json(&m.to_json()).unwrap(), m);
        m.count = 4;
        assert!(Manifest::from_json(&m.to_json()).is_err());
        m.count = 3;
        m.shards[0].file = "../etc/passwd".into();
        assert!(m.validate().is_err());
        assert!(Manifest::from_json("{\"format_version\": 1}").is_err());
    }
}
