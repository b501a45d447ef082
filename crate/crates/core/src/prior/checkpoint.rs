//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LPCKPT\0\0"  u32 version  u32 entry_count
//! per entry:   u16 name_len  name (utf-8)  u64 data_len  data
//! ```
//!
//! Entries: `config.json`, `stats.json`, `provenance.json`, `weights.f64`,
//! `ema.f64`, and for resumable checkpoints `train_state.json`,
//! `adam_m.f64`, `adam_v.f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PriorConfig, PriorNetwork};
use crate::data::LatentStats;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"LPCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_ENTRIES: u32 = 64;

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_manifest_sha256: String,
    pub generator_id: String,
    pub encoder_id: String,
    pub version: String,
    pub step: u64,
    pub validation_score: Option<f64>,
}

/// Optimizer and bookkeeping needed to resume training bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub adam_steps: u64,
    pub ema_updates: u64,
    pub best_score: Option<f64>,
    pub best_step: Option<u64>,
    pub train_config: serde_json::Value,
    #[serde(skip)]
    pub adam_m: Vec<f64>,
    #[serde(skip)]
    pub adam_v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorCheckpoint {
    pub config: PriorConfig,
    pub weights: Vec<f64>,
    pub ema_weights: Vec<f64>,
    pub stats: LatentStats,
    pub provenance: Provenance,
    pub train_state: Option<TrainState>,
}

pub fn version_string() -> String {
    format!("latent-prior {}", env!("CARGO_PKG_VERSION"))
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("checkpoint metadata serializes")
}

fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_to_f64s(b: &[u8], what: &str) -> Result<Vec<f64>> {
    if b.len() % 8 != 0 {
        return Err(Error::format("checkpoint", format!("{what} is not a whole number of f64 values")));
    }
    Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated archive"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl PriorCheckpoint {
    pub fn network(&self) -> Result<PriorNetwork> {
        PriorNetwork::from_params(self.config.clone(), self.weights.clone())
    }

    pub fn ema_network(&self) -> Result<PriorNetwork> {
        PriorNetwork::from_params(self.config.clone(), self.ema_weights.clone())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut entries: Vec<(&str, Vec<u8>)> = vec![
            ("config.json", json(&self.config)),
            ("stats.json", json(&self.stats)),
            ("provenance.json", json(&self.provenance)),
            ("weights.f64", f64s_to_bytes(&self.weights)),
            ("ema.f64", f64s_to_bytes(&self.ema_weights)),
        ];
        if let Some(ts) = &self.train_state {
            entries.push(("train_state.json", json(ts)));
            entries.push(("adam_m.f64", f64s_to_bytes(&ts.adam_m)));
            entries.push(("adam_v.f64", f64s_to_bytes(&ts.adam_v)));
        }
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, data) in entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            out.extend_from_slice(&data);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |r: String| Error::format("checkpoint", r);
        let mut rd = Reader { buf: bytes, pos: 0 };
        if rd.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = rd.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = rd.u32()?;
        if count > MAX_ENTRIES {
            return Err(bad(format!("{count} entries exceeds limit")));
        }
        let mut entries: Vec<(String, &[u8])> = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = rd.u16()? as usize;
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|_| bad("entry name is not utf-8".into()))?
                .to_string();
            let len = usize::try_from(rd.u64()?).map_err(|_| bad("entry too large".into()))?;
            if entries.iter().any(|(n, _)| *n == name) {
                return Err(bad(format!("duplicate entry `{name}`")));
            }
            entries.push((name, rd.take(len)?));
        }
        if rd.pos != bytes.len() {
            return Err(bad("trailing bytes after last entry".into()));
        }
        let get = |name: &str| entries.iter().find(|(n, _)| n == name).map(|(_, d)| *d);
        let need = |name: &str| get(name).ok_or_else(|| bad(format!("missing entry `{name}`")));
        let parse = |name: &str| -> Result<serde_json::Value> {
            serde_json::from_slice(need(name)?).map_err(|e| bad(format!("{name}: {e}")))
        };
        let config: PriorConfig = serde_json::from_value(parse("config.json")?).map_err(|e| bad(format!("config.json: {e}")))?;
        config.validate().map_err(|e| bad(format!("config.json: {e}")))?;
        let stats: LatentStats = serde_json::from_value(parse("stats.json")?).map_err(|e| bad(format!("stats.json: {e}")))?;
        stats.validate().map_err(|e| bad(format!("stats.json: {e}")))?;
        let provenance: Provenance =
            serde_json::from_value(parse("provenance.json")?).map_err(|e| bad(format!("provenance.json: {e}")))?;
        let weights = bytes_to_f64s(need("weights.f64")?, "weights")?;
        let ema_weights = bytes_to_f64s(need("ema.f64")?, "ema")?;
        if weights.len() != ema_weights.len() {
            return Err(bad("weights and EMA weights differ in size".into()));
        }
        if stats.mean.len() != config.latent_size() {
            return Err(bad("latent stats do not match the configured latent size".into()));
        }
        let train_state = match get("train_state.json") {
            None => None,
            Some(_) => {
                let mut ts: TrainState = serde_json::from_value(parse("train_state.json")?)
                    .map_err(|e| bad(format!("train_state.json: {e}")))?;
                ts.adam_m = bytes_to_f64s(need("adam_m.f64")?, "adam_m")?;
                ts.adam_v = bytes_to_f64s(need("adam_v.f64")?, "adam_v")?;
                if ts.adam_m.len() != weights.len() || ts.adam_v.len() != weights.len() {
                    return Err(bad("optimizer state does not match the weights".into()));
                }
                Some(ts)
            }
        };
        Ok(PriorCheckpoint { config, weights, ema_weights, stats, provenance, train_state })
    }

    /// Decodes and checks the weight vector against the configured layout.
    pub fn decode_checked(bytes: &[u8]) -> Result<Self> {
        let ck = Self::decode(bytes)?;
        ck.network()?;
        Ok(ck)
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_checked(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(with_state: bool) -> PriorCheckpoint {
        let cfg = PriorConfig::toy();
        let net = PriorNetwork::build(cfg.clone(), 1).unwrap();
        let n = net.parameter_count();
        PriorCheckpoint {
            config: cfg.clone(),
            weights: net.params().to_vec(),
            ema_weights: net.params().iter().map(|v| v * 0.5).collect(),
            stats: LatentStats { mean: vec![0.1; cfg.latent_size()], std: 1.3, per_dim_std: None, sample_count: 5000 },
            provenance: Provenance {
                dataset_manifest_sha256: "abc".into(),
                generator_id: "toy".into(),
                encoder_id: "toy".into(),
                version: version_string(),
                step: 10,
                validation_score: Some(0.5),
            },
            train_state: with_state.then(|| TrainState {
                step: 10,
                adam_steps: 10,
                ema_updates: 1,
                best_score: Some(0.5),
                best_step: Some(10),
                train_config: serde_json::json!({"lr": 1e-4}),
                adam_m: vec![0.25; n],
                adam_v: vec![0.125; n],
            }),
        }
    }

    #[test]
    fn round_trip_with_and_without_train_state() {
        for with_state in [false, true] {
            let ck = sample(with_state);
            let back = PriorCheckpoint::decode_checked(&ck.encode()).unwrap();
            assert_eq!(back, ck);
        }
    }

    #[test]
    fn save_load_preserves_forward_outputs() {
        let ck = sample(false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        ck.save(&path).unwrap();
        let loaded = PriorCheckpoint::load(&path).unwrap();
        let x = vec![0.3; 16];
        let c = vec![0.25; ck.config.embed_dim];
        let a = ck.ema_network().unwrap().forward_one(&x, 17, &c, true).unwrap();
        let b = loaded.ema_network().unwrap().forward_one(&x, 17, &c, true).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-6);
        }
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample(true).encode();
        assert!(PriorCheckpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[3] = 0;
        assert!(PriorCheckpoint::decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(PriorCheckpoint::decode(&extra).is_err());
        assert!(PriorCheckpoint::decode(&[]).is_err());
    }
}
