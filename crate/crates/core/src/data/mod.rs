//! Synthetic `(latent, image embedding)` datasets, latent standardization, and
//! embedding noise augmentation.

pub mod shard;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, norm};
use crate::models::Models;
use crate::rng;
pub use shard::{Manifest, ShardData, ShardEntry, FORMAT_VERSION, MANIFEST_FILE, SHARD_ROWS};

/// Minimum number of latents for standardization statistics.
pub const MIN_STATS_SAMPLES: usize = 1_000;

/// Samples `n` latents without truncation, embeds the synthesized images, and
/// writes shards plus a manifest to `out_dir`. Shard `j` draws from its own
/// stream derived from `(seed, j)`.
pub fn generate_dataset(
    models: &Models,
    n: usize,
    seed: u64,
    num_latent_blocks: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    generate_dataset_with_shard_rows(models, n, seed, num_latent_blocks, SHARD_ROWS, out_dir)
}

pub fn generate_dataset_with_shard_rows(
    models: &Models,
    n: usize,
    seed: u64,
    num_latent_blocks: usize,
    shard_rows: usize,
    out_dir: &Path,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    if num_latent_blocks == 0 || shard_rows == 0 {
        return Err(Error::invalid("latent blocks and shard size must be positive"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let gen = &models.generator;
    let latent_width = gen.latent_dim() * num_latent_blocks;
    let embed_dim = models.encoder.embed_dim();

    let mut shards = Vec::new();
    let mut start = 0;
    while start < n {
        let index = shards.len();
        let rows = shard_rows.min(n - start);
        let mut r = rng::stream(seed, &[index as u64]);
        let mut data = ShardData {
            latent_width,
            embed_dim,
            w: Vec::with_capacity(rows * latent_width),
            emb: Vec::with_capacity(rows * embed_dim),
        };
        for row in 0..rows {
            let w = gen.sample_latent(&mut r, num_latent_blocks);
            let e = models.embed_latent(&w)?;
            if !all_finite(&w) || !all_finite(&e) {
                return Err(Error::numeric(format!("non-finite sample at index {}", start + row)));
            }
            data.w.extend(w.iter().map(|&v| v as f32));
            data.emb.extend(e.iter().map(|&v| v as f32));
        }
        let file = shard::shard_file_name(index);
        let sha256 = data.write(&out_dir.join(&file))?;
        log::debug!("wrote {file} ({rows} rows)");
        shards.push(ShardEntry { file, rows, sha256 });
        start += rows;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        generator_id: gen.id().to_string(),
        encoder_id: models.encoder.id().to_string(),
        seed,
        count: n,
        latent_dim: gen.latent_dim(),
        embed_dim,
        num_latent_blocks,
        shard_rows,
        shards,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// A fully loaded dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub w: Vec<f32>,
    pub emb: Vec<f32>,
}

impl Dataset {
    /// Loads every shard listed in the manifest, verifying digests and shapes.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::read(dir)?;
        let mut w = Vec::with_capacity(manifest.count * manifest.latent_width());
        let mut emb = Vec::with_capacity(manifest.count * manifest.embed_dim);
        for entry in &manifest.shards {
            let path = dir.join(&entry.file);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if !entry.sha256.is_empty() && shard::sha256_hex(&bytes) != entry.sha256 {
                return Err(Error::format("shard", format!("{} does not match its digest", entry.file)));
            }
            let data = ShardData::decode(&bytes)?;
            if data.latent_width != manifest.latent_width()
                || data.embed_dim != manifest.embed_dim
                || data.rows() != entry.rows
            {
                return Err(Error::format("shard", format!("{} disagrees with the manifest", entry.file)));
            }
            w.extend_from_slice(&data.w);
            emb.extend_from_slice(&data.emb);
        }
        Ok(Dataset { manifest, w, emb })
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn latent_width(&self) -> usize {
        self.manifest.latent_width()
    }

    pub fn latent(&self, i: usize) -> Vec<f64> {
        let d = self.latent_width();
        self.w[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect()
    }

    pub fn embedding(&self, i: usize) -> Vec<f64> {
        let e = self.manifest.embed_dim;
        self.emb[i * e..(i + 1) * e].iter().map(|&v| v as f64).collect()
    }
}

/// Standardization statistics for latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    /// Scalar standard deviation shared by every dimension.
    pub std: f64,
    /// Optional per-dimension standard deviations; overrides `std` when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_dim_std: Option<Vec<f64>>,
    pub sample_count: usize,
}

/// Per-dimension mean and a single scalar std,
/// `sqrt(mean over dimensions of per-dimension variance)`. With `per_dim` set,
/// the per-dimension deviations are kept as well.
pub fn compute_latent_stats(latents: &[f64], width: usize, per_dim: bool) -> Result<LatentStats> {
    if width == 0 || latents.len() % width != 0 {
        return Err(Error::invalid("latent buffer is not a whole number of rows"));
    }
    let n = latents.len() / width;
    if n < MIN_STATS_SAMPLES {
        return Err(Error::invalid(format!(
            "latent statistics need at least {MIN_STATS_SAMPLES} samples, got {n}"
        )));
    }
    let mut mean = vec![0.0; width];
    for row in latents.chunks(width) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; width];
    for row in latents.chunks(width) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    let std = (var.iter().sum::<f64>() / width as f64).sqrt();
    if !(std > 1e-12) || !std.is_finite() {
        return Err(Error::invalid(format!("degenerate latent distribution (std = {std})")));
    }
    let per_dim_std = if per_dim {
        let sds: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
        if sds.iter().any(|s| !(*s > 1e-12)) {
            return Err(Error::invalid("a latent dimension has zero variance"));
        }
        Some(sds)
    } else {
        None
    };
    Ok(LatentStats { mean, std, per_dim_std, sample_count: n })
}

/// Statistics over a loaded dataset.
pub fn dataset_stats(ds: &Dataset, per_dim: bool) -> Result<LatentStats> {
    let w: Vec<f64> = ds.w.iter().map(|&v| v as f64).collect();
    compute_latent_stats(&w, ds.latent_width(), per_dim)
}

impl LatentStats {
    fn scale(&self, i: usize) -> f64 {
        match &self.per_dim_std {
            Some(s) => s[i],
            None => self.std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.std > 0.0) || self.mean.is_empty() {
            return Err(Error::invalid("latent stats need a positive std and a mean"));
        }
        if let Some(s) = &self.per_dim_std {
            if s.len() != self.mean.len() || s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::invalid("per-dimension std inconsistent with mean"));
            }
        }
        Ok(())
    }

    /// `(w − mean) / std`.
    pub fn standardize(&self, w: &[f64]) -> Vec<f64> {
        w.iter().enumerate().map(|(i, v)| (v - self.mean[i]) / self.scale(i)).collect()
    }

    /// `x · std + mean`.
    pub fn destandardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(i, v)| v * self.scale(i) + self.mean[i]).collect()
    }
}

/// Pseudo-text embedding: `e′ = y / ‖y‖` with `y = e + α · ε / ‖ε‖`,
/// `ε ~ N(0, I)`.
pub fn augment_embedding<R: Rng + ?Sized>(e: &[f64], alpha: f64, rng_: &mut R) -> Result<Vec<f64>> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("noise scale {alpha} must be finite and non-negative")));
    }
    let n = norm(e);
    if (n - 1.0).abs() > 1e-5 {
        return Err(Error::invalid(format!("embedding norm {n} is not 1")));
    }
    if alpha == 0.0 {
        return Ok(e.to_vec());
    }
    loop {
        let eps = rng::standard_normal(rng_, e.len());
        let en = norm(&eps);
        if en == 0.0 {
            continue;
        }
        let y: Vec<f64> = e.iter().zip(&eps).map(|(a, b)| a + alpha * b / en).collect();
        let yn = norm(&y);
        if yn == 0.0 {
            continue;
        }
        return Ok(y.into_iter().map(|v| v / yn).collect());
    }
}
