//! Training configuration and its key-value file format.
//!
//! One `key value` pair per line. The separator may be whitespace, `=`, `:`
//! or `&`, so rows copied from a LaTeX table (`lr & 1.0e-4 \\`) also parse.
//! `#` starts a comment. Integers may use `,` or `_` as digit separators.
//! `val_prompt` may repeat; every other key may appear once.

use serde::{Deserialize, Serialize};

use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::evaluation::default_validation_prompts;
use crate::prior::PriorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_beta: f64,
    pub ema_update_every: u64,
    /// Embedding augmentation strength α.
    pub noise_scale: f64,
    pub cond_drop_prob: f64,
    pub validate_every: u64,
    pub val_prompts: Vec<String>,
    pub val_samples_per_prompt: usize,
    pub val_guidance: f64,
    /// Respaced step count used when sampling for validation; `None` runs the
    /// full schedule.
    pub val_steps: Option<usize>,
    pub per_dim_std: bool,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1_000_000,
            batch_size: 512,
            lr: 1e-4,
            weight_decay: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_beta: 0.9999,
            ema_update_every: 10,
            noise_scale: 1.0,
            cond_drop_prob: 0.2,
            validate_every: 10_000,
            val_prompts: default_validation_prompts(),
            val_samples_per_prompt: 4,
            val_guidance: 1.0,
            val_steps: None,
            per_dim_std: false,
            seed: 0,
            log_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 || self.batch_size == 0 || self.validate_every == 0 {
            return bad("iterations, batch_size and validate_every must be positive".into());
        }
        if self.ema_update_every == 0 || self.val_samples_per_prompt == 0 || self.log_every == 0 {
            return bad("ema_update_every, val_samples_per_prompt and log_every must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2), ("ema_beta", self.ema_beta)] {
            if !(0.0..=1.0).contains(&b) {
                return bad(format!("{name} = {b} must lie in [0, 1]"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return bad(format!("noise_scale {} must be finite and non-negative", self.noise_scale));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return bad(format!("cond_drop_prob {} must lie in [0, 1]", self.cond_drop_prob));
        }
        if self.val_prompts.is_empty() || self.val_prompts.iter().any(|p| p.trim().is_empty()) {
            return bad("val_prompts must be a nonempty list of nonempty prompts".into());
        }
        if !(self.val_guidance >= 0.0) || !self.val_guidance.is_finite() {
            return bad("val_guidance must be finite and non-negative".into());
        }
        if self.val_steps == Some(0) {
            return bad("val_steps must be positive".into());
        }
        Ok(())
    }
}

/// Network shape settings from a config file; data-dependent sizes come from
/// the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub timesteps: usize,
    pub dim: usize,
    pub depth: usize,
    pub dim_head: usize,
    pub heads: usize,
    pub ff_mult: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let p = PriorConfig::default();
        ModelSettings {
            timesteps: p.num_timesteps,
            dim: p.model_dim,
            depth: p.depth,
            dim_head: p.head_dim,
            heads: p.heads,
            ff_mult: p.ff_mult,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSettings,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Full network config for a dataset.
    pub fn prior_config(&self, manifest: &Manifest) -> Result<PriorConfig> {
        let m = &self.model;
        let cfg = PriorConfig {
            model_dim: m.dim,
            depth: m.depth,
            heads: m.heads,
            head_dim: m.dim_head,
            ff_mult: m.ff_mult,
            cond_drop_prob: self.train.cond_drop_prob,
            predict_x_start: true,
            latent_dim: manifest.latent_dim,
            num_latent_blocks: manifest.num_latent_blocks,
            embed_dim: manifest.embed_dim,
            num_timesteps: m.timesteps,
        };
        cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Small configuration sized for the toy stack on a CPU.
    pub fn toy() -> Self {
        let p = PriorConfig::toy();
        RunConfig {
            model: ModelSettings {
                timesteps: p.num_timesteps,
                dim: p.model_dim,
                depth: p.depth,
                dim_head: p.head_dim,
                heads: p.heads,
                ff_mult: p.ff_mult,
            },
            train: TrainConfig {
                iterations: 20_000,
                batch_size: 64,
                lr: 1e-3,
                ema_beta: 0.99,
                ema_update_every: 10,
                validate_every: 2_000,
                val_prompts: crate::models::toy::TOY_CONCEPTS.iter().map(|c| c.to_string()).collect(),
                val_steps: Some(50),
                log_every: 500,
                ..TrainConfig::default()
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        parse_config(text)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_config(&text)
    }
}

fn split_line(raw: &str) -> Option<(String, String)> {
    let line = match raw.find('#') {
        Some(i) => &raw[..i],
        None => raw,
    };
    let line = line.trim().trim_end_matches("\\\\").trim();
    if line.is_empty() {
        return None;
    }
    let key_end = line
        .find(|c: char| c.is_whitespace() || matches!(c, '=' | ':' | '&'))
        .unwrap_or(line.len());
    let key = line[..key_end].replace("\\_", "_");
    let rest = line[key_end..].trim_start();
    let rest = rest.strip_prefix(['=', ':', '&']).unwrap_or(rest).trim();
    let value = rest
        .strip_prefix('"')
        .and_then(|v| v.strip_suffix('"'))
        .unwrap_or(rest)
        .to_string();
    Some((key, value))
}

fn parse_int(key: &str, v: &str) -> Result<u64> {
    let cleaned: String = v.chars().filter(|c| !matches!(c, ',' | '_')).collect();
    cleaned
        .parse::<u64>()
        .or_else(|_| match cleaned.parse::<f64>() {
            Ok(f) if f >= 0.0 && f.fract() == 0.0 && f < 2f64.powi(63) => Ok(f as u64),
            _ => Err(()),
        })
        .map_err(|_| Error::Config(format!("`{key}` expects a non-negative integer, got `{v}`")))
}

fn parse_float(key: &str, v: &str) -> Result<f64> {
    let cleaned: String = v.chars().filter(|c| *c != '_').collect();
    match cleaned.parse::<f64>() {
        Ok(f) if f.is_finite() => Ok(f),
        _ => Err(Error::Config(format!("`{key}` expects a number, got `{v}`"))),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true or false, got `{v}`"))),
    }
}

fn usize_of(key: &str, v: &str) -> Result<usize> {
    usize::try_from(parse_int(key, v)?).map_err(|_| Error::Config(format!("`{key}` is too large")))
}

/// Parses a config file, starting from the default (full-scale) settings.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen: Vec<String> = Vec::new();
    let mut prompts: Vec<String> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let Some((key, v)) = split_line(raw) else { continue };
        let at = |e: Error| match e {
            Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
            other => other,
        };
        if key == "val_prompt" {
            if v.is_empty() {
                return Err(at(Error::Config("empty val_prompt".into())));
            }
            prompts.push(v);
            continue;
        }
        if seen.contains(&key) {
            return Err(at(Error::Config(format!("duplicate key `{key}`"))));
        }
        let m = &mut cfg.model;
        let t = &mut cfg.train;
        let r: Result<()> = (|| {
            match key.as_str() {
                "timesteps" => m.timesteps = usize_of(&key, &v)?,
                "beta_schedule" if v.eq_ignore_ascii_case("cosine") => {}
                "beta_schedule" => return Err(Error::Config(format!("unsupported beta_schedule `{v}`"))),
                "predict_x_start" => {
                    if !parse_bool(&key, &v)? {
                        return Err(Error::Config("only predict_x_start = true is supported".into()));
                    }
                }
                "cond_drop_prob" => t.cond_drop_prob = parse_float(&key, &v)?,
                "dim" => m.dim = usize_of(&key, &v)?,
                "depth" => m.depth = usize_of(&key, &v)?,
                "dim_head" => m.dim_head = usize_of(&key, &v)?,
                "heads" => m.heads = usize_of(&key, &v)?,
                "ff_mult" => m.ff_mult = usize_of(&key, &v)?,
                "iterations" => t.iterations = parse_int(&key, &v)?,
                "batch_size" => t.batch_size = usize_of(&key, &v)?,
                "lr" => t.lr = parse_float(&key, &v)?,
                "weight_decay" => t.weight_decay = parse_float(&key, &v)?,
                "adam_beta1" => t.adam_beta1 = parse_float(&key, &v)?,
                "adam_beta2" => t.adam_beta2 = parse_float(&key, &v)?,
                "adam_betas" => {
                    let parts: Vec<&str> = v.split([',', ' ']).filter(|s| !s.is_empty()).collect();
                    if parts.len() != 2 {
                        return Err(Error::Config(format!("`adam_betas` expects two numbers, got `{v}`")));
                    }
                    t.adam_beta1 = parse_float(&key, parts[0])?;
                    t.adam_beta2 = parse_float(&key, parts[1])?;
                }
                "adam_eps" => t.adam_eps = parse_float(&key, &v)?,
                "ema_beta" => t.ema_beta = parse_float(&key, &v)?,
                "ema_update_every" => t.ema_update_every = parse_int(&key, &v)?,
                "noise_scale" => t.noise_scale = parse_float(&key, &v)?,
                "validate_every" => t.validate_every = parse_int(&key, &v)?,
                "val_samples_per_prompt" => t.val_samples_per_prompt = usize_of(&key, &v)?,
                "val_guidance" => t.val_guidance = parse_float(&key, &v)?,
                "val_steps" => {
                    t.val_steps = match v.to_ascii_lowercase().as_str() {
                        "full" | "none" => None,
                        _ => Some(usize_of(&key, &v)?),
                    }
                }
                "per_dim_std" => t.per_dim_std = parse_bool(&key, &v)?,
                "seed" => t.seed = parse_int(&key, &v)?,
                "log_every" => t.log_every = parse_int(&key, &v)?,
                _ => return Err(Error::Config(format!("unknown key `{key}`"))),
            }
            Ok(())
        })();
        r.map_err(at)?;
        seen.push(key);
    }
    if !prompts.is_empty() {
        cfg.train.val_prompts = prompts;
    }
    cfg.train.validate()?;
    let m = &cfg.model;
    if m.timesteps == 0 || m.dim == 0 || m.depth == 0 || m.dim_head == 0 || m.heads == 0 || m.ff_mult == 0 {
        return Err(Error::Config("model sizes must be positive".into()));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn parser_only_fails_with_config_errors(text in "\\PC{0,60}") {
            if let Err(e) = parse_config(&text) {
                prop_assert!(matches!(e, Error::Config(_)));
            }
        }

        #[test]
        fn integer_grouping_is_ignored(n in 1usize..10_000_000) {
            let grouped = n.to_string().as_bytes().rchunks(3).rev().map(|c| std::str::from_utf8(c).unwrap()).collect::<Vec<_>>().join(",");
            let c = parse_config(&format!("iterations {grouped}")).unwrap();
            prop_assert_eq!(c.train.iterations as usize, n);
        }
    }

    #[test]
    fn defaults_match_reference_table() {
        let c = RunConfig::default();
        assert_eq!((c.model.timesteps, c.model.dim, c.model.depth, c.model.dim_head, c.model.heads), (1000, 512, 12, 64, 12));
        let t = &c.train;
        assert_eq!((t.iterations, t.batch_size, t.ema_update_every), (1_000_000, 512, 10));
        assert_eq!((t.lr, t.weight_decay, t.ema_beta, t.noise_scale), (1e-4, 1e-2, 0.9999, 1.0));
        assert_eq!((t.adam_beta1, t.adam_beta2, t.cond_drop_prob), (0.9, 0.999, 0.2));
        assert_eq!((t.val_prompts.len(), t.val_samples_per_prompt), (16, 4));
    }

    #[test]
    fn table_rows_parse_to_defaults() {
        let text = r"
            timesteps          & 1000           \\
            beta\_schedule     & cosine         \\
            predict\_x\_start  & True           \\
            cond\_drop\_prob   & 0.2            \\
            dim                & 512            \\
            depth              & 12             \\
            dim\_head          & 64             \\
            heads              & 12             \\
            iterations          & 1,000,000           \\
            batch\_size     & 512         \\
            lr  & 1.0e-4           \\
            weight\_decay   & 1.0e-2            \\
            ema\_beta                & 0.9999            \\
            ema\_update\_every              & 10             \\
            noise_scale         & 1.0             \\
            adam_betas & 0.9, 0.999 \\
        ";
        assert_eq!(parse_config(text).unwrap(), RunConfig::default());
    }

    #[test]
    fn shipped_presets_match_builtins() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        assert_eq!(RunConfig::from_file(&dir.join("toy.conf")).unwrap(), RunConfig::toy());
        assert_eq!(RunConfig::from_file(&dir.join("full.conf")).unwrap(), RunConfig::default());
    }

    #[test]
    fn mixed_separators_and_prompts() {
        let c = parse_config("# toy\nlr = 3e-4\nbatch_size: 64\nseed 9 # trailing\nval_prompt: \"forest\"\nval_prompt ocean\nval_steps full\n").unwrap();
        assert_eq!((c.train.lr, c.train.batch_size, c.train.seed), (3e-4, 64, 9));
        assert_eq!(c.train.val_prompts, vec!["forest", "ocean"]);
        assert_eq!(c.train.val_steps, None);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "bogus 1",
            "lr 1\nlr 2",
            "lr fast",
            "beta_schedule linear",
            "predict_x_start false",
            "batch_size -3",
            "noise_scale -1",
            "ema_beta 1.5",
            "dim 0",
            "iterations 1.5",
        ] {
            assert!(matches!(parse_config(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn prior_config_takes_sizes_from_manifest() {
        let m = Manifest {
            format_version: 1,
            generator_id: "toy".into(),
            encoder_id: "toy".into(),
            seed: 0,
            count: 0,
            latent_dim: 16,
            embed_dim: 16,
            num_latent_blocks: 3,
            shard_rows: 10,
            shards: vec![],
        };
        let p = RunConfig::toy().prior_config(&m).unwrap();
        assert_eq!((p.latent_size(), p.embed_dim), (48, 16));
    }
}
