//! Score-based evaluation, the augmentation sweep and timing.

mod prompts;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use prompts::{
    bundled_eval_prompts, bundled_toy_prompts, default_validation_prompts, load_prompt_file, parse_prompt_file,
    with_prefix, PromptEntry, PROMPT_PREFIX,
};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{text_to_image, LoadedPrior, SampleRequest, SamplerSettings};
use crate::models::{cosine_similarity, Models};
use crate::prior::PriorCheckpoint;
use crate::rng;
use crate::trainer::{train, validate_checkpoint, RunConfig, ValidationSettings};

/// Mean cosine between prompts and images from `n` random generator latents,
/// the score an uninformed sampler achieves.
pub fn random_latent_baseline(models: &Models, prompts: &[String], n: usize, blocks: usize, seed: u64) -> Result<f64> {
    if prompts.is_empty() || n == 0 {
        return Err(Error::invalid("baseline needs prompts and at least one latent"));
    }
    let texts: Vec<Vec<f64>> = prompts.iter().map(|p| models.encoder.encode_text(p)).collect::<Result<_>>()?;
    let mut r = rng::stream(seed, &[]);
    let mut total = 0.0;
    for _ in 0..n {
        let w = models.generator.sample_latent(&mut r, blocks);
        let img = models.embed_latent(&w)?;
        for t in &texts {
            total += cosine_similarity(&img, t)?;
        }
    }
    Ok(total / (n * texts.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptScore {
    pub prompt: String,
    pub flagged: bool,
    pub score: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub prompts: Vec<PromptScore>,
    pub mean_score: f64,
    /// Mean wall-clock seconds per re-ranked sample.
    pub seconds_per_sample: f64,
    pub settings: SamplerSettings,
    pub seed: u64,
    pub generator_id: String,
    pub encoder_id: String,
    pub checkpoint_step: u64,
    pub hardware: String,
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("prompt,flagged,score,seconds\n");
        for p in &self.prompts {
            out.push_str(&format!("{},{},{},{}\n", csv_field(&p.prompt), p.flagged, p.score, p.seconds));
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("json", self.to_json()), ("csv", self.to_csv())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Short description of the machine, recorded with timings.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|m| m.trim().to_string()))
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu} ({threads} threads, {})", std::env::consts::OS)
}

/// One re-ranked sample per prompt, each prompt prefixed with
/// `"A photograph of"` when `prefix` is set.
pub fn eval_suite(
    prior: &LoadedPrior,
    models: &Models,
    prompts: &[PromptEntry],
    settings: &SamplerSettings,
    seed: u64,
    prefix: bool,
) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(Error::invalid("evaluation needs at least one prompt"));
    }
    let mut rows = Vec::with_capacity(prompts.len());
    for (i, p) in prompts.iter().enumerate() {
        let text = if prefix { with_prefix(&p.text) } else { p.text.clone() };
        let req = SampleRequest::new(&text, settings, rng::derive_seed(seed, &[i as u64]));
        let start = Instant::now();
        let out = text_to_image(&req, prior, models)?;
        rows.push(PromptScore { prompt: p.text.clone(), flagged: p.flagged, score: out.score, seconds: start.elapsed().as_secs_f64() });
    }
    let n = rows.len() as f64;
    Ok(EvalReport {
        mean_score: rows.iter().map(|r| r.score).sum::<f64>() / n,
        seconds_per_sample: rows.iter().map(|r| r.seconds).sum::<f64>() / n,
        prompts: rows,
        settings: settings.clone(),
        seed,
        generator_id: models.generator.id().to_string(),
        encoder_id: models.encoder.id().to_string(),
        checkpoint_step: prior.provenance.step,
        hardware: hardware_descriptor(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub seed: u64,
    pub score: f64,
    pub best_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Mean score over seeds for each α, in first-seen α order.
    pub fn mean_by_alpha(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(a, _, _)| *a == r.alpha) {
                Some(e) => {
                    e.1 += r.score;
                    e.2 += 1;
                }
                None => out.push((r.alpha, r.score, 1)),
            }
        }
        out.into_iter().map(|(a, s, n)| (a, s / n as f64)).collect()
    }

    /// Plot data: `alpha,seed,score`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,seed,score,best_step\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.alpha, r.seed, r.score, r.best_step));
        }
        out
    }
}

/// How each sweep model is scored after training.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepEval {
    pub prompts: Vec<String>,
    pub samples_per_prompt: usize,
    pub num_steps: Option<usize>,
}

/// Trains one prior per `(α, seed)` with an otherwise identical config and
/// scores its best checkpoint on fresh samples.
pub fn noise_sweep(
    base: &RunConfig,
    dataset: &Dataset,
    models: &Models,
    alphas: &[f64],
    seeds: &[u64],
    eval: &SweepEval,
    out_dir: &Path,
) -> Result<SweepTable> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("sweep needs at least one alpha and one seed"));
    }
    if alphas.iter().any(|a| !(*a >= 0.0) || !a.is_finite()) {
        return Err(Error::invalid("alphas must be finite and non-negative"));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for &alpha in alphas {
            let mut cfg = base.clone();
            cfg.train.noise_scale = alpha;
            cfg.train.seed = seed;
            let dir = out_dir.join(format!("alpha_{alpha}_seed_{seed}"));
            let outcome = train(&cfg, dataset, models, &dir, false)?;
            let prior = LoadedPrior::from_checkpoint(&PriorCheckpoint::load(&outcome.best_checkpoint)?, true)?;
            let schedule = prior.schedule_for(eval.num_steps)?;
            let settings = ValidationSettings {
                samples_per_prompt: eval.samples_per_prompt,
                guidance: cfg.train.val_guidance,
                seed: rng::derive_seed(seed, &[u64::MAX]),
            };
            let score = validate_checkpoint(&prior.network, &prior.stats, models, &eval.prompts, &schedule, &settings)?;
            log::info!("sweep alpha {alpha} seed {seed}: score {score:.4}");
            rows.push(SweepRow { alpha, seed, score, best_step: outcome.best_step });
        }
    }
    let table = SweepTable { rows };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("sweep.csv");
    std::fs::write(&path, table.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub median_seconds: f64,
    pub samples: Vec<f64>,
    pub settings: SamplerSettings,
    pub hardware: String,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock time of one re-ranked sample, after one untimed warm-up.
pub fn timing_benchmark(
    prior: &LoadedPrior,
    models: &Models,
    prompt: &str,
    settings: &SamplerSettings,
    repeats: usize,
) -> Result<TimingReport> {
    if repeats == 0 {
        return Err(Error::invalid("repeats must be at least 1"));
    }
    text_to_image(&SampleRequest::new(prompt, settings, 0), prior, models)?;
    let mut samples = Vec::with_capacity(repeats);
    for k in 0..repeats {
        let req = SampleRequest::new(prompt, settings, k as u64 + 1);
        let start = Instant::now();
        text_to_image(&req, prior, models)?;
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(TimingReport { median_seconds: median(&samples), samples, settings: settings.clone(), hardware: hardware_descriptor() })
}
