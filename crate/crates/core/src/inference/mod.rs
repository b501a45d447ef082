//! Text-to-image sampling and latent post-operations.

mod direction;
mod image_io;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use direction::{DirectionProvenance, EditDirection};
pub use image_io::{compose_grid, encode_png, to_u8, write_png};

use crate::data::LatentStats;
use crate::diffusion::{make_cosine_schedule, respace, sample_batch, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, norm};
use crate::models::{cosine_similarity, cosine_similarity_grad, GeneratorHandle, Image, Models, StyleLatent};
use crate::prior::{PriorCheckpoint, PriorNetwork, Provenance};
use crate::rng;

pub const DEFAULT_GUIDANCE: f64 = 2.0;
pub const DEFAULT_CANDIDATES: usize = 16;
/// Respaced step count of the fast sampling mode.
pub const FAST_STEPS: usize = 16;

/// A trained prior ready for sampling.
#[derive(Debug, Clone)]
pub struct LoadedPrior {
    pub network: PriorNetwork,
    pub stats: LatentStats,
    pub schedule: DiffusionSchedule,
    pub provenance: Provenance,
}

impl LoadedPrior {
    /// Uses the EMA weights unless `use_ema` is false.
    pub fn from_checkpoint(ck: &PriorCheckpoint, use_ema: bool) -> Result<Self> {
        let network = if use_ema { ck.ema_network()? } else { ck.network()? };
        let schedule = make_cosine_schedule(ck.config.num_timesteps)?;
        Ok(LoadedPrior { network, stats: ck.stats.clone(), schedule, provenance: ck.provenance.clone() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&PriorCheckpoint::load(path)?, true)
    }

    pub fn num_latent_blocks(&self) -> usize {
        self.network.config().num_latent_blocks
    }

    pub fn check_models(&self, models: &Models) -> Result<()> {
        let c = self.network.config();
        if c.latent_dim != models.generator.latent_dim() || c.embed_dim != models.encoder.embed_dim() {
            return Err(Error::Config(format!(
                "checkpoint expects latent_dim {} and embed_dim {}, models provide {} and {}",
                c.latent_dim,
                c.embed_dim,
                models.generator.latent_dim(),
                models.encoder.embed_dim()
            )));
        }
        Ok(())
    }

    /// Full schedule, or a respaced one with `num_steps` steps.
    pub fn schedule_for(&self, num_steps: Option<usize>) -> Result<DiffusionSchedule> {
        match num_steps {
            None => Ok(self.schedule.clone()),
            Some(n) if n == self.schedule.num_timesteps() => Ok(self.schedule.clone()),
            Some(n) => respace(&self.schedule, n),
        }
    }

    /// Samples raw (destandardized) latents, one per `(cond, seed)` pair.
    pub fn sample_latents(
        &self,
        conds: &[&[f64]],
        guidance: f64,
        num_steps: Option<usize>,
        seeds: &[u64],
    ) -> Result<Vec<Vec<f64>>> {
        let schedule = self.schedule_for(num_steps)?;
        let xs = sample_batch(&self.network, conds, &schedule, guidance, seeds)?;
        Ok(xs.iter().map(|x| self.stats.destandardize(x)).collect())
    }
}

/// Sampler knobs shared by single requests and evaluation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub n_candidates: usize,
    pub guidance_scale: f64,
    /// Respaced step count; `None` runs the full schedule.
    pub num_steps: Option<usize>,
    pub truncation_psi: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings { n_candidates: DEFAULT_CANDIDATES, guidance_scale: DEFAULT_GUIDANCE, num_steps: None, truncation_psi: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub prompt: String,
    pub n_candidates: usize,
    pub guidance_scale: f64,
    pub num_steps: Option<usize>,
    pub truncation_psi: f64,
    pub seed: u64,
}

impl SampleRequest {
    pub fn new(prompt: &str, settings: &SamplerSettings, seed: u64) -> Self {
        SampleRequest {
            prompt: prompt.to_string(),
            n_candidates: settings.n_candidates,
            guidance_scale: settings.guidance_scale,
            num_steps: settings.num_steps,
            truncation_psi: settings.truncation_psi,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.prompt.trim().is_empty() {
            return Err(Error::invalid("prompt is empty"));
        }
        if self.n_candidates == 0 {
            return Err(Error::invalid("n_candidates must be at least 1"));
        }
        if !(self.guidance_scale >= 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::invalid(format!("guidance scale {} must be finite and non-negative", self.guidance_scale)));
        }
        if !(0.0..=1.0).contains(&self.truncation_psi) {
            return Err(Error::invalid(format!("truncation psi {} outside [0, 1]", self.truncation_psi)));
        }
        Ok(())
    }
}

/// The re-ranked winner of a request.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub image: Image,
    pub latent: Vec<f64>,
    pub score: f64,
    pub chosen: usize,
    pub candidate_scores: Vec<f64>,
}

/// Seed of candidate `i`; candidate 0 is the same for every `n_candidates`.
pub fn candidate_seed(seed: u64, i: usize) -> u64 {
    rng::derive_seed(seed, &[i as u64])
}

/// Samples candidates, scores each against the prompt and returns the best.
/// Ties go to the lowest index.
pub fn text_to_image(req: &SampleRequest, prior: &LoadedPrior, models: &Models) -> Result<Generated> {
    req.validate()?;
    prior.check_models(models)?;
    let text = models.encoder.encode_text(&req.prompt)?;
    let seeds: Vec<u64> = (0..req.n_candidates).map(|i| candidate_seed(req.seed, i)).collect();
    let conds: Vec<&[f64]> = vec![&text; req.n_candidates];
    let mut latents = prior.sample_latents(&conds, req.guidance_scale, req.num_steps, &seeds)?;
    if req.truncation_psi != 1.0 {
        let mean = models.generator.mean_latent_blocks(prior.num_latent_blocks());
        for w in latents.iter_mut() {
            *w = truncate(w, req.truncation_psi, &mean)?;
        }
    }
    let mut best: Option<(usize, f64, Image)> = None;
    let mut scores = Vec::with_capacity(latents.len());
    for (i, w) in latents.iter().enumerate() {
        let image = models.generator.synthesize(w)?;
        let score = cosine_similarity(&models.encoder.encode_image(&image)?, &text)?;
        scores.push(score);
        if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((i, score, image));
        }
    }
    let (chosen, score, image) = best.expect("at least one candidate");
    Ok(Generated { image, latent: latents.swap_remove(chosen), score, chosen, candidate_scores: scores })
}

/// `mean + psi · (w − mean)`; `psi = 1` returns `w` unchanged.
pub fn truncate(w: &[f64], psi: f64, mean_latent: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&psi) {
        return Err(Error::invalid(format!("truncation psi {psi} outside [0, 1]")));
    }
    if w.len() != mean_latent.len() {
        return Err(Error::invalid("latent and mean latent differ in length"));
    }
    if psi == 1.0 {
        return Ok(w.to_vec());
    }
    Ok(w.iter().zip(mean_latent).map(|(x, m)| m + psi * (x - m)).collect())
}

/// Default split point: half the style layers.
pub fn default_split_layer(gen: &GeneratorHandle) -> usize {
    (gen.num_style_layers() / 2).max(1)
}

/// Layers below `split_layer` take their style from `w_semantic`, the rest
/// from `w_style`. `split_layer` equal to the layer count keeps `w_semantic`
/// everywhere.
pub fn style_mix(w_semantic: &[f64], w_style: &[f64], split_layer: usize, gen: &GeneratorHandle) -> Result<StyleLatent> {
    if !gen.capabilities().supports_style_mixing {
        return Err(Error::Capability(format!("generator `{}` does not support style mixing", gen.id())));
    }
    let layers = gen.num_style_layers();
    if split_layer == 0 || split_layer > layers {
        return Err(Error::invalid(format!("split layer {split_layer} outside 1..={layers}")));
    }
    let a = gen.styles_from_latent(w_semantic)?;
    let b = gen.styles_from_latent(w_style)?;
    Ok(StyleLatent {
        layers: a.layers.into_iter().take(split_layer).chain(b.layers.into_iter().skip(split_layer)).collect(),
    })
}

/// `w + magnitude · direction`.
pub fn apply_edit(w: &[f64], direction: &EditDirection, magnitude: f64) -> Result<Vec<f64>> {
    if w.len() != direction.vector.len() {
        return Err(Error::invalid(format!(
            "direction has {} dimensions, latent has {}",
            direction.vector.len(),
            w.len()
        )));
    }
    Ok(w.iter().zip(&direction.vector).map(|(x, d)| x + magnitude * d).collect())
}

fn side_mean(prior: &LoadedPrior, models: &Models, prompts: &[String], n: usize, settings: &SamplerSettings, seed: u64) -> Result<Vec<f64>> {
    let texts: Vec<Vec<f64>> = prompts.iter().map(|p| models.encoder.encode_text(p)).collect::<Result<_>>()?;
    let mut conds: Vec<&[f64]> = Vec::new();
    let mut seeds = Vec::new();
    for (p, t) in texts.iter().enumerate() {
        for s in 0..n {
            conds.push(t);
            seeds.push(rng::derive_seed(seed, &[p as u64, s as u64]));
        }
    }
    let ws = prior.sample_latents(&conds, settings.guidance_scale, settings.num_steps, &seeds)?;
    let mut mean = vec![0.0; ws[0].len()];
    for w in &ws {
        for (m, v) in mean.iter_mut().zip(w) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= ws.len() as f64);
    Ok(mean)
}

/// Normalized difference between the mean latents of the two prompt sets.
/// Sample seeds depend on prompt and sample index only, so swapping the sides
/// negates the result exactly.
pub fn find_direction(
    name: &str,
    pos_prompts: &[String],
    neg_prompts: &[String],
    n_per_prompt: usize,
    prior: &LoadedPrior,
    models: &Models,
    settings: &SamplerSettings,
    seed: u64,
) -> Result<EditDirection> {
    if pos_prompts.is_empty() || neg_prompts.is_empty() || n_per_prompt == 0 {
        return Err(Error::invalid("both prompt sets and n_per_prompt must be nonempty"));
    }
    prior.check_models(models)?;
    let pos = side_mean(prior, models, pos_prompts, n_per_prompt, settings, seed)?;
    let neg = side_mean(prior, models, neg_prompts, n_per_prompt, settings, seed)?;
    let diff: Vec<f64> = pos.iter().zip(&neg).map(|(a, b)| a - b).collect();
    let n = norm(&diff);
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::invalid("the two prompt sets give the same mean latent"));
    }
    Ok(EditDirection {
        name: name.to_string(),
        vector: diff.iter().map(|d| d / n).collect(),
        provenance: DirectionProvenance::Prompts {
            pos_prompts: pos_prompts.to_vec(),
            neg_prompts: neg_prompts.to_vec(),
            n_per_prompt,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub latent: Vec<f64>,
    pub score: f64,
    /// Best score so far after each iteration, starting with the initial one.
    pub best_history: Vec<f64>,
}

/// Adam ascent on `cosine(encode_image(synthesize(w)), encode_text(prompt))`
/// in `w` space, starting from the mean latent. Returns the best iterate.
pub fn optimize_latent_baseline(
    prompt: &str,
    models: &Models,
    blocks: usize,
    iters: usize,
    lr: f64,
) -> Result<BaselineResult> {
    if !models.generator.capabilities().differentiable {
        return Err(Error::Capability(format!("generator `{}` is not differentiable", models.generator.id())));
    }
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate {lr} must be positive")));
    }
    let text = models.encoder.encode_text(prompt)?;
    let mut w = models.generator.mean_latent_blocks(blocks.max(1));
    let score_of = |w: &[f64]| -> Result<(f64, Image, Vec<f64>)> {
        let image = models.generator.synthesize(w)?;
        let emb = models.encoder.encode_image(&image)?;
        Ok((cosine_similarity(&emb, &text)?, image, emb))
    };
    let (mut best_score, _, _) = score_of(&w)?;
    let mut best = w.clone();
    let mut history = vec![best_score];
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; w.len()];
    let mut v = vec![0.0; w.len()];
    for k in 1..=iters {
        let (_, image, emb) = score_of(&w)?;
        let d_emb = cosine_similarity_grad(&emb, &text)?;
        let d_img = models.encoder.encode_image_vjp(&image, &d_emb)?;
        let g = models.generator.synthesize_vjp(&w, &d_img)?;
        if !all_finite(&g) {
            return Err(Error::numeric(format!("non-finite gradient at iteration {k}")));
        }
        let (bc1, bc2) = (1.0 - b1.powi(k as i32), 1.0 - b2.powi(k as i32));
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            w[i] += lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        }
        let (s, _, _) = score_of(&w)?;
        if s > best_score {
            best_score = s;
            best.clone_from(&w);
        }
        history.push(best_score);
    }
    Ok(BaselineResult { latent: best, score: best_score, best_history: history })
}
