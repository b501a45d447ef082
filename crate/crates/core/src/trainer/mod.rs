//! Training loop for the latent prior.

mod config;
mod optim;

use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;

pub use config::{parse_config, ModelSettings, RunConfig, TrainConfig};
pub use optim::{ema_update, AdamW, EmaState};

use crate::data::{augment_embedding, dataset_stats, Dataset, LatentStats};
use crate::diffusion::{make_cosine_schedule, q_sample, respace, sample_batch, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::models::{cosine_similarity, Models};
use crate::prior::{drop_condition, mse_loss, version_string, PriorCheckpoint, PriorInputs, PriorNetwork, Provenance, TrainState};
use crate::rng;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_FILE: &str = "validation.csv";

// Stream tags keep the training randomness families apart.
const TAG_INIT: u64 = 1;
const TAG_STEP: u64 = 2;
const TAG_VALIDATE: u64 = 3;

/// Raw training pairs, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub w: Vec<f64>,
    pub emb: Vec<f64>,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset, indices: &[usize]) -> Self {
        let mut w = Vec::with_capacity(indices.len() * ds.latent_width());
        let mut emb = Vec::with_capacity(indices.len() * ds.manifest.embed_dim);
        for &i in indices {
            w.extend(ds.latent(i));
            emb.extend(ds.embedding(i));
        }
        Batch { w, emb }
    }

    pub fn rows(&self, latent_size: usize) -> usize {
        self.w.len() / latent_size
    }
}

/// Network inputs and targets for one step, after every random draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub x0: Vec<f64>,
    pub x_t: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub conds: Vec<f64>,
    pub cond_mask: Vec<bool>,
}

impl PreparedBatch {
    pub fn dropped(&self) -> usize {
        self.cond_mask.iter().filter(|m| !**m).count()
    }

    fn inputs(&self) -> PriorInputs<'_> {
        PriorInputs { x_t: &self.x_t, timesteps: &self.timesteps, conds: &self.conds, cond_mask: &self.cond_mask }
    }
}

/// Standardize, augment, drop, pick t and noise, in that order per sample.
pub fn prepare_batch<R: Rng + ?Sized>(
    batch: &Batch,
    stats: &LatentStats,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng_: &mut R,
) -> Result<PreparedBatch> {
    let d = stats.mean.len();
    if batch.w.is_empty() || batch.w.len() % d != 0 {
        return Err(Error::invalid("training batch is empty or mis-sized"));
    }
    let n = batch.w.len() / d;
    if batch.emb.len() % n != 0 {
        return Err(Error::invalid("embedding rows do not match latent rows"));
    }
    let e = batch.emb.len() / n;
    let mut out = PreparedBatch {
        x0: Vec::with_capacity(n * d),
        x_t: Vec::with_capacity(n * d),
        timesteps: Vec::with_capacity(n),
        conds: Vec::with_capacity(n * e),
        cond_mask: Vec::with_capacity(n),
    };
    let t_count = schedule.num_timesteps();
    for i in 0..n {
        let x0 = stats.standardize(&batch.w[i * d..(i + 1) * d]);
        let aug = augment_embedding(&batch.emb[i * e..(i + 1) * e], cfg.noise_scale, rng_)?;
        let (cond, keep) = drop_condition(&aug, cfg.cond_drop_prob, rng_);
        let t = rng_.random_range(0..t_count);
        let noise = rng::standard_normal(rng_, d);
        out.x_t.extend(q_sample(&x0, t, &noise, schedule)?);
        out.x0.extend(x0);
        out.timesteps.push(schedule.timestep_map[t]);
        out.conds.extend(cond);
        out.cond_mask.push(keep);
    }
    Ok(out)
}

/// Mean squared error of the x0 prediction and its parameter gradient.
pub fn loss_and_grad(net: &PriorNetwork, batch: &PreparedBatch) -> Result<(f64, Vec<f64>)> {
    let (pred, cache) = net.forward_with_cache(&batch.inputs())?;
    let (loss, d_pred) = mse_loss(&pred, &batch.x0);
    let mut grad = vec![0.0; net.parameter_count()];
    net.backward(&cache, &d_pred, &mut grad);
    Ok((loss, grad))
}

/// Loss of a prepared batch without gradients.
pub fn batch_loss(net: &PriorNetwork, batch: &PreparedBatch) -> Result<f64> {
    let pred = net.forward(&batch.inputs())?;
    Ok(mse_loss(&pred, &batch.x0).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub grad_norm: f64,
    pub dropped: usize,
}

fn timestep_histogram(ts: &[usize], total: usize) -> String {
    let bins = 10;
    let mut h = vec![0usize; bins];
    for &t in ts {
        h[(t * bins / total.max(1)).min(bins - 1)] += 1;
    }
    format!("{h:?}")
}

/// One optimizer step on a raw batch.
pub fn training_step<R: Rng + ?Sized>(
    net: &mut PriorNetwork,
    opt: &mut AdamW,
    batch: &Batch,
    stats: &LatentStats,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    rng_: &mut R,
) -> Result<StepReport> {
    let prepared = prepare_batch(batch, stats, schedule, cfg, rng_)?;
    let (loss, grad) = loss_and_grad(net, &prepared)?;
    let grad_norm = norm(&grad);
    if !loss.is_finite() || !grad_norm.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite training loss {loss} (grad norm {grad_norm}, timestep histogram {})",
            timestep_histogram(&prepared.timesteps, schedule.num_timesteps())
        )));
    }
    opt.step(net.params_mut(), &grad);
    Ok(StepReport { loss, grad_norm, dropped: prepared.dropped() })
}

/// How validation samples are drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSettings {
    pub samples_per_prompt: usize,
    pub guidance: f64,
    pub seed: u64,
}

/// Mean cosine between each prompt's text embedding and the image embeddings
/// of `samples_per_prompt` generated samples.
pub fn validate_checkpoint(
    net: &PriorNetwork,
    stats: &LatentStats,
    models: &Models,
    prompts: &[String],
    schedule: &DiffusionSchedule,
    settings: &ValidationSettings,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::invalid("validation needs at least one prompt"));
    }
    if settings.samples_per_prompt == 0 {
        return Err(Error::invalid("samples_per_prompt must be positive"));
    }
    let texts: Vec<Vec<f64>> = prompts.iter().map(|p| models.encoder.encode_text(p)).collect::<Result<_>>()?;
    let mut conds: Vec<&[f64]> = Vec::new();
    let mut seeds = Vec::new();
    for (p, t) in texts.iter().enumerate() {
        for s in 0..settings.samples_per_prompt {
            conds.push(t);
            seeds.push(rng::derive_seed(settings.seed, &[p as u64, s as u64]));
        }
    }
    let latents = sample_batch(net, &conds, schedule, settings.guidance, &seeds)?;
    let mut total = 0.0;
    for (x, cond) in latents.iter().zip(&conds) {
        let w = stats.destandardize(x);
        total += cosine_similarity(&models.embed_latent(&w)?, cond)?;
    }
    Ok(total / latents.len() as f64)
}

/// Result of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub best_score: f64,
    pub best_step: u64,
    pub last_checkpoint: PathBuf,
    /// `(step, loss)` for every step run by this call.
    pub losses: Vec<(u64, f64)>,
    /// `(step, score)` for every validation run by this call.
    pub validations: Vec<(u64, f64)>,
}

struct Session<'a> {
    cfg: &'a RunConfig,
    models: &'a Models,
    dataset: &'a Dataset,
    stats: LatentStats,
    schedule: DiffusionSchedule,
    val_schedule: DiffusionSchedule,
}

impl Session<'_> {
    fn validation(&self, step: u64) -> ValidationSettings {
        let t = &self.cfg.train;
        ValidationSettings {
            samples_per_prompt: t.val_samples_per_prompt,
            guidance: t.val_guidance,
            seed: rng::derive_seed(t.seed, &[TAG_VALIDATE, step]),
        }
    }

    fn checkpoint(
        &self,
        net: &PriorNetwork,
        ema: &EmaState,
        opt: &AdamW,
        step: u64,
        score: f64,
        best: Option<(f64, u64)>,
    ) -> Result<PriorCheckpoint> {
        let train_config =
            serde_json::to_value(self.cfg).map_err(|e| Error::Config(format!("config does not serialize: {e}")))?;
        Ok(PriorCheckpoint {
            config: net.config().clone(),
            weights: net.params().to_vec(),
            ema_weights: ema.shadow.clone(),
            stats: self.stats.clone(),
            provenance: Provenance {
                dataset_manifest_sha256: self.dataset.manifest.digest(),
                generator_id: self.models.generator.id().to_string(),
                encoder_id: self.models.encoder.id().to_string(),
                version: version_string(),
                step,
                validation_score: Some(score),
            },
            train_state: Some(TrainState {
                step,
                adam_steps: opt.steps,
                ema_updates: ema.updates_applied,
                best_score: best.map(|b| b.0),
                best_step: best.map(|b| b.1),
                train_config,
                adam_m: opt.m.clone(),
                adam_v: opt.v.clone(),
            }),
        })
    }

    fn validate(&self, ema: &EmaState, net: &PriorNetwork, step: u64) -> Result<f64> {
        let ema_net = PriorNetwork::from_params(net.config().clone(), ema.shadow.clone())?;
        validate_checkpoint(
            &ema_net,
            &self.stats,
            self.models,
            &self.cfg.train.val_prompts,
            &self.val_schedule,
            &self.validation(step),
        )
    }
}

fn append_metric(dir: &Path, step: u64, score: f64) -> Result<()> {
    use std::io::Write;
    let path = dir.join(METRICS_FILE);
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
    let mut line = String::new();
    if fresh {
        line.push_str("step,score\n");
    }
    line.push_str(&format!("{step},{score}\n"));
    f.write_all(line.as_bytes()).map_err(|e| Error::io(&path, e))
}

/// Checks a dataset against the models before any work is done.
pub fn check_compatibility(dataset: &Dataset, models: &Models) -> Result<()> {
    let m = &dataset.manifest;
    if m.latent_dim != models.generator.latent_dim() {
        return Err(Error::Config(format!(
            "dataset latent_dim {} does not match generator `{}` ({})",
            m.latent_dim,
            models.generator.id(),
            models.generator.latent_dim()
        )));
    }
    if m.embed_dim != models.encoder.embed_dim() {
        return Err(Error::Config(format!(
            "dataset embed_dim {} does not match encoder `{}` ({})",
            m.embed_dim,
            models.encoder.id(),
            models.encoder.embed_dim()
        )));
    }
    if m.generator_id != models.generator.id() {
        warn!("dataset was generated with `{}`, training against `{}`", m.generator_id, models.generator.id());
    }
    Ok(())
}

/// Trains a prior, validating EMA weights every `validate_every` steps.
///
/// Writes `best.ckpt` (highest validation score so far, initial weights
/// included), `last.ckpt` (most recent validation point) and
/// `validation.csv` into `out_dir`. With `resume`, continues from
/// `last.ckpt` when it exists; the continued run matches an uninterrupted
/// one exactly.
pub fn train(cfg: &RunConfig, dataset: &Dataset, models: &Models, out_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    cfg.train.validate()?;
    check_compatibility(dataset, models)?;
    let prior_cfg = cfg.prior_config(&dataset.manifest)?;
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let schedule = make_cosine_schedule(prior_cfg.num_timesteps)?;
    let val_schedule = match cfg.train.val_steps {
        Some(n) => respace(&schedule, n)?,
        None => schedule.clone(),
    };
    let t = &cfg.train;
    let mut sess = Session {
        cfg,
        models,
        dataset,
        stats: dataset_stats(dataset, t.per_dim_std)?,
        schedule,
        val_schedule,
    };

    let best_path = out_dir.join(BEST_CHECKPOINT);
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let mut net;
    let mut opt;
    let mut ema;
    let start;
    let mut best: Option<(f64, u64)>;
    let mut validations = Vec::new();

    if resume && last_path.exists() {
        let ck = PriorCheckpoint::load(&last_path)?;
        if ck.config != prior_cfg {
            return Err(Error::Config("checkpoint was trained with a different model configuration".into()));
        }
        let ts = ck.train_state.clone().ok_or_else(|| Error::Config("last checkpoint has no optimizer state".into()))?;
        net = ck.network()?;
        opt = AdamW::new(net.param_infos(), t.lr, (t.adam_beta1, t.adam_beta2), t.adam_eps, t.weight_decay);
        opt.restore(ts.adam_m, ts.adam_v, ts.adam_steps)?;
        ema = EmaState { shadow: ck.ema_weights, beta: t.ema_beta, update_every: t.ema_update_every, updates_applied: ts.ema_updates };
        sess.stats = ck.stats;
        start = ts.step;
        best = ts.best_score.zip(ts.best_step);
        info!("resuming from step {start}");
    } else {
        net = PriorNetwork::build(prior_cfg, rng::derive_seed(t.seed, &[TAG_INIT]))?;
        opt = AdamW::new(net.param_infos(), t.lr, (t.adam_beta1, t.adam_beta2), t.adam_eps, t.weight_decay);
        ema = EmaState::new(net.params(), t.ema_beta, t.ema_update_every);
        start = 0;
        let score = sess.validate(&ema, &net, 0)?;
        info!("step 0: validation score {score:.4}");
        append_metric(out_dir, 0, score)?;
        validations.push((0, score));
        let ck = sess.checkpoint(&net, &ema, &opt, 0, score, Some((score, 0)))?;
        ck.save(&best_path)?;
        ck.save(&last_path)?;
        best = Some((score, 0));
    }

    let n = dataset.len();
    let mut losses = Vec::with_capacity(t.iterations.saturating_sub(start) as usize);
    let mut window = 0.0;
    for step in start + 1..=t.iterations {
        let mut r = rng::stream(t.seed, &[TAG_STEP, step]);
        let indices: Vec<usize> = (0..t.batch_size).map(|_| r.random_range(0..n)).collect();
        let batch = Batch::from_dataset(dataset, &indices);
        let rep = training_step(&mut net, &mut opt, &batch, &sess.stats, &sess.schedule, t, &mut r)
            .map_err(|e| match e {
                Error::NumericFailure(m) => Error::NumericFailure(format!("step {step}: {m}")),
                other => other,
            })?;
        ema_update(&mut ema, net.params(), step)?;
        losses.push((step, rep.loss));
        window += rep.loss;
        if step % t.log_every == 0 {
            info!("step {step}: loss {:.5} grad norm {:.4}", window / t.log_every as f64, rep.grad_norm);
            window = 0.0;
        }
        if step % t.validate_every == 0 || step == t.iterations {
            let score = sess.validate(&ema, &net, step)?;
            append_metric(out_dir, step, score)?;
            validations.push((step, score));
            let improved = best.is_none_or(|(b, _)| score > b);
            if improved {
                best = Some((score, step));
            }
            info!("step {step}: validation score {score:.4}{}", if improved { " (best)" } else { "" });
            let ck = sess.checkpoint(&net, &ema, &opt, step, score, best)?;
            if improved {
                ck.save(&best_path)?;
            }
            ck.save(&last_path)?;
        }
    }
    let (best_score, best_step) = best.expect("validated at least once");
    Ok(TrainOutcome { best_checkpoint: best_path, best_score, best_step, last_checkpoint: last_path, losses, validations })
}
