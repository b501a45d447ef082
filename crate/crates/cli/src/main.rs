use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use latent_prior::data::{generate_dataset, Dataset};
use latent_prior::evaluation::{
    bundled_eval_prompts, eval_suite, load_prompt_file, noise_sweep, timing_benchmark, SweepEval,
};
use latent_prior::inference::{
    apply_edit, compose_grid, find_direction, optimize_latent_baseline, text_to_image, write_png, EditDirection,
    LoadedPrior, SampleRequest, SamplerSettings, FAST_STEPS,
};
use latent_prior::models::{load_encoder, load_generator, Models, MODEL_DIR_ENV};
use latent_prior::trainer::{train, RunConfig};
use latent_prior::Error;

#[derive(Parser, Debug)]
#[command(name = "latent-prior", version, about = "Text-conditioned latent diffusion prior for frozen image generators")]
struct Cli {
    /// Directory holding pre-trained model weights.
    #[arg(long, global = true, env = MODEL_DIR_ENV)]
    model_dir: Option<PathBuf>,
    /// Increase log detail (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample generator latents and embed their images into a sharded dataset.
    GenerateData(GenerateData),
    /// Train a prior from a config file and a dataset.
    Train(TrainCmd),
    /// Generate an image for a prompt with re-ranking.
    Sample(SampleCmd),
    /// Apply an edit direction to a sampled latent at several magnitudes.
    Edit(EditCmd),
    /// Derive an edit direction from positive and negative prompts.
    FindDirection(FindDirectionCmd),
    /// Score one re-ranked sample per prompt from a prompt file.
    Eval(EvalCmd),
    /// Train one toy prior per augmentation strength and score each.
    NoiseSweep(NoiseSweepCmd),
    /// Optimize a latent directly against the prompt embedding.
    BaselineOpt(BaselineOptCmd),
    /// Median time of one re-ranked sample.
    Bench(BenchCmd),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Generator id; defaults to the one recorded with the data or checkpoint.
    #[arg(long)]
    generator: Option<String>,
    /// Encoder id; defaults to the one recorded with the data or checkpoint.
    #[arg(long)]
    encoder: Option<String>,
}

#[derive(Args, Debug)]
struct GenerateData {
    #[arg(long, default_value = "toy")]
    generator: String,
    #[arg(long, default_value = "toy")]
    encoder: String,
    /// Number of latent/embedding pairs.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Independent latent blocks per sample (1 for w, 3 for w3).
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainCmd {
    /// Key-value training config.
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from `last.ckpt` in the output directory.
    #[arg(long)]
    resume: bool,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args, Debug)]
struct SamplerArgs {
    /// Candidates sampled per prompt before re-ranking.
    #[arg(long, default_value_t = 16)]
    n_candidates: usize,
    /// Classifier-free guidance scale on the x0 prediction.
    #[arg(long, default_value_t = 2.0)]
    guidance: f64,
    /// Respaced step count; omit for the full schedule.
    #[arg(long)]
    steps: Option<usize>,
    /// Shorthand for the respaced fast mode (`--steps 16`).
    #[arg(long, conflicts_with = "steps")]
    fast: bool,
    /// Truncation toward the mean latent (1 keeps samples unchanged).
    #[arg(long, default_value_t = 1.0)]
    truncation: f64,
    /// Sample from the raw weights instead of the EMA weights.
    #[arg(long)]
    no_ema: bool,
}

impl SamplerArgs {
    fn settings(&self) -> SamplerSettings {
        SamplerSettings {
            n_candidates: self.n_candidates,
            guidance_scale: self.guidance,
            num_steps: self.steps.or(self.fast.then_some(FAST_STEPS)),
            truncation_psi: self.truncation,
        }
    }
}

#[derive(Args, Debug)]
struct SampleCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: String,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output PNG; a JSON sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args, Debug)]
struct EditCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prompt: String,
    /// Direction JSON file.
    #[arg(long)]
    direction: PathBuf,
    /// Comma-separated edit magnitudes, one grid tile each.
    #[arg(long, default_value = "-2,-1,0,1,2", value_delimiter = ',', allow_hyphen_values = true)]
    magnitudes: Vec<f64>,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output grid PNG; a JSON sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args, Debug)]
struct FindDirectionCmd {
    #[arg(long)]
    ckpt: PathBuf,
    /// Positive prompt (repeatable).
    #[arg(long = "pos", required = true)]
    pos: Vec<String>,
    /// Negative prompt (repeatable).
    #[arg(long = "neg", required = true)]
    neg: Vec<String>,
    #[arg(long, default_value_t = 8)]
    n_per_prompt: usize,
    #[arg(long, default_value = "direction")]
    name: String,
    #[arg(long, default_value_t = 2.0)]
    guidance: f64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[arg(long)]
    ckpt: PathBuf,
    /// Prompt file; defaults to the bundled 64-prompt list.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Score prompts as written, without the "A photograph of" prefix.
    #[arg(long)]
    no_prefix: bool,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args, Debug)]
struct NoiseSweepCmd {
    /// Base training config; `noise_scale` and `seed` are overridden per run.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "0,0.5,1,4", value_delimiter = ',')]
    alphas: Vec<f64>,
    #[arg(long, default_value = "0,1", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Training iterations per run (overrides the config).
    #[arg(long, default_value_t = 5000)]
    iterations: u64,
    /// Prompt file scored after training; defaults to the config's validation prompts.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    eval_samples: usize,
    #[arg(long)]
    eval_steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    models: ModelArgs,
}

#[derive(Args, Debug)]
struct BaselineOptCmd {
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value = "toy")]
    generator: String,
    #[arg(long, default_value = "toy")]
    encoder: String,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    /// Output PNG; a JSON sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "A photograph of a person smiling")]
    prompt: String,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[command(flatten)]
    models: ModelArgs,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Capability(_) => 2,
        Error::Io { .. } | Error::Load { .. } | Error::Format { .. } => 3,
        Error::NumericFailure(_) => 4,
    }
}

fn load_models(args: &ModelArgs, gen_default: &str, enc_default: &str, dir: Option<&Path>) -> Result<Models, Error> {
    let gen_id = args.generator.as_deref().unwrap_or(gen_default);
    let enc_id = args.encoder.as_deref().unwrap_or(enc_default);
    Ok(Models { generator: load_generator(gen_id, dir)?, encoder: load_encoder(enc_id, dir)? })
}

fn load_prior(path: &Path, args: &ModelArgs, no_ema: bool, dir: Option<&Path>) -> Result<(LoadedPrior, Models), Error> {
    let ck = latent_prior::prior::PriorCheckpoint::load(path)?;
    let prior = LoadedPrior::from_checkpoint(&ck, !no_ema)?;
    let models = load_models(args, &ck.provenance.generator_id, &ck.provenance.encoder_id, dir)?;
    prior.check_models(&models)?;
    Ok((prior, models))
}

fn sidecar(png: &Path) -> PathBuf {
    png.with_extension("json")
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Error> {
    let body = serde_json::to_string_pretty(value).expect("json value serializes");
    std::fs::write(path, body).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn ensure_parent(path: &Path) -> Result<(), Error> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            std::fs::create_dir_all(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })
        }
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let dir = cli.model_dir.as_deref();
    match cli.command {
        Command::GenerateData(a) => {
            info!("generate-data: {a:?}");
            let models = Models { generator: load_generator(&a.generator, dir)?, encoder: load_encoder(&a.encoder, dir)? };
            let m = generate_dataset(&models, a.n, a.seed, a.blocks, &a.out)?;
            println!("wrote {} pairs in {} shards to {}", m.count, m.shards.len(), a.out.display());
        }
        Command::Train(a) => {
            let mut cfg = RunConfig::from_file(&a.config)?;
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            let ds = Dataset::load(&a.data)?;
            let models = load_models(&a.models, &ds.manifest.generator_id, &ds.manifest.encoder_id, dir)?;
            info!("resolved config: {}", serde_json::to_string(&cfg).expect("config serializes"));
            let out = train(&cfg, &ds, &models, &a.out, a.resume)?;
            println!("best checkpoint {} (step {}, score {:.4})", out.best_checkpoint.display(), out.best_step, out.best_score);
        }
        Command::Sample(a) => {
            let (prior, models) = load_prior(&a.ckpt, &a.models, a.sampler.no_ema, dir)?;
            let req = SampleRequest::new(&a.prompt, &a.sampler.settings(), a.seed);
            info!("resolved request: {}", serde_json::to_string(&req).expect("request serializes"));
            let out = text_to_image(&req, &prior, &models)?;
            ensure_parent(&a.out)?;
            write_png(&a.out, &out.image)?;
            write_json(
                &sidecar(&a.out),
                &json!({"prompt": a.prompt, "score": out.score, "latent": out.latent, "candidate": out.chosen,
                        "candidate_scores": out.candidate_scores, "request": req}),
            )?;
            println!("{} score {:.4}", a.out.display(), out.score);
        }
        Command::Edit(a) => {
            let (prior, models) = load_prior(&a.ckpt, &a.models, a.sampler.no_ema, dir)?;
            let direction = EditDirection::load(&a.direction)?;
            let req = SampleRequest::new(&a.prompt, &a.sampler.settings(), a.seed);
            info!("resolved request: {} magnitudes {:?}", serde_json::to_string(&req).expect("request serializes"), a.magnitudes);
            let base = text_to_image(&req, &prior, &models)?;
            let mut tiles = Vec::new();
            let mut latents = Vec::new();
            for &m in &a.magnitudes {
                let w = apply_edit(&base.latent, &direction, m)?;
                tiles.push(models.generator.synthesize(&w)?);
                latents.push(w);
            }
            ensure_parent(&a.out)?;
            write_png(&a.out, &compose_grid(&tiles, tiles.len())?)?;
            write_json(
                &sidecar(&a.out),
                &json!({"prompt": a.prompt, "direction": direction.name, "magnitudes": a.magnitudes, "latents": latents}),
            )?;
            println!("{}", a.out.display());
        }
        Command::FindDirection(a) => {
            let (prior, models) = load_prior(&a.ckpt, &a.models, false, dir)?;
            let settings = SamplerSettings { n_candidates: 1, guidance_scale: a.guidance, num_steps: a.steps, truncation_psi: 1.0 };
            info!("find-direction: pos {:?} neg {:?} n {} settings {settings:?} seed {}", a.pos, a.neg, a.n_per_prompt, a.seed);
            let d = find_direction(&a.name, &a.pos, &a.neg, a.n_per_prompt, &prior, &models, &settings, a.seed)?;
            ensure_parent(&a.out)?;
            d.save(&a.out)?;
            println!("{}", a.out.display());
        }
        Command::Eval(a) => {
            let (prior, models) = load_prior(&a.ckpt, &a.models, a.sampler.no_ema, dir)?;
            let prompts = match &a.prompts {
                Some(p) => load_prompt_file(p)?,
                None => bundled_eval_prompts(),
            };
            let settings = a.sampler.settings();
            info!("eval: {} prompts, settings {settings:?}, seed {}", prompts.len(), a.seed);
            let report = eval_suite(&prior, &models, &prompts, &settings, a.seed, !a.no_prefix)?;
            report.write(&a.out, "report")?;
            println!("mean score {:.4} over {} prompts ({:.3} s/sample)", report.mean_score, report.prompts.len(), report.seconds_per_sample);
        }
        Command::NoiseSweep(a) => {
            let mut cfg = RunConfig::from_file(&a.config)?;
            cfg.train.iterations = a.iterations;
            let ds = Dataset::load(&a.data)?;
            let models = load_models(&a.models, &ds.manifest.generator_id, &ds.manifest.encoder_id, dir)?;
            let prompts = match &a.prompts {
                Some(p) => load_prompt_file(p)?.into_iter().map(|p| p.text).collect(),
                None => cfg.train.val_prompts.clone(),
            };
            let eval = SweepEval { prompts, samples_per_prompt: a.eval_samples, num_steps: a.eval_steps.or(cfg.train.val_steps) };
            info!("resolved config: {} alphas {:?} seeds {:?}", serde_json::to_string(&cfg).expect("config serializes"), a.alphas, a.seeds);
            let table = noise_sweep(&cfg, &ds, &models, &a.alphas, &a.seeds, &eval, &a.out)?;
            for (alpha, score) in table.mean_by_alpha() {
                println!("alpha {alpha}: {score:.4}");
            }
        }
        Command::BaselineOpt(a) => {
            let models = Models { generator: load_generator(&a.generator, dir)?, encoder: load_encoder(&a.encoder, dir)? };
            info!("baseline-opt: {a:?}");
            let out = optimize_latent_baseline(&a.prompt, &models, a.blocks, a.iters, a.lr)?;
            ensure_parent(&a.out)?;
            write_png(&a.out, &models.generator.synthesize(&out.latent)?)?;
            write_json(&sidecar(&a.out), &json!({"prompt": a.prompt, "score": out.score, "latent": out.latent, "iters": a.iters, "lr": a.lr}))?;
            println!("{} score {:.4}", a.out.display(), out.score);
        }
        Command::Bench(a) => {
            let (prior, models) = load_prior(&a.ckpt, &a.models, a.sampler.no_ema, dir)?;
            let t = timing_benchmark(&prior, &models, &a.prompt, &a.sampler.settings(), a.repeats)?;
            println!("{:.4} s per sample (median of {}) on {}", t.median_seconds, t.samples.len(), t.hardware);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
