//! Trains the toy prior at reference settings and prints validation scores
//! next to the random-latent baseline.
//!
//! cargo run --release -p latent-prior --example toy_reference -- [iterations] [noise_scale] [seed]

use latent_prior::data::{generate_dataset, Dataset};
use latent_prior::evaluation::random_latent_baseline;
use latent_prior::models::toy::toy_models;
use latent_prior::trainer::{train, RunConfig};

fn main() -> latent_prior::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).map_or(20_000, |v| v.parse().expect("iterations"));
    let alpha = args.get(2).map_or(1.0, |v| v.parse().expect("noise scale"));
    let seed = args.get(3).map_or(0, |v| v.parse().expect("seed"));
    let models = toy_models(0.0)?;
    let dir = std::env::temp_dir().join(format!("toy_reference_{seed}"));
    let data = dir.join("data");
    if !data.join("manifest.json").exists() {
        generate_dataset(&models, 10_000, seed, 1, &data)?;
    }
    let ds = Dataset::load(&data)?;
    let mut cfg = RunConfig::toy();
    cfg.train.iterations = iterations;
    cfg.train.noise_scale = alpha;
    cfg.train.seed = seed;
    let start = std::time::Instant::now();
    let out = train(&cfg, &ds, &models, &dir.join(format!("run_{alpha}")), false)?;
    let baseline = random_latent_baseline(&models, &cfg.train.val_prompts, 100, 1, seed)?;
    for (step, score) in &out.validations {
        println!("step {step:>6}  score {score:.4}");
    }
    println!("best {:.4} at {}  baseline {baseline:.4}  margin {:.4}  ({:.1}s)", out.best_score, out.best_step, out.best_score - baseline, start.elapsed().as_secs_f64());
    Ok(())
}
