//! Augmentation-strength sweep on the toy stack with the modality-gap encoder.
//!
//! cargo run --release -p latent-prior --example toy_sweep -- [iterations] [seed,seed,...] [alpha,alpha,...] [gap]

use latent_prior::data::{generate_dataset, Dataset};
use latent_prior::evaluation::{noise_sweep, SweepEval};
use latent_prior::models::toy::{toy_models, TOY_CONCEPTS, TOY_GAP};
use latent_prior::trainer::RunConfig;

fn list<T: std::str::FromStr>(s: &str) -> Vec<T> {
    s.split(',').map(|v| v.parse().ok().expect("number")).collect()
}

fn main() -> latent_prior::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).map_or(5_000, |v| v.parse().expect("iterations"));
    let seeds: Vec<u64> = args.get(2).map_or(vec![0, 1], |v| list(v));
    let alphas: Vec<f64> = args.get(3).map_or(vec![0.0, 0.5, 1.0, 4.0], |v| list(v));
    let gap = args.get(4).map_or(TOY_GAP, |v| v.parse().expect("gap"));
    let models = toy_models(gap)?;
    let dir = std::env::temp_dir().join("toy_sweep");
    let data = dir.join("data");
    if !data.join("manifest.json").exists() {
        generate_dataset(&models, 10_000, 0, 1, &data)?;
    }
    let ds = Dataset::load(&data)?;
    let mut cfg = RunConfig::toy();
    cfg.train.iterations = iterations;
    cfg.train.validate_every = 1_000;
    let eval = SweepEval {
        prompts: TOY_CONCEPTS.iter().map(|c| c.to_string()).collect(),
        samples_per_prompt: 8,
        num_steps: Some(50),
    };
    let table = noise_sweep(&cfg, &ds, &models, &alphas, &seeds, &eval, &dir.join(format!("runs_gap_{gap}")))?;
    print!("{}", table.to_csv());
    for (a, s) in table.mean_by_alpha() {
        println!("alpha {a}: mean {s:.4}");
    }
    Ok(())
}
