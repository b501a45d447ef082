use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use latent_prior::models::{cosine_similarity, toy::toy_models};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_latent-prior"));
    c.arg("--quiet");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_CONFIG: &str = "\
timesteps 1000
dim 32
depth 1
dim_head 8
heads 2
iterations 20
batch_size 8
lr 1e-3
ema_beta 0.9
ema_update_every 2
validate_every 10
val_samples_per_prompt 1
val_steps 4
log_every 10
val_prompt forest
val_prompt ocean
";

struct Fixture {
    dir: PathBuf,
    data: PathBuf,
    config: PathBuf,
    ckpt: PathBuf,
}

/// A dataset and a briefly trained checkpoint shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let data = dir.join("data");
        ok(&["generate-data", "--n", "1000", "--seed", "7", "--out", p(&data)]);
        let config = dir.join("tiny.conf");
        std::fs::write(&config, TINY_CONFIG).unwrap();
        let run_dir = dir.join("run");
        let stdout = ok(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&run_dir)]);
        assert!(stdout.contains("best checkpoint"), "{stdout}");
        Fixture { ckpt: run_dir.join("best.ckpt"), dir, data, config }
    })
}

#[test]
fn generate_data_is_reproducible() {
    let f = fixture();
    let again = f.dir.join("data_again");
    ok(&["generate-data", "--generator", "toy", "--encoder", "toy", "--n", "1000", "--seed", "7", "--out", p(&again)]);
    let a = std::fs::read(f.data.join("shard_00000.bin")).unwrap();
    let b = std::fs::read(again.join("shard_00000.bin")).unwrap();
    assert_eq!(a, b);
    assert!(f.data.join("manifest.json").is_file());
}

#[test]
fn usage_and_config_errors_exit_2() {
    let out = run(&["generate-data", "--n", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));

    let f = fixture();
    let bad = f.dir.join("bad.conf");
    std::fs::write(&bad, "learning_rate 1e-3\n").unwrap();
    let out = run(&["train", "--config", p(&bad), "--data", p(&f.data), "--out", p(&f.dir.join("bad_run"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run(&["generate-data", "--n", "10", "--out", "x", "--bogus-flag"]).status.code() == Some(2));
}

#[test]
fn missing_inputs_exit_3() {
    let f = fixture();
    let out = run(&["sample", "--ckpt", p(&f.dir.join("nope.ckpt")), "--prompt", "forest", "--out", p(&f.dir.join("x.png"))]);
    assert_eq!(out.status.code(), Some(3));
    let out = run(&["generate-data", "--generator", "stylegan2-ffhq-1024", "--n", "10", "--out", p(&f.dir.join("y"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("C2L_MODEL_DIR"));
}

#[test]
fn train_resume_continues() {
    let f = fixture();
    let run_dir = f.dir.join("resume_run");
    ok(&["train", "--config", p(&f.config), "--data", p(&f.data), "--out", p(&run_dir)]);
    let before = std::fs::read_to_string(run_dir.join("validation.csv")).unwrap();
    let cfg = f.dir.join("longer.conf");
    std::fs::write(&cfg, TINY_CONFIG.replace("iterations 20", "iterations 30")).unwrap();
    ok(&["train", "--config", p(&cfg), "--data", p(&f.data), "--out", p(&run_dir), "--resume"]);
    let after = std::fs::read_to_string(run_dir.join("validation.csv")).unwrap();
    assert!(after.starts_with(&before));
    assert!(after.lines().last().unwrap().starts_with("30,"));
}

#[test]
fn sample_writes_png_and_sidecar_deterministically() {
    let f = fixture();
    let a = f.dir.join("s/a.png");
    let b = f.dir.join("s/b.png");
    for out in [&a, &b] {
        ok(&["sample", "--ckpt", p(&f.ckpt), "--prompt", "A photograph of a forest", "--n-candidates", "3", "--steps", "5", "--seed", "4", "--out", p(out)]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.with_extension("json")).unwrap()).unwrap();
    assert_eq!(side["prompt"], "A photograph of a forest");
    assert_eq!(side["latent"].as_array().unwrap().len(), 16);
    let scores: Vec<f64> = side["candidate_scores"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(side["score"].as_f64().unwrap(), scores.iter().cloned().fold(f64::MIN, f64::max));
}

#[test]
fn find_direction_swap_negates_and_edit_uses_it() {
    let f = fixture();
    let d1 = f.dir.join("d1.json");
    let d2 = f.dir.join("d2.json");
    ok(&["find-direction", "--ckpt", p(&f.ckpt), "--pos", "forest", "--neg", "desert", "--n-per-prompt", "2", "--steps", "4", "--out", p(&d1)]);
    ok(&["find-direction", "--ckpt", p(&f.ckpt), "--pos", "desert", "--neg", "forest", "--n-per-prompt", "2", "--steps", "4", "--out", p(&d2)]);
    let read = |path: &Path| -> Vec<f64> {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        v["vector"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
    };
    let (a, b) = (read(&d1), read(&d2));
    assert!(a.iter().zip(&b).all(|(x, y)| *x == -*y));

    let grid = f.dir.join("edit/grid.png");
    ok(&["edit", "--ckpt", p(&f.ckpt), "--prompt", "forest", "--direction", p(&d1), "--magnitudes", "-1,0,1", "--n-candidates", "1", "--steps", "4", "--out", p(&grid)]);
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(grid.with_extension("json")).unwrap()).unwrap();
    assert_eq!(side["latents"].as_array().unwrap().len(), 3);
}

#[test]
fn eval_on_toy_prompts_writes_reports() {
    let f = fixture();
    let prompts = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/toy_prompts.txt");
    let out = f.dir.join("eval");
    ok(&["eval", "--ckpt", p(&f.ckpt), "--prompts", p(&prompts), "--n-candidates", "2", "--steps", "4", "--out", p(&out)]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["prompts"].as_array().unwrap().len(), 8);
    assert_eq!(std::fs::read_to_string(out.join("report.csv")).unwrap().lines().count(), 9);
}

#[test]
fn noise_sweep_writes_table() {
    let f = fixture();
    let out = f.dir.join("sweep");
    let stdout = ok(&["noise-sweep", "--config", p(&f.config), "--data", p(&f.data), "--alphas", "0,1", "--seeds", "0", "--iterations", "4", "--eval-samples", "1", "--out", p(&out)]);
    assert_eq!(stdout.lines().count(), 2);
    assert_eq!(std::fs::read_to_string(out.join("sweep.csv")).unwrap().lines().count(), 3);
}

#[test]
fn baseline_opt_with_no_iterations_scores_the_mean_latent() {
    let f = fixture();
    let out = f.dir.join("base/zero.png");
    ok(&["baseline-opt", "--prompt", "volcano", "--iters", "0", "--out", p(&out)]);
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    let models = toy_models(0.0).unwrap();
    let expect = cosine_similarity(
        &models.embed_latent(models.generator.mean_latent()).unwrap(),
        &models.encoder.encode_text("volcano").unwrap(),
    )
    .unwrap();
    assert_eq!(side["score"].as_f64().unwrap(), expect);
}

#[test]
fn bench_reports_median() {
    let f = fixture();
    let stdout = ok(&["bench", "--ckpt", p(&f.ckpt), "--prompt", "forest", "--n-candidates", "1", "--steps", "2", "--repeats", "1"]);
    assert!(stdout.contains("s per sample"));
}

#[test]
fn help_lists_flags_with_defaults() {
    let cases: &[(&str, &[&str])] = &[
        ("generate-data", &["--generator", "--encoder", "--n", "--seed", "--out", "[default: toy]"]),
        ("train", &["--config", "--data", "--out", "--resume"]),
        ("sample", &["--n-candidates", "[default: 16]", "--guidance", "[default: 2]", "--steps", "--fast", "--truncation", "--seed"]),
        ("edit", &["--direction", "--magnitudes"]),
        ("find-direction", &["--pos", "--neg", "--n-per-prompt"]),
        ("eval", &["--prompts", "--no-prefix"]),
        ("noise-sweep", &["--alphas", "[default: 0,0.5,1,4]", "--iterations", "[default: 5000]"]),
        ("baseline-opt", &["--iters", "[default: 500]", "--lr"]),
        ("bench", &["--repeats"]),
    ];
    for (cmd, flags) in cases {
        let text = ok(&[cmd, "--help"]);
        for flag in *flags {
            assert!(text.contains(flag), "{cmd} --help lacks {flag}:\n{text}");
        }
    }
}
