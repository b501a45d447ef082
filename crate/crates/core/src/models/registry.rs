//! Adapter registry keyed by string id.
//!
//! `toy` and `toy-gap` are built in. Real pre-trained checkpoints are listed
//! with their expected dimensions so configurations can be validated, but
//! loading one requires its weight file under `$C2L_MODEL_DIR` (or an explicit
//! directory) and an adapter compiled into the binary.

use std::path::{Path, PathBuf};

use super::toy::{toy_models, TOY_GAP};
use super::{EncoderHandle, GeneratorHandle};
use crate::error::{Error, Result};

pub const MODEL_DIR_ENV: &str = "C2L_MODEL_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterKind {
    Generator,
    Encoder,
}

/// Static description of a known model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdapterInfo {
    pub id: &'static str,
    pub kind: AdapterKind,
    /// Latent width for generators, embedding width for encoders.
    pub dim: usize,
    /// Style layers for generators, input resolution for encoders.
    pub layout: usize,
    pub weight_file: Option<&'static str>,
}

const ADAPTERS: &[AdapterInfo] = &[
    AdapterInfo { id: "toy", kind: AdapterKind::Generator, dim: 16, layout: 3, weight_file: None },
    AdapterInfo {
        id: "stylegan2-ffhq-1024",
        kind: AdapterKind::Generator,
        dim: 512,
        layout: 18,
        weight_file: Some("stylegan2-ffhq-config-f.pkl"),
    },
    AdapterInfo {
        id: "stylegan3-lhq-256",
        kind: AdapterKind::Generator,
        dim: 512,
        layout: 16,
        weight_file: Some("lhq-256-stylegan3-t-25Mimg.pkl"),
    },
    AdapterInfo { id: "toy", kind: AdapterKind::Encoder, dim: 16, layout: 32, weight_file: None },
    AdapterInfo { id: "toy-gap", kind: AdapterKind::Encoder, dim: 16, layout: 32, weight_file: None },
    AdapterInfo {
        id: "clip-vit-b-32",
        kind: AdapterKind::Encoder,
        dim: 512,
        layout: 224,
        weight_file: Some("ViT-B-32.pt"),
    },
];

/// Looks up a known adapter by id and kind.
pub fn adapter_info(id: &str, kind: AdapterKind) -> Option<&'static AdapterInfo> {
    ADAPTERS.iter().find(|a| a.id == id && a.kind == kind)
}

fn model_dir(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(MODEL_DIR_ENV).map(PathBuf::from))
}

fn load_external(spec: &str, kind: AdapterKind, dir: Option<&Path>) -> Error {
    let hint = format!("place the weights under ${MODEL_DIR_ENV} or pass --model-dir");
    match adapter_info(spec, kind) {
        Some(info) => {
            let file = info.weight_file.unwrap_or_default();
            match model_dir(dir).map(|d| d.join(file)) {
                Some(path) if path.is_file() => Error::Load {
                    id: spec.to_string(),
                    reason: format!("weights found at {} but no `{spec}` adapter is compiled into this build", path.display()),
                    hint: "build with the adapter plugin enabled".into(),
                },
                Some(path) => Error::Load {
                    id: spec.to_string(),
                    reason: format!("weight file {} does not exist", path.display()),
                    hint,
                },
                None => Error::Load { id: spec.to_string(), reason: "no model directory configured".into(), hint },
            }
        }
        None if Path::new(spec).exists() => Error::Load {
            id: spec.to_string(),
            reason: "no adapter registered for checkpoint files of this kind".into(),
            hint: "use a registered adapter id".into(),
        },
        None => Error::Load {
            id: spec.to_string(),
            reason: "unknown model id and no such file".into(),
            hint: format!(
                "known ids: {}",
                ADAPTERS.iter().filter(|a| a.kind == kind).map(|a| a.id).collect::<Vec<_>>().join(", ")
            ),
        },
    }
}

/// Loads a frozen generator by adapter id or checkpoint path.
pub fn load_generator(spec: &str, dir: Option<&Path>) -> Result<GeneratorHandle> {
    match spec {
        "toy" => Ok(toy_models(0.0)?.generator),
        _ => Err(load_external(spec, AdapterKind::Generator, dir)),
    }
}

/// Loads a frozen encoder by adapter id or checkpoint path.
pub fn load_encoder(spec: &str, dir: Option<&Path>) -> Result<EncoderHandle> {
    match spec {
        "toy" => Ok(toy_models(0.0)?.encoder),
        "toy-gap" => Ok(toy_models(TOY_GAP)?.encoder),
        _ => Err(load_external(spec, AdapterKind::Encoder, dir)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_loads() {
        let g = load_generator("toy", None).unwrap();
        assert_eq!((g.latent_dim(), g.num_style_layers()), (16, 3));
        assert_eq!(load_encoder("toy-gap", None).unwrap().embed_dim(), 32);
    }

    #[test]
    fn real_adapters_are_described() {
        let info = adapter_info("stylegan2-ffhq-1024", AdapterKind::Generator).unwrap();
        assert_eq!((info.dim, info.layout), (512, 18));
        let clip = adapter_info("clip-vit-b-32", AdapterKind::Encoder).unwrap();
        assert_eq!((clip.dim, clip.layout), (512, 224));
    }

    #[test]
    fn missing_weights_and_paths_are_load_errors() {
        let dir = tempfile::tempdir().unwrap();
        match load_generator("stylegan2-ffhq-1024", Some(dir.path())) {
            Err(Error::Load { hint, .. }) => assert!(hint.contains(MODEL_DIR_ENV)),
            other => panic!("expected load error, got {other:?}"),
        }
        assert!(matches!(load_generator("/no/such/file.pkl", None), Err(Error::Load { .. })));
        assert!(matches!(load_encoder("nonexistent", None), Err(Error::Load { .. })));
    }
}
