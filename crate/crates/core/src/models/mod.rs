//! Frozen generator and encoder interfaces.
//!
//! The pipeline only ever talks to [`GeneratorHandle`] and [`EncoderHandle`].
//! A deterministic toy stack ships with the crate; real pre-trained models
//! plug in through the adapter [`registry`].

pub mod preprocess;
pub mod registry;
pub mod toy;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::rng;

pub use preprocess::preprocess_image;
pub use registry::{adapter_info, load_encoder, load_generator, AdapterInfo, MODEL_DIR_ENV};

/// Number of mapping-network samples averaged into the mean latent.
pub const MEAN_LATENT_SAMPLES: usize = 10_000;

/// Interleaved `height × width × channels` image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "image buffer of {} values does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Per-layer latent stack (the `w+` form).
#[derive(Debug, Clone, PartialEq)]
pub struct StyleLatent {
    pub layers: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub supports_style_mixing: bool,
    pub differentiable: bool,
}

/// A frozen style-based generator.
pub trait Generator: Send + Sync {
    fn id(&self) -> &str;
    fn z_dim(&self) -> usize;
    fn latent_dim(&self) -> usize;
    fn num_style_layers(&self) -> usize;
    fn capabilities(&self) -> Capabilities;

    /// Maps a Gaussian `z` to the intermediate latent space.
    fn mapping(&self, z: &[f64]) -> Vec<f64>;

    fn synthesize_styles(&self, styles: &StyleLatent) -> Result<Image>;

    /// Vector-Jacobian product of [`Generator::synthesize_styles`].
    fn synthesize_vjp(&self, _styles: &StyleLatent, _d_image: &Image) -> Result<StyleLatent> {
        Err(Error::Capability(format!("generator `{}` is not differentiable", self.id())))
    }
}

/// A frozen joint image/text encoder producing unit-norm embeddings.
pub trait Encoder: Send + Sync {
    fn id(&self) -> &str;
    fn embed_dim(&self) -> usize;
    fn image_input_size(&self) -> usize;
    fn channel_mean(&self) -> &[f64];
    fn channel_std(&self) -> &[f64];

    /// Embeds an already preprocessed image.
    fn encode_image(&self, pixels: &Image) -> Result<Vec<f64>>;

    fn encode_text(&self, text: &str) -> Result<Vec<f64>>;

    /// Vector-Jacobian product of [`Encoder::encode_image`].
    fn encode_image_vjp(&self, _pixels: &Image, _d_embedding: &[f64]) -> Result<Image> {
        Err(Error::Capability(format!("encoder `{}` is not differentiable", self.id())))
    }
}

/// Loaded generator plus its cached mean latent.
#[derive(Clone)]
pub struct GeneratorHandle {
    inner: Arc<dyn Generator>,
    mean_latent: Vec<f64>,
}

impl std::fmt::Debug for GeneratorHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneratorHandle")
            .field("id", &self.inner.id())
            .field("latent_dim", &self.inner.latent_dim())
            .field("num_style_layers", &self.inner.num_style_layers())
            .finish()
    }
}

impl GeneratorHandle {
    /// Wraps a generator and estimates its mean latent from
    /// [`MEAN_LATENT_SAMPLES`] mapped Gaussian draws.
    pub fn new(inner: Arc<dyn Generator>) -> Self {
        let mut r = rng::stream(0x6d65616e, &[]);
        let mut mean = vec![0.0; inner.latent_dim()];
        for _ in 0..MEAN_LATENT_SAMPLES {
            let z = rng::standard_normal(&mut r, inner.z_dim());
            for (m, w) in mean.iter_mut().zip(inner.mapping(&z)) {
                *m += w;
            }
        }
        mean.iter_mut().for_each(|m| *m /= MEAN_LATENT_SAMPLES as f64);
        GeneratorHandle { inner, mean_latent: mean }
    }

    pub fn id(&self) -> &str {
        self.inner.id()
    }

    pub fn z_dim(&self) -> usize {
        self.inner.z_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    pub fn num_style_layers(&self) -> usize {
        self.inner.num_style_layers()
    }

    pub fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    pub fn mean_latent(&self) -> &[f64] {
        &self.mean_latent
    }

    /// Mean latent tiled across `blocks` latent blocks.
    pub fn mean_latent_blocks(&self, blocks: usize) -> Vec<f64> {
        self.mean_latent.repeat(blocks)
    }

    pub fn mapping(&self, z: &[f64]) -> Vec<f64> {
        self.inner.mapping(z)
    }

    /// Draws `blocks` independent mapped latents (no truncation), concatenated.
    pub fn sample_latent<R: rand::Rng + ?Sized>(&self, rng_: &mut R, blocks: usize) -> Vec<f64> {
        (0..blocks)
            .flat_map(|_| {
                let z = rng::standard_normal(rng_, self.z_dim());
                self.mapping(&z)
            })
            .collect()
    }

    /// Expands a flat latent of `blocks × latent_dim` into per-layer styles.
    /// Block `b` drives a contiguous group of layers, so a single block is
    /// broadcast to every layer.
    pub fn styles_from_latent(&self, w: &[f64]) -> Result<StyleLatent> {
        let ld = self.latent_dim();
        let layers = self.num_style_layers();
        if w.is_empty() || w.len() % ld != 0 {
            return Err(Error::invalid(format!(
                "latent of length {} is not a multiple of latent_dim {ld}",
                w.len()
            )));
        }
        let blocks = w.len() / ld;
        if blocks > layers {
            return Err(Error::invalid(format!(
                "{blocks} latent blocks exceed the generator's {layers} style layers"
            )));
        }
        Ok(StyleLatent {
            layers: (0..layers)
                .map(|l| {
                    let b = l * blocks / layers;
                    w[b * ld..(b + 1) * ld].to_vec()
                })
                .collect(),
        })
    }

    /// Synthesizes an image from a flat latent (`w`, or `w3`-style blocks).
    pub fn synthesize(&self, w: &[f64]) -> Result<Image> {
        self.inner.synthesize_styles(&self.styles_from_latent(w)?)
    }

    pub fn synthesize_styles(&self, styles: &StyleLatent) -> Result<Image> {
        if styles.layers.len() != self.num_style_layers()
            || styles.layers.iter().any(|s| s.len() != self.latent_dim())
        {
            return Err(Error::invalid("style stack does not match generator layout"));
        }
        self.inner.synthesize_styles(styles)
    }

    /// Gradient of a scalar image loss with respect to a flat latent.
    pub fn synthesize_vjp(&self, w: &[f64], d_image: &Image) -> Result<Vec<f64>> {
        let styles = self.styles_from_latent(w)?;
        let d_styles = self.inner.synthesize_vjp(&styles, d_image)?;
        let ld = self.latent_dim();
        let blocks = w.len() / ld;
        let layers = self.num_style_layers();
        let mut dw = vec![0.0; w.len()];
        for (l, ds) in d_styles.layers.iter().enumerate() {
            let b = l * blocks / layers;
            for (a, v) in dw[b * ld..(b + 1) * ld].iter_mut().zip(ds) {
                *a += v;
            }
        }
        Ok(dw)
    }
}

/// Loaded encoder.
#[derive(Clone)]
pub struct EncoderHandle {
    inner: Arc<dyn Encoder>,
}

impl std::fmt::Debug for EncoderHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EncoderHandle")
            .field("id", &self.inner.id())
            .field("embed_dim", &self.inner.embed_dim())
            .finish()
    }
}

impl EncoderHandle {
    pub fn new(inner: Arc<dyn Encoder>) -> Self {
        EncoderHandle { inner }
    }

    pub fn id(&self) -> &str {
        self.inner.id()
    }

    pub fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    pub fn image_input_size(&self) -> usize {
        self.inner.image_input_size()
    }

    pub fn channel_mean(&self) -> &[f64] {
        self.inner.channel_mean()
    }

    pub fn channel_std(&self) -> &[f64] {
        self.inner.channel_std()
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        self.inner.encode_text(text)
    }

    /// Embeds a preprocessed image.
    pub fn encode_preprocessed(&self, pixels: &Image) -> Result<Vec<f64>> {
        self.inner.encode_image(pixels)
    }

    /// Preprocesses a generator image and embeds it.
    pub fn encode_image(&self, image: &Image) -> Result<Vec<f64>> {
        let pixels = preprocess_image(image, self)?;
        let e = self.inner.encode_image(&pixels)?;
        if !crate::linalg::all_finite(&e) {
            return Err(Error::numeric(format!("encoder `{}` produced a non-finite embedding", self.id())));
        }
        Ok(e)
    }

    /// Gradient of `d_embedding · encode_image(image)` with respect to the raw
    /// image. Only identity resizes are differentiable.
    pub fn encode_image_vjp(&self, image: &Image, d_embedding: &[f64]) -> Result<Image> {
        let size = self.image_input_size();
        if image.width != size || image.height != size {
            return Err(Error::Capability("resize is not differentiable in this build".into()));
        }
        let pixels = preprocess_image(image, self)?;
        let mut d = self.inner.encode_image_vjp(&pixels, d_embedding)?;
        let std = self.channel_std();
        for (i, v) in d.data.iter_mut().enumerate() {
            *v /= std[i % image.channels];
        }
        Ok(d)
    }
}

/// Generator plus encoder, the pair every pipeline stage needs.
#[derive(Debug, Clone)]
pub struct Models {
    pub generator: GeneratorHandle,
    pub encoder: EncoderHandle,
}

impl Models {
    /// Embedding of the image synthesized from a flat latent.
    pub fn embed_latent(&self, w: &[f64]) -> Result<Vec<f64>> {
        let img = self.generator.synthesize(w)?;
        self.encoder.encode_image(&img)
    }
}

/// `a · b / (‖a‖ ‖b‖)`, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("cosine of vectors with lengths {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cosine_similarity(a, b)` with respect to `a`.
pub fn cosine_similarity_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let cos = cosine_similarity(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    Ok(a.iter().zip(b).map(|(x, y)| (y / nb - cos * x / na) / na).collect())
}

/// Scales a vector to unit length.
pub fn normalize(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::numeric("cannot normalize a zero or non-finite vector"));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}
