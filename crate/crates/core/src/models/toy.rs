//! Deterministic desk-scale stand-ins for a style generator and a joint
//! image/text encoder.
//!
//! The generator maps `z ∈ ℝ⁸` through a two-layer tanh MLP to `w ∈ ℝ¹⁶` and
//! decodes three style layers linearly into a 32×32 grayscale image followed
//! by a sine. The encoder is a fixed zero-mean linear map plus unit
//! normalization; its "text" side is a lookup table of named concepts whose
//! embeddings are the image embeddings of fixed anchor latents, optionally
//! pushed off the image manifold by a fixed gap vector.
//!
//! Image embeddings only occupy the first [`TOY_IMAGE_SUBSPACE`] coordinates.
//! The gap vector lives in the remaining ones, so gapped text embeddings have
//! a component no image embedding ever has.

use std::sync::Arc;

use rand_distr::{Distribution, Normal, Uniform};

use super::{Capabilities, Encoder, EncoderHandle, Generator, GeneratorHandle, Image, Models, StyleLatent};
use crate::error::{Error, Result};
use crate::linalg::{gemm, norm};
use crate::rng;

pub const TOY_Z_DIM: usize = 8;
pub const TOY_LATENT_DIM: usize = 16;
pub const TOY_HIDDEN: usize = 32;
pub const TOY_STYLE_LAYERS: usize = 3;
pub const TOY_IMAGE_SIZE: usize = 32;
pub const TOY_EMBED_DIM: usize = 32;
/// Coordinates reachable by image embeddings; the rest are text-only.
pub const TOY_IMAGE_SUBSPACE: usize = 16;
pub const TOY_SEED: u64 = 20_221_004;
/// Norm of the modality-gap offset used by the `toy-gap` encoder.
pub const TOY_GAP: f64 = 2.0;

/// Names of the toy text concepts, in anchor order.
pub const TOY_CONCEPTS: [&str; 8] =
    ["sunrise", "forest", "ocean", "desert", "glacier", "meadow", "canyon", "volcano"];

const PIXELS: usize = TOY_IMAGE_SIZE * TOY_IMAGE_SIZE;
/// Standard deviation of the synthesis pre-activation for a unit-scale latent.
const SYNTH_GAIN: f64 = 1.5;

fn normal_vec(r: &mut rng::Stream, n: usize, sd: f64) -> Vec<f64> {
    let d = Normal::new(0.0, sd).expect("valid sd");
    (0..n).map(|_| d.sample(r)).collect()
}

#[derive(Debug, Clone)]
pub struct ToyGenerator {
    w1: Vec<f64>, // hidden × z
    b1: Vec<f64>,
    w2: Vec<f64>, // latent × hidden
    b2: Vec<f64>,
    /// One `PIXELS × latent_dim` decoder per style layer.
    decoders: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl ToyGenerator {
    pub fn new(seed: u64) -> Self {
        let mut r = rng::stream(seed, &[1]);
        let w1 = normal_vec(&mut r, TOY_HIDDEN * TOY_Z_DIM, 1.0 / (TOY_Z_DIM as f64).sqrt());
        let b1 = normal_vec(&mut r, TOY_HIDDEN, 0.1);
        let w2 = normal_vec(&mut r, TOY_LATENT_DIM * TOY_HIDDEN, 1.5 / (TOY_HIDDEN as f64).sqrt());
        let b2 = normal_vec(&mut r, TOY_LATENT_DIM, 0.5);
        let dec_sd = SYNTH_GAIN / ((TOY_LATENT_DIM * TOY_STYLE_LAYERS) as f64).sqrt();
        let decoders = (0..TOY_STYLE_LAYERS)
            .map(|_| normal_vec(&mut r, PIXELS * TOY_LATENT_DIM, dec_sd))
            .collect();
        let phase = Uniform::new(-std::f64::consts::PI, std::f64::consts::PI).expect("valid range");
        let bias = (0..PIXELS).map(|_| phase.sample(&mut r)).collect();
        ToyGenerator { w1, b1, w2, b2, decoders, bias }
    }

    fn pre_activation(&self, styles: &StyleLatent) -> Vec<f64> {
        let mut pre = self.bias.clone();
        for (dec, s) in self.decoders.iter().zip(&styles.layers) {
            gemm(PIXELS, TOY_LATENT_DIM, 1, 1.0, dec, false, s, false, 1.0, &mut pre);
        }
        pre
    }
}

impl Generator for ToyGenerator {
    fn id(&self) -> &str {
        "toy"
    }

    fn z_dim(&self) -> usize {
        TOY_Z_DIM
    }

    fn latent_dim(&self) -> usize {
        TOY_LATENT_DIM
    }

    fn num_style_layers(&self) -> usize {
        TOY_STYLE_LAYERS
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { supports_style_mixing: true, differentiable: true }
    }

    fn mapping(&self, z: &[f64]) -> Vec<f64> {
        let mut h = self.b1.clone();
        gemm(TOY_HIDDEN, TOY_Z_DIM, 1, 1.0, &self.w1, false, z, false, 1.0, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        let mut w = self.b2.clone();
        gemm(TOY_LATENT_DIM, TOY_HIDDEN, 1, 1.0, &self.w2, false, &h, false, 1.0, &mut w);
        w
    }

    fn synthesize_styles(&self, styles: &StyleLatent) -> Result<Image> {
        let data = self.pre_activation(styles).into_iter().map(f64::sin).collect();
        Image::new(TOY_IMAGE_SIZE, TOY_IMAGE_SIZE, 1, data)
    }

    fn synthesize_vjp(&self, styles: &StyleLatent, d_image: &Image) -> Result<StyleLatent> {
        let pre = self.pre_activation(styles);
        let d_pre: Vec<f64> = pre.iter().zip(&d_image.data).map(|(p, d)| d * p.cos()).collect();
        let layers = self
            .decoders
            .iter()
            .map(|dec| {
                let mut ds = vec![0.0; TOY_LATENT_DIM];
                gemm(TOY_LATENT_DIM, PIXELS, 1, 1.0, dec, true, &d_pre, false, 0.0, &mut ds);
                ds
            })
            .collect();
        Ok(StyleLatent { layers })
    }
}

#[derive(Debug, Clone)]
pub struct ToyEncoder {
    id: String,
    projection: Vec<f64>, // TOY_IMAGE_SUBSPACE × PIXELS, rows sum to zero
    concepts: Vec<(String, Vec<f64>)>,
}

const TOY_MEAN: [f64; 1] = [0.0];
const TOY_STD: [f64; 1] = [0.5];

impl ToyEncoder {
    fn project(&self, pixels: &Image) -> Vec<f64> {
        let mut u = vec![0.0; TOY_EMBED_DIM];
        gemm(TOY_IMAGE_SUBSPACE, PIXELS, 1, 1.0, &self.projection, false, &pixels.data, false, 0.0, &mut u[..TOY_IMAGE_SUBSPACE]);
        u
    }

    /// Builds the encoder and anchors its text concepts to `generator`.
    /// `gap` is the length of the fixed offset added to every text embedding
    /// before renormalization; zero gives perfectly aligned modalities.
    pub fn new(seed: u64, generator: &ToyGenerator, gap: f64) -> Result<Self> {
        let mut r = rng::stream(seed, &[2]);
        let mut projection = normal_vec(&mut r, TOY_IMAGE_SUBSPACE * PIXELS, 1.0 / (PIXELS as f64).sqrt());
        for row in projection.chunks_mut(PIXELS) {
            let mean = row.iter().sum::<f64>() / PIXELS as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        let id = if gap == 0.0 {
            "toy".to_string()
        } else if gap == TOY_GAP {
            "toy-gap".to_string()
        } else {
            format!("toy-gap-{gap}")
        };
        let mut enc = ToyEncoder { id, projection, concepts: Vec::new() };

        let mut gap_dir = vec![0.0; TOY_IMAGE_SUBSPACE];
        gap_dir.extend(normal_vec(&mut rng::stream(seed, &[3]), TOY_EMBED_DIM - TOY_IMAGE_SUBSPACE, 1.0));
        super::normalize(&mut gap_dir)?;
        let mut anchor_rng = rng::stream(seed, &[4]);
        let mut concepts = Vec::with_capacity(TOY_CONCEPTS.len());
        for name in TOY_CONCEPTS {
            let z = rng::standard_normal(&mut anchor_rng, TOY_Z_DIM);
            let w = generator.mapping(&z);
            let styles = StyleLatent { layers: vec![w; TOY_STYLE_LAYERS] };
            let img = generator.synthesize_styles(&styles)?;
            let pixels = normalize_toy(&img);
            let mut e = enc.encode_image(&pixels)?;
            if gap != 0.0 {
                e.iter_mut().zip(&gap_dir).for_each(|(v, g)| *v += gap * g);
                super::normalize(&mut e)?;
            }
            concepts.push((name.to_string(), e));
        }
        enc.concepts = concepts;
        Ok(enc)
    }

    /// The anchor `z` used for concept `index`.
    pub fn anchor_z(seed: u64, index: usize) -> Vec<f64> {
        let mut anchor_rng = rng::stream(seed, &[4]);
        let mut z = Vec::new();
        for _ in 0..=index {
            z = rng::standard_normal(&mut anchor_rng, TOY_Z_DIM);
        }
        z
    }
}

fn normalize_toy(img: &Image) -> Image {
    let mut out = img.clone();
    out.data.iter_mut().for_each(|v| *v = (*v - TOY_MEAN[0]) / TOY_STD[0]);
    out
}

/// Strips the conventional caption prefix, a leading article and case.
pub fn concept_key(text: &str) -> String {
    let t = text.trim().to_lowercase();
    let t = t.strip_prefix("a photograph of").unwrap_or(&t).trim();
    let t = ["a ", "an ", "the "].iter().find_map(|a| t.strip_prefix(a)).unwrap_or(t);
    t.trim().trim_end_matches('.').trim().to_string()
}

impl Encoder for ToyEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed_dim(&self) -> usize {
        TOY_EMBED_DIM
    }

    fn image_input_size(&self) -> usize {
        TOY_IMAGE_SIZE
    }

    fn channel_mean(&self) -> &[f64] {
        &TOY_MEAN
    }

    fn channel_std(&self) -> &[f64] {
        &TOY_STD
    }

    fn encode_image(&self, pixels: &Image) -> Result<Vec<f64>> {
        if pixels.data.len() != PIXELS {
            return Err(Error::invalid(format!(
                "toy encoder expects {TOY_IMAGE_SIZE}x{TOY_IMAGE_SIZE}x1 input"
            )));
        }
        let mut u = self.project(pixels);
        super::normalize(&mut u)?;
        Ok(u)
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        let key = concept_key(text);
        self.concepts
            .iter()
            .find(|(name, _)| *name == key)
            .map(|(_, e)| e.clone())
            .ok_or_else(|| {
                Error::invalid(format!(
                    "toy encoder has no concept `{key}` (known: {})",
                    TOY_CONCEPTS.join(", ")
                ))
            })
    }

    fn encode_image_vjp(&self, pixels: &Image, d_embedding: &[f64]) -> Result<Image> {
        let u = self.project(pixels);
        let n = norm(&u);
        if n == 0.0 {
            return Err(Error::numeric("zero projection in toy encoder"));
        }
        let e: Vec<f64> = u.iter().map(|v| v / n).collect();
        let proj: f64 = e.iter().zip(d_embedding).map(|(a, b)| a * b).sum();
        let du: Vec<f64> = d_embedding.iter().zip(&e).map(|(d, ei)| (d - proj * ei) / n).collect();
        let mut dx = vec![0.0; PIXELS];
        gemm(PIXELS, TOY_IMAGE_SUBSPACE, 1, 1.0, &self.projection, true, &du[..TOY_IMAGE_SUBSPACE], false, 0.0, &mut dx);
        Image::new(TOY_IMAGE_SIZE, TOY_IMAGE_SIZE, 1, dx)
    }
}

/// Toy generator/encoder pair with aligned (or deliberately gapped) modalities.
pub fn toy_models(gap: f64) -> Result<Models> {
    let generator = ToyGenerator::new(TOY_SEED);
    let encoder = ToyEncoder::new(TOY_SEED, &generator, gap)?;
    Ok(Models {
        generator: GeneratorHandle::new(Arc::new(generator)),
        encoder: EncoderHandle::new(Arc::new(encoder)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::cosine_similarity;

    #[test]
    fn toy_dimensions() {
        let m = toy_models(0.0).unwrap();
        assert_eq!(m.generator.latent_dim(), 16);
        assert_eq!(m.generator.num_style_layers(), 3);
        assert_eq!(m.generator.z_dim(), 8);
        assert_eq!(m.encoder.embed_dim(), TOY_EMBED_DIM);
        assert_eq!(m.generator.mean_latent().len(), 16);
    }

    #[test]
    fn text_anchors_align_with_their_images() {
        let m = toy_models(0.0).unwrap();
        let anchor_embs: Vec<Vec<f64>> = (0..TOY_CONCEPTS.len())
            .map(|k| {
                let w = m.generator.mapping(&ToyEncoder::anchor_z(TOY_SEED, k));
                m.embed_latent(&w).unwrap()
            })
            .collect();
        for (k, name) in TOY_CONCEPTS.iter().enumerate() {
            let t = m.encoder.encode_text(name).unwrap();
            // Bitwise identical embeddings, so the cosine is one up to rounding.
            assert_eq!(t, anchor_embs[k], "{name}");
            assert!((cosine_similarity(&t, &anchor_embs[k]).unwrap() - 1.0).abs() < 1e-12);
            for (j, other) in anchor_embs.iter().enumerate() {
                if j != k {
                    assert!(cosine_similarity(&t, other).unwrap() < 0.99);
                }
            }
        }
    }

    #[test]
    fn gapped_text_sits_off_the_image_anchor() {
        let m = toy_models(TOY_GAP).unwrap();
        let w = m.generator.mapping(&ToyEncoder::anchor_z(TOY_SEED, 0));
        let img = m.embed_latent(&w).unwrap();
        let t = m.encoder.encode_text("A photograph of sunrise").unwrap();
        let c = cosine_similarity(&t, &img).unwrap();
        assert!((c - 1.0 / (1.0 + TOY_GAP * TOY_GAP).sqrt()).abs() < 1e-12, "cos {c}");
        assert!(img[TOY_IMAGE_SUBSPACE..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prompt_prefix_and_case_are_ignored() {
        let m = toy_models(0.0).unwrap();
        assert_eq!(
            m.encoder.encode_text("A photograph of Ocean").unwrap(),
            m.encoder.encode_text("ocean").unwrap()
        );
        assert_eq!(concept_key("A photograph of an Ocean."), "ocean");
        assert!(m.encoder.encode_text("a cat").is_err());
        assert!(m.encoder.encode_text("   ").is_err());
    }

    #[test]
    fn synthesis_is_deterministic_and_bounded() {
        let m = toy_models(0.0).unwrap();
        let w = m.generator.mean_latent().to_vec();
        let a = m.generator.synthesize(&w).unwrap();
        let b = m.generator.synthesize(&w).unwrap();
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn end_to_end_latent_gradient_matches_finite_differences() {
        let m = toy_models(0.0).unwrap();
        let target = m.encoder.encode_text("forest").unwrap();
        let score = |w: &[f64]| cosine_similarity(&m.embed_latent(w).unwrap(), &target).unwrap();
        let w: Vec<f64> = m.generator.mean_latent().to_vec();
        let img = m.generator.synthesize(&w).unwrap();
        let e = m.encoder.encode_image(&img).unwrap();
        let de = crate::models::cosine_similarity_grad(&e, &target).unwrap();
        let dimg = m.encoder.encode_image_vjp(&img, &de).unwrap();
        let dw = m.generator.synthesize_vjp(&w, &dimg).unwrap();
        for i in 0..w.len() {
            let mut p = w.clone();
            let mut q = w.clone();
            p[i] += 1e-6;
            q[i] -= 1e-6;
            let fd = (score(&p) - score(&q)) / 2e-6;
            assert!((fd - dw[i]).abs() < 1e-5, "dim {i}: fd {fd} vs {}", dw[i]);
        }
    }
}
