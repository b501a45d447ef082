//! Encoder-side image preprocessing: bicubic resize to the encoder's square
//! input size followed by per-channel normalization.

use super::{EncoderHandle, Image};
use crate::error::{Error, Result};

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

/// Resampling weights for one axis. Downsampling widens the kernel support
/// by the scale factor so the result is antialiased.
fn axis_weights(src: usize, dst: usize) -> Vec<(usize, Vec<f64>)> {
    let scale = src as f64 / dst as f64;
    let support_scale = scale.max(1.0);
    let support = 2.0 * support_scale;
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor() as isize).max(0) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut w: Vec<f64> = (lo..hi)
                .map(|j| cubic((j as f64 + 0.5 - center) / support_scale))
                .collect();
            let total: f64 = w.iter().sum();
            if total != 0.0 {
                w.iter_mut().for_each(|v| *v /= total);
            }
            (lo, w)
        })
        .collect()
}

/// Separable bicubic resize.
pub fn resize_bicubic(image: &Image, width: usize, height: usize) -> Image {
    if image.width == width && image.height == height {
        return image.clone();
    }
    let c = image.channels;
    let wx = axis_weights(image.width, width);
    let wy = axis_weights(image.height, height);
    let mut tmp = vec![0.0; image.height * width * c];
    for y in 0..image.height {
        for (x, (lo, ws)) in wx.iter().enumerate() {
            for ch in 0..c {
                tmp[(y * width + x) * c + ch] = ws
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * image.data[(y * image.width + lo + k) * c + ch])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; height * width * c];
    for (y, (lo, ws)) in wy.iter().enumerate() {
        for x in 0..width {
            for ch in 0..c {
                out[(y * width + x) * c + ch] = ws
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * tmp[((lo + k) * width + x) * c + ch])
                    .sum();
            }
        }
    }
    Image { width, height, channels: c, data: out }
}

/// Resizes to the encoder's input resolution and applies its channel
/// normalization `(x − mean) / std`.
pub fn preprocess_image(image: &Image, encoder: &EncoderHandle) -> Result<Image> {
    let mean = encoder.channel_mean();
    let std = encoder.channel_std();
    if image.channels != mean.len() {
        return Err(Error::invalid(format!(
            "image has {} channels, encoder `{}` expects {}",
            image.channels,
            encoder.id(),
            mean.len()
        )));
    }
    let size = encoder.image_input_size();
    let mut out = resize_bicubic(image, size, size);
    let c = out.channels;
    for (i, v) in out.data.iter_mut().enumerate() {
        *v = (*v - mean[i % c]) / std[i % c];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_interpolates_samples() {
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
    }

    #[test]
    fn resize_preserves_constants() {
        let img = Image::filled(37, 23, 2, 0.625);
        let out = resize_bicubic(&img, 11, 17);
        assert_eq!((out.width, out.height, out.channels), (11, 17, 2));
        for v in &out.data {
            assert!((v - 0.625).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_then_same_size_is_identity() {
        let data: Vec<f64> = (0..8 * 8).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
        let img = Image::new(8, 8, 1, data).unwrap();
        assert_eq!(resize_bicubic(&img, 8, 8), img);
    }
}
