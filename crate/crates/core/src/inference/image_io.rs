//! PNG output and image grids.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::Image;

/// Maps [-1, 1] to [0, 255], clamping out-of-range values.
pub fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Encodes an image with 1 (gray) or 3 (RGB) channels as PNG bytes.
pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let color = match image.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::invalid(format!("cannot write a {c}-channel image as PNG"))),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format("png", e.to_string()))?;
        let bytes: Vec<u8> = image.data.iter().map(|&v| to_u8(v)).collect();
        writer.write_image_data(&bytes).map_err(|e| Error::format("png", e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, image: &Image) -> Result<()> {
    let bytes = encode_png(image)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Tiles equally sized images row by row, `cols` per row, filling gaps with -1.
pub fn compose_grid(images: &[Image], cols: usize) -> Result<Image> {
    let first = images.first().ok_or_else(|| Error::invalid("grid needs at least one image"))?;
    if cols == 0 {
        return Err(Error::invalid("grid needs at least one column"));
    }
    let (w, h, c) = (first.width, first.height, first.channels);
    if images.iter().any(|i| (i.width, i.height, i.channels) != (w, h, c)) {
        return Err(Error::invalid("grid images differ in size"));
    }
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let mut grid = Image::filled(w * cols, h * rows, c, -1.0);
    for (k, img) in images.iter().enumerate() {
        let (gx, gy) = ((k % cols) * w, (k / cols) * h);
        for y in 0..h {
            let src = &img.data[y * w * c..(y + 1) * w * c];
            let start = ((gy + y) * grid.width + gx) * c;
            grid.data[start..start + w * c].copy_from_slice(src);
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_mapping_endpoints() {
        assert_eq!((to_u8(-1.0), to_u8(0.0), to_u8(1.0), to_u8(7.0)), (0, 128, 255, 255));
    }

    #[test]
    fn png_is_deterministic_and_decodable() {
        let img = Image::new(2, 2, 1, vec![-1.0, 0.0, 0.5, 1.0]).unwrap();
        let a = encode_png(&img).unwrap();
        assert_eq!(a, encode_png(&img).unwrap());
        let dec = png::Decoder::new(std::io::Cursor::new(a));
        let mut reader = dec.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size().unwrap()];
        let info = reader.next_frame(&mut buf).unwrap();
        assert_eq!(&buf[..info.buffer_size()], &[0, 128, 191, 255]);
    }

    #[test]
    fn grid_places_tiles() {
        let a = Image::filled(2, 1, 1, 0.25);
        let b = Image::filled(2, 1, 1, 0.75);
        let g = compose_grid(&[a.clone(), b, a], 2).unwrap();
        assert_eq!((g.width, g.height), (4, 2));
        assert_eq!(g.data, vec![0.25, 0.25, 0.75, 0.75, 0.25, 0.25, -1.0, -1.0]);
    }
}
