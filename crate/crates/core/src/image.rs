//! RGB images in [0,1] and PNG/PPM decoding.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense `height x width x 3` image, row-major with interleaved channels,
/// every value in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("image must have nonzero size".into()));
        }
        if data.len() != height * width * Self::CHANNELS {
            return Err(Error::Shape(format!(
                "image {height}x{width}x3 needs {} values, got {}",
                height * width * Self::CHANNELS,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0,1]")));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Builds an image from a per-pixel closure; values are clamped to [0,1].
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * Self::CHANNELS);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..Self::CHANNELS {
                    data.push(f(r, c, ch).clamp(0.0, 1.0));
                }
            }
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::from_fn(height, width, |_, _, _| value)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[(row * self.width + col) * Self::CHANNELS + ch]
    }

    /// Sets every channel of pixel `index` (raster order) to zero.
    pub fn zero_pixel(&mut self, index: usize) {
        let base = index * Self::CHANNELS;
        self.data[base..base + Self::CHANNELS].fill(0.0);
    }

    /// SHA-256 over the dimensions and the exact f32 bit patterns.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }

    /// Bilinear resampling with half-pixel centres. Same-size input is
    /// returned unchanged.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Image {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let scale_y = self.height as f64 / out_h as f64;
        let scale_x = self.width as f64 / out_w as f64;
        let axis = |i: usize, scale: f64, len: usize| -> (usize, usize, f64) {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        };
        let mut data = Vec::with_capacity(out_h * out_w * Self::CHANNELS);
        for r in 0..out_h {
            let (r0, r1, fy) = axis(r, scale_y, self.height);
            for c in 0..out_w {
                let (c0, c1, fx) = axis(c, scale_x, self.width);
                for ch in 0..Self::CHANNELS {
                    let top = f64::from(self.get(r0, c0, ch)) * (1.0 - fx)
                        + f64::from(self.get(r0, c1, ch)) * fx;
                    let bottom = f64::from(self.get(r1, c0, ch)) * (1.0 - fx)
                        + f64::from(self.get(r1, c1, ch)) * fx;
                    let v = top * (1.0 - fy) + bottom * fy;
                    data.push((v as f32).clamp(0.0, 1.0));
                }
            }
        }
        Image {
            height: out_h,
            width: out_w,
            data,
        }
    }

    /// Writes the image as an 8-bit RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        write_file(path, &encode_rgb8(self.width, self.height, bytes)?)
    }
}

/// Decodes a PNG or PPM file and resizes it to `target_size x target_size`.
pub fn load_image(path: &Path, target_size: usize) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = ::image::load_from_memory(&bytes)
        .map_err(|e| Error::format(None, format!("{}: {e}", path.display())))?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    // alpha is dropped; gray and 16-bit inputs are widened or narrowed to 8-bit RGB
    let raw = decoded.to_rgb8().into_raw();
    let data = raw.into_iter().map(|b| f32::from(b) / 255.0).collect();
    let img = Image::new(h, w, data)?;
    Ok(img.resize_bilinear(target_size, target_size))
}

/// RGB rendering in the 0..=255 range (the explainability overlay).
#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Overlay {
    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode_png()?)
    }

    /// 8-bit RGB PNG bytes; values are rounded and clamped.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect();
        encode_rgb8(self.width, self.height, bytes)
    }
}

fn encode_rgb8(width: usize, height: usize, bytes: Vec<u8>) -> Result<Vec<u8>> {
    let buf = ::image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::Shape("pixel buffer does not match image size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, ::image::ImageFormat::Png)
        .map_err(|e| Error::Unsupported(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_ppm(path: &Path, w: usize, h: usize, pixels: &[u8]) {
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend_from_slice(pixels);
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn white_ppm_loads_as_ones() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("white.ppm");
        write_ppm(&p, 2, 2, &[255; 12]);
        let img = load_image(&p, 2).unwrap();
        assert_eq!(img.height(), 2);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkerboard_downsamples_to_block_means() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("check.ppm");
        let mut px = Vec::new();
        for r in 0..4 {
            for c in 0..4 {
                let v = if (r + c) % 2 == 0 { 255 } else { 0 };
                px.extend_from_slice(&[v, v, v]);
            }
        }
        write_ppm(&p, 4, 4, &px);
        let img = load_image(&p, 2).unwrap();
        assert_eq!((img.height(), img.width()), (2, 2));
        for &v in img.data() {
            assert!((v - 0.5).abs() < 1e-7, "{v}");
        }
    }

    #[test]
    fn same_size_png_is_not_resampled() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let img = Image::from_fn(8, 8, |r, c, ch| ((r * 8 + c + ch) % 256) as f32 / 255.0);
        img.save_png(&p).unwrap();
        let back = load_image(&p, 8).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn grayscale_is_widened_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 102, 255]);
        std::fs::write(&p, bytes).unwrap();
        let img = load_image(&p, 2).unwrap();
        assert_eq!(img.data(), &[0.0, 0.0, 0.0, 0.2, 0.2, 0.2, 0.4, 0.4, 0.4, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn undecodable_bytes_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        std::fs::write(&p, b"not an image").unwrap();
        assert!(matches!(load_image(&p, 2), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_image(Path::new("/nonexistent/nope.png"), 4).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn new_rejects_out_of_range() {
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.2]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 0.5]).is_err());
    }
}
