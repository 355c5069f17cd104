//! Image value type, 8-bit PNG I/O, and pixel-space measures.
//!
//! Values live in [0,1] as f32; quantization to 8-bit happens only when a
//! file is written. Directories of PNGs are the canonical dataset layout,
//! with lexicographic file order defining sample order.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// H x W x C raster with row-major interleaved samples in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image, clamping every sample into [0,1].
    pub fn new(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArg("image dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArg(format!(
                "channel count must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                format!("{height}x{width}x{channels}"),
                format!("{} samples", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArg("non-finite sample".into()));
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, v: f32) -> Result<Self> {
        Image::new(height, width, channels, vec![v; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel-major tensor view [C,H,W].
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut out = vec![0.0f32; c * h * w];
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    out[(ci * h + y) * w + x] = self.data[(y * w + x) * c + ci];
                }
            }
        }
        Tensor::new(vec![c, h, w], out)
    }

    /// Builds an image from a [C,H,W] tensor, clamping into [0,1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dim3();
        let mut data = vec![0.0f32; h * w * c];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = t.data()[(ci * h + y) * w + x];
                    data[(y * w + x) * c + ci] = if v.is_finite() { v } else { 0.0 };
                }
            }
        }
        Image::new(h, w, c, data)
    }

    /// Rec. 601 luma in [0,1]; identity for single-channel images.
    pub fn to_luma(&self) -> Vec<f32> {
        match self.channels {
            1 => self.data.clone(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        }
    }

    pub fn quantized_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Loads an 8-bit PNG, scaling samples into [0,1].
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    if path.as_os_str().is_empty() {
        return Err(Error::InvalidArg("empty path".into()));
    }
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode()?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma8(img) => {
            let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            Image::new(h, w, 1, data)
        }
        DynamicImage::ImageRgb8(img) => {
            let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
            Image::new(h, w, 3, data)
        }
        DynamicImage::ImageRgba8(img) => {
            // alpha dropped; PNG datasets here are opaque
            let data = img
                .into_raw()
                .chunks_exact(4)
                .flat_map(|p| [p[0], p[1], p[2]])
                .map(|v| v as f32 / 255.0)
                .collect();
            Image::new(h, w, 3, data)
        }
        DynamicImage::ImageLumaA8(img) => {
            let data = img
                .into_raw()
                .chunks_exact(2)
                .map(|p| p[0] as f32 / 255.0)
                .collect();
            Image::new(h, w, 1, data)
        }
        other => Err(Error::UnsupportedImage(format!(
            "unsupported bit depth/sample type: {:?}",
            other.color()
        ))),
    }
}

/// Writes an 8-bit PNG; samples quantized by round(v * 255).
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.as_os_str().is_empty() {
        return Err(Error::InvalidArg("empty path".into()));
    }
    let raw = img.quantized_u8();
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        _ => image::ExtendedColorType::Rgb8,
    };
    image::save_buffer(path, &raw, img.width as u32, img.height as u32, color)?;
    Ok(())
}

/// Peak signal-to-noise ratio in dB; +infinity when the images are equal.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / m).log10())
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::shape(
            format!("{}x{}x{}", a.height, a.width, a.channels),
            format!("{}x{}x{}", b.height, b.width, b.channels),
        ));
    }
    Ok(a.data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64)
}

/// PNG paths in a directory in lexicographic order.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.extension().map(|e| e == "png").unwrap_or(false) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads an entire directory of PNGs in lexicographic order.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<Image>> {
    list_pngs(dir)?.iter().map(load_image).collect()
}

/// Variance of the 4-neighbour Laplacian of the luma plane; a cheap
/// high-frequency-energy statistic.
pub fn laplacian_variance(img: &Image) -> f64 {
    let (h, w) = (img.height, img.width);
    let luma = img.to_luma();
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut vals = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = luma[y * w + x] as f64;
            let lap = luma[(y - 1) * w + x] as f64
                + luma[(y + 1) * w + x] as f64
                + luma[y * w + x - 1] as f64
                + luma[y * w + x + 1] as f64
                - 4.0 * c;
            vals.push(lap);
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| rng.random::<f32>()).collect();
        Image::new(h, w, c, data).unwrap()
    }

    #[test]
    fn load_saturated_single_pixel() {
        let dir = tempfile::tempdir().unwrap();
        let white = dir.path().join("white.png");
        let black = dir.path().join("black.png");
        image::save_buffer(&white, &[255, 255, 255], 1, 1, image::ExtendedColorType::Rgb8)
            .unwrap();
        image::save_buffer(&black, &[0, 0, 0], 1, 1, image::ExtendedColorType::Rgb8).unwrap();
        assert_eq!(load_image(&white).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(load_image(&black).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn roundtrip_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(16, 16, 3, 42);
        let p = dir.path().join("rt.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        let max_err = img
            .data()
            .iter()
            .zip(back.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1.0 / 255.0 + 1e-7, "max err {max_err}");
    }

    #[test]
    fn save_midpoint_quantizes_to_128() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::constant(4, 4, 3, 0.5).unwrap();
        let p = dir.path().join("mid.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        for &v in back.data() {
            assert!((v - 128.0 / 255.0).abs() < 1e-7);
        }
    }

    #[test]
    fn save_load_save_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(12, 9, 3, 7);
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        save_image(&img, &p1).unwrap();
        let back = load_image(&p1).unwrap();
        save_image(&back, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn empty_path_errors() {
        let img = Image::constant(4, 4, 1, 0.2).unwrap();
        assert!(save_image(&img, "").is_err());
        assert!(load_image("").is_err());
    }

    #[test]
    fn missing_file_errors() {
        assert!(load_image("/nonexistent/definitely/missing.png").is_err());
    }

    #[test]
    fn psnr_known_values() {
        let a = Image::constant(8, 8, 3, 0.0).unwrap();
        let b = Image::constant(8, 8, 3, 1.0).unwrap();
        let c = Image::constant(8, 8, 3, 0.1).unwrap();
        assert!(psnr(&a, &a).unwrap().is_infinite());
        assert!((psnr(&a, &b).unwrap() - 0.0).abs() < 1e-12);
        // MSE = 0.01 -> 10*log10(100) = 20 dB
        assert!((psnr(&a, &c).unwrap() - 20.0).abs() < 1e-4);
    }

    #[test]
    fn psnr_shape_mismatch_errors() {
        let a = Image::constant(8, 8, 3, 0.0).unwrap();
        let b = Image::constant(8, 9, 3, 0.0).unwrap();
        assert!(psnr(&a, &b).is_err());
    }

    #[test]
    fn tensor_roundtrip() {
        let img = random_image(10, 6, 3, 9);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 10, 6]);
        let back = Image::from_tensor(&t).unwrap();
        assert_eq!(back, img);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn psnr_symmetric(seed in 0u64..1000) {
            let a = random_image(9, 9, 3, seed);
            let b = random_image(9, 9, 3, seed.wrapping_add(1));
            let ab = psnr(&a, &b).unwrap();
            let ba = psnr(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
        }
    }
}
