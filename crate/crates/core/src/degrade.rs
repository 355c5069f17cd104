//! Degradation synthesis: blur -> downsample -> noise -> JPEG -> upsample.
//!
//! The composite operator turns HQ images into LQ training inputs. Every
//! stage is deterministic given its parameters; the only stochastic stage
//! (noise) draws from an explicitly seeded counter-based generator.

use image::codecs::jpeg::JpegEncoder;
use image::ImageEncoder;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::seeds;

pub const BLUR_SIGMA_RANGE: (f64, f64) = (0.1, 12.0);
pub const DOWN_SCALE_RANGE: (f64, f64) = (0.8, 8.0);
pub const NOISE_SIGMA_RANGE: (f64, f64) = (0.0, 20.0);
pub const JPEG_QUALITY_RANGE: (u8, u8) = (30, 100);

/// Parameters of the composite degradation, each within its closed range.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DegradationParams {
    /// Gaussian blur sigma in [0.1, 12].
    pub blur_sigma: f64,
    /// Down/upsampling scale r in [0.8, 8].
    pub down_scale: f64,
    /// Noise sigma on the 0-255 scale, in [0, 20].
    pub noise_sigma: f64,
    /// Baseline JPEG quality in [30, 100].
    pub jpeg_quality: u8,
}

impl DegradationParams {
    pub fn new(blur_sigma: f64, down_scale: f64, noise_sigma: f64, jpeg_quality: u8) -> Result<Self> {
        let p = DegradationParams {
            blur_sigma,
            down_scale,
            noise_sigma,
            jpeg_quality,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if !in_range(self.blur_sigma, BLUR_SIGMA_RANGE) {
            return Err(Error::InvalidArg(format!(
                "blur_sigma {} outside {:?}",
                self.blur_sigma, BLUR_SIGMA_RANGE
            )));
        }
        if !in_range(self.down_scale, DOWN_SCALE_RANGE) {
            return Err(Error::InvalidArg(format!(
                "down_scale {} outside {:?}",
                self.down_scale, DOWN_SCALE_RANGE
            )));
        }
        if !in_range(self.noise_sigma, NOISE_SIGMA_RANGE) {
            return Err(Error::InvalidArg(format!(
                "noise_sigma {} outside {:?}",
                self.noise_sigma, NOISE_SIGMA_RANGE
            )));
        }
        if self.jpeg_quality < JPEG_QUALITY_RANGE.0 || self.jpeg_quality > JPEG_QUALITY_RANGE.1 {
            return Err(Error::InvalidArg(format!(
                "jpeg_quality {} outside {:?}",
                self.jpeg_quality, JPEG_QUALITY_RANGE
            )));
        }
        Ok(())
    }
}

/// Seed for the degradation RNG streams; same seed + params + input means
/// bit-identical output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DegradationSeed(pub u64);

// ---------------------------------------------------------------------------
// Gaussian blur

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        k.push((-((i * i) as f64) / denom).exp());
    }
    let z: f64 = k.iter().sum();
    for v in &mut k {
        *v /= z;
    }
    k
}

/// Reflect (mirror-with-edge) index into [0, n).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Convolution with a normalized Gaussian truncated at radius ceil(3 sigma),
/// reflect-padded. sigma = 0 is the identity.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Result<Image> {
    if sigma < 0.0 {
        return Err(Error::InvalidArg(format!("negative blur sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as i64;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    // horizontal pass
    let mut tmp = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                let mut acc = 0.0;
                for (ki, kv) in k.iter().enumerate() {
                    let sx = reflect(x as i64 + ki as i64 - radius, w);
                    acc += kv * img.get(y, sx, ci) as f64;
                }
                tmp[(y * w + x) * c + ci] = acc;
            }
        }
    }
    // vertical pass
    let mut out = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                let mut acc = 0.0;
                for (ki, kv) in k.iter().enumerate() {
                    let sy = reflect(y as i64 + ki as i64 - radius, h);
                    acc += kv * tmp[(sy * w + x) * c + ci];
                }
                out[(y * w + x) * c + ci] = acc as f32;
            }
        }
    }
    Image::new(h, w, c, out)
}

// ---------------------------------------------------------------------------
// Bicubic resampling

fn catmull_rom(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Resizes `count` independent lines of length `src_len`. Line `r` holds its
/// elements at src[r*row_stride + i*elem_stride]; output lines are contiguous.
fn resize_axis(
    src: &[f64],
    src_len: usize,
    dst_len: usize,
    elem_stride: usize,
    row_stride: usize,
    count: usize,
) -> Vec<f64> {
    let mut out = vec![0.0f64; dst_len * count];
    let scale = src_len as f64 / dst_len as f64;
    for d in 0..dst_len {
        let sx = (d as f64 + 0.5) * scale - 0.5;
        let base = sx.floor() as i64;
        let mut taps = [(0usize, 0.0f64); 4];
        let mut wsum = 0.0;
        for (ti, tap) in taps.iter_mut().enumerate() {
            let si = base - 1 + ti as i64;
            let wgt = catmull_rom(sx - si as f64);
            let ci = si.clamp(0, src_len as i64 - 1) as usize;
            *tap = (ci, wgt);
            wsum += wgt;
        }
        for r in 0..count {
            let mut acc = 0.0;
            for &(ci, wgt) in &taps {
                acc += wgt * src[r * row_stride + ci * elem_stride];
            }
            out[r * dst_len + d] = acc / wsum;
        }
    }
    out
}

/// Bicubic (Catmull-Rom) resize to explicit output dimensions. Equal
/// dimensions short-circuit to an exact copy.
pub fn resize_bicubic(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArg("resample to zero-size output".into()));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    if (out_h, out_w) == (h, w) {
        return Ok(img.clone());
    }
    let mut out = vec![0.0f32; out_h * out_w * c];
    for ci in 0..c {
        // planar copy of one channel
        let plane: Vec<f64> = (0..h * w).map(|i| img.data()[i * c + ci] as f64).collect();
        // horizontal: h rows of length w
        let hpass = resize_axis(&plane, w, out_w, 1, w, h); // [h, out_w]
        // vertical: out_w columns of length h
        let vpass = resize_axis(&hpass, h, out_h, out_w, 1, out_w); // [out_w, out_h]
        for x in 0..out_w {
            for y in 0..out_h {
                out[(y * out_w + x) * c + ci] = vpass[x * out_h + y] as f32;
            }
        }
    }
    Image::new(out_h, out_w, c, out)
}

/// Downsamples by `factor`: output dims are round(dim / factor).
pub fn resample_down(img: &Image, factor: f64) -> Result<Image> {
    if factor <= 0.0 {
        return Err(Error::InvalidArg(format!("resample factor {factor} <= 0")));
    }
    let oh = (img.height() as f64 / factor).round() as usize;
    let ow = (img.width() as f64 / factor).round() as usize;
    resize_bicubic(img, oh, ow)
}

/// Upsamples by `factor`: output dims are round(dim * factor).
pub fn resample_up(img: &Image, factor: f64) -> Result<Image> {
    if factor <= 0.0 {
        return Err(Error::InvalidArg(format!("resample factor {factor} <= 0")));
    }
    let oh = (img.height() as f64 * factor).round() as usize;
    let ow = (img.width() as f64 * factor).round() as usize;
    resize_bicubic(img, oh, ow)
}

// ---------------------------------------------------------------------------
// Noise

/// Adds i.i.d. N(0, (sigma255/255)^2) noise, clamped to [0,1].
pub fn add_gaussian_noise(img: &Image, sigma255: f64, seed: DegradationSeed) -> Result<Image> {
    if sigma255 < 0.0 {
        return Err(Error::InvalidArg(format!("negative noise sigma {sigma255}")));
    }
    if sigma255 == 0.0 {
        return Ok(img.clone());
    }
    let std = sigma255 / 255.0;
    let normal = Normal::new(0.0, std).expect("validated std");
    let mut rng = seeds::rng(seed.0, "degrade.noise", 0);
    let data = img
        .data()
        .iter()
        .map(|&v| (v as f64 + normal.sample(&mut rng)) as f32)
        .collect();
    Image::new(img.height(), img.width(), img.channels(), data)
}

// ---------------------------------------------------------------------------
// JPEG

/// Baseline JPEG encode/decode round trip at the given quality.
pub fn jpeg_roundtrip(img: &Image, quality: u8) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArg(format!("jpeg quality {quality} outside [1,100]")));
    }
    let raw = img.quantized_u8();
    let color = match img.channels() {
        1 => image::ExtendedColorType::L8,
        _ => image::ExtendedColorType::Rgb8,
    };
    let mut buf = Vec::new();
    let encoder = JpegEncoder::new_with_quality(&mut buf, quality);
    encoder.write_image(&raw, img.width() as u32, img.height() as u32, color)?;
    let decoded = image::load_from_memory(&buf)?;
    let (h, w) = (decoded.height() as usize, decoded.width() as usize);
    if (h, w) != (img.height(), img.width()) {
        return Err(Error::shape(
            format!("{}x{}", img.height(), img.width()),
            format!("{h}x{w}"),
        ));
    }
    let out = match img.channels() {
        1 => {
            let g = decoded.into_luma8();
            Image::new(h, w, 1, g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
        _ => {
            let rgb = decoded.into_rgb8();
            Image::new(h, w, 3, rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
    }?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Composite

/// Full degradation: blur, downsample by r, add noise, JPEG, upsample back
/// to the input dimensions.
pub fn degrade(img: &Image, params: &DegradationParams, seed: DegradationSeed) -> Result<Image> {
    params.validate()?;
    let blurred = gaussian_blur(img, params.blur_sigma)?;
    let down = resample_down(&blurred, params.down_scale)?;
    let noisy = add_gaussian_noise(&down, params.noise_sigma, seed)?;
    let coded = jpeg_roundtrip(&noisy, params.jpeg_quality)?;
    resize_bicubic(&coded, img.height(), img.width())
}

/// Uniform parameter draws within the documented ranges.
pub fn sample_params(seed: DegradationSeed) -> DegradationParams {
    let mut rng = seeds::rng(seed.0, "degrade.params", 0);
    DegradationParams {
        blur_sigma: rng.random_range(BLUR_SIGMA_RANGE.0..=BLUR_SIGMA_RANGE.1),
        down_scale: rng.random_range(DOWN_SCALE_RANGE.0..=DOWN_SCALE_RANGE.1),
        noise_sigma: rng.random_range(NOISE_SIGMA_RANGE.0..=NOISE_SIGMA_RANGE.1),
        jpeg_quality: rng.random_range(JPEG_QUALITY_RANGE.0..=JPEG_QUALITY_RANGE.1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::psnr;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textured synthetic image: a few sinusoids plus a ramp.
    fn textured(h: usize, w: usize) -> Image {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let fy = y as f32 / h as f32;
                let fx = x as f32 / w as f32;
                let t = (12.0 * fx).sin() * (9.0 * fy).cos();
                data.push((0.5 + 0.4 * t).clamp(0.0, 1.0));
                data.push((fx * 0.8 + 0.1).clamp(0.0, 1.0));
                data.push((0.5 + 0.3 * (20.0 * (fx + fy)).sin()).clamp(0.0, 1.0));
            }
        }
        Image::new(h, w, 3, data).unwrap()
    }

    #[test]
    fn blur_zero_sigma_is_identity() {
        let img = textured(16, 16);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn blur_negative_sigma_errors() {
        let img = textured(8, 8);
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Image::constant(16, 16, 3, 0.37).unwrap();
        let out = gaussian_blur(&img, 4.0).unwrap();
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_impulse_matches_sampled_gaussian() {
        let mut data = vec![0.0f32; 9 * 9];
        data[4 * 9 + 4] = 1.0;
        let img = Image::new(9, 9, 1, data).unwrap();
        let sigma = 1.0f64;
        let out = gaussian_blur(&img, sigma).unwrap();
        // oracle: normalized truncated 2-D Gaussian evaluated directly
        let radius = 3i64;
        let mut k2 = vec![0.0f64; 7 * 7];
        let mut z = 0.0;
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let v = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                k2[((dy + radius) * 7 + (dx + radius)) as usize] = v;
                z += v;
            }
        }
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let expect = k2[((dy + radius) * 7 + (dx + radius)) as usize] / z;
                let got = out.get((4 + dy) as usize, (4 + dx) as usize, 0) as f64;
                assert!((got - expect).abs() < 1e-6, "at {dy},{dx}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn resample_factor_one_is_identity() {
        let img = textured(20, 14);
        assert_eq!(resample_down(&img, 1.0).unwrap(), img);
        assert_eq!(resample_up(&img, 1.0).unwrap(), img);
    }

    #[test]
    fn resample_constant_stays_constant() {
        let img = Image::constant(16, 16, 3, 0.42).unwrap();
        for factor in [0.8, 1.7, 2.0, 3.3] {
            let down = resample_down(&img, factor).unwrap();
            for &v in down.data() {
                assert!((v - 0.42).abs() < 1e-6);
            }
            let up = resample_up(&img, factor).unwrap();
            for &v in up.data() {
                assert!((v - 0.42).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn resample_down_up_on_ramp_is_accurate() {
        let h = 32;
        let w = 32;
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(0.1 + 0.8 * (x as f32 + y as f32) / ((h + w) as f32));
            }
        }
        let img = Image::new(h, w, 1, data).unwrap();
        let down = resample_down(&img, 2.0).unwrap();
        let up = resize_bicubic(&down, h, w).unwrap();
        let max_err = img
            .data()
            .iter()
            .zip(up.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 0.02, "max err {max_err}");
    }

    #[test]
    fn resample_zero_output_errors() {
        let img = textured(8, 8);
        // 8 / 20 rounds to 0
        assert!(resample_down(&img, 20.0).is_err());
    }

    #[test]
    fn noise_zero_sigma_identity_and_determinism() {
        let img = textured(16, 16);
        assert_eq!(add_gaussian_noise(&img, 0.0, DegradationSeed(5)).unwrap(), img);
        let a = add_gaussian_noise(&img, 8.0, DegradationSeed(5)).unwrap();
        let b = add_gaussian_noise(&img, 8.0, DegradationSeed(5)).unwrap();
        assert_eq!(a, b);
        assert!(add_gaussian_noise(&img, -0.1, DegradationSeed(5)).is_err());
    }

    #[test]
    fn noise_empirical_std_matches() {
        let img = Image::constant(256, 256, 1, 0.5).unwrap();
        let out = add_gaussian_noise(&img, 10.0, DegradationSeed(21)).unwrap();
        let diffs: Vec<f64> = out
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b) as f64)
            .collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / diffs.len() as f64;
        let std = var.sqrt();
        let expect = 10.0 / 255.0;
        assert!((std - expect).abs() / expect < 0.05, "std {std} vs {expect}");
    }

    #[test]
    fn jpeg_quality_bounds() {
        let img = textured(16, 16);
        assert!(jpeg_roundtrip(&img, 0).is_err());
        assert!(jpeg_roundtrip(&img, 101).is_err());
    }

    #[test]
    fn jpeg_q100_near_lossless_on_gradient() {
        let h = 32;
        let w = 32;
        let data: Vec<f32> = (0..h * w)
            .map(|i| 0.2 + 0.6 * ((i % w) as f32 / w as f32))
            .collect();
        let img = Image::new(h, w, 1, data).unwrap();
        let out = jpeg_roundtrip(&img, 100).unwrap();
        assert!(psnr(&out, &img).unwrap() > 40.0);
    }

    #[test]
    fn jpeg_q30_is_lossy_on_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..32 * 32).map(|_| rng.random::<f32>()).collect();
        let img = Image::new(32, 32, 1, data).unwrap();
        let out = jpeg_roundtrip(&img, 30).unwrap();
        assert_ne!(out, img);
    }

    #[test]
    fn jpeg_constant_midgray_survives() {
        let img = Image::constant(32, 32, 3, 0.5).unwrap();
        for q in [30, 50, 80, 100] {
            let out = jpeg_roundtrip(&img, q).unwrap();
            assert!(psnr(&out, &img).unwrap() > 50.0, "quality {q}");
        }
    }

    #[test]
    fn degrade_near_identity_extremes() {
        let img = textured(32, 32);
        let params = DegradationParams::new(0.1, 1.0, 0.0, 100).unwrap();
        let out = degrade(&img, &params, DegradationSeed(0)).unwrap();
        assert_eq!((out.height(), out.width()), (32, 32));
        assert!(psnr(&out, &img).unwrap() > 35.0);
    }

    #[test]
    fn degrade_deterministic() {
        let img = textured(32, 32);
        let params = sample_params(DegradationSeed(77));
        let a = degrade(&img, &params, DegradationSeed(99)).unwrap();
        let b = degrade(&img, &params, DegradationSeed(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn degrade_heavy_is_destructive() {
        let img = textured(64, 64);
        let params = DegradationParams::new(12.0, 8.0, 20.0, 30).unwrap();
        let out = degrade(&img, &params, DegradationSeed(4)).unwrap();
        assert_eq!((out.height(), out.width()), (64, 64));
        assert!(psnr(&out, &img).unwrap() < 25.0);
    }

    #[test]
    fn sampled_params_within_ranges_and_cover() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..10_000u64 {
            let p = sample_params(DegradationSeed(i));
            p.validate().unwrap();
            lo = lo.min(p.blur_sigma);
            hi = hi.max(p.blur_sigma);
        }
        let span = BLUR_SIGMA_RANGE.1 - BLUR_SIGMA_RANGE.0;
        assert!((hi - lo) / span >= 0.95, "coverage {}", (hi - lo) / span);
        assert_eq!(sample_params(DegradationSeed(123)), sample_params(DegradationSeed(123)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn degrade_output_stays_in_unit_range(seed in 0u64..500) {
            let img = textured(24, 24);
            let p = sample_params(DegradationSeed(seed));
            // guard against zero-size intermediates on the small test image
            prop_assume!((24.0 / p.down_scale).round() >= 1.0);
            let out = degrade(&img, &p, DegradationSeed(seed ^ 0xabc)).unwrap();
            prop_assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!((out.height(), out.width()), (24, 24));
        }
    }
}
