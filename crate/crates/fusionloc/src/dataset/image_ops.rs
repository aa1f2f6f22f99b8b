//! Image preprocessing: rescale, crop, color jitter, normalization.

use image::{Rgb, RgbImage};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Scalar;

/// Per-channel normalization constants on the `[0, 1]` pixel scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ChannelNorm {
    fn default() -> Self {
        Self { mean: [0.5, 0.5, 0.5], std: [0.25, 0.25, 0.25] }
    }
}

/// Train uses a random crop, eval a center crop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessMode {
    Train,
    Eval,
}

/// Augmentation strengths; all zero means the identity transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self { brightness: 0.7, contrast: 0.7, saturation: 0.7, hue: 0.5 }
    }
}

impl JitterConfig {
    pub fn off() -> Self {
        Self { brightness: 0.0, contrast: 0.0, saturation: 0.0, hue: 0.0 }
    }
}

/// Separable bilinear resize; deterministic and exact for integer scale maps.
pub fn resize_bilinear(img: &RgbImage, out_w: u32, out_h: u32) -> RgbImage {
    let (in_w, in_h) = img.dimensions();
    if (in_w, in_h) == (out_w, out_h) {
        return img.clone();
    }
    let mut out = RgbImage::new(out_w, out_h);
    let sx = in_w as f64 / out_w as f64;
    let sy = in_h as f64 / out_h as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, in_h as f64 - 1.0);
        let y0 = fy.floor() as u32;
        let y1 = (y0 + 1).min(in_h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, in_w as f64 - 1.0);
            let x0 = fx.floor() as u32;
            let x1 = (x0 + 1).min(in_w - 1);
            let wx = fx - x0 as f64;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v00 = img.get_pixel(x0, y0)[c] as f64;
                let v10 = img.get_pixel(x1, y0)[c] as f64;
                let v01 = img.get_pixel(x0, y1)[c] as f64;
                let v11 = img.get_pixel(x1, y1)[c] as f64;
                let v = v00 * (1.0 - wx) * (1.0 - wy)
                    + v10 * wx * (1.0 - wy)
                    + v01 * (1.0 - wx) * wy
                    + v11 * wx * wy;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(ox, oy, Rgb(px));
        }
    }
    out
}

/// Scale so the short side equals `short`, preserving aspect ratio.
pub fn resize_short_side(img: &RgbImage, short: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if w <= h {
        let out_w = short;
        let out_h = ((h as f64 * short as f64 / w as f64).round() as u32).max(1);
        resize_bilinear(img, out_w, out_h)
    } else {
        let out_h = short;
        let out_w = ((w as f64 * short as f64 / h as f64).round() as u32).max(1);
        resize_bilinear(img, out_w, out_h)
    }
}

fn crop(img: &RgbImage, x: u32, y: u32, size: u32) -> RgbImage {
    let mut out = RgbImage::new(size, size);
    for oy in 0..size {
        for ox in 0..size {
            out.put_pixel(ox, oy, *img.get_pixel(x + ox, y + oy));
        }
    }
    out
}

/// Geometric part of preprocessing: scale the short side to `size`, then a
/// random (train) or center (eval) square crop of `size`.
pub fn scale_and_crop(
    img: &RgbImage,
    size: u32,
    mode: PreprocessMode,
    rng: &mut ChaCha8Rng,
) -> RgbImage {
    let scaled = resize_short_side(img, size);
    let (w, h) = scaled.dimensions();
    let (x, y) = match mode {
        PreprocessMode::Train => {
            let x = if w > size { rng.gen_range(0..=(w - size)) } else { 0 };
            let y = if h > size { rng.gen_range(0..=(h - size)) } else { 0 };
            (x, y)
        }
        PreprocessMode::Eval => ((w - size) / 2, (h - size) / 2),
    };
    crop(&scaled, x, y, size)
}

/// Full preprocessing to a normalized `(3, size, size)` tensor in CHW order.
pub fn preprocess_image<T: Scalar>(
    img: &RgbImage,
    mode: PreprocessMode,
    rng: &mut ChaCha8Rng,
    norm: &ChannelNorm,
    size: u32,
) -> Array3<T> {
    let cropped = scale_and_crop(img, size, mode, rng);
    let s = size as usize;
    let mut out = Array3::<T>::zeros((3, s, s));
    for y in 0..s {
        for x in 0..s {
            let px = cropped.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                out[[c, y, x]] = T::of_f64((v - norm.mean[c]) / norm.std[c]);
            }
        }
    }
    out
}

fn apply_rgb(img: &mut RgbImage, f: impl Fn([f64; 3]) -> [f64; 3]) {
    for px in img.pixels_mut() {
        let v = f([px[0] as f64, px[1] as f64, px[2] as f64]);
        for c in 0..3 {
            px[c] = v[c].round().clamp(0.0, 255.0) as u8;
        }
    }
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv(p: [f64; 3]) -> (f64, f64, f64) {
    let (r, g, b) = (p[0] / 255.0, p[1] / 255.0, p[2] / 255.0);
    let mx = r.max(g).max(b);
    let mn = r.min(g).min(b);
    let d = mx - mn;
    let h = if d == 0.0 {
        0.0
    } else if mx == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if mx == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if mx == 0.0 { 0.0 } else { d / mx };
    (h, s, mx)
}

/// Color jitter: brightness / contrast / saturation factors drawn uniformly
/// from `[1 - strength, 1 + strength]` (clamped at 0), hue shift in turns
/// from `[-hue, hue]`. Zero strengths are an exact identity.
pub fn color_jitter(img: &RgbImage, cfg: &JitterConfig, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut out = img.clone();
    let draw = |rng: &mut ChaCha8Rng, s: f64| -> f64 {
        if s <= 0.0 {
            1.0
        } else {
            rng.gen_range((1.0 - s).max(0.0)..=1.0 + s)
        }
    };
    let b = draw(rng, cfg.brightness);
    let c = draw(rng, cfg.contrast);
    let s = draw(rng, cfg.saturation);
    let h = if cfg.hue <= 0.0 { 0.0 } else { rng.gen_range(-cfg.hue..=cfg.hue) };

    if b != 1.0 {
        apply_rgb(&mut out, |p| [p[0] * b, p[1] * b, p[2] * b]);
    }
    if c != 1.0 {
        let mean: f64 = out.pixels().map(|p| luma([p[0] as f64, p[1] as f64, p[2] as f64])).sum::<f64>()
            / (out.width() * out.height()) as f64;
        apply_rgb(&mut out, |p| {
            [
                c * p[0] + (1.0 - c) * mean,
                c * p[1] + (1.0 - c) * mean,
                c * p[2] + (1.0 - c) * mean,
            ]
        });
    }
    if s != 1.0 {
        apply_rgb(&mut out, |p| {
            let g = luma(p);
            [s * p[0] + (1.0 - s) * g, s * p[1] + (1.0 - s) * g, s * p[2] + (1.0 - s) * g]
        });
    }
    if h != 0.0 {
        apply_rgb(&mut out, |p| {
            let (hh, ss, vv) = rgb_to_hsv(p);
            let shifted = (hh + h * 360.0).rem_euclid(360.0);
            let rgb = crate::dataset::world::hsv_to_rgb(shifted, ss, vv);
            [rgb[0] as f64, rgb[1] as f64, rgb[2] as f64]
        });
    }
    out
}

/// Per-channel mean and std on the `[0, 1]` scale over a set of images.
pub fn compute_norm<'a>(images: impl Iterator<Item = &'a RgbImage>) -> ChannelNorm {
    let mut sum = [0.0f64; 3];
    let mut sum2 = [0.0f64; 3];
    let mut count = 0usize;
    for img in images {
        for px in img.pixels() {
            for c in 0..3 {
                let v = px[c] as f64 / 255.0;
                sum[c] += v;
                sum2[c] += v * v;
            }
        }
        count += (img.width() * img.height()) as usize;
    }
    if count == 0 {
        return ChannelNorm::default();
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        mean[c] = sum[c] / count as f64;
        std[c] = (sum2[c] / count as f64 - mean[c] * mean[c]).max(1e-6).sqrt();
    }
    ChannelNorm { mean, std }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn test_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            Rgb([((x * 7 + y * 13) % 256) as u8, ((x * 3) % 256) as u8, ((y * 5) % 256) as u8])
        })
    }

    #[test]
    fn paper_geometry_420x240_to_448x256() {
        let img = test_image(420, 240);
        let scaled = resize_short_side(&img, 256);
        assert_eq!(scaled.dimensions(), (448, 256));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cropped = scale_and_crop(&img, 256, PreprocessMode::Eval, &mut rng);
        assert_eq!(cropped.dimensions(), (256, 256));
    }

    #[test]
    fn eval_preprocess_is_identity_on_256() {
        let img = test_image(256, 256);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = scale_and_crop(&img, 256, PreprocessMode::Eval, &mut rng);
        assert_eq!(out.as_raw(), img.as_raw());
        // idempotent: running the geometric pipeline again changes nothing
        let out2 = scale_and_crop(&out, 256, PreprocessMode::Eval, &mut rng);
        assert_eq!(out2.as_raw(), out.as_raw());
    }

    #[test]
    fn train_crop_is_deterministic_under_seed() {
        let img = test_image(420, 240);
        let norm = ChannelNorm::default();
        let a: Array3<f32> = preprocess_image(
            &img,
            PreprocessMode::Train,
            &mut ChaCha8Rng::seed_from_u64(33),
            &norm,
            256,
        );
        let b: Array3<f32> = preprocess_image(
            &img,
            PreprocessMode::Train,
            &mut ChaCha8Rng::seed_from_u64(33),
            &norm,
            256,
        );
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn jitter_zero_strength_is_identity() {
        let img = test_image(64, 48);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = color_jitter(&img, &JitterConfig::off(), &mut rng);
        assert_eq!(out.as_raw(), img.as_raw());
    }

    #[test]
    fn jitter_deterministic_and_clipped() {
        let img = test_image(64, 48);
        let cfg = JitterConfig::default();
        let a = color_jitter(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = color_jitter(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a.as_raw(), b.as_raw());
        // u8 storage enforces [0,255]; just confirm the op ran and differs
        assert_ne!(a.as_raw(), img.as_raw());
    }

    #[test]
    fn norm_constants_match_hand_computation() {
        let img = RgbImage::from_pixel(2, 2, Rgb([255, 0, 51]));
        let norm = compute_norm(std::iter::once(&img));
        assert!((norm.mean[0] - 1.0).abs() < 1e-12);
        assert!((norm.mean[1] - 0.0).abs() < 1e-12);
        assert!((norm.mean[2] - 0.2).abs() < 1e-12);
    }
}
