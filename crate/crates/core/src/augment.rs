//! Two-view augmentation: random resized crop, flip, color jitter and
//! grayscale on `[3, H, W]` images with values in `[0, 1]`.

use lsn_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::{seed, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AugPolicy {
    /// Crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    /// Crop aspect ratio (width / height).
    pub crop_ratio: (f64, f64),
    pub out_size: usize,
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift as a fraction of the color wheel.
    pub hue: f64,
    pub gray_p: f64,
}

impl Default for AugPolicy {
    fn default() -> Self {
        AugPolicy {
            crop_scale: (0.2, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            out_size: 32,
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            gray_p: 0.2,
        }
    }
}

impl AugPolicy {
    /// Full-image crop at the input size, nothing else.
    pub fn identity(size: usize) -> Self {
        AugPolicy {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            out_size: size,
            flip_p: 0.0,
            jitter_p: 0.0,
            gray_p: 0.0,
            ..AugPolicy::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augmentation: {m}")));
        for p in [self.flip_p, self.jitter_p, self.gray_p] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0,1]");
            }
        }
        let (s0, s1) = self.crop_scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return bad("crop scale must satisfy 0 < min <= max <= 1");
        }
        let (r0, r1) = self.crop_ratio;
        if !(r0 > 0.0 && r0 <= r1) {
            return bad("crop ratio must satisfy 0 < min <= max");
        }
        if self.out_size == 0 {
            return bad("output size must be positive");
        }
        if [self.brightness, self.contrast, self.saturation].iter().any(|&v| !(0.0..=1.0).contains(&v))
            || !(0.0..=0.5).contains(&self.hue)
        {
            return bad("jitter strengths out of range");
        }
        Ok(())
    }
}

/// Crop rectangle in source pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo < hi {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Random-resized-crop box: ten attempts at a rectangle of sampled area and
/// log-uniform aspect, then a centered fallback clamped to the ratio range.
pub fn sample_crop(h: usize, w: usize, policy: &AugPolicy, rng: &mut ChaCha8Rng) -> CropBox {
    let area = (h * w) as f64;
    let (r0, r1) = policy.crop_ratio;
    for _ in 0..10 {
        let target = area * uniform(rng, policy.crop_scale);
        let aspect = uniform(rng, (r0.ln(), r1.ln())).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && cw <= w && ch > 0 && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return CropBox { top, left, height: ch, width: cw };
        }
    }
    let ratio = w as f64 / h as f64;
    let (ch, cw) = if ratio < r0 {
        (((w as f64 / r0).round() as usize).clamp(1, h), w)
    } else if ratio > r1 {
        (h, ((h as f64 * r1).round() as usize).clamp(1, w))
    } else {
        (h, w)
    };
    CropBox {
        top: (h - ch) / 2,
        left: (w - cw) / 2,
        height: ch,
        width: cw,
    }
}

/// Bilinear resize of a crop to `size × size` with half-pixel centers;
/// sample positions are clamped to the crop.
pub fn resize_crop(img: &Tensor<f32>, crop: CropBox, size: usize) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let d = img.data();
    let sy = crop.height as f64 / size as f64;
    let sx = crop.width as f64 / size as f64;
    let axis = |o: usize, scale: f64, start: usize, len: usize| {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (start + lo, start + hi, src - lo as f64)
    };
    let mut out = vec![0.0f32; c * size * size];
    for oy in 0..size {
        let (y0, y1, fy) = axis(oy, sy, crop.top, crop.height);
        for ox in 0..size {
            let (x0, x1, fx) = axis(ox, sx, crop.left, crop.width);
            for ci in 0..c {
                let p = |y: usize, x: usize| d[(ci * h + y) * w + x] as f64;
                let top = (1.0 - fx) * p(y0, x0) + fx * p(y0, x1);
                let bottom = (1.0 - fx) * p(y1, x0) + fx * p(y1, x1);
                out[(ci * size + oy) * size + ox] = ((1.0 - fy) * top + fy * bottom) as f32;
            }
        }
    }
    Tensor::new([c, size, size], out).expect("sized above")
}

pub fn flip_horizontal(img: &mut Tensor<f32>) {
    let w = img.shape()[2];
    for row in img.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

pub fn grayscale(img: &mut Tensor<f32>) {
    let n = img.shape()[1] * img.shape()[2];
    let d = img.data_mut();
    for i in 0..n {
        let l = luma(d[i] as f64, d[n + i] as f64, d[2 * n + i] as f64) as f32;
        d[i] = l;
        d[n + i] = l;
        d[2 * n + i] = l;
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize) % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Brightness, contrast, saturation and hue in that order, each factor
/// drawn uniformly from its range, clamping to `[0,1]` after every stage.
fn color_jitter(img: &mut Tensor<f32>, policy: &AugPolicy, rng: &mut ChaCha8Rng) {
    let n = img.shape()[1] * img.shape()[2];
    let factor = |rng: &mut ChaCha8Rng, s: f64| uniform(rng, ((1.0 - s).max(0.0), 1.0 + s));
    let brightness = factor(rng, policy.brightness);
    let contrast = factor(rng, policy.contrast);
    let saturation = factor(rng, policy.saturation);
    let hue = uniform(rng, (-policy.hue, policy.hue));

    let d = img.data_mut();
    let clamp = |v: f64| v.clamp(0.0, 1.0);
    for v in d.iter_mut() {
        *v = clamp(*v as f64 * brightness) as f32;
    }
    let mean = (0..n)
        .map(|i| luma(d[i] as f64, d[n + i] as f64, d[2 * n + i] as f64))
        .sum::<f64>()
        / n as f64;
    for v in d.iter_mut() {
        *v = clamp((*v as f64 - mean) * contrast + mean) as f32;
    }
    for i in 0..n {
        let l = luma(d[i] as f64, d[n + i] as f64, d[2 * n + i] as f64);
        for ch in 0..3 {
            let v = &mut d[ch * n + i];
            *v = clamp((*v as f64 - l) * saturation + l) as f32;
        }
    }
    if hue != 0.0 {
        for i in 0..n {
            let (h, s, v) = rgb_to_hsv(d[i] as f64, d[n + i] as f64, d[2 * n + i] as f64);
            let (r, g, b) = hsv_to_rgb(h + hue, s, v);
            d[i] = clamp(r) as f32;
            d[n + i] = clamp(g) as f32;
            d[2 * n + i] = clamp(b) as f32;
        }
    }
}

/// One augmented view and the crop it used.
pub fn augment_view(img: &Tensor<f32>, policy: &AugPolicy, seed_value: u64) -> (Tensor<f32>, CropBox) {
    let mut rng = seed::rng(&[seed_value]);
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let crop = sample_crop(h, w, policy, &mut rng);
    let mut out = resize_crop(img, crop, policy.out_size);
    if rng.random_bool(policy.flip_p) {
        flip_horizontal(&mut out);
    }
    if rng.random_bool(policy.jitter_p) {
        color_jitter(&mut out, policy, &mut rng);
    }
    if rng.random_bool(policy.gray_p) {
        grayscale(&mut out);
    }
    (out, crop)
}

/// Two views of `img` drawn with per-view policies.
pub fn make_view_pair_with(img: &Tensor<f32>, a: &AugPolicy, b: &AugPolicy, seed_value: u64) -> (Tensor<f32>, Tensor<f32>) {
    let (va, _) = augment_view(img, a, seed::derive(&[seed_value, 0]));
    let (vb, _) = augment_view(img, b, seed::derive(&[seed_value, 1]));
    (va, vb)
}

pub fn make_view_pair(img: &Tensor<f32>, policy: &AugPolicy, seed_value: u64) -> (Tensor<f32>, Tensor<f32>) {
    make_view_pair_with(img, policy, policy, seed_value)
}
