//! Mask-aware background augmentation and the training-time transform
//! chain. Six background effect categories blend behind the person region;
//! person pixels always pass through bit-exact.

use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::bilinear_taps;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("image io: {0}")]
    Image(#[from] image::ImageError),
    #[error("mask extent {mask:?} does not match image extent {image:?}")]
    ExtentMismatch { image: (u32, u32), mask: (u32, u32) },
    #[error("strength {lambda} outside [0, 1]")]
    BadStrength { lambda: f64 },
    #[error("unknown category `{name}` (expected color/texture/noise/blur/pattern/gradient)")]
    UnknownCategory { name: String },
    #[error("{what} range [{lo}, {hi}] invalid; allowed [{allowed_lo}, {allowed_hi}]")]
    BadRange {
        what: &'static str,
        lo: f64,
        hi: f64,
        allowed_lo: f64,
        allowed_hi: f64,
    },
    #[error("{what} probability {p} outside [0, 1]")]
    BadProbability { what: &'static str, p: f64 },
    #[error("image `{path}` must be a color image")]
    NotColor { path: String },
    #[error("empty image")]
    EmptyImage,
}

/// Background effect categories in their application order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Color,
    Texture,
    Noise,
    Blur,
    Pattern,
    Gradient,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Color,
        Category::Texture,
        Category::Noise,
        Category::Blur,
        Category::Pattern,
        Category::Gradient,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Color => "color",
            Category::Texture => "texture",
            Category::Noise => "noise",
            Category::Blur => "blur",
            Category::Pattern => "pattern",
            Category::Gradient => "gradient",
        }
    }

    pub fn parse(name: &str) -> Result<Category, AugmentError> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| AugmentError::UnknownCategory {
                name: name.to_string(),
            })
    }
}

/// Color image plus the person-region mask (true = person).
#[derive(Debug, Clone)]
pub struct MaskedImage {
    pub image: RgbImage,
    mask: Vec<bool>,
}

impl MaskedImage {
    /// Mask is a grayscale image; any nonzero pixel marks the person.
    pub fn new(image: RgbImage, mask: &GrayImage) -> Result<Self, AugmentError> {
        if image.dimensions() != mask.dimensions() {
            return Err(AugmentError::ExtentMismatch {
                image: image.dimensions(),
                mask: mask.dimensions(),
            });
        }
        let mask = mask.pixels().map(|p| p.0[0] != 0).collect();
        Ok(MaskedImage { image, mask })
    }

    pub fn from_bools(image: RgbImage, mask: Vec<bool>) -> Result<Self, AugmentError> {
        let (w, h) = image.dimensions();
        if mask.len() != (w * h) as usize {
            return Err(AugmentError::ExtentMismatch {
                image: (w, h),
                mask: (mask.len() as u32, 1),
            });
        }
        Ok(MaskedImage { image, mask })
    }

    pub fn load(image_path: &Path, mask_path: &Path) -> Result<Self, AugmentError> {
        let img = image::open(image_path)?;
        if !img.color().has_color() {
            return Err(AugmentError::NotColor {
                path: image_path.display().to_string(),
            });
        }
        let mask = image::open(mask_path)?.to_luma8();
        MaskedImage::new(img.to_rgb8(), &mask)
    }

    pub fn is_person(&self, x: u32, y: u32) -> bool {
        self.mask[(y * self.image.width() + x) as usize]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CategoryParams {
    pub p: f64,
    pub lambda: f64,
}

impl Default for CategoryParams {
    fn default() -> Self {
        CategoryParams {
            p: 0.5,
            lambda: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub color: CategoryParams,
    pub texture: CategoryParams,
    pub noise: CategoryParams,
    pub blur: CategoryParams,
    pub pattern: CategoryParams,
    pub gradient: CategoryParams,
    /// Hue rotation range in degrees; must stay within [30, 150].
    pub hue_degrees: (f64, f64),
    /// Saturation multiplier range; must stay within [1, 2].
    pub saturation_scale: (f64, f64),
    /// Brightness multiplier range; must stay within [0.7, 1.3].
    pub brightness_scale: (f64, f64),
    /// Gaussian noise variance range in normalized units; within [0.01, 0.05].
    pub noise_variance: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            color: CategoryParams::default(),
            texture: CategoryParams::default(),
            noise: CategoryParams::default(),
            blur: CategoryParams::default(),
            pattern: CategoryParams::default(),
            gradient: CategoryParams::default(),
            hue_degrees: (30.0, 150.0),
            saturation_scale: (1.0, 2.0),
            brightness_scale: (0.7, 1.3),
            noise_variance: (0.01, 0.05),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn category(&self, c: Category) -> &CategoryParams {
        match c {
            Category::Color => &self.color,
            Category::Texture => &self.texture,
            Category::Noise => &self.noise,
            Category::Blur => &self.blur,
            Category::Pattern => &self.pattern,
            Category::Gradient => &self.gradient,
        }
    }

    pub fn category_mut(&mut self, c: Category) -> &mut CategoryParams {
        match c {
            Category::Color => &mut self.color,
            Category::Texture => &mut self.texture,
            Category::Noise => &mut self.noise,
            Category::Blur => &mut self.blur,
            Category::Pattern => &mut self.pattern,
            Category::Gradient => &mut self.gradient,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for c in Category::ALL {
            let params = self.category(c);
            if !(0.0..=1.0).contains(&params.p) {
                return Err(AugmentError::BadProbability {
                    what: c.name(),
                    p: params.p,
                });
            }
            if !(0.0..=1.0).contains(&params.lambda) {
                return Err(AugmentError::BadStrength {
                    lambda: params.lambda,
                });
            }
        }
        let check = |what: &'static str, r: (f64, f64), lo: f64, hi: f64| {
            if r.0 > r.1 || r.0 < lo || r.1 > hi {
                Err(AugmentError::BadRange {
                    what,
                    lo: r.0,
                    hi: r.1,
                    allowed_lo: lo,
                    allowed_hi: hi,
                })
            } else {
                Ok(())
            }
        };
        check("hue", self.hue_degrees, 30.0, 150.0)?;
        check("saturation", self.saturation_scale, 1.0, 2.0)?;
        check("brightness", self.brightness_scale, 0.7, 1.3)?;
        check("noise variance", self.noise_variance, 0.01, 0.05)?;
        Ok(())
    }
}

pub fn rgb01_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub fn hsv_to_rgb01(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn rgb_to_hsv(p: [u8; 3]) -> (f64, f64, f64) {
    rgb01_to_hsv([
        p[0] as f64 / 255.0,
        p[1] as f64 / 255.0,
        p[2] as f64 / 255.0,
    ])
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    hsv_to_rgb01(h, s, v).map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8)
}

/// Person pixels from the source, everything else from the transformed
/// background; the person region is copied bit-exact.
pub fn composite(src: &MaskedImage, transformed_bg: &RgbImage) -> Result<RgbImage, AugmentError> {
    if src.image.dimensions() != transformed_bg.dimensions() {
        return Err(AugmentError::ExtentMismatch {
            image: src.image.dimensions(),
            mask: transformed_bg.dimensions(),
        });
    }
    let (w, h) = src.image.dimensions();
    Ok(RgbImage::from_fn(w, h, |x, y| {
        if src.is_person(x, y) {
            *src.image.get_pixel(x, y)
        } else {
            *transformed_bg.get_pixel(x, y)
        }
    }))
}

fn blend(bg: &RgbImage, effect: &RgbImage, lambda: f64) -> RgbImage {
    let (w, h) = bg.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let a = bg.get_pixel(x, y).0;
        let e = effect.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|c| {
            ((1.0 - lambda) * a[c] as f64 + lambda * e[c] as f64)
                .round()
                .clamp(0.0, 255.0) as u8
        }))
    })
}

/// 3x3 convolution with clamp-to-edge borders, per channel.
fn conv3(img: &RgbImage, kernel: [[f64; 3]; 3], offset: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let mut acc = [offset; 3];
        for (ky, row) in kernel.iter().enumerate() {
            for (kx, &kv) in row.iter().enumerate() {
                let sy = (y as i64 + ky as i64 - 1).clamp(0, h as i64 - 1) as u32;
                let sx = (x as i64 + kx as i64 - 1).clamp(0, w as i64 - 1) as u32;
                let p = img.get_pixel(sx, sy).0;
                for c in 0..3 {
                    acc[c] += kv * p[c] as f64;
                }
            }
        }
        Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

fn effect_color(bg: &RgbImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> RgbImage {
    let theta = rng.gen_range(cfg.hue_degrees.0..=cfg.hue_degrees.1);
    let sat = rng.gen_range(cfg.saturation_scale.0..=cfg.saturation_scale.1);
    let bright = rng.gen_range(cfg.brightness_scale.0..=cfg.brightness_scale.1);
    let (w, h) = bg.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let (hue, s, v) = rgb_to_hsv(bg.get_pixel(x, y).0);
        Rgb(hsv_to_rgb(
            hue + theta,
            (s * sat).min(1.0),
            (v * bright).min(1.0),
        ))
    })
}

fn effect_texture(bg: &RgbImage, rng: &mut impl Rng) -> RgbImage {
    if rng.gen_bool(0.5) {
        // Emboss; the kernel sums to 1, so flat regions pass through.
        conv3(
            bg,
            [[-2.0, -1.0, 0.0], [-1.0, 1.0, 1.0], [0.0, 1.0, 2.0]],
            0.0,
        )
    } else {
        // Edge magnitude from the two axis-difference kernels.
        let gx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
        let gy = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
        let (w, h) = bg.dimensions();
        let ex = conv3_raw(bg, gx);
        let ey = conv3_raw(bg, gy);
        RgbImage::from_fn(w, h, |x, y| {
            let i = ((y * w + x) * 3) as usize;
            Rgb(std::array::from_fn(|c| {
                (ex[i + c] * ex[i + c] + ey[i + c] * ey[i + c])
                    .sqrt()
                    .round()
                    .clamp(0.0, 255.0) as u8
            }))
        })
    }
}

/// Raw signed 3x3 convolution used by the edge magnitude path.
fn conv3_raw(img: &RgbImage, kernel: [[f64; 3]; 3]) -> Vec<f64> {
    let (w, h) = img.dimensions();
    let mut out = vec![0.0; (w * h * 3) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0; 3];
            for (ky, row) in kernel.iter().enumerate() {
                for (kx, &kv) in row.iter().enumerate() {
                    let sy = (y as i64 + ky as i64 - 1).clamp(0, h as i64 - 1) as u32;
                    let sx = (x as i64 + kx as i64 - 1).clamp(0, w as i64 - 1) as u32;
                    let p = img.get_pixel(sx, sy).0;
                    for c in 0..3 {
                        acc[c] += kv * p[c] as f64;
                    }
                }
            }
            let i = ((y * w + x) * 3) as usize;
            out[i..i + 3].copy_from_slice(&acc);
        }
    }
    out
}

fn effect_noise(bg: &RgbImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> RgbImage {
    let var = rng.gen_range(cfg.noise_variance.0..=cfg.noise_variance.1);
    let sigma = var.sqrt() * 255.0;
    let normal = Normal::new(0.0, sigma).expect("sigma is positive");
    let (w, h) = bg.dimensions();
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = bg.get_pixel(x, y).0;
            let px = std::array::from_fn(|c| {
                (p[c] as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8
            });
            out.put_pixel(x, y, Rgb(px));
        }
    }
    out
}

fn effect_blur(bg: &RgbImage, rng: &mut impl Rng) -> RgbImage {
    let passes = rng.gen_range(1..=3);
    let kernel = [
        [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
        [2.0 / 16.0, 4.0 / 16.0, 2.0 / 16.0],
        [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
    ];
    let mut out = bg.clone();
    for _ in 0..passes {
        out = conv3(&out, kernel, 0.0);
    }
    out
}

fn random_color(rng: &mut impl Rng) -> [u8; 3] {
    std::array::from_fn(|_| rng.gen())
}

fn effect_pattern(bg: &RgbImage, rng: &mut impl Rng) -> RgbImage {
    let (w, h) = bg.dimensions();
    let checker = rng.gen_bool(0.5);
    let pitch: u32 = rng.gen_range(8..=32);
    let angle_idx: u32 = rng.gen_range(0..4); // 0, 45, 90, 135 degrees
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    RgbImage::from_fn(w, h, |x, y| {
        let cell = if checker {
            x / pitch + y / pitch
        } else {
            match angle_idx {
                0 => x / pitch,
                1 => (x + y) / pitch,
                2 => y / pitch,
                _ => (x + (h - 1 - y)) / pitch,
            }
        };
        Rgb(if cell % 2 == 0 { c0 } else { c1 })
    })
}

fn effect_gradient(bg: &RgbImage, rng: &mut impl Rng) -> RgbImage {
    let (w, h) = bg.dimensions();
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let (dx, dy) = (phi.cos(), phi.sin());
    // Projection extremes over the frame normalize t into [0, 1].
    let corners = [
        (0.0, 0.0),
        ((w - 1) as f64, 0.0),
        (0.0, (h - 1) as f64),
        ((w - 1) as f64, (h - 1) as f64),
    ];
    let projs: Vec<f64> = corners.iter().map(|&(x, y)| x * dx + y * dy).collect();
    let lo = projs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = projs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    RgbImage::from_fn(w, h, |x, y| {
        let t = ((x as f64 * dx + y as f64 * dy) - lo) / span;
        Rgb(std::array::from_fn(|c| {
            ((1.0 - t) * c0[c] as f64 + t * c1[c] as f64)
                .round()
                .clamp(0.0, 255.0) as u8
        }))
    })
}

/// One category's effect blended onto the background:
/// out = (1-lambda)*bg + lambda*effect(bg), rounded per channel.
/// lambda = 0 reproduces the input bitwise while drawing the same random
/// parameters, so the stream stays aligned across strengths.
pub fn background_transform(
    bg: &RgbImage,
    category: Category,
    lambda: f64,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<RgbImage, AugmentError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AugmentError::BadStrength { lambda });
    }
    if bg.width() == 0 || bg.height() == 0 {
        return Err(AugmentError::EmptyImage);
    }
    let effect = match category {
        Category::Color => effect_color(bg, cfg, rng),
        Category::Texture => effect_texture(bg, rng),
        Category::Noise => effect_noise(bg, cfg, rng),
        Category::Blur => effect_blur(bg, rng),
        Category::Pattern => effect_pattern(bg, rng),
        Category::Gradient => effect_gradient(bg, rng),
    };
    Ok(blend(bg, &effect, lambda))
}

/// Applies each category with its configured probability, in the fixed
/// category order, then composites the untouched person region back in.
pub fn augment_pipeline(
    src: &MaskedImage,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<RgbImage, AugmentError> {
    cfg.validate()?;
    let mut bg = src.image.clone();
    for cat in Category::ALL {
        let params = cfg.category(cat);
        if rng.gen_bool(params.p) {
            bg = background_transform(&bg, cat, params.lambda, cfg, rng)?;
        }
    }
    composite(src, &bg)
}

/// Independent deterministic stream per image index under one seed.
pub fn per_image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `dir/name.png -> dir/name_mask.png`
pub fn mask_path(src: &Path) -> PathBuf {
    let stem = src.file_stem().unwrap_or_default().to_string_lossy();
    let ext = src.extension().map(|e| e.to_string_lossy().into_owned());
    let name = match ext {
        Some(e) => format!("{stem}_mask.{e}"),
        None => format!("{stem}_mask"),
    };
    src.with_file_name(name)
}

/// `dir/name.png -> dir/name_aug<N>.png`
pub fn augmented_path(src: &Path, n: usize) -> PathBuf {
    let stem = src.file_stem().unwrap_or_default().to_string_lossy();
    let ext = src.extension().map(|e| e.to_string_lossy().into_owned());
    let name = match ext {
        Some(e) => format!("{stem}_aug{n}.{e}"),
        None => format!("{stem}_aug{n}"),
    };
    src.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainTransformConfig {
    pub height: u32,
    pub width: u32,
    pub pad: u32,
    pub flip_p: f64,
    pub brightness_jitter: f64,
    pub contrast_jitter: f64,
    pub saturation_jitter: f64,
    /// Hue shift as a fraction of a half turn; 0.1 means up to 36 degrees.
    pub hue_jitter: f64,
    pub erase_p: f64,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for TrainTransformConfig {
    fn default() -> Self {
        TrainTransformConfig {
            height: 256,
            width: 128,
            pad: 10,
            flip_p: 0.5,
            brightness_jitter: 0.2,
            contrast_jitter: 0.15,
            saturation_jitter: 0.15,
            hue_jitter: 0.1,
            erase_p: 0.5,
            erase_area: (0.02, 0.40),
            erase_aspect: (0.3, 3.3),
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl TrainTransformConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.height == 0 || self.width == 0 {
            return Err(AugmentError::EmptyImage);
        }
        for (what, p) in [("flip", self.flip_p), ("erase", self.erase_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::BadProbability { what, p });
            }
        }
        for (what, j, hi) in [
            ("brightness jitter", self.brightness_jitter, 1.0),
            ("contrast jitter", self.contrast_jitter, 1.0),
            ("saturation jitter", self.saturation_jitter, 1.0),
            ("hue jitter", self.hue_jitter, 0.5),
        ] {
            if !(0.0..=hi).contains(&j) {
                return Err(AugmentError::BadRange {
                    what,
                    lo: j,
                    hi: j,
                    allowed_lo: 0.0,
                    allowed_hi: hi,
                });
            }
        }
        let (lo, hi) = self.erase_area;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(AugmentError::BadRange {
                what: "erase area",
                lo,
                hi,
                allowed_lo: 0.0,
                allowed_hi: 1.0,
            });
        }
        let (alo, ahi) = self.erase_aspect;
        if !(alo > 0.0 && alo <= ahi) {
            return Err(AugmentError::BadRange {
                what: "erase aspect",
                lo: alo,
                hi: ahi,
                allowed_lo: 0.0,
                allowed_hi: f64::INFINITY,
            });
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(AugmentError::BadRange {
                what: "channel std",
                lo: self.std[0],
                hi: self.std[2],
                allowed_lo: f64::MIN_POSITIVE,
                allowed_hi: f64::INFINITY,
            });
        }
        Ok(())
    }
}

/// Bilinear resize under the same half-pixel convention as the model's
/// feature alignment; identity sizes copy bitwise.
pub fn resize_rgb(img: &RgbImage, height: u32, width: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    if (h, w) == (height, width) {
        return img.clone();
    }
    let ty = bilinear_taps(h as usize, height as usize);
    let tx = bilinear_taps(w as usize, width as usize);
    RgbImage::from_fn(width, height, |x, y| {
        let (y0, y1, fy) = ty[y as usize];
        let (x0, x1, fx) = tx[x as usize];
        Rgb(std::array::from_fn(|c| {
            let v00 = img.get_pixel(x0 as u32, y0 as u32).0[c] as f64;
            let v01 = img.get_pixel(x1 as u32, y0 as u32).0[c] as f64;
            let v10 = img.get_pixel(x0 as u32, y1 as u32).0[c] as f64;
            let v11 = img.get_pixel(x1 as u32, y1 as u32).0[c] as f64;
            let top = v00 + (v01 - v00) * fx;
            let bot = v10 + (v11 - v10) * fx;
            (top + (bot - top) * fy).round().clamp(0.0, 255.0) as u8
        }))
    })
}

fn hflip(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w, h, |x, y| *img.get_pixel(w - 1 - x, y))
}

/// Geometric stage of the training chain: resize, pad, random crop, random
/// horizontal flip. Draws exactly two rng values per call (crop and flip).
pub fn geometry_stage(img: &RgbImage, cfg: &TrainTransformConfig, rng: &mut impl Rng) -> RgbImage {
    let resized = resize_rgb(img, cfg.height, cfg.width);
    let cropped = if cfg.pad == 0 {
        let _ = rng.gen_range(0..=0u32); // keep the draw count fixed
        let _ = rng.gen_range(0..=0u32);
        resized
    } else {
        let padded = {
            let mut p = RgbImage::new(cfg.width + 2 * cfg.pad, cfg.height + 2 * cfg.pad);
            for (x, y, px) in resized.enumerate_pixels() {
                p.put_pixel(x + cfg.pad, y + cfg.pad, *px);
            }
            p
        };
        let oy = rng.gen_range(0..=2 * cfg.pad);
        let ox = rng.gen_range(0..=2 * cfg.pad);
        RgbImage::from_fn(cfg.width, cfg.height, |x, y| {
            *padded.get_pixel(x + ox, y + oy)
        })
    };
    if rng.gen_bool(cfg.flip_p) {
        hflip(&cropped)
    } else {
        cropped
    }
}

/// Erase rectangle (y, x, h, w) covering the configured area fraction, or
/// None when no geometry fits within 100 attempts.
fn erase_rect(
    cfg: &TrainTransformConfig,
    height: u32,
    width: u32,
    rng: &mut impl Rng,
) -> Option<(u32, u32, u32, u32)> {
    let area = (height * width) as f64;
    for _ in 0..100 {
        let frac = rng.gen_range(cfg.erase_area.0..=cfg.erase_area.1);
        let aspect = rng.gen_range(cfg.erase_aspect.0..=cfg.erase_aspect.1);
        let eh = (frac * area * aspect).sqrt().round() as u32;
        let ew = (frac * area / aspect).sqrt().round() as u32;
        if eh >= 1 && ew >= 1 && eh <= height && ew <= width {
            let y = rng.gen_range(0..=height - eh);
            let x = rng.gen_range(0..=width - ew);
            return Some((y, x, eh, ew));
        }
    }
    None
}

/// Full training-time transform: resize 256x128, pad, random crop, flip,
/// color jitter, random erasing, channel normalization. Output is a
/// [3, H, W] tensor.
pub fn train_transforms(
    img: &RgbImage,
    cfg: &TrainTransformConfig,
    rng: &mut impl Rng,
) -> Result<Tensor, AugmentError> {
    cfg.validate()?;
    let geo = geometry_stage(img, cfg, rng);
    let (h, w) = (cfg.height as usize, cfg.width as usize);

    // Planes in [0, 1], channel-major.
    let mut planes = vec![0.0f64; 3 * h * w];
    for (x, y, px) in geo.enumerate_pixels() {
        for c in 0..3 {
            planes[c * h * w + y as usize * w + x as usize] = px.0[c] as f64 / 255.0;
        }
    }

    let fb = rng.gen_range(1.0 - cfg.brightness_jitter..=1.0 + cfg.brightness_jitter);
    let fc = rng.gen_range(1.0 - cfg.contrast_jitter..=1.0 + cfg.contrast_jitter);
    let fs = rng.gen_range(1.0 - cfg.saturation_jitter..=1.0 + cfg.saturation_jitter);
    let hue_shift = rng.gen_range(-cfg.hue_jitter..=cfg.hue_jitter) * 360.0;
    for v in planes.iter_mut() {
        *v = (*v * fb).clamp(0.0, 1.0);
        *v = ((*v - 0.5) * fc + 0.5).clamp(0.0, 1.0);
    }
    if fs != 1.0 || hue_shift != 0.0 {
        for i in 0..h * w {
            let rgb = [planes[i], planes[h * w + i], planes[2 * h * w + i]];
            let (hue, s, v) = rgb01_to_hsv(rgb);
            let out = hsv_to_rgb01(hue + hue_shift, (s * fs).clamp(0.0, 1.0), v);
            planes[i] = out[0];
            planes[h * w + i] = out[1];
            planes[2 * h * w + i] = out[2];
        }
    }

    if rng.gen_bool(cfg.erase_p) {
        if let Some((ey, ex, eh, ew)) = erase_rect(cfg, cfg.height, cfg.width, rng) {
            for y in ey..ey + eh {
                for x in ex..ex + ew {
                    for c in 0..3 {
                        planes[c * h * w + y as usize * w + x as usize] = rng.gen_range(0.0..1.0);
                    }
                }
            }
        }
    }

    for c in 0..3 {
        for v in planes[c * h * w..(c + 1) * h * w].iter_mut() {
            *v = (*v - cfg.mean[c]) / cfg.std[c];
        }
    }
    Ok(Tensor::new(vec![3, h, w], planes).expect("plane sizes match shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn test_image(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| Rgb(std::array::from_fn(|_| rng.gen())))
    }

    fn flat_gray(w: u32, h: u32, v: u8) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([v, v, v]))
    }

    #[test]
    fn composite_full_and_empty_masks() {
        let img = test_image(8, 6, 1);
        let bg = test_image(8, 6, 2);
        let all_person = MaskedImage::from_bools(img.clone(), vec![true; 48]).unwrap();
        assert_eq!(composite(&all_person, &bg).unwrap(), img);
        let no_person = MaskedImage::from_bools(img.clone(), vec![false; 48]).unwrap();
        assert_eq!(composite(&no_person, &bg).unwrap(), bg);
    }

    #[test]
    fn composite_checkerboard_matches_loop_oracle() {
        let img = test_image(9, 7, 3);
        let bg = test_image(9, 7, 4);
        let mask: Vec<bool> = (0..63).map(|i| (i % 9 + i / 9) % 2 == 0).collect();
        let masked = MaskedImage::from_bools(img.clone(), mask.clone()).unwrap();
        let out = composite(&masked, &bg).unwrap();
        for y in 0..7u32 {
            for x in 0..9u32 {
                let want = if mask[(y * 9 + x) as usize] {
                    img.get_pixel(x, y)
                } else {
                    bg.get_pixel(x, y)
                };
                assert_eq!(out.get_pixel(x, y), want);
            }
        }
    }

    #[test]
    fn composite_extent_mismatch() {
        let img = test_image(8, 6, 1);
        let masked = MaskedImage::from_bools(img, vec![true; 48]).unwrap();
        let bg = test_image(7, 6, 2);
        assert!(matches!(
            composite(&masked, &bg),
            Err(AugmentError::ExtentMismatch { .. })
        ));
    }

    #[test]
    fn mask_extent_mismatch_on_construction() {
        let img = test_image(8, 6, 1);
        let mask = GrayImage::new(8, 5);
        assert!(matches!(
            MaskedImage::new(img, &mask),
            Err(AugmentError::ExtentMismatch { .. })
        ));
    }

    #[test]
    fn zero_strength_is_bitwise_identity() {
        let cfg = AugmentConfig::default();
        let bg = test_image(16, 12, 5);
        for cat in Category::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let out = background_transform(&bg, cat, 0.0, &cfg, &mut rng).unwrap();
            assert_eq!(out, bg, "category {}", cat.name());
        }
    }

    #[test]
    fn noise_deviation_mean_near_zero() {
        let mut cfg = AugmentConfig::default();
        cfg.noise_variance = (0.01, 0.01);
        let bg = flat_gray(128, 128, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let out = background_transform(&bg, Category::Noise, 1.0, &cfg, &mut rng).unwrap();
        let mut sum = 0.0;
        let mut n = 0.0;
        for (_, _, px) in out.enumerate_pixels() {
            for c in 0..3 {
                sum += px.0[c] as f64 - 128.0;
                n += 1.0;
            }
        }
        let mean = sum / n;
        assert!(mean.abs() < 1.0, "mean deviation {mean}");
    }

    #[test]
    fn hue_rotation_of_pure_red_by_120_gives_green() {
        let mut cfg = AugmentConfig::default();
        cfg.hue_degrees = (120.0, 120.0);
        cfg.saturation_scale = (1.0, 1.0);
        cfg.brightness_scale = (1.0, 1.0);
        let bg = RgbImage::from_pixel(4, 4, Rgb([255, 0, 0]));
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let out = background_transform(&bg, Category::Color, 1.0, &cfg, &mut rng).unwrap();
        for (_, _, px) in out.enumerate_pixels() {
            assert_eq!(px.0, [0, 255, 0]);
        }
    }

    #[test]
    fn hsv_round_trip_within_one_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let px: [u8; 3] = std::array::from_fn(|_| rng.gen());
            let (h, s, v) = rgb_to_hsv(px);
            let back = hsv_to_rgb(h, s, v);
            for c in 0..3 {
                assert!(
                    (px[c] as i32 - back[c] as i32).abs() <= 1,
                    "{px:?} -> {back:?}"
                );
            }
        }
    }

    #[test]
    fn person_pixels_survive_every_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..10_000 {
            let img = RgbImage::from_fn(8, 6, |_, _| Rgb(std::array::from_fn(|_| rng.gen())));
            let mask: Vec<bool> = (0..48).map(|_| rng.gen_bool(0.5)).collect();
            let masked = MaskedImage::from_bools(img.clone(), mask.clone()).unwrap();
            let mut cfg = AugmentConfig::default();
            for cat in Category::ALL {
                let params = match cat {
                    Category::Color => &mut cfg.color,
                    Category::Texture => &mut cfg.texture,
                    Category::Noise => &mut cfg.noise,
                    Category::Blur => &mut cfg.blur,
                    Category::Pattern => &mut cfg.pattern,
                    Category::Gradient => &mut cfg.gradient,
                };
                params.p = rng.gen_range(0.0..=1.0);
                params.lambda = rng.gen_range(0.0..=1.0);
            }
            let mut stream = per_image_rng(11, trial);
            let out = augment_pipeline(&masked, &cfg, &mut stream).unwrap();
            for y in 0..6u32 {
                for x in 0..8u32 {
                    if mask[(y * 8 + x) as usize] {
                        assert_eq!(out.get_pixel(x, y), img.get_pixel(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn pipeline_deterministic_under_seed() {
        let img = test_image(16, 12, 12);
        let mask: Vec<bool> = (0..192).map(|i| i % 3 == 0).collect();
        let masked = MaskedImage::from_bools(img, mask).unwrap();
        let mut cfg = AugmentConfig::default();
        cfg.color.p = 1.0;
        cfg.texture.p = 1.0;
        cfg.noise.p = 1.0;
        cfg.blur.p = 1.0;
        cfg.pattern.p = 1.0;
        cfg.gradient.p = 1.0;
        let a = augment_pipeline(&masked, &cfg, &mut per_image_rng(13, 0)).unwrap();
        let b = augment_pipeline(&masked, &cfg, &mut per_image_rng(13, 0)).unwrap();
        assert_eq!(a, b);
        let c = augment_pipeline(&masked, &cfg, &mut per_image_rng(13, 1)).unwrap();
        assert_ne!(a, c, "different stream should change the background");
    }

    #[test]
    fn strength_continuity_bound() {
        let cfg = AugmentConfig::default();
        let bg = test_image(12, 10, 14);
        for cat in [Category::Color, Category::Gradient, Category::Texture] {
            let lambdas = [0.0, 0.25, 0.3, 0.9, 1.0];
            for w in lambdas.windows(2) {
                let (la, lb) = (w[0], w[1]);
                let a =
                    background_transform(&bg, cat, la, &cfg, &mut ChaCha8Rng::seed_from_u64(15))
                        .unwrap();
                let b =
                    background_transform(&bg, cat, lb, &cfg, &mut ChaCha8Rng::seed_from_u64(15))
                        .unwrap();
                let bound = 255.0 * (lb - la) + 1.0;
                for (pa, pb) in a.pixels().zip(b.pixels()) {
                    for c in 0..3 {
                        let diff = (pa.0[c] as f64 - pb.0[c] as f64).abs();
                        assert!(diff <= bound, "{} moved {diff} > {bound}", cat.name());
                    }
                }
            }
        }
    }

    #[test]
    fn category_parse_round_trip() {
        for cat in Category::ALL {
            assert_eq!(Category::parse(cat.name()).unwrap(), cat);
        }
        assert!(matches!(
            Category::parse("sepia"),
            Err(AugmentError::UnknownCategory { .. })
        ));
    }

    #[test]
    fn config_validation_rejects_out_of_range() {
        let mut cfg = AugmentConfig::default();
        cfg.color.p = 1.5;
        assert!(matches!(
            cfg.validate(),
            Err(AugmentError::BadProbability { .. })
        ));
        let mut cfg = AugmentConfig::default();
        cfg.hue_degrees = (10.0, 150.0);
        assert!(matches!(cfg.validate(), Err(AugmentError::BadRange { .. })));
        let mut cfg = AugmentConfig::default();
        cfg.noise_variance = (0.05, 0.01);
        assert!(matches!(cfg.validate(), Err(AugmentError::BadRange { .. })));
        assert!(AugmentConfig::default().validate().is_ok());
    }

    #[test]
    fn train_output_shape_and_determinism() {
        let img = test_image(40, 90, 16);
        let cfg = TrainTransformConfig::default();
        let a = train_transforms(&img, &cfg, &mut per_image_rng(17, 0)).unwrap();
        let b = train_transforms(&img, &cfg, &mut per_image_rng(17, 0)).unwrap();
        assert_eq!(a.shape(), &[3, 256, 128]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn erase_rectangle_area_within_bounds() {
        let cfg = TrainTransformConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let mut fired = 0;
        for _ in 0..500 {
            if let Some((y, x, eh, ew)) = erase_rect(&cfg, 256, 128, &mut rng) {
                fired += 1;
                assert!(y + eh <= 256 && x + ew <= 128);
                let frac = (eh * ew) as f64 / (256.0 * 128.0);
                // Rounding of the drawn rectangle sides can nudge the realized
                // area slightly past the drawn fraction.
                assert!(frac > 0.015 && frac < 0.45, "area fraction {frac}");
            }
        }
        assert!(fired > 400, "erase geometry should almost always fit");
    }

    #[test]
    fn double_forced_flip_equals_resize_only() {
        let img = test_image(33, 70, 19);
        let cfg = TrainTransformConfig {
            pad: 0,
            flip_p: 1.0,
            ..TrainTransformConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let once = geometry_stage(&img, &cfg, &mut rng);
        let twice = geometry_stage(&once, &cfg, &mut rng);
        assert_eq!(twice, resize_rgb(&img, 256, 128));
    }

    #[test]
    fn train_config_validation() {
        let bad = TrainTransformConfig {
            erase_area: (0.4, 0.02),
            ..TrainTransformConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainTransformConfig {
            hue_jitter: 0.7,
            ..TrainTransformConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainTransformConfig::default().validate().is_ok());
    }

    #[test]
    fn path_helpers() {
        assert_eq!(
            mask_path(Path::new("data/img01.png")),
            PathBuf::from("data/img01_mask.png")
        );
        assert_eq!(
            augmented_path(Path::new("data/img01.png"), 3),
            PathBuf::from("data/img01_aug3.png")
        );
    }

    #[test]
    fn masked_image_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img_path = dir.path().join("p.png");
        let img = test_image(10, 8, 21);
        img.save(&img_path).unwrap();
        let mpath = mask_path(&img_path);
        let mask = GrayImage::from_fn(10, 8, |x, _| image::Luma([if x < 5 { 255 } else { 0 }]));
        mask.save(&mpath).unwrap();
        let masked = MaskedImage::load(&img_path, &mpath).unwrap();
        assert!(masked.is_person(0, 0));
        assert!(!masked.is_person(9, 0));
        assert_eq!(masked.image, img);

        // Grayscale source rejected.
        let gray_path = dir.path().join("g.png");
        GrayImage::new(4, 4).save(&gray_path).unwrap();
        assert!(matches!(
            MaskedImage::load(&gray_path, &mpath),
            Err(AugmentError::NotColor { .. })
        ));
    }

    #[test]
    fn augment_config_toml_round_trip() {
        let cfg = AugmentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: AugmentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        let err: Result<AugmentConfig, _> = toml::from_str("[colour]\np = 0.5\n");
        assert!(err.is_err(), "unknown field must be rejected");
    }
}
