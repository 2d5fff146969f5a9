//! Multi-crop augmentation: a few large-area "global" crops and many
//! small-area "local" crops per image, each sampled as (area fraction,
//! aspect, position) in continuous source coordinates and resampled
//! bilinearly to a fixed square side. Fully determined by the seed.

use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct CropConfig {
    pub n_global: usize,
    pub n_local: usize,
    pub global_side: usize,
    pub local_side: usize,
    /// Source-area fraction range for global crops.
    pub global_scale: (f64, f64),
    /// Source-area fraction range for local crops.
    pub local_scale: (f64, f64),
    /// Aspect-ratio jitter range (sampled log-uniform).
    pub aspect: (f64, f64),
}

impl CropConfig {
    /// 2 global + 8 local crops; desk-sized sides.
    pub fn desk_default() -> Self {
        CropConfig {
            n_global: 2,
            n_local: 8,
            global_side: 16,
            local_side: 8,
            global_scale: (0.5, 1.0),
            local_scale: (0.05, 0.5),
            aspect: (0.75, 4.0 / 3.0),
        }
    }

    /// Full-size crop geometry: 224 px globals, 96 px locals.
    pub fn full_scale() -> Self {
        CropConfig { global_side: 224, local_side: 96, ..Self::desk_default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (lo, hi) in [self.global_scale, self.local_scale] {
            if !(0.0 < lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Validation(format!(
                    "scale range ({lo}, {hi}) must lie within (0, 1]"
                )));
            }
        }
        if self.aspect.0 <= 0.0 || self.aspect.0 > self.aspect.1 {
            return Err(Error::Validation("bad aspect range".into()));
        }
        if self.global_side == 0 || self.local_side == 0 {
            return Err(Error::Validation("crop sides must be positive".into()));
        }
        Ok(())
    }
}

/// One resampled square crop plus the continuous source rectangle it came from.
#[derive(Clone, Debug)]
pub struct Crop {
    pub side: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
    /// (x0, y0, width, height) in source-pixel coordinates.
    pub src_rect: (f64, f64, f64, f64),
}

impl Crop {
    pub fn area_fraction(&self, img: &Image) -> f64 {
        self.src_rect.2 * self.src_rect.3 / (img.w as f64 * img.h as f64)
    }
}

#[derive(Clone, Debug)]
pub struct CropSet {
    pub globals: Vec<Crop>,
    pub locals: Vec<Crop>,
    pub source_id: String,
    pub seed: u64,
}

/// Sample a crop rectangle with the given area fraction, aspect-jittered and
/// uniformly placed, entirely inside the image.
fn sample_rect(rng: &mut Rng, w: f64, h: f64, scale: (f64, f64), aspect: (f64, f64)) -> (f64, f64, f64, f64) {
    let frac = rng.range(scale.0, scale.1);
    let area = frac * w * h;
    let mut cw = 0.0;
    let mut ch = 0.0;
    let mut ok = false;
    for _ in 0..10 {
        let a = (rng.range(aspect.0.ln(), aspect.1.ln())).exp();
        cw = (area * a).sqrt();
        ch = area / cw;
        if cw <= w && ch <= h {
            ok = true;
            break;
        }
    }
    if !ok {
        // square fallback clamped to fit, preserving the sampled area exactly
        cw = area.sqrt().min(w);
        ch = area / cw;
        if ch > h {
            ch = h;
            cw = area / ch;
        }
    }
    let x0 = rng.range(0.0, w - cw);
    let y0 = rng.range(0.0, h - ch);
    (x0, y0, cw, ch)
}

/// Bilinear resample of a continuous source rectangle to a square target.
pub fn resize_rect(img: &Image, rect: (f64, f64, f64, f64), side: usize) -> Vec<f64> {
    let (x0, y0, cw, ch) = rect;
    let c = img.channels;
    let mut out = vec![0.0; side * side * c];
    let sx_step = cw / side as f64;
    let sy_step = ch / side as f64;
    for oy in 0..side {
        let sy = (y0 + (oy as f64 + 0.5) * sy_step - 0.5).clamp(0.0, (img.h - 1) as f64);
        let yl = sy.floor() as usize;
        let yh = (yl + 1).min(img.h - 1);
        let fy = sy - yl as f64;
        for ox in 0..side {
            let sx = (x0 + (ox as f64 + 0.5) * sx_step - 0.5).clamp(0.0, (img.w - 1) as f64);
            let xl = sx.floor() as usize;
            let xh = (xl + 1).min(img.w - 1);
            let fx = sx - xl as f64;
            for ci in 0..c {
                let tl = img.get(yl, xl, ci);
                let tr = img.get(yl, xh, ci);
                let bl = img.get(yh, xl, ci);
                let br = img.get(yh, xh, ci);
                let top = tl + (tr - tl) * fx;
                let bot = bl + (br - bl) * fx;
                out[(oy * side + ox) * c + ci] = top + (bot - top) * fy;
            }
        }
    }
    out
}

/// Generate the configured global and local crops of one image. Identical
/// (image, config, seed) triples produce identical crop sets.
pub fn multi_crop(img: &Image, source_id: &str, cfg: &CropConfig, seed: u64) -> Result<CropSet> {
    cfg.validate()?;
    let min_dim = img.w.min(img.h);
    if min_dim < cfg.local_side {
        return Err(Error::Validation(format!(
            "image {}x{} smaller than local crop side {}",
            img.w, img.h, cfg.local_side
        )));
    }
    let mut rng = Rng::from_seed(seed);
    let mut take = |n: usize, side: usize, scale: (f64, f64)| -> Vec<Crop> {
        (0..n)
            .map(|_| {
                let rect = sample_rect(&mut rng, img.w as f64, img.h as f64, scale, cfg.aspect);
                Crop {
                    side,
                    channels: img.channels,
                    pixels: resize_rect(img, rect, side),
                    src_rect: rect,
                }
            })
            .collect()
    };
    let globals = take(cfg.n_global, cfg.global_side, cfg.global_scale);
    let locals = take(cfg.n_local, cfg.local_side, cfg.local_scale);
    Ok(CropSet { globals, locals, source_id: source_id.to_string(), seed })
}

/// Per-channel pixel statistics over a corpus, for zero-mean unit-variance
/// normalization of crops before the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PixelStats {
    pub fn identity(channels: usize) -> Self {
        PixelStats { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }

    pub fn from_images<'a>(images: impl Iterator<Item = &'a Image>) -> Result<Self> {
        let mut sums: Vec<f64> = Vec::new();
        let mut sq_sums: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for img in images {
            if sums.is_empty() {
                sums = vec![0.0; img.channels];
                sq_sums = vec![0.0; img.channels];
            }
            if sums.len() != img.channels {
                return Err(Error::Validation("mixed channel counts in corpus".into()));
            }
            for px in img.pixels.chunks_exact(img.channels) {
                for (c, &v) in px.iter().enumerate() {
                    sums[c] += v;
                    sq_sums[c] += v * v;
                }
            }
            count += img.h * img.w;
        }
        if count == 0 {
            return Err(Error::Validation("empty corpus for pixel statistics".into()));
        }
        let mean: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
        let std: Vec<f64> = sq_sums
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / count as f64 - m * m).max(0.0)).sqrt().max(1e-8))
            .collect();
        Ok(PixelStats { mean, std })
    }

    pub fn normalize(&self, pixels: &[f64], channels: usize) -> Vec<f64> {
        pixels
            .chunks_exact(channels)
            .flat_map(|px| {
                px.iter()
                    .enumerate()
                    .map(|(c, &v)| (v - self.mean[c]) / self.std[c])
                    .collect::<Vec<f64>>()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn ramp_image(side: usize) -> Image {
        let mut img = Image::new(side, side, 1);
        for y in 0..side {
            for x in 0..side {
                img.set(y, x, 0, 0.01 * x as f64 + 0.02 * y as f64);
            }
        }
        img
    }

    #[test]
    fn full_scale_crop_counts_and_sides() {
        let img = ramp_image(256);
        let cfg = CropConfig::full_scale();
        let set = multi_crop(&img, "img", &cfg, 7).unwrap();
        assert_eq!(set.globals.len(), 2);
        assert_eq!(set.locals.len(), 8);
        assert!(set.globals.iter().all(|c| c.side == 224));
        assert!(set.locals.iter().all(|c| c.side == 96));
    }

    #[test]
    fn degenerate_scale_and_aspect_reproduces_whole_image() {
        let img = ramp_image(32);
        let cfg = CropConfig {
            n_global: 1,
            n_local: 0,
            global_side: 16,
            local_side: 8,
            global_scale: (1.0, 1.0),
            local_scale: (0.05, 0.5),
            aspect: (1.0, 1.0),
        };
        let set = multi_crop(&img, "img", &cfg, 3).unwrap();
        let crop = &set.globals[0];
        assert_eq!(crop.src_rect, (0.0, 0.0, 32.0, 32.0));
        let direct = resize_rect(&img, (0.0, 0.0, 32.0, 32.0), 16);
        assert_eq!(crop.pixels, direct);
    }

    #[test]
    fn seeded_determinism() {
        let img = ramp_image(32);
        let cfg = CropConfig::desk_default();
        let a = multi_crop(&img, "img", &cfg, 11).unwrap();
        let b = multi_crop(&img, "img", &cfg, 11).unwrap();
        for (ca, cb) in a.globals.iter().zip(&b.globals) {
            assert_eq!(ca.src_rect, cb.src_rect);
            assert_eq!(ca.pixels, cb.pixels);
        }
        let c = multi_crop(&img, "img", &cfg, 12).unwrap();
        let any_differs = a
            .globals
            .iter()
            .chain(&a.locals)
            .zip(c.globals.iter().chain(&c.locals))
            .any(|(x, y)| x.src_rect != y.src_rect);
        assert!(any_differs);
    }

    #[test]
    fn image_too_small_is_rejected() {
        let img = ramp_image(4);
        let cfg = CropConfig::desk_default(); // local side 8
        assert!(multi_crop(&img, "img", &cfg, 0).is_err());
    }

    /// Area-fraction invariant over 10k samples per range.
    #[test]
    fn area_fractions_stay_in_range() {
        let img = ramp_image(32);
        let cfg = CropConfig::desk_default();
        let mut n_global = 0usize;
        let mut n_local = 0usize;
        for seed in 0..5000u64 {
            let set = multi_crop(&img, "img", &cfg, seed).unwrap();
            for c in &set.globals {
                let f = c.area_fraction(&img);
                assert!((0.5..=1.0 + 1e-12).contains(&f), "global fraction {f}");
                let (x0, y0, w, h) = c.src_rect;
                assert!(x0 >= 0.0 && y0 >= 0.0 && x0 + w <= 32.0 + 1e-9 && y0 + h <= 32.0 + 1e-9);
                n_global += 1;
            }
            for c in &set.locals {
                let f = c.area_fraction(&img);
                assert!((0.05..=0.5 + 1e-12).contains(&f), "local fraction {f}");
                n_local += 1;
            }
        }
        assert!(n_global >= 10_000 && n_local >= 10_000);
    }

    #[test]
    fn bilinear_constant_stays_constant() {
        let mut img = Image::new(24, 24, 1);
        img.pixels.iter_mut().for_each(|v| *v = 0.37);
        let out = resize_rect(&img, (0.0, 0.0, 24.0, 24.0), 10);
        for v in out {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_downscale_of_ramp_is_ramp() {
        let img = ramp_image(32);
        let side = 8;
        let out = resize_rect(&img, (0.0, 0.0, 32.0, 32.0), side);
        // sample centers are interior, so values must lie exactly on the plane
        for oy in 0..side {
            for ox in 0..side {
                let sx = (ox as f64 + 0.5) * 4.0 - 0.5;
                let sy = (oy as f64 + 0.5) * 4.0 - 0.5;
                let want = 0.01 * sx + 0.02 * sy;
                let got = out[oy * side + ox];
                assert!((got - want).abs() < 1e-9, "({ox},{oy}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn pixel_stats_normalize_to_zero_mean_unit_var() {
        let mut rng = Rng::from_seed(5);
        let mut img = Image::new(16, 16, 2);
        for v in &mut img.pixels {
            *v = rng.uniform();
        }
        let stats = PixelStats::from_images([&img].into_iter()).unwrap();
        let normed = stats.normalize(&img.pixels, 2);
        for c in 0..2 {
            let vals: Vec<f64> = normed.chunks_exact(2).map(|p| p[c]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
