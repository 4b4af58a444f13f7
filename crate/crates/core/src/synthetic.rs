//! Deterministic synthetic modality-shift benchmark.
//!
//! Every image is textured "mucosa" with one or more elliptical lesions. The
//! geometry and base appearance are drawn from one distribution for both
//! domains; the domains differ only in the photometric transform applied on
//! top (channel order, per-channel gain, gamma, vignetting, lesion contrast
//! and pixel noise). The target transform plays the role of an electronic
//! chromoendoscopy modality.

use std::f32::consts::PI;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Domain, Item, Split};
use crate::{Error, Result};

const MAX_PLACEMENT_ATTEMPTS: usize = 100;

/// Per-domain appearance transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Photometric {
    /// Output channel `c` reads base channel `channel_order[c]`.
    pub channel_order: [usize; 3],
    pub gains: [f32; 3],
    pub gamma: f32,
    /// Fractional darkening at the image corners.
    pub vignette: f32,
    /// Scales the lesion colour's offset from the background before the
    /// transform; 1 keeps the shared base appearance.
    #[serde(default = "one")]
    pub lesion_contrast: f32,
    /// Std of additive Gaussian pixel noise after the transform.
    #[serde(default)]
    pub noise: f32,
}

fn one() -> f32 {
    1.0
}

impl Photometric {
    pub fn identity() -> Self {
        Self {
            channel_order: [0, 1, 2],
            gains: [1.0; 3],
            gamma: 1.0,
            vignette: 0.0,
            lesion_contrast: 1.0,
            noise: 0.0,
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        let mut seen = [false; 3];
        for &c in &self.channel_order {
            if c > 2 || seen[c] {
                return Err(Error::config(
                    format!("{field}.channel_order"),
                    "must be a permutation of 0, 1, 2",
                ));
            }
            seen[c] = true;
        }
        if self.gains.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::config(format!("{field}.gains"), "must be positive"));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::config(format!("{field}.gamma"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.vignette) {
            return Err(Error::config(format!("{field}.vignette"), "must lie in [0, 1)"));
        }
        if !(self.lesion_contrast.is_finite() && self.lesion_contrast >= 0.0) {
            return Err(Error::config(format!("{field}.lesion_contrast"), "must be non-negative"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config(format!("{field}.noise"), "must be non-negative"));
        }
        Ok(())
    }

    fn apply(&self, base: [f32; 3], radial: f32) -> [f32; 3] {
        let shade = 1.0 - self.vignette * radial;
        let mut out = [0.0; 3];
        for c in 0..3 {
            let v = (self.gains[c] * base[self.channel_order[c]]).clamp(0.0, 1.0);
            out[c] = v.powf(self.gamma) * shade;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticShiftConfig {
    /// Images per domain.
    pub num_images: usize,
    pub image_size: usize,
    /// Inclusive range of lesions per image.
    pub blob_count: (usize, usize),
    /// Inclusive range of lesion semi-axes as a fraction of the image size.
    pub blob_scale: (f32, f32),
    pub background_color: [f32; 3],
    pub lesion_color: [f32; 3],
    /// Relative amplitude of the multiplicative tissue texture.
    pub texture_amplitude: f32,
    pub source: Photometric,
    pub target: Photometric,
    pub seed: u64,
}

impl Default for SyntheticShiftConfig {
    fn default() -> Self {
        Self {
            num_images: 100,
            image_size: 64,
            blob_count: (1, 3),
            blob_scale: (0.08, 0.22),
            background_color: [0.78, 0.52, 0.42],
            lesion_color: [0.88, 0.34, 0.30],
            texture_amplitude: 0.08,
            source: Photometric::identity(),
            target: Photometric {
                channel_order: [0, 1, 2],
                gains: [0.8, 1.2, 1.5],
                gamma: 0.7,
                vignette: 0.0,
                lesion_contrast: 1.0,
                noise: 0.0,
            },
            seed: 7,
        }
    }
}

impl SyntheticShiftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0 {
            return Err(Error::config("num_images", "must be positive"));
        }
        if self.image_size < 8 {
            return Err(Error::config("image_size", "must be at least 8"));
        }
        let (lo, hi) = self.blob_count;
        if lo == 0 || lo > hi {
            return Err(Error::config("blob_count", "need 1 <= min <= max"));
        }
        let (slo, shi) = self.blob_scale;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return Err(Error::config("blob_scale", "need 0 < min <= max"));
        }
        for (field, c) in [("background_color", self.background_color), ("lesion_color", self.lesion_color)] {
            if c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::config(field, "components must lie in [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.texture_amplitude) {
            return Err(Error::config("texture_amplitude", "must lie in [0, 1)"));
        }
        self.source.validate("source")?;
        self.target.validate("target")?;
        if self.source == self.target {
            return Err(Error::config("target", "source and target transforms must differ"));
        }
        Ok(())
    }
}

struct Ellipse {
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
    theta: f32,
}

impl Ellipse {
    fn contains(&self, x: f32, y: f32) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn half_extent(&self) -> (f32, f32) {
        let (s, c) = self.theta.sin_cos();
        (
            (self.a * self.a * c * c + self.b * self.b * s * s).sqrt(),
            (self.a * self.a * s * s + self.b * self.b * c * c).sqrt(),
        )
    }
}

/// Smooth multiplicative texture: a few random gratings plus pixel noise.
fn texture(rng: &mut ChaCha8Rng, size: usize, amplitude: f32) -> Array2<f32> {
    let mut field = Array2::<f32>::zeros((size, size));
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            let freq = rng.random_range(1.0f32..6.0) / size as f32;
            let dir = rng.random_range(0.0f32..PI);
            let phase = rng.random_range(0.0f32..2.0 * PI);
            let weight = rng.random_range(0.5f32..1.0);
            (freq, dir, phase, weight)
        })
        .collect();
    let norm: f32 = waves.iter().map(|w| w.3).sum();
    let noise = Normal::new(0.0f32, 0.35).expect("valid std");
    for ((y, x), v) in field.indexed_iter_mut() {
        let mut acc = 0.0;
        for &(freq, dir, phase, weight) in &waves {
            let t = (x as f32 * dir.cos() + y as f32 * dir.sin()) * freq * 2.0 * PI + phase;
            acc += weight * t.sin();
        }
        *v = amplitude * (acc / norm + noise.sample(rng));
    }
    field
}

fn place_blob(rng: &mut ChaCha8Rng, size: usize, scale: (f32, f32)) -> Result<Ellipse> {
    let s = size as f32;
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        let a = rng.random_range(scale.0..=scale.1) * s;
        let b = rng.random_range(scale.0..=scale.1) * s;
        let theta = rng.random_range(0.0f32..PI);
        let probe = Ellipse { cx: 0.0, cy: 0.0, a, b, theta };
        let (hx, hy) = probe.half_extent();
        // keep at least one pixel of background around every lesion
        let (lo_x, hi_x) = (hx + 1.0, s - 1.0 - hx - 1.0);
        let (lo_y, hi_y) = (hy + 1.0, s - 1.0 - hy - 1.0);
        if lo_x >= hi_x || lo_y >= hi_y {
            continue;
        }
        return Ok(Ellipse {
            cx: rng.random_range(lo_x..hi_x),
            cy: rng.random_range(lo_y..hi_y),
            ..probe
        });
    }
    Err(Error::Generation(format!(
        "could not place a lesion of scale {scale:?} inside a {size}x{size} image after {MAX_PLACEMENT_ATTEMPTS} attempts"
    )))
}

fn generate_domain(cfg: &SyntheticShiftConfig, domain: Domain) -> Result<Dataset> {
    let (stream, transform, prefix) = match domain {
        Domain::Source => (0, &cfg.source, "src"),
        Domain::Target => (1, &cfg.target, "tgt"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let n = cfg.image_size;
    let center = (n as f32 - 1.0) / 2.0;
    let max_r2 = 2.0 * center * center;

    let mut items = Vec::with_capacity(cfg.num_images);
    for idx in 0..cfg.num_images {
        let k = rng.random_range(cfg.blob_count.0..=cfg.blob_count.1);
        let blobs = (0..k)
            .map(|_| place_blob(&mut rng, n, cfg.blob_scale))
            .collect::<Result<Vec<_>>>()?;
        let bg_tex = texture(&mut rng, n, cfg.texture_amplitude);
        let lesion_tex = texture(&mut rng, n, cfg.texture_amplitude * 1.5);
        let lesion_color: [f32; 3] = std::array::from_fn(|c| {
            let bg = cfg.background_color[c];
            (bg + transform.lesion_contrast * (cfg.lesion_color[c] - bg)).clamp(0.0, 1.0)
        });
        let pixel_noise = Normal::new(0.0f32, transform.noise).map_err(|e| Error::config("noise", e.to_string()))?;

        let mut image = Array3::<f32>::zeros((3, n, n));
        let mut mask = Array2::<f32>::zeros((n, n));
        for y in 0..n {
            for x in 0..n {
                let inside = blobs.iter().any(|e| e.contains(x as f32, y as f32));
                let (color, tex) = if inside {
                    (lesion_color, lesion_tex[[y, x]])
                } else {
                    (cfg.background_color, bg_tex[[y, x]])
                };
                let base = color.map(|c| (c * (1.0 + tex)).clamp(0.0, 1.0));
                let dx = x as f32 - center;
                let dy = y as f32 - center;
                let radial = (dx * dx + dy * dy) / max_r2;
                let rgb = transform.apply(base, radial);
                for c in 0..3 {
                    let v = if transform.noise > 0.0 { rgb[c] + pixel_noise.sample(&mut rng) } else { rgb[c] };
                    // quantise so that a PNG round trip is lossless
                    image[[c, y, x]] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
                }
                mask[[y, x]] = if inside { 1.0 } else { 0.0 };
            }
        }
        let mut item = Item::new(format!("{prefix}_{idx:05}"), image, mask, domain)?;
        item.blob_count = Some(k);
        items.push(item);
    }
    Dataset::new(items, Split::Train)
}

/// Generates `(source, target)` datasets of `num_images` items each.
///
/// The two domains use independent random streams, so their geometry is
/// disjoint, but identical distributions. Output is a pure function of the
/// config.
pub fn generate_synthetic(cfg: &SyntheticShiftConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    Ok((generate_domain(cfg, Domain::Source)?, generate_domain(cfg, Domain::Target)?))
}
