//! Training-time augmentation of image patches and point clouds.
//!
//! Each sample draws from its own stream keyed by `(seed, sample_id)`, so
//! results do not depend on processing order.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::las::{AlsPoint, PointCloud};
use crate::raster::ImagePatch;
use crate::rng;

#[derive(Debug, Error, PartialEq)]
#[error("invalid augmentation config: {0}")]
pub struct AugmentError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig2D {
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub max_rotation_deg: f64,
    /// Relative brightness range, factor drawn from `1 ± brightness`.
    pub brightness: f64,
    pub saturation: f64,
    /// Hue shift range as a fraction of the hue circle.
    pub hue: f64,
    pub seed: u64,
}

impl Default for AugmentConfig2D {
    fn default() -> Self {
        Self { hflip_p: 0.5, vflip_p: 0.5, max_rotation_deg: 45.0, brightness: 0.2, saturation: 0.2, hue: 0.05, seed: 0 }
    }
}

impl AugmentConfig2D {
    /// Configuration that leaves every patch untouched.
    pub fn identity() -> Self {
        Self { hflip_p: 0.0, vflip_p: 0.0, max_rotation_deg: 0.0, brightness: 0.0, saturation: 0.0, hue: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for (name, p) in [("hflip_p", self.hflip_p), ("vflip_p", self.vflip_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError(format!("{name} = {p} is not a probability")));
            }
        }
        if !(0.0..=180.0).contains(&self.max_rotation_deg) {
            return Err(AugmentError(format!("max_rotation_deg = {} outside [0, 180]", self.max_rotation_deg)));
        }
        if !(0.0..=1.0).contains(&self.brightness) || !(0.0..=1.0).contains(&self.saturation) {
            return Err(AugmentError("brightness and saturation must lie in [0, 1]".into()));
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(AugmentError(format!("hue = {} outside [0, 0.5]", self.hue)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig3D {
    pub max_z_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub seed: u64,
}

impl Default for AugmentConfig3D {
    fn default() -> Self {
        Self { max_z_rotation_deg: 360.0, scale_range: (0.9, 1.1), jitter_sigma: 0.005, jitter_clip: 0.02, seed: 0 }
    }
}

impl AugmentConfig3D {
    pub fn identity() -> Self {
        Self { max_z_rotation_deg: 0.0, scale_range: (1.0, 1.0), jitter_sigma: 0.0, jitter_clip: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(AugmentError(format!("scale_range {:?} must satisfy 0 < low <= high", self.scale_range)));
        }
        if !(self.jitter_clip >= 0.0) || !(self.jitter_sigma >= 0.0) || !(self.max_z_rotation_deg >= 0.0) {
            return Err(AugmentError("jitter and rotation magnitudes must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn hflip(p: &ImagePatch) -> ImagePatch {
    let mut out = p.clone();
    for b in 0..p.bands {
        for row in 0..p.side {
            for col in 0..p.side {
                out.set(b, col, row, p.get(b, p.side - 1 - col, row));
            }
        }
    }
    out
}

pub fn vflip(p: &ImagePatch) -> ImagePatch {
    let mut out = p.clone();
    for b in 0..p.bands {
        for row in 0..p.side {
            for col in 0..p.side {
                out.set(b, col, row, p.get(b, col, p.side - 1 - row));
            }
        }
    }
    out
}

/// Rotates about the patch centre with bilinear resampling and zero fill.
pub fn rotate_bilinear(p: &ImagePatch, angle_deg: f64) -> ImagePatch {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let c = (p.side as f64 - 1.0) / 2.0;
    let side = p.side as i64;
    let mut out = p.clone();
    for row in 0..p.side {
        for col in 0..p.side {
            let (dx, dy) = (col as f64 - c, row as f64 - c);
            let xs = c + cos * dx + sin * dy;
            let ys = c - sin * dx + cos * dy;
            let (x0, y0) = (xs.floor(), ys.floor());
            let (fx, fy) = (xs - x0, ys - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for b in 0..p.bands {
                let at = |x: i64, y: i64| {
                    if x < 0 || y < 0 || x >= side || y >= side {
                        0.0
                    } else {
                        f64::from(p.get(b, x as usize, y as usize))
                    }
                };
                let v = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                    + at(x0 + 1, y0) * fx * (1.0 - fy)
                    + at(x0, y0 + 1) * (1.0 - fx) * fy
                    + at(x0 + 1, y0 + 1) * fx * fy;
                out.set(b, col, row, v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// RGB in [0,1] to (hue in [0,1), saturation, value).
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Scales value and saturation and shifts hue of the first three bands.
pub fn color_jitter(p: &ImagePatch, brightness: f64, saturation: f64, hue_shift: f64) -> ImagePatch {
    let mut out = p.clone();
    if p.bands < 3 {
        return out;
    }
    let n = p.side * p.side;
    for i in 0..n {
        let px = |b: usize| f64::from(p.pixels[b * n + i]) / 255.0;
        let (h, s, v) = rgb_to_hsv(px(0), px(1), px(2));
        let (r, g, b) = hsv_to_rgb(h + hue_shift, (s * saturation).clamp(0.0, 1.0), (v * brightness).clamp(0.0, 1.0));
        for (band, c) in [r, g, b].into_iter().enumerate() {
            out.pixels[band * n + i] = (c * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Random flips, rotation and colour jitter, then the circle mask again.
pub fn augment_image(p: &ImagePatch, cfg: &AugmentConfig2D) -> Result<ImagePatch, AugmentError> {
    cfg.validate()?;
    let mut g = rng::stream(cfg.seed, &format!("aug2d/{}", p.sample_id));
    let mut draw = || g.random::<f64>();
    let flip_h = draw() < cfg.hflip_p;
    let flip_v = draw() < cfg.vflip_p;
    let angle = (2.0 * draw() - 1.0) * cfg.max_rotation_deg;
    let brightness = 1.0 + (2.0 * draw() - 1.0) * cfg.brightness;
    let saturation = 1.0 + (2.0 * draw() - 1.0) * cfg.saturation;
    let hue = (2.0 * draw() - 1.0) * cfg.hue;

    let mut out = p.clone();
    if flip_h {
        out = hflip(&out);
    }
    if flip_v {
        out = vflip(&out);
    }
    if angle != 0.0 {
        out = rotate_bilinear(&out, angle);
    }
    if cfg.brightness > 0.0 || cfg.saturation > 0.0 || cfg.hue > 0.0 {
        out = color_jitter(&out, brightness, saturation, hue);
    }
    out.apply_mask();
    Ok(out)
}

/// Rotation about the z axis through the origin.
pub fn rotate_z(c: &PointCloud, angle_deg: f64) -> PointCloud {
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    map_points(c, |p| AlsPoint { x: cos * p.x - sin * p.y, y: sin * p.x + cos * p.y, ..p })
}

pub fn scale_points(c: &PointCloud, s: f64) -> PointCloud {
    map_points(c, |p| AlsPoint { x: p.x * s, y: p.y * s, z: p.z * s, ..p })
}

/// Adds clamped Gaussian noise to every coordinate.
pub fn jitter_points(c: &PointCloud, sigma: f64, clip: f64, g: &mut rng::Rng) -> PointCloud {
    if sigma == 0.0 || clip == 0.0 {
        return c.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let mut noise = || normal.sample(g).clamp(-clip, clip);
    map_points(c, |p| AlsPoint { x: p.x + noise(), y: p.y + noise(), z: p.z + noise(), ..p })
}

fn map_points(c: &PointCloud, mut f: impl FnMut(AlsPoint) -> AlsPoint) -> PointCloud {
    PointCloud { points: c.points.iter().map(|&p| f(p)).collect(), ..c.clone() }
}

/// Random z rotation, isotropic scaling and clipped jitter.
pub fn augment_points(c: &PointCloud, cfg: &AugmentConfig3D) -> Result<PointCloud, AugmentError> {
    cfg.validate()?;
    let mut g = rng::stream(cfg.seed, &format!("aug3d/{}", c.sample_id));
    let angle = g.random::<f64>() * cfg.max_z_rotation_deg;
    let (lo, hi) = cfg.scale_range;
    let s = lo + g.random::<f64>() * (hi - lo);
    let mut out = c.clone();
    if angle != 0.0 {
        out = rotate_z(&out, angle);
    }
    if s != 1.0 {
        out = scale_points(&out, s);
    }
    Ok(jitter_points(&out, cfg.jitter_sigma, cfg.jitter_clip, &mut g))
}
