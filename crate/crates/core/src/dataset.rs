//! From an HNV raster to labeled forest patches, circular samples and splits.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::raster::{GeoTransform, Raster};
use crate::rng;
use crate::types::{BioLabel, GeoPoint, Manifest, Sample, Split, SAMPLE_DIAMETER_M};

pub const DEFAULT_MIN_AREA_HA: f64 = 0.5;
pub const DEFAULT_OPENING_RADIUS_M: f64 = 15.0;
pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];
const RATIO_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{label} has {patches} usable patches; at least 3 are needed for a three-way split")]
    DegenerateSplit { label: BioLabel, patches: usize },
    #[error("invalid dataset configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DatasetError {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetError::DegenerateSplit { .. } => "DegenerateSplit",
            DatasetError::InvalidConfig(_) => "InvalidConfig",
            DatasetError::Io(_) => "Io",
        }
    }
}

/// Per-pixel membership for one label, aligned with its source raster.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
    pub geotransform: GeoTransform,
    pub label: BioLabel,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, geotransform: GeoTransform, label: BioLabel) -> Self {
        Self { width, height, bits: vec![false; width * height], geotransform, label }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        geotransform: GeoTransform,
        label: BioLabel,
        f: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let bits = (0..height).flat_map(|r| (0..width).map(move |c| (c, r))).map(|(c, r)| f(c, r)).collect();
        Self { width, height, bits, geotransform, label }
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.width + col]
    }

    /// Out-of-bounds reads are false.
    pub fn get_signed(&self, col: i64, row: i64) -> bool {
        col >= 0
            && row >= 0
            && (col as usize) < self.width
            && (row as usize) < self.height
            && self.bits[row as usize * self.width + col as usize]
    }

    pub fn set(&mut self, col: usize, row: usize, v: bool) {
        self.bits[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    fn with_bits(&self, bits: Vec<bool>) -> Self {
        Self { bits, ..self.clone() }
    }
}

/// Pixel index of an HNV value, or `None` for nodata and non-integers.
fn hnv_index(r: &Raster, v: f64) -> Option<i64> {
    if r.is_nodata(v) || !v.is_finite() || (v - v.round()).abs() > 1e-6 {
        return None;
    }
    Some(v.round() as i64)
}

pub fn threshold_hnv(hnv: &Raster, label: BioLabel) -> BinaryMask {
    let mut m = BinaryMask::new(hnv.width, hnv.height, hnv.geotransform, label);
    for row in 0..hnv.height {
        for col in 0..hnv.width {
            let keep = hnv_index(hnv, hnv.value(0, col, row)).is_some_and(|i| label.accepts_hnv(i));
            m.set(col, row, keep);
        }
    }
    m
}

/// Disc radius in pixels for a metric radius.
pub fn disc_radius_px(radius_m: f64, pixel_size: f64) -> usize {
    (radius_m / pixel_size).ceil().max(0.0) as usize
}

/// Half-width of the disc row at vertical offset `dy`.
fn disc_half_widths(r: usize) -> Vec<usize> {
    let r2 = (r * r) as i64;
    (0..=r as i64)
        .map(|dy| {
            let mut w = 0i64;
            while (w + 1) * (w + 1) + dy * dy <= r2 {
                w += 1;
            }
            w as usize
        })
        .collect()
}

/// Row-wise prefix sums of set bits, `width + 1` entries per row.
fn row_prefix(m: &BinaryMask) -> Vec<u32> {
    let w1 = m.width + 1;
    let mut p = vec![0u32; w1 * m.height];
    for row in 0..m.height {
        for col in 0..m.width {
            p[row * w1 + col + 1] = p[row * w1 + col] + u32::from(m.get(col, row));
        }
    }
    p
}

/// Erosion by the pixel disc of radius `r`; pixels outside the raster count as unset.
pub fn erode_px(m: &BinaryMask, r: usize) -> BinaryMask {
    let halves = disc_half_widths(r);
    let prefix = row_prefix(m);
    let w1 = m.width + 1;
    let (w, h) = (m.width as i64, m.height as i64);
    let mut out = vec![false; m.bits.len()];
    for row in 0..h {
        for col in 0..w {
            if !m.get(col as usize, row as usize) {
                continue;
            }
            let full = halves.iter().enumerate().all(|(dy, &hw)| {
                let (lo, hi) = (col - hw as i64, col + hw as i64);
                if lo < 0 || hi >= w {
                    return false;
                }
                [row - dy as i64, row + dy as i64].iter().all(|&y| {
                    y >= 0
                        && y < h
                        && (prefix[y as usize * w1 + hi as usize + 1] - prefix[y as usize * w1 + lo as usize]) as i64
                            == hi - lo + 1
                })
            });
            out[row as usize * m.width + col as usize] = full;
        }
    }
    m.with_bits(out)
}

/// Dilation by the pixel disc of radius `r`.
pub fn dilate_px(m: &BinaryMask, r: usize) -> BinaryMask {
    let halves = disc_half_widths(r);
    let prefix = row_prefix(m);
    let w1 = m.width + 1;
    let (w, h) = (m.width as i64, m.height as i64);
    let mut out = vec![false; m.bits.len()];
    for row in 0..h {
        for col in 0..w {
            let any = halves.iter().enumerate().any(|(dy, &hw)| {
                let lo = (col - hw as i64).max(0) as usize;
                let hi = (col + hw as i64).min(w - 1) as usize;
                [row - dy as i64, row + dy as i64]
                    .iter()
                    .any(|&y| y >= 0 && y < h && prefix[y as usize * w1 + hi + 1] > prefix[y as usize * w1 + lo])
            });
            out[row as usize * m.width + col as usize] = any;
        }
    }
    m.with_bits(out)
}

fn radius_px_for(m: &BinaryMask, radius_m: f64) -> usize {
    disc_radius_px(radius_m, m.geotransform.pixel_size_e)
}

pub fn erode(m: &BinaryMask, radius_m: f64) -> BinaryMask {
    erode_px(m, radius_px_for(m, radius_m))
}

pub fn dilate(m: &BinaryMask, radius_m: f64) -> BinaryMask {
    dilate_px(m, radius_px_for(m, radius_m))
}

pub fn morphological_open(m: &BinaryMask, radius_m: f64) -> BinaryMask {
    let r = radius_px_for(m, radius_m);
    dilate_px(&erode_px(m, r), r)
}

/// A 4-connected group of same-label pixels. Ids are `<label>_<n>` out of
/// [`connected_components`] and `<label>_<year>_<n>` once a dataset assigns years.
#[derive(Debug, Clone, PartialEq)]
pub struct ForestPatch {
    pub patch_id: String,
    pub label: BioLabel,
    /// `(col, row)` in raster order.
    pub pixel_set: Vec<(usize, usize)>,
    pub area_ha: f64,
    /// Closed outer boundary, clockwise on the map.
    pub polygon: Vec<GeoPoint>,
    pub geotransform: GeoTransform,
}

impl ForestPatch {
    /// Inclusive pixel bounding box `(col0, row0, col1, row1)`.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        self.pixel_set
            .iter()
            .fold((usize::MAX, usize::MAX, 0, 0), |(c0, r0, c1, r1), &(c, r)| (c0.min(c), r0.min(r), c1.max(c), r1.max(r)))
    }
}

/// 4-connected components in raster-scan order of their first pixel.
pub fn label_components(m: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; m.bits.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..m.bits.len() {
        if !m.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (c, r) = (i % m.width, i / m.width);
            pixels.push((c, r));
            let mut visit = |j: usize| {
                if m.bits[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < m.width {
                visit(i + 1);
            }
            if r > 0 {
                visit(i - m.width);
            }
            if r + 1 < m.height {
                visit(i + m.width);
            }
        }
        pixels.sort_by_key(|&(c, r)| (r, c));
        comps.push(pixels);
    }
    comps
}

/// Traces the outer boundary of a 4-connected pixel set along pixel edges.
/// Returns closed ring vertices in pixel-corner coordinates, clockwise with y down.
pub fn trace_outline(pixels: &[(usize, usize)]) -> Vec<(i64, i64)> {
    let Some(&(c0, r0)) = pixels.iter().min_by_key(|&&(c, r)| (r, c)) else {
        return Vec::new();
    };
    let (cmin, rmin, cmax, rmax) =
        pixels.iter().fold((c0, r0, c0, r0), |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)));
    let bw = cmax - cmin + 1;
    let mut inside = vec![false; bw * (rmax - rmin + 1)];
    for &(c, r) in pixels {
        inside[(r - rmin) * bw + (c - cmin)] = true;
    }
    let is_in = |x: i64, y: i64| {
        x >= cmin as i64
            && y >= rmin as i64
            && x <= cmax as i64
            && y <= rmax as i64
            && inside[(y as usize - rmin) * bw + (x as usize - cmin)]
    };

    let start = (c0 as i64, r0 as i64);
    let (mut v, mut d) = (start, (1i64, 0i64));
    let mut ring = vec![start];
    loop {
        let right = (-d.1, d.0);
        // doubled coordinates of pixel centres ahead of the current vertex
        let ahead = |s: i64| {
            let cx = 2 * v.0 + d.0 + s * right.0;
            let cy = 2 * v.1 + d.1 + s * right.1;
            is_in(cx.div_euclid(2), cy.div_euclid(2))
        };
        let next = if !ahead(1) {
            right
        } else if !ahead(-1) {
            d
        } else {
            (d.1, -d.0)
        };
        if next != d && v != start {
            ring.push(v);
        }
        d = next;
        v = (v.0 + d.0, v.1 + d.1);
        if v == start {
            break;
        }
    }
    ring.push(start);
    ring
}

/// Signed shoelace area of a closed pixel-corner ring.
pub fn ring_area_px(ring: &[(i64, i64)]) -> i64 {
    ring.windows(2).map(|w| w[0].0 * w[1].1 - w[1].0 * w[0].1).sum::<i64>() / 2
}

pub fn connected_components(m: &BinaryMask, min_area_ha: f64) -> Vec<ForestPatch> {
    let gt = m.geotransform;
    let px_area = gt.pixel_area();
    label_components(m)
        .into_iter()
        .filter(|px| px.len() as f64 * px_area >= min_area_ha * 10_000.0)
        .enumerate()
        .map(|(i, pixels)| {
            let polygon = trace_outline(&pixels).into_iter().map(|(x, y)| gt.vertex(x as f64, y as f64)).collect();
            ForestPatch {
                patch_id: format!("{}_{i:04}", m.label),
                label: m.label,
                area_ha: pixels.len() as f64 * px_area / 10_000.0,
                pixel_set: pixels,
                polygon,
                geotransform: gt,
            }
        })
        .collect()
}

/// Distance from `p` to the closed square of pixel `(col, row)`.
fn pixel_distance(gt: &GeoTransform, col: i64, row: i64, p: GeoPoint) -> f64 {
    let a = gt.vertex(col as f64, row as f64);
    let b = gt.vertex((col + 1) as f64, (row + 1) as f64);
    let (e0, e1) = (a.easting.min(b.easting), a.easting.max(b.easting));
    let (n0, n1) = (a.northing.min(b.northing), a.northing.max(b.northing));
    let de = (e0 - p.easting).max(0.0).max(p.easting - e1);
    let dn = (n0 - p.northing).max(0.0).max(p.northing - n1);
    de.hypot(dn)
}

/// True iff every pixel that the open disc around `center` reaches lies in `is_in`.
pub fn disc_inside(gt: &GeoTransform, center: GeoPoint, radius: f64, is_in: impl Fn(i64, i64) -> bool) -> bool {
    let a = gt.pixel_of(GeoPoint::new(center.easting - radius, center.northing + radius));
    let b = gt.pixel_of(GeoPoint::new(center.easting + radius, center.northing - radius));
    for row in a.1.min(b.1)..=a.1.max(b.1) {
        for col in a.0.min(b.0)..=a.0.max(b.0) {
            if pixel_distance(gt, col, row, center) < radius && !is_in(col, row) {
                return false;
            }
        }
    }
    true
}

/// Lattice sample centres whose discs fit inside the patch.
pub fn place_samples(patch: &ForestPatch, diameter: f64, seed: u64) -> Vec<GeoPoint> {
    if patch.pixel_set.is_empty() || diameter <= 0.0 {
        return Vec::new();
    }
    let gt = &patch.geotransform;
    let (c0, r0, c1, r1) = patch.bbox();
    let bw = c1 - c0 + 1;
    let mut inside = vec![false; bw * (r1 - r0 + 1)];
    for &(c, r) in &patch.pixel_set {
        inside[(r - r0) * bw + (c - c0)] = true;
    }
    let is_in = |c: i64, r: i64| {
        c >= c0 as i64 && r >= r0 as i64 && c <= c1 as i64 && r <= r1 as i64 && inside[(r as usize - r0) * bw + (c as usize - c0)]
    };

    let mut g = rng::stream(seed, &format!("place/{}", patch.patch_id));
    let phase_e = g.random_range(0.0..diameter);
    let phase_n = g.random_range(0.0..diameter);
    let radius = diameter / 2.0;
    let tl = gt.vertex(c0 as f64, r0 as f64);
    let br = gt.vertex((c1 + 1) as f64, (r1 + 1) as f64);
    let (min_e, max_e) = (tl.easting.min(br.easting), tl.easting.max(br.easting));
    let (min_n, max_n) = (tl.northing.min(br.northing), tl.northing.max(br.northing));
    let k_lo = |lo: f64, phase: f64| ((lo + radius - phase) / diameter).ceil() as i64;
    let k_hi = |hi: f64, phase: f64| ((hi - radius - phase) / diameter).floor() as i64;

    let mut out = Vec::new();
    // north to south, then west to east
    for kn in (k_lo(min_n, phase_n)..=k_hi(max_n, phase_n)).rev() {
        for ke in k_lo(min_e, phase_e)..=k_hi(max_e, phase_e) {
            let p = GeoPoint::new(phase_e + ke as f64 * diameter, phase_n + kn as f64 * diameter);
            if disc_inside(gt, p, radius, is_in) {
                out.push(p);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitLevel {
    #[default]
    Polygon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Train, validation and test fractions.
    pub ratios: [f64; 3],
    pub seed: u64,
    pub level: SplitLevel,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { ratios: DEFAULT_RATIOS, seed: 0, level: SplitLevel::Polygon }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(DatasetError::InvalidConfig(format!("ratios {:?} must lie in [0, 1]", self.ratios)));
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > RATIO_TOL {
            return Err(DatasetError::InvalidConfig(format!("ratios {:?} sum to {sum}", self.ratios)));
        }
        Ok(())
    }
}

/// A patch as seen by the splitter: its weight is its sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitUnit {
    pub patch_id: String,
    pub label: BioLabel,
    pub weight: usize,
}

/// Assigns every patch to one split, stratified by label and balanced on sample counts.
pub fn split_patches(units: &[SplitUnit], cfg: &SplitConfig) -> Result<BTreeMap<String, Split>, DatasetError> {
    cfg.validate()?;
    let mut out = BTreeMap::new();
    for label in BioLabel::ALL {
        let mut group: Vec<&SplitUnit> = units.iter().filter(|u| u.label == label).collect();
        match group.len() {
            0 => continue,
            n @ 1..=2 => return Err(DatasetError::DegenerateSplit { label, patches: n }),
            _ => {}
        }
        group.shuffle(&mut rng::stream(cfg.seed, &format!("split/{label}")));
        // large patches first keeps the final imbalance below the smallest weights
        group.sort_by_key(|u| std::cmp::Reverse(u.weight));
        let uniform = group.iter().all(|u| u.weight == 0);
        let weight = |u: &SplitUnit| if uniform { 1.0 } else { u.weight as f64 };
        let total: f64 = group.iter().map(|u| weight(u)).sum();
        let targets = cfg.ratios.map(|r| r * total);
        let mut filled = [0.0f64; 3];
        let mut members: [Vec<usize>; 3] = Default::default();
        for (i, u) in group.iter().enumerate() {
            let mut best = 0;
            for s in 1..3 {
                if targets[s] - filled[s] > targets[best] - filled[best] {
                    best = s;
                }
            }
            filled[best] += weight(u);
            members[best].push(i);
        }
        // every split with a positive ratio receives at least one patch
        for s in 0..3 {
            if cfg.ratios[s] > 0.0 && members[s].is_empty() {
                let donor = (0..3).max_by_key(|&d| (members[d].len(), std::cmp::Reverse(d))).unwrap();
                if members[donor].len() < 2 {
                    continue;
                }
                let (pos, _) =
                    members[donor].iter().enumerate().min_by(|a, b| weight(group[*a.1]).total_cmp(&weight(group[*b.1]))).unwrap();
                let moved = members[donor].remove(pos);
                members[s].push(moved);
            }
        }
        for (s, idx) in members.iter().enumerate() {
            for &i in idx {
                out.insert(group[i].patch_id.clone(), Split::ALL[s]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    pub split: SplitConfig,
    pub opening_radius_m: f64,
    pub min_area_ha: f64,
    pub diameter: f64,
    /// Acquisition years drawn per patch.
    pub years: Vec<i32>,
    /// Random subset of qualifying patches per label, all if `None`.
    pub max_patches_per_label: Option<usize>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            split: SplitConfig::default(),
            opening_radius_m: DEFAULT_OPENING_RADIUS_M,
            min_area_ha: DEFAULT_MIN_AREA_HA,
            diameter: SAMPLE_DIAMETER_M,
            years: vec![2021],
            max_patches_per_label: None,
        }
    }
}

impl BuildConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        self.split.validate()?;
        if !(self.opening_radius_m >= 0.0) || !(self.min_area_ha >= 0.0) || !(self.diameter > 0.0) {
            return Err(DatasetError::InvalidConfig("radius, area and diameter must be non-negative".into()));
        }
        if self.years.is_empty() {
            return Err(DatasetError::InvalidConfig("no acquisition years".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Patches that received at least one sample.
    pub patches: Vec<ForestPatch>,
}

/// Thresholding, opening, components, placement and split for both labels.
pub fn build_dataset(hnv: &Raster, cfg: &BuildConfig) -> Result<Dataset, DatasetError> {
    cfg.validate()?;
    let seed = cfg.split.seed;
    let mut kept: Vec<(i32, ForestPatch, Vec<GeoPoint>)> = Vec::new();
    for label in BioLabel::ALL {
        let mask = morphological_open(&threshold_hnv(hnv, label), cfg.opening_radius_m);
        let mut patches = connected_components(&mask, cfg.min_area_ha);
        if let Some(max) = cfg.max_patches_per_label {
            if patches.len() > max {
                let mut pick: Vec<usize> = (0..patches.len()).collect();
                pick.shuffle(&mut rng::stream(seed, &format!("select/{label}")));
                pick.truncate(max);
                pick.sort_unstable();
                patches = pick.into_iter().map(|i| patches[i].clone()).collect();
            }
        }
        for (i, mut p) in patches.into_iter().enumerate() {
            let year = cfg.years[rng::stream(seed, &format!("year/{}", p.patch_id)).random_range(0..cfg.years.len())];
            p.patch_id = format!("{label}_{year}_{i}");
            let centers = place_samples(&p, cfg.diameter, seed);
            if !centers.is_empty() {
                kept.push((year, p, centers));
            }
        }
    }

    let units: Vec<SplitUnit> =
        kept.iter().map(|(_, p, c)| SplitUnit { patch_id: p.patch_id.clone(), label: p.label, weight: c.len() }).collect();
    let assignment = match split_patches(&units, &cfg.split) {
        Ok(a) => a,
        Err(DatasetError::DegenerateSplit { label, patches }) => {
            warn!("{label}: only {patches} patches, assigning splits round-robin");
            round_robin(&units, &cfg.split)?
        }
        Err(e) => return Err(e),
    };

    let mut samples = Vec::new();
    for (year, p, centers) in &kept {
        let year = *year;
        let split = assignment[&p.patch_id];
        for (k, &c) in centers.iter().enumerate() {
            let mut s = Sample::new(format!("{}_{k:03}", p.patch_id), c, year, p.label, &p.patch_id, split);
            s.diameter = cfg.diameter;
            samples.push(s);
        }
    }
    Ok(Dataset { manifest: Manifest::new(samples), patches: kept.into_iter().map(|(_, p, _)| p).collect() })
}

/// Splitter for labels with too few patches: patches cycle through train, val, test.
fn round_robin(units: &[SplitUnit], cfg: &SplitConfig) -> Result<BTreeMap<String, Split>, DatasetError> {
    let mut out = BTreeMap::new();
    for label in BioLabel::ALL {
        let group: Vec<SplitUnit> = units.iter().filter(|u| u.label == label).cloned().collect();
        if group.len() >= 3 {
            out.extend(split_patches(&group, cfg)?);
        } else {
            for (i, u) in group.iter().enumerate() {
                out.insert(u.patch_id.clone(), Split::ALL[i % 3]);
            }
        }
    }
    Ok(out)
}

pub fn build_manifest(hnv: &Raster, cfg: &BuildConfig) -> Result<Manifest, DatasetError> {
    Ok(build_dataset(hnv, cfg)?.manifest)
}

/// Patch outlines as a GeoJSON FeatureCollection.
pub fn patches_geojson(patches: &[ForestPatch], crs_code: &str) -> serde_json::Value {
    let features: Vec<_> = patches
        .iter()
        .map(|p| {
            let ring: Vec<[f64; 2]> = p.polygon.iter().map(|v| [v.easting, v.northing]).collect();
            json!({
                "type": "Feature",
                "properties": { "patch_id": p.patch_id, "label": p.label.as_str(), "area_ha": p.area_ha },
                "geometry": { "type": "Polygon", "coordinates": [ring] },
            })
        })
        .collect();
    let urn = crs_code.replace("EPSG:", "urn:ogc:def:crs:EPSG::");
    json!({
        "type": "FeatureCollection",
        "crs": { "type": "name", "properties": { "name": urn } },
        "features": features,
    })
}

pub fn write_geojson(patches: &[ForestPatch], crs_code: &str, path: &Path) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(&patches_geojson(patches, crs_code)).map_err(std::io::Error::other)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::RasterData;

    fn gt10() -> GeoTransform {
        GeoTransform::new(0.0, 1000.0, 10.0)
    }

    fn mask(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> BinaryMask {
        BinaryMask::from_fn(w, h, gt10(), BioLabel::High, f)
    }

    fn hnv(w: usize, h: usize, f: impl Fn(usize, usize) -> f32) -> Raster {
        let data = (0..h).flat_map(|r| (0..w).map(move |c| (c, r))).map(|(c, r)| f(c, r)).collect();
        Raster::new(w, h, 1, gt10(), RasterData::F32(data), Some(-1.0)).unwrap()
    }

    #[test]
    fn threshold_excludes_middle_band() {
        let r = hnv(4, 4, |_, _| 5.0);
        for label in BioLabel::ALL {
            assert_eq!(threshold_hnv(&r, label).count(), 0);
        }
        let r = hnv(4, 4, |_, _| 9.0);
        assert_eq!(threshold_hnv(&r, BioLabel::High).count(), 16);
        let r = hnv(11, 1, |c, _| if c == 10 { -1.0 } else { c as f32 });
        let low = threshold_hnv(&r, BioLabel::Low);
        let high = threshold_hnv(&r, BioLabel::High);
        assert_eq!((0..11).filter(|&c| low.get(c, 0)).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!((0..11).filter(|&c| high.get(c, 0)).collect::<Vec<_>>(), vec![8, 9]);
    }

    #[test]
    fn disc_shape() {
        assert_eq!(disc_half_widths(0), vec![0]);
        assert_eq!(disc_half_widths(2), vec![2, 1, 0]);
        assert_eq!(disc_radius_px(15.0, 10.0), 2);
        assert_eq!(disc_radius_px(0.0, 10.0), 0);
    }

    #[test]
    fn opening_removes_lines_and_keeps_squares() {
        let line = mask(20, 20, |c, r| r == 10 && c > 2);
        assert_eq!(morphological_open(&line, 10.0).count(), 0);
        let square = mask(30, 30, |c, r| (5..25).contains(&c) && (5..25).contains(&r));
        assert_eq!(morphological_open(&square, 0.0), square);
        // a disc cannot reach square corners, only corner pixels go
        let opened = morphological_open(&square, 15.0);
        assert!(opened.is_subset_of(&square));
        for (i, (&a, &b)) in opened.bits.iter().zip(&square.bits).enumerate() {
            let (c, r) = (i % 30, i / 30);
            let near = |v: usize| !(7..=22).contains(&v);
            assert!(a == b || (near(c) && near(r)), "({c},{r})");
        }
        // a dilation is open with respect to the same disc
        let rounded = dilate_px(&mask(30, 30, |c, r| (8..22).contains(&c) && (8..22).contains(&r)), 2);
        assert_eq!(morphological_open(&rounded, 15.0), rounded);
    }

    #[test]
    fn border_pixels_erode() {
        let full = mask(8, 8, |_, _| true);
        let e = erode_px(&full, 1);
        assert!(!e.get(0, 3) && e.get(1, 1) && !e.get(7, 7));
        assert_eq!(e.count(), 36);
    }

    #[test]
    fn area_threshold_is_inclusive() {
        let two = mask(30, 12, |c, r| r < 10 && (c < 10 || (15..25).contains(&c)));
        let patches = connected_components(&two, 0.5);
        assert_eq!(patches.len(), 2);
        assert!(patches.iter().all(|p| (p.area_ha - 1.0).abs() < 1e-12));
        let small = mask(7, 7, |_, _| true);
        assert!(connected_components(&small, 0.5).is_empty());
        let exact = mask(10, 5, |_, _| true);
        assert_eq!(connected_components(&exact, 0.5).len(), 1);
        assert!(connected_components(&mask(5, 5, |_, _| false), 0.5).is_empty());
    }

    #[test]
    fn diagonal_pixels_are_separate() {
        let m = mask(2, 2, |c, r| c == r);
        assert_eq!(label_components(&m).len(), 2);
    }

    #[test]
    fn outline_of_l_shape() {
        // ##
        // #.
        let ring = trace_outline(&[(0, 0), (1, 0), (0, 1)]);
        assert_eq!(ring, vec![(0, 0), (2, 0), (2, 1), (1, 1), (1, 2), (0, 2), (0, 0)]);
        assert_eq!(ring_area_px(&ring), 3);
    }

    #[test]
    fn outline_ignores_holes() {
        let ring = trace_outline(&[(0, 0), (1, 0), (2, 0), (0, 1), (2, 1), (0, 2), (1, 2), (2, 2)]);
        assert_eq!(ring, vec![(0, 0), (3, 0), (3, 3), (0, 3), (0, 0)]);
    }

    #[test]
    fn polygon_in_map_coordinates() {
        let m = mask(5, 5, |c, r| c >= 1 && r >= 2);
        let p = &connected_components(&m, 0.0)[0];
        assert_eq!(p.polygon.first(), p.polygon.last());
        assert_eq!(p.polygon[0], GeoPoint::new(10.0, 980.0));
        assert_eq!(p.polygon.len(), 5);
    }

    #[test]
    fn solid_square_sample_count() {
        let m = mask(30, 30, |_, _| true);
        let p = &connected_components(&m, 0.0)[0];
        for seed in 0..20 {
            let pts = place_samples(p, 30.0, seed);
            assert!((81..=100).contains(&pts.len()), "{}", pts.len());
        }
        let tiny = &connected_components(&mask(2, 2, |_, _| true), 0.0)[0];
        assert!(place_samples(tiny, 30.0, 1).is_empty());
    }

    fn units(label: BioLabel, weights: &[usize]) -> Vec<SplitUnit> {
        weights.iter().enumerate().map(|(i, &w)| SplitUnit { patch_id: format!("{label}_{i}"), label, weight: w }).collect()
    }

    #[test]
    fn equal_patches_split_exactly() {
        let mut all = units(BioLabel::Low, &[4; 10]);
        all.extend(units(BioLabel::High, &[4; 10]));
        let a = split_patches(&all, &SplitConfig::default()).unwrap();
        for label in BioLabel::ALL {
            let count = |s| a.iter().filter(|(k, v)| k.starts_with(label.as_str()) && **v == s).count();
            assert_eq!([count(Split::Train), count(Split::Val), count(Split::Test)], [6, 2, 2]);
        }
        assert_eq!(a, split_patches(&all, &SplitConfig::default()).unwrap());
    }

    #[test]
    fn too_few_patches() {
        let err = split_patches(&units(BioLabel::High, &[3, 4]), &SplitConfig::default()).unwrap_err();
        assert!(matches!(err, DatasetError::DegenerateSplit { patches: 2, .. }));
        let bad = SplitConfig { ratios: [0.5, 0.3, 0.3], ..Default::default() };
        assert!(matches!(split_patches(&[], &bad), Err(DatasetError::InvalidConfig(_))));
    }

    #[test]
    fn skewed_weights_still_fill_every_split() {
        let a = split_patches(&units(BioLabel::Low, &[100, 1, 1]), &SplitConfig::default()).unwrap();
        let mut got: Vec<Split> = a.values().copied().collect();
        got.sort_by_key(|s| *s as u8);
        assert_eq!(got, vec![Split::Train, Split::Val, Split::Test]);
    }

    #[test]
    fn empty_raster_gives_empty_manifest() {
        let r = hnv(20, 20, |_, _| 0.0);
        assert!(build_manifest(&r, &BuildConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn two_small_patches_both_labels() {
        // two 2 ha squares (20 x 10 px at 10 m) separated by an unlabeled gap
        let r = hnv(50, 12, |c, r| match (c, r) {
            (0..=19, 1..=10) => 9.0,
            (25..=44, 1..=10) => 2.0,
            _ => 5.0,
        });
        let m = build_manifest(&r, &BuildConfig::default()).unwrap();
        m.validate().unwrap();
        for label in BioLabel::ALL {
            assert!(m.samples.iter().any(|s| s.label == label));
        }
    }

    #[test]
    fn geojson_shape() {
        let m = mask(12, 12, |c, r| c < 10 && r < 10);
        let v = patches_geojson(&connected_components(&m, 0.5), "EPSG:25832");
        assert_eq!(v["features"].as_array().unwrap().len(), 1);
        assert_eq!(v["features"][0]["properties"]["label"], "high");
        assert_eq!(v["features"][0]["geometry"]["coordinates"][0].as_array().unwrap().len(), 5);
    }
}
