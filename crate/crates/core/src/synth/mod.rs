//! Deterministic synthetic inputs: HNV rasters with planted patches, ALS
//! tiles, orthophotos and backbone embeddings.

pub mod oracle;

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{build_dataset, patches_geojson, BuildConfig, SplitConfig, SplitUnit};
use crate::embed::{write_store, EmbeddingRecord, EmbeddingStore, Modality, EMBED_DIM};
use crate::error::Result;
use crate::las::{tile_file_name, write_las, AlsPoint, LasError, LasHeader, TILE_SIZE_M};
use crate::raster::{GeoTransform, Raster, RasterData, RasterError, ORTHO_GSD_M};
use crate::rng;
use crate::tiff::{write_geotiff_with, Compression, Layout, WriteOptions};
use crate::types::{BioLabel, ClassProbs, GeoPoint, Manifest, Sample};

pub const HNV_BACKGROUND: u8 = 5;
pub const HNV_NODATA: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Rect,
    /// Ellipse inscribed in the rectangle.
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub label: BioLabel,
    pub col: usize,
    pub row: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default = "rect")]
    pub shape: Shape,
    /// Fixed HNV index; drawn per pixel from the label's band when absent.
    #[serde(default)]
    pub hnv_index: Option<u8>,
}

fn rect() -> Shape {
    Shape::Rect
}

impl PatchPlan {
    pub fn rect(label: BioLabel, col: usize, row: usize, width: usize, height: usize) -> Self {
        Self { label, col, row, width, height, shape: Shape::Rect, hnv_index: None }
    }

    pub fn contains(&self, col: usize, row: usize) -> bool {
        if col < self.col || row < self.row || col >= self.col + self.width || row >= self.row + self.height {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let (a, b) = (self.width as f64 / 2.0, self.height as f64 / 2.0);
                let dx = (col - self.col) as f64 + 0.5 - a;
                let dy = (row - self.row) as f64 + 0.5 - b;
                (dx / a).powi(2) + (dy / b).powi(2) <= 1.0
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HnvPlan {
    pub width: usize,
    pub height: usize,
    pub pixel_size: f64,
    pub origin_e: f64,
    pub origin_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedPlan {
    /// Distance between the two class means.
    pub margin: f64,
    pub sigma_2d: f64,
    pub sigma_3d: f64,
    pub instances: u8,
}

impl Default for EmbedPlan {
    fn default() -> Self {
        Self { margin: 1.0, sigma_2d: 0.6, sigma_3d: 0.4, instances: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub hnv: HnvPlan,
    #[serde(default)]
    pub patches: Vec<PatchPlan>,
    #[serde(default = "default_years")]
    pub years: Vec<i32>,
    #[serde(default = "default_density")]
    pub als_density: f64,
    #[serde(default)]
    pub embed: EmbedPlan,
    #[serde(default = "default_per_class")]
    pub n_samples_per_class: usize,
}

fn default_years() -> Vec<i32> {
    vec![2021]
}

fn default_density() -> f64 {
    8.0
}

fn default_per_class() -> usize {
    100
}

impl SynthSpec {
    /// A 360 m square straddling a 1 km tile corner, with seven viable
    /// patches, one under 0.5 ha and one too narrow to survive opening.
    pub fn mini(seed: u64) -> Self {
        use BioLabel::*;
        let patches = vec![
            PatchPlan::rect(High, 1, 1, 10, 10),
            PatchPlan::rect(Low, 13, 1, 10, 10),
            PatchPlan::rect(High, 25, 1, 10, 10),
            PatchPlan::rect(Low, 1, 13, 10, 10),
            PatchPlan::rect(High, 13, 13, 10, 8),
            PatchPlan::rect(Low, 25, 13, 10, 10),
            PatchPlan::rect(High, 1, 25, 10, 10),
            PatchPlan::rect(Low, 13, 25, 6, 6),
            PatchPlan::rect(High, 25, 25, 10, 3),
        ];
        Self {
            seed,
            hnv: HnvPlan { width: 36, height: 36, pixel_size: 10.0, origin_e: 599_820.0, origin_n: 6_200_180.0 },
            patches,
            years: default_years(),
            als_density: default_density(),
            embed: EmbedPlan::default(),
            n_samples_per_class: default_per_class(),
        }
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        let bad = |m: &str| Err(RasterError::Invalid(format!("synthetic spec: {m}")));
        if self.hnv.width == 0 || self.hnv.height == 0 || !(self.hnv.pixel_size > 0.0) {
            return bad("empty HNV extent");
        }
        if !(self.als_density > 0.0) {
            return bad("ALS density must be positive");
        }
        if !(self.embed.sigma_2d >= 0.0 && self.embed.sigma_3d >= 0.0) || self.embed.instances == 0 {
            return bad("embedding noise must be non-negative with at least one instance");
        }
        if self.years.is_empty() {
            return bad("no years");
        }
        for p in &self.patches {
            if p.col + p.width > self.hnv.width || p.row + p.height > self.hnv.height {
                return bad("patch outside the raster");
            }
            if let Some(i) = p.hnv_index {
                if !p.label.accepts_hnv(i64::from(i)) {
                    return bad("patch index outside its label band");
                }
            }
        }
        Ok(())
    }

    pub fn geotransform(&self) -> GeoTransform {
        GeoTransform::new(self.hnv.origin_e, self.hnv.origin_n, self.hnv.pixel_size)
    }

    pub fn extent(&self) -> Extent {
        let gt = self.geotransform();
        Extent {
            min_e: gt.origin_e,
            max_e: gt.origin_e + self.hnv.width as f64 * gt.pixel_size_e,
            min_n: gt.origin_n + self.hnv.height as f64 * gt.pixel_size_n,
            max_n: gt.origin_n,
        }
    }
}

/// Axis-aligned map rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extent {
    pub min_e: f64,
    pub min_n: f64,
    pub max_e: f64,
    pub max_n: f64,
}

impl Extent {
    pub fn area(&self) -> f64 {
        (self.max_e - self.min_e).max(0.0) * (self.max_n - self.min_n).max(0.0)
    }

    pub fn intersect(&self, o: &Extent) -> Option<Extent> {
        let e = Extent {
            min_e: self.min_e.max(o.min_e),
            min_n: self.min_n.max(o.min_n),
            max_e: self.max_e.min(o.max_e),
            max_n: self.max_n.min(o.max_n),
        };
        (e.max_e > e.min_e && e.max_n > e.min_n).then_some(e)
    }

    pub fn tile(cell: (i64, i64)) -> Extent {
        let (e, n) = (cell.0 as f64 * TILE_SIZE_M, cell.1 as f64 * TILE_SIZE_M);
        Extent { min_e: e, min_n: n, max_e: e + TILE_SIZE_M, max_n: n + TILE_SIZE_M }
    }

    /// 1 km cells overlapping the extent.
    pub fn cells(&self) -> Vec<(i64, i64)> {
        let c0 = ((self.min_e / TILE_SIZE_M).floor() as i64, (self.min_n / TILE_SIZE_M).floor() as i64);
        let c1 = ((self.max_e / TILE_SIZE_M).ceil() as i64 - 1, (self.max_n / TILE_SIZE_M).ceil() as i64 - 1);
        let mut out = Vec::new();
        for n in c0.1..=c1.1 {
            for e in c0.0..=c1.0 {
                out.push((e, n));
            }
        }
        out
    }
}

/// Background index 5 with planted patches; indices are drawn per pixel from the label band.
pub fn gen_hnv_raster(spec: &SynthSpec) -> Raster {
    let (w, h) = (spec.hnv.width, spec.hnv.height);
    let mut data = vec![HNV_BACKGROUND; w * h];
    for (i, p) in spec.patches.iter().enumerate() {
        let mut g = rng::stream(spec.seed, &format!("hnv/{i}"));
        let band: [u8; 3] = match p.label {
            BioLabel::Low => [1, 2, 3],
            BioLabel::High => [8, 9, 10],
        };
        for row in p.row..p.row + p.height {
            for col in p.col..p.col + p.width {
                if p.contains(col, row) {
                    data[row * w + col] = p.hnv_index.unwrap_or_else(|| band[g.random_range(0..3)]);
                }
            }
        }
    }
    Raster::new(w, h, 1, spec.geotransform(), RasterData::U8(data), Some(f64::from(HNV_NODATA)))
        .expect("spec dimensions are non-zero")
}

/// Ground plane with canopy bumps; the vegetation share follows a smooth field.
fn terrain(x: f64, y: f64) -> (f64, f64) {
    let ground = 30.0 + 0.004 * x.rem_euclid(1000.0) - 0.002 * y.rem_euclid(1000.0);
    let canopy = 14.0 + 6.0 * (x / 13.0).sin() * (y / 17.0).cos();
    (ground, canopy)
}

/// Poisson-count uniform points over `extent`.
pub fn gen_las_points(extent: &Extent, density: f64, seed: u64) -> Vec<AlsPoint> {
    let mut g = rng::stream(seed, "las-points");
    let lambda = density * extent.area();
    let n = if lambda > 0.0 { Poisson::new(lambda).map(|p| p.sample(&mut g) as usize).unwrap_or(0) } else { 0 };
    (0..n)
        .map(|_| {
            let x = extent.min_e + g.random::<f64>() * (extent.max_e - extent.min_e);
            let y = extent.min_n + g.random::<f64>() * (extent.max_n - extent.min_n);
            let (ground, canopy) = terrain(x, y);
            let hit_canopy = g.random::<f64>() < 0.7;
            let z = if hit_canopy { ground + canopy * g.random::<f64>().sqrt() } else { ground + 0.05 * g.random::<f64>() };
            AlsPoint { x, y, z, intensity: g.random_range(0..4096), classification: if hit_canopy { 5 } else { 2 } }
        })
        .collect()
}

pub fn gen_las_tile(extent: &Extent, density: f64, seed: u64, path: &Path) -> Result<LasHeader, LasError> {
    let points = gen_las_points(extent, density, seed);
    let header = LasHeader::new([0.01; 3], [extent.min_e.floor(), extent.min_n.floor(), 0.0]);
    write_las(&header, &points, path)
}

/// RGB texture at the orthophoto resolution covering `extent`.
pub fn gen_orthophoto_raster(extent: &Extent, seed: u64) -> Result<Raster, RasterError> {
    let cols = (extent.max_e - extent.min_e) / ORTHO_GSD_M;
    let rows = (extent.max_n - extent.min_n) / ORTHO_GSD_M;
    if (cols - cols.round()).abs() > 1e-6 || (rows - rows.round()).abs() > 1e-6 || cols < 1.0 || rows < 1.0 {
        return Err(RasterError::Invalid(format!("extent is not a multiple of {ORTHO_GSD_M} m")));
    }
    let (w, h) = (cols.round() as usize, rows.round() as usize);
    let gt = GeoTransform::new(extent.min_e, extent.max_n, ORTHO_GSD_M);
    let mut g = rng::stream(seed, "ortho");
    let phase: [f64; 3] = [g.random::<f64>() * 6.3, g.random::<f64>() * 6.3, g.random::<f64>() * 6.3];
    let base = [70.0, 105.0, 60.0];
    let mut data = vec![0u8; 3 * w * h];
    for b in 0..3 {
        let along_e: Vec<f64> = (0..w).map(|c| (gt.pixel_center(c as i64, 0).easting / 7.0 + phase[b]).sin()).collect();
        let along_n: Vec<f64> = (0..h).map(|r| (gt.pixel_center(0, r as i64).northing / 11.0).cos()).collect();
        for row in 0..h {
            let plane = &mut data[(b * h + row) * w..(b * h + row + 1) * w];
            for (col, px) in plane.iter_mut().enumerate() {
                let noise = g.random_range(-12.0..12.0);
                *px = (base[b] + 40.0 * along_e[col] * along_n[row] + noise).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Raster::new(w, h, 3, gt, RasterData::U8(data), None)
}

pub fn gen_orthophoto(extent: &Extent, seed: u64, path: &Path) -> Result<Raster, RasterError> {
    let r = gen_orthophoto_raster(extent, seed)?;
    let opts =
        WriteOptions { layout: Layout::Tiles { width: 256, height: 256 }, compression: Compression::None, ..Default::default() };
    write_geotiff_with(&r, path, &opts)?;
    Ok(r)
}

/// Unit direction and base point of one modality's feature space.
fn modality_frame(seed: u64, m: Modality) -> (Vec<f64>, Vec<f64>) {
    let mut g = rng::stream(seed, &format!("embed-frame/{m}"));
    let mut dir: Vec<f64> = (0..EMBED_DIM).map(|_| StandardNormal.sample(&mut g)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    dir.iter_mut().for_each(|v| *v /= norm);
    let base = (0..EMBED_DIM).map(|_| g.random::<f64>()).collect();
    (dir, base)
}

/// Class-cluster embeddings with Gaussian noise; probabilities come from a
/// logistic readout along the class direction.
pub fn gen_embeddings(manifest: &Manifest, spec: &SynthSpec) -> EmbeddingStore {
    let plan = &spec.embed;
    let mut store = EmbeddingStore::new();
    for m in Modality::ALL {
        let (dir, base) = modality_frame(spec.seed, m);
        let sigma = match m {
            Modality::Ortho2D => plan.sigma_2d,
            Modality::Als3D => plan.sigma_3d,
        };
        let noise = Normal::new(0.0, sigma.max(0.0)).expect("sigma is finite");
        let gain = 4.0 / plan.margin.max(1e-9);
        for s in &manifest.samples {
            let sign = match s.label {
                BioLabel::High => 0.5,
                BioLabel::Low => -0.5,
            };
            for inst in 0..plan.instances {
                let mut g = rng::stream(spec.seed, &format!("embed/{}/{m}/{inst}", s.id));
                let e: Vec<f32> = (0..EMBED_DIM)
                    .map(|i| {
                        let n = if sigma > 0.0 { noise.sample(&mut g) } else { 0.0 };
                        (base[i] + sign * plan.margin * dir[i] + n) as f32
                    })
                    .collect();
                let proj: f64 = e.iter().zip(&base).zip(&dir).map(|((&v, b), d)| (f64::from(v) - b) * d).sum();
                let p_high = (1.0 / (1.0 + (-gain * proj).exp())) as f32;
                let p_low = 1.0f32 - p_high;
                let probs = ClassProbs::new(f64::from(p_low), f64::from(p_high)).ok();
                store
                    .insert(EmbeddingRecord { sample_id: s.id.clone(), modality: m, instance: inst, embedding: e, probs })
                    .expect("keys are unique by construction");
            }
        }
    }
    store
}

/// Manifest without geography: `patches_per_class` patches per label sharing
/// `n_per_class` samples, split at patch level.
pub fn synth_manifest(n_per_class: usize, patches_per_class: usize, seed: u64) -> Result<Manifest> {
    let patches_per_class = patches_per_class.max(1);
    let mut samples = Vec::new();
    let mut units = Vec::new();
    for (li, label) in BioLabel::ALL.into_iter().enumerate() {
        for p in 0..patches_per_class {
            let patch_id = format!("{label}_2021_{p}");
            let count = n_per_class / patches_per_class + usize::from(p < n_per_class % patches_per_class);
            units.push(SplitUnit { patch_id: patch_id.clone(), label, weight: count });
            for k in 0..count {
                let center =
                    GeoPoint::new(500_000.0 + 40.0 * k as f64, 6_000_000.0 + 1000.0 * (li * patches_per_class + p) as f64);
                samples.push(Sample::new(
                    format!("{patch_id}_{k:03}"),
                    center,
                    2021,
                    label,
                    &patch_id,
                    crate::types::Split::Train,
                ));
            }
        }
    }
    let split = crate::dataset::split_patches(&units, &SplitConfig { seed, ..Default::default() })?;
    for s in &mut samples {
        s.split = split[&s.patch_id];
    }
    Ok(Manifest::new(samples))
}

/// Files written by [`write_dataset`].
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub hnv: PathBuf,
    pub tiles: PathBuf,
    pub orthos: PathBuf,
    pub embeddings: PathBuf,
    pub manifest: PathBuf,
    pub samples: usize,
    pub patches: usize,
}

/// Writes `hnv.tif`, `tiles/`, `orthos/`, `manifest.csv`, `patches.geojson` and `embeddings.bvem`.
pub fn write_dataset(spec: &SynthSpec, build: &BuildConfig, out: &Path) -> Result<SynthOutput> {
    spec.validate()?;
    let tiles = out.join("tiles");
    let orthos = out.join("orthos");
    std::fs::create_dir_all(&tiles)?;
    std::fs::create_dir_all(&orthos)?;

    let hnv = gen_hnv_raster(spec);
    let hnv_path = out.join("hnv.tif");
    crate::tiff::write_geotiff(&hnv, &hnv_path)?;

    let extent = spec.extent();
    for &year in &spec.years {
        for cell in extent.cells() {
            if let Some(part) = extent.intersect(&Extent::tile(cell)) {
                let seed = rng::fnv1a(format!("{}/{year}/{}/{}", spec.seed, cell.0, cell.1).as_bytes());
                gen_las_tile(&part, spec.als_density, seed, &tiles.join(tile_file_name(year, cell)))?;
            }
        }
        gen_orthophoto(&extent, spec.seed ^ year as u64, &orthos.join(format!("{year}.tif")))?;
    }

    let dataset = build_dataset(&hnv, build)?;
    let manifest_path = out.join("manifest.csv");
    dataset.manifest.save(&manifest_path)?;
    let geojson = serde_json::to_string_pretty(&patches_geojson(&dataset.patches, &dataset.manifest.crs_code))
        .map_err(std::io::Error::other)?;
    std::fs::write(out.join("patches.geojson"), geojson)?;
    let store = gen_embeddings(&dataset.manifest, spec);
    let emb_path = out.join("embeddings.bvem");
    write_store(store.records(), &emb_path)?;
    Ok(SynthOutput {
        hnv: hnv_path,
        tiles,
        orthos,
        embeddings: emb_path,
        manifest: manifest_path,
        samples: dataset.manifest.len(),
        patches: dataset.patches.len(),
    })
}
