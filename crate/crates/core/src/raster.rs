//! Georeferenced rasters and circle-masked image patches.

use std::io::{self, Write};
use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

use crate::types::{GeoPoint, SAMPLE_DIAMETER_M};

/// Orthophoto ground sampling distance in meters.
pub const ORTHO_GSD_M: f64 = 0.125;
/// Patch side in pixels: 30 m at 12.5 cm.
pub const PATCH_SIDE: usize = 240;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("unsupported compression: {0}")]
    UnsupportedCompression(String),
    #[error("missing GeoTIFF tags: {0}")]
    MissingGeoTags(String),
    #[error("corrupt IFD: {0}")]
    CorruptIfd(String),
    #[error("unsupported TIFF layout: {0}")]
    UnsupportedFormat(String),
    #[error("point or window out of bounds: {0}")]
    OutOfBounds(String),
    #[error("patch needs {expected} m pixels, raster has ({found_e}, {found_n})")]
    PatchResolutionMismatch { expected: f64, found_e: f64, found_n: f64 },
    #[error("nodata at {0:?}")]
    NoData(GeoPoint),
    #[error("invalid raster: {0}")]
    Invalid(String),
    #[error("png encoding: {0}")]
    Png(String),
}

impl RasterError {
    pub fn name(&self) -> &'static str {
        match self {
            RasterError::Io(_) => "IoError",
            RasterError::UnsupportedCompression(_) => "UnsupportedCompression",
            RasterError::MissingGeoTags(_) => "MissingGeoTags",
            RasterError::CorruptIfd(_) => "CorruptIFD",
            RasterError::UnsupportedFormat(_) => "UnsupportedFormat",
            RasterError::OutOfBounds(_) => "OutOfBounds",
            RasterError::PatchResolutionMismatch { .. } => "PatchResolutionMismatch",
            RasterError::NoData(_) => "NoData",
            RasterError::Invalid(_) => "InvalidRaster",
            RasterError::Png(_) => "PngError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelType {
    U8,
    U16,
    F32,
}

impl PixelType {
    pub fn bytes(self) -> usize {
        match self {
            PixelType::U8 => 1,
            PixelType::U16 => 2,
            PixelType::F32 => 4,
        }
    }
}

/// Band-major pixel storage.
#[derive(Debug, Clone, PartialEq)]
pub enum RasterData {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl RasterData {
    pub fn len(&self) -> usize {
        match self {
            RasterData::U8(v) => v.len(),
            RasterData::U16(v) => v.len(),
            RasterData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixel_type(&self) -> PixelType {
        match self {
            RasterData::U8(_) => PixelType::U8,
            RasterData::U16(_) => PixelType::U16,
            RasterData::F32(_) => PixelType::F32,
        }
    }

    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            RasterData::U8(v) => f64::from(v[i]),
            RasterData::U16(v) => f64::from(v[i]),
            RasterData::F32(v) => f64::from(v[i]),
        }
    }

    /// Bit-level equality, so NaN payloads compare equal to themselves.
    pub fn bit_eq(&self, other: &RasterData) -> bool {
        match (self, other) {
            (RasterData::U8(a), RasterData::U8(b)) => a == b,
            (RasterData::U16(a), RasterData::U16(b)) => a == b,
            (RasterData::F32(a), RasterData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// North-up affine georeference: pixel `(col, row)` has its top-left corner
/// at `(origin_e + col * pixel_size_e, origin_n + row * pixel_size_n)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoTransform {
    pub origin_e: f64,
    pub origin_n: f64,
    pub pixel_size_e: f64,
    pub pixel_size_n: f64,
}

impl GeoTransform {
    pub fn new(origin_e: f64, origin_n: f64, pixel_size: f64) -> Self {
        Self { origin_e, origin_n, pixel_size_e: pixel_size, pixel_size_n: -pixel_size }
    }

    /// Pixel whose half-open cell contains `p` (may be outside the raster).
    pub fn pixel_of(&self, p: GeoPoint) -> (i64, i64) {
        let col = ((p.easting - self.origin_e) / self.pixel_size_e).floor() as i64;
        let row = ((p.northing - self.origin_n) / self.pixel_size_n).floor() as i64;
        (col, row)
    }

    /// Map coordinate of a pixel-grid vertex (pixel corners sit on integers).
    pub fn vertex(&self, x: f64, y: f64) -> GeoPoint {
        GeoPoint::new(self.origin_e + x * self.pixel_size_e, self.origin_n + y * self.pixel_size_n)
    }

    pub fn pixel_center(&self, col: i64, row: i64) -> GeoPoint {
        self.vertex(col as f64 + 0.5, row as f64 + 0.5)
    }

    pub fn pixel_area(&self) -> f64 {
        (self.pixel_size_e * self.pixel_size_n).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub geotransform: GeoTransform,
    pub data: RasterData,
    pub nodata: Option<f64>,
}

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        bands: usize,
        geotransform: GeoTransform,
        data: RasterData,
        nodata: Option<f64>,
    ) -> Result<Self, RasterError> {
        let r = Self { width, height, bands, geotransform, data, nodata };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), RasterError> {
        if self.width == 0 || self.height == 0 || self.bands == 0 {
            return Err(RasterError::Invalid("empty dimensions".into()));
        }
        if self.data.len() != self.width * self.height * self.bands {
            return Err(RasterError::Invalid(format!(
                "data length {} != {}x{}x{}",
                self.data.len(),
                self.width,
                self.height,
                self.bands
            )));
        }
        let gt = &self.geotransform;
        if !(gt.pixel_size_e > 0.0 && gt.pixel_size_n < 0.0) {
            return Err(RasterError::Invalid("raster must be north-up".into()));
        }
        Ok(())
    }

    pub fn pixel_type(&self) -> PixelType {
        self.data.pixel_type()
    }

    pub fn index(&self, band: usize, col: usize, row: usize) -> usize {
        (band * self.height + row) * self.width + col
    }

    pub fn value(&self, band: usize, col: usize, row: usize) -> f64 {
        self.data.get_f64(self.index(band, col, row))
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v.is_nan() || self.nodata.is_some_and(|nd| v == nd)
    }

    /// Map extent as `(min_e, min_n, max_e, max_n)`.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let gt = &self.geotransform;
        let max_e = gt.origin_e + self.width as f64 * gt.pixel_size_e;
        let min_n = gt.origin_n + self.height as f64 * gt.pixel_size_n;
        (gt.origin_e, min_n, max_e, gt.origin_n)
    }

    fn checked_pixel(&self, p: GeoPoint) -> Result<(usize, usize), RasterError> {
        let (col, row) = self.geotransform.pixel_of(p);
        if col < 0 || row < 0 || col >= self.width as i64 || row >= self.height as i64 {
            return Err(RasterError::OutOfBounds(format!("{p:?} outside {}x{} raster", self.width, self.height)));
        }
        Ok((col as usize, row as usize))
    }
}

/// HNV index of the pixel containing `p` (band 0).
pub fn hnv_value_at(r: &Raster, p: GeoPoint) -> Result<i64, RasterError> {
    let (col, row) = r.checked_pixel(p)?;
    let v = r.value(0, col, row);
    if r.is_nodata(v) {
        return Err(RasterError::NoData(p));
    }
    Ok(v.round() as i64)
}

/// A 240x240 masked patch, band-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub side: usize,
    pub bands: usize,
    pub pixels: Vec<u8>,
    pub mask: Vec<bool>,
    pub sample_id: String,
    /// Georeference of the patch window, used for world-file export.
    pub geotransform: GeoTransform,
}

impl ImagePatch {
    pub fn get(&self, band: usize, col: usize, row: usize) -> u8 {
        self.pixels[(band * self.side + row) * self.side + col]
    }

    pub fn set(&mut self, band: usize, col: usize, row: usize, v: u8) {
        self.pixels[(band * self.side + row) * self.side + col] = v;
    }

    pub fn inside_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Zeroes every pixel outside the mask.
    pub fn apply_mask(&mut self) {
        let n = self.side * self.side;
        for b in 0..self.bands {
            for (px, &inside) in self.pixels[b * n..(b + 1) * n].iter_mut().zip(&self.mask) {
                if !inside {
                    *px = 0;
                }
            }
        }
    }

    /// PNG of the first three bands (or the first band as grayscale).
    pub fn write_png<W: Write>(&self, w: W) -> Result<(), RasterError> {
        let n = self.side * self.side;
        let (color, channels) = if self.bands >= 3 { (png::ColorType::Rgb, 3) } else { (png::ColorType::Grayscale, 1) };
        let mut interleaved = Vec::with_capacity(n * channels);
        for i in 0..n {
            for b in 0..channels {
                interleaved.push(self.pixels[b * n + i]);
            }
        }
        let mut enc = png::Encoder::new(w, self.side as u32, self.side as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| RasterError::Png(e.to_string()))?;
        writer.write_image_data(&interleaved).map_err(|e| RasterError::Png(e.to_string()))?;
        writer.finish().map_err(|e| RasterError::Png(e.to_string()))
    }

    /// ESRI world file (`.pgw`) lines for the PNG.
    pub fn world_file(&self) -> String {
        let gt = &self.geotransform;
        let c = gt.pixel_center(0, 0);
        format!("{}\n0\n0\n{}\n{}\n{}\n", gt.pixel_size_e, gt.pixel_size_n, c.easting, c.northing)
    }

    pub fn save_png_with_world_file(&self, png_path: &Path) -> Result<(), RasterError> {
        let file = std::fs::File::create(png_path)?;
        self.write_png(io::BufWriter::new(file))?;
        std::fs::write(png_path.with_extension("pgw"), self.world_file())?;
        Ok(())
    }
}

/// Inside-circle mask of a `side`-pixel window: a pixel is inside when its
/// center lies within `side / 2` pixels of the window's geometric center.
pub fn circle_mask(side: usize) -> Vec<bool> {
    let half = side as f64 / 2.0;
    let r2 = half * half;
    let mut mask = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let dx = col as f64 + 0.5 - half;
            let dy = row as f64 + 0.5 - half;
            mask.push(dx * dx + dy * dy <= r2);
        }
    }
    mask
}

fn patch_mask() -> &'static [bool] {
    static MASK: OnceLock<Vec<bool>> = OnceLock::new();
    MASK.get_or_init(|| circle_mask(PATCH_SIDE))
}

/// Cuts the `diameter`-wide window whose pixel (120, 120) contains `center`
/// and zeroes everything outside the inscribed circle.
pub fn extract_patch(r: &Raster, center: GeoPoint, diameter: f64) -> Result<ImagePatch, RasterError> {
    let gt = &r.geotransform;
    let tol = 1e-9;
    if (gt.pixel_size_e - ORTHO_GSD_M).abs() > tol || (gt.pixel_size_n + ORTHO_GSD_M).abs() > tol {
        return Err(RasterError::PatchResolutionMismatch {
            expected: ORTHO_GSD_M,
            found_e: gt.pixel_size_e,
            found_n: gt.pixel_size_n,
        });
    }
    let side = (diameter / ORTHO_GSD_M).round() as usize;
    let RasterData::U8(src) = &r.data else {
        return Err(RasterError::UnsupportedFormat("image patches need 8-bit bands".into()));
    };
    let (col, row) = gt.pixel_of(center);
    let half = (side / 2) as i64;
    let (c0, r0) = (col - half, row - half);
    if c0 < 0 || r0 < 0 || c0 + side as i64 > r.width as i64 || r0 + side as i64 > r.height as i64 {
        return Err(RasterError::OutOfBounds(format!("{side}px window at ({c0}, {r0}) exceeds {}x{} raster", r.width, r.height)));
    }
    let mask = if side == PATCH_SIDE { patch_mask().to_vec() } else { circle_mask(side) };
    let (c0, r0) = (c0 as usize, r0 as usize);
    let mut pixels = vec![0u8; r.bands * side * side];
    for b in 0..r.bands {
        for y in 0..side {
            let src_start = r.index(b, c0, r0 + y);
            let dst_start = (b * side + y) * side;
            pixels[dst_start..dst_start + side].copy_from_slice(&src[src_start..src_start + side]);
        }
    }
    let mut patch = ImagePatch {
        side,
        bands: r.bands,
        pixels,
        mask,
        sample_id: String::new(),
        geotransform: GeoTransform {
            origin_e: gt.origin_e + c0 as f64 * gt.pixel_size_e,
            origin_n: gt.origin_n + r0 as f64 * gt.pixel_size_n,
            ..*gt
        },
    };
    patch.apply_mask();
    Ok(patch)
}

/// Default patch extraction for a 30 m plot.
pub fn extract_sample_patch(r: &Raster, center: GeoPoint) -> Result<ImagePatch, RasterError> {
    extract_patch(r, center, SAMPLE_DIAMETER_M)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_raster(w: usize, h: usize, bands: usize, v: u8, gsd: f64) -> Raster {
        Raster::new(w, h, bands, GeoTransform::new(600_000.0, 6_200_000.0, gsd), RasterData::U8(vec![v; w * h * bands]), None)
            .unwrap()
    }

    /// Independent per-pixel loop: pixel center vs the window center in meters.
    fn oracle_inside(col: usize, row: usize) -> bool {
        let half = PATCH_SIDE as f64 * ORTHO_GSD_M / 2.0;
        let dx = (col as f64 + 0.5) * ORTHO_GSD_M - half;
        let dy = (row as f64 + 0.5) * ORTHO_GSD_M - half;
        dx.hypot(dy) <= SAMPLE_DIAMETER_M / 2.0
    }

    #[test]
    fn constant_patch_mask_matches_oracle() {
        let r = constant_raster(400, 400, 3, 255, ORTHO_GSD_M);
        let center = r.geotransform.pixel_center(200, 200);
        let patch = extract_sample_patch(&r, center).unwrap();
        assert_eq!(patch.side, 240);
        let mut oracle_count = 0;
        for row in 0..240 {
            for col in 0..240 {
                let inside = oracle_inside(col, row);
                oracle_count += usize::from(inside);
                assert_eq!(patch.mask[row * 240 + col], inside);
                for b in 0..3 {
                    assert_eq!(patch.get(b, col, row), if inside { 255 } else { 0 });
                }
            }
        }
        assert_eq!(patch.inside_count(), oracle_count);
        assert_eq!(oracle_count, 45_244);
        let area = oracle_count as f64 * ORTHO_GSD_M * ORTHO_GSD_M;
        assert!((area - 707.0).abs() / 707.0 < 0.005, "area {area}");
    }

    #[test]
    fn center_pixel_lands_at_120() {
        let mut r = constant_raster(400, 400, 1, 10, ORTHO_GSD_M);
        let idx = r.index(0, 211, 187);
        if let RasterData::U8(v) = &mut r.data {
            v[idx] = 99;
        }
        // any point inside pixel (211, 187)
        let p = r.geotransform.vertex(211.3, 187.9);
        let patch = extract_sample_patch(&r, p).unwrap();
        assert_eq!(patch.get(0, 120, 120), 99);
    }

    #[test]
    fn mask_symmetries() {
        let m = circle_mask(PATCH_SIDE);
        let n = PATCH_SIDE;
        for r in 0..n {
            for c in 0..n {
                let v = m[r * n + c];
                assert_eq!(v, m[c * n + (n - 1 - r)], "90 degree rotation");
                assert_eq!(v, m[r * n + (n - 1 - c)], "mirror");
                assert_eq!(v, m[(n - 1 - r) * n + c], "flip");
            }
        }
    }

    #[test]
    fn edge_and_resolution_errors() {
        let r = constant_raster(400, 400, 3, 1, ORTHO_GSD_M);
        let edge = r.geotransform.pixel_center(5, 200);
        assert!(matches!(extract_sample_patch(&r, edge), Err(RasterError::OutOfBounds(_))));
        let coarse = constant_raster(100, 100, 3, 1, 0.25);
        let c = coarse.geotransform.pixel_center(50, 50);
        assert!(matches!(extract_sample_patch(&coarse, c), Err(RasterError::PatchResolutionMismatch { .. })));
    }

    #[test]
    fn hnv_lookup_conventions() {
        let r = constant_raster(10, 10, 1, 3, 10.0);
        assert_eq!(hnv_value_at(&r, GeoPoint::new(600_055.0, 6_199_955.0)).unwrap(), 3);
        // checkerboard, including exact boundaries
        let data: Vec<u8> = (0..100).map(|i| if (i % 10 + i / 10) % 2 == 0 { 1 } else { 9 }).collect();
        let cb = Raster::new(10, 10, 1, GeoTransform::new(0.0, 100.0, 10.0), RasterData::U8(data.clone()), None).unwrap();
        for row in 0..10 {
            for col in 0..10 {
                // lower-left boundary corner of the half-open cell
                let p = GeoPoint::new(col as f64 * 10.0, 100.0 - row as f64 * 10.0);
                assert_eq!(hnv_value_at(&cb, p).unwrap(), i64::from(data[row * 10 + col]));
            }
        }
        assert!(matches!(hnv_value_at(&cb, GeoPoint::new(100.0, 50.0)), Err(RasterError::OutOfBounds(_))));
        let nd = Raster::new(1, 1, 1, GeoTransform::new(0.0, 10.0, 10.0), RasterData::F32(vec![-1.0]), Some(-1.0)).unwrap();
        assert!(matches!(hnv_value_at(&nd, GeoPoint::new(5.0, 5.0)), Err(RasterError::NoData(_))));
    }

    #[test]
    fn png_and_world_file() {
        let r = constant_raster(300, 300, 3, 200, ORTHO_GSD_M);
        let patch = extract_sample_patch(&r, r.geotransform.pixel_center(150, 150)).unwrap();
        let mut buf = Vec::new();
        patch.write_png(&mut buf).unwrap();
        assert_eq!(&buf[1..4], b"PNG");
        let wf = patch.world_file();
        let lines: Vec<&str> = wf.lines().collect();
        assert_eq!(lines[0], "0.125");
        assert_eq!(lines[3], "-0.125");
        assert_eq!(lines[4].parse::<f64>().unwrap(), 600_000.0 + 30.0 * 0.125 + 0.0625);
    }
}
