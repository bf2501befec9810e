//! LAS point-cloud tiles: parsing, writing, tile indexing and plot extraction.
//!
//! Only uncompressed LAS 1.2-1.4 with point record formats 0, 1, 2, 3 and 6
//! is read. Only x, y, z, intensity and classification are decoded; the
//! writer emits LAS 1.2 point format 1.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::Rng as _;
use thiserror::Error;

use crate::rng;
use crate::types::GeoPoint;

/// Side length of a national tile in meters.
pub const TILE_SIZE_M: f64 = 1000.0;
/// Plot radius in meters.
pub const PLOT_RADIUS_M: f64 = 15.0;
/// Points fed to the 3D backbone per plot.
pub const DEFAULT_SUBSAMPLE: usize = 8192;

const LAS12_HEADER_SIZE: u16 = 227;
const FORMAT1_RECORD_LEN: u16 = 28;

#[derive(Debug, Error)]
pub enum LasError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"LASF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported LAS version {0}.{1}")]
    UnsupportedVersion(u8, u8),
    #[error("unsupported point record format {0}")]
    UnsupportedPointFormat(u8),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("coordinate {value} cannot be stored with scale {scale} and offset {offset}")]
    ScaleOverflow { value: f64, scale: f64, offset: f64 },
    #[error("missing tiles for grid cells {cells:?} (year {year})")]
    MissingTile { year: i32, cells: Vec<(i64, i64)> },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

impl LasError {
    pub fn name(&self) -> &'static str {
        match self {
            LasError::Io(_) => "IoError",
            LasError::BadMagic(_) => "BadMagic",
            LasError::UnsupportedVersion(..) => "UnsupportedVersion",
            LasError::UnsupportedPointFormat(_) => "UnsupportedPointFormat",
            LasError::TruncatedFile(_) => "TruncatedFile",
            LasError::ScaleOverflow { .. } => "ScaleOverflow",
            LasError::MissingTile { .. } => "MissingTile",
            LasError::EmptyCloud => "EmptyCloud",
            LasError::InvalidHeader(_) => "InvalidHeader",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LasHeader {
    pub version: (u8, u8),
    pub point_format: u8,
    pub point_count: u64,
    pub scale: [f64; 3],
    pub offset: [f64; 3],
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    /// Byte offset of the first point record.
    pub point_data_offset: u32,
    pub point_record_len: u16,
}

impl LasHeader {
    /// Header for writing with the given quantization.
    pub fn new(scale: [f64; 3], offset: [f64; 3]) -> Self {
        Self {
            version: (1, 2),
            point_format: 1,
            point_count: 0,
            scale,
            offset,
            bbox_min: [0.0; 3],
            bbox_max: [0.0; 3],
            point_data_offset: u32::from(LAS12_HEADER_SIZE),
            point_record_len: FORMAT1_RECORD_LEN,
        }
    }

    fn decode(&self, raw: [i32; 3]) -> [f64; 3] {
        [
            f64::from(raw[0]) * self.scale[0] + self.offset[0],
            f64::from(raw[1]) * self.scale[1] + self.offset[1],
            f64::from(raw[2]) * self.scale[2] + self.offset[2],
        ]
    }

    fn encode(&self, xyz: [f64; 3]) -> Result<[i32; 3], LasError> {
        let mut raw = [0i32; 3];
        for axis in 0..3 {
            let q = ((xyz[axis] - self.offset[axis]) / self.scale[axis]).round();
            if !q.is_finite() || q < f64::from(i32::MIN) || q > f64::from(i32::MAX) {
                return Err(LasError::ScaleOverflow { value: xyz[axis], scale: self.scale[axis], offset: self.offset[axis] });
            }
            raw[axis] = q as i32;
        }
        Ok(raw)
    }
}

/// One ALS return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlsPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: u16,
    pub classification: u8,
}

impl AlsPoint {
    pub fn xy_distance(&self, center: GeoPoint) -> f64 {
        (self.x - center.easting).hypot(self.y - center.northing)
    }
}

/// Points cropped for one sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    pub points: Vec<AlsPoint>,
    pub source_tile: String,
    pub sample_id: String,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Plain-text export, one `x y z intensity classification` line per point.
    pub fn write_xyz<W: Write>(&self, mut w: W) -> io::Result<()> {
        for p in &self.points {
            writeln!(w, "{:.4} {:.4} {:.4} {} {}", p.x, p.y, p.z, p.intensity, p.classification)?;
        }
        w.flush()
    }
}

fn min_record_len(format: u8) -> Option<u16> {
    match format {
        0 => Some(20),
        1 => Some(28),
        2 => Some(26),
        3 => Some(34),
        6 => Some(30),
        _ => None,
    }
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn le_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn le_f64(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

fn parse_header(buf: &[u8], file_len: u64) -> Result<LasHeader, LasError> {
    if buf.len() < 4 {
        return Err(LasError::TruncatedFile("shorter than the magic bytes".into()));
    }
    let magic: [u8; 4] = buf[..4].try_into().unwrap();
    if &magic != b"LASF" {
        return Err(LasError::BadMagic(magic));
    }
    if buf.len() < usize::from(LAS12_HEADER_SIZE) {
        return Err(LasError::TruncatedFile(format!("header has {} of 227 bytes", buf.len())));
    }
    let version = (buf[24], buf[25]);
    if version.0 != 1 || !(2..=4).contains(&version.1) {
        return Err(LasError::UnsupportedVersion(version.0, version.1));
    }
    let header_size = le_u16(buf, 94);
    let point_data_offset = le_u32(buf, 96);
    let point_format = buf[104] & 0x3f;
    let point_record_len = le_u16(buf, 105);
    let min_len = min_record_len(point_format).ok_or(LasError::UnsupportedPointFormat(point_format))?;
    if point_record_len < min_len {
        return Err(LasError::InvalidHeader(format!(
            "record length {point_record_len} below {min_len} for format {point_format}"
        )));
    }
    let legacy_count = u64::from(le_u32(buf, 107));
    let point_count = if version.1 >= 4 {
        if buf.len() < 255 || usize::from(header_size) < 255 {
            return Err(LasError::TruncatedFile("LAS 1.4 header too short".into()));
        }
        match le_u64(buf, 247) {
            0 => legacy_count,
            n => n,
        }
    } else {
        legacy_count
    };
    let scale = [le_f64(buf, 131), le_f64(buf, 139), le_f64(buf, 147)];
    if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(LasError::InvalidHeader(format!("non-positive scale {scale:?}")));
    }
    let offset = [le_f64(buf, 155), le_f64(buf, 163), le_f64(buf, 171)];
    let bbox_max = [le_f64(buf, 179), le_f64(buf, 195), le_f64(buf, 211)];
    let bbox_min = [le_f64(buf, 187), le_f64(buf, 203), le_f64(buf, 219)];
    let needed = u64::from(point_data_offset) + point_count * u64::from(point_record_len);
    if file_len < needed {
        return Err(LasError::TruncatedFile(format!("{point_count} points need {needed} bytes, file has {file_len}")));
    }
    Ok(LasHeader { version, point_format, point_count, scale, offset, bbox_min, bbox_max, point_data_offset, point_record_len })
}

/// Streaming LAS reader.
pub struct LasReader<R> {
    header: LasHeader,
    inner: R,
    remaining: u64,
    record: Vec<u8>,
}

/// Opens a LAS file and decodes its header; points are decoded lazily.
pub fn read_las(path: &Path) -> Result<LasReader<BufReader<File>>, LasError> {
    let file = File::open(path)?;
    LasReader::new(BufReader::new(file))
}

impl<R: Read + Seek> LasReader<R> {
    pub fn new(mut inner: R) -> Result<Self, LasError> {
        let file_len = inner.seek(SeekFrom::End(0))?;
        inner.seek(SeekFrom::Start(0))?;
        let mut buf = Vec::with_capacity(375);
        inner.by_ref().take(375).read_to_end(&mut buf)?;
        let header = parse_header(&buf, file_len)?;
        inner.seek(SeekFrom::Start(u64::from(header.point_data_offset)))?;
        let record = vec![0u8; usize::from(header.point_record_len)];
        Ok(Self { remaining: header.point_count, header, inner, record })
    }

    pub fn header(&self) -> &LasHeader {
        &self.header
    }

    fn decode_record(&self) -> AlsPoint {
        let r = &self.record;
        let raw = [le_u32(r, 0) as i32, le_u32(r, 4) as i32, le_u32(r, 8) as i32];
        let [x, y, z] = self.header.decode(raw);
        let intensity = le_u16(r, 12);
        let classification = if self.header.point_format >= 6 { r[16] } else { r[15] & 0x1f };
        AlsPoint { x, y, z, intensity, classification }
    }

    /// Reads every remaining point.
    pub fn read_all(self) -> Result<(LasHeader, Vec<AlsPoint>), LasError> {
        let header = self.header.clone();
        let points = self.collect::<Result<Vec<_>, _>>()?;
        Ok((header, points))
    }
}

impl<R: Read + Seek> Iterator for LasReader<R> {
    type Item = Result<AlsPoint, LasError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        match self.inner.read_exact(&mut self.record) {
            Ok(()) => Some(Ok(self.decode_record())),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                self.remaining = 0;
                Some(Err(LasError::TruncatedFile("point records end early".into())))
            }
            Err(e) => Some(Err(e.into())),
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.remaining as usize;
        (n, Some(n))
    }
}

/// Incremental LAS 1.2 point-format-1 writer; counts and bounds are patched
/// into the header by [`LasWriter::finish`].
pub struct LasWriter<W: Write + Seek> {
    header: LasHeader,
    out: W,
    count: u64,
    min: [f64; 3],
    max: [f64; 3],
}

impl LasWriter<BufWriter<File>> {
    pub fn create(path: &Path, scale: [f64; 3], offset: [f64; 3]) -> Result<Self, LasError> {
        Self::new(BufWriter::new(File::create(path)?), scale, offset)
    }
}

impl<W: Write + Seek> LasWriter<W> {
    pub fn new(mut out: W, scale: [f64; 3], offset: [f64; 3]) -> Result<Self, LasError> {
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(LasError::InvalidHeader(format!("non-positive scale {scale:?}")));
        }
        let header = LasHeader::new(scale, offset);
        out.write_all(&[0u8; LAS12_HEADER_SIZE as usize])?;
        Ok(Self { header, out, count: 0, min: [f64::INFINITY; 3], max: [f64::NEG_INFINITY; 3] })
    }

    pub fn write_point(&mut self, p: &AlsPoint) -> Result<(), LasError> {
        let raw = self.header.encode([p.x, p.y, p.z])?;
        let decoded = self.header.decode(raw);
        for ((lo, hi), v) in self.min.iter_mut().zip(&mut self.max).zip(decoded) {
            *lo = lo.min(v);
            *hi = hi.max(v);
        }
        let mut rec = [0u8; FORMAT1_RECORD_LEN as usize];
        rec[0..4].copy_from_slice(&raw[0].to_le_bytes());
        rec[4..8].copy_from_slice(&raw[1].to_le_bytes());
        rec[8..12].copy_from_slice(&raw[2].to_le_bytes());
        rec[12..14].copy_from_slice(&p.intensity.to_le_bytes());
        // single return: return number 1 of 1
        rec[14] = 0b0000_1001;
        rec[15] = p.classification & 0x1f;
        self.out.write_all(&rec)?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<LasHeader, LasError> {
        self.finish_into_inner().map(|(h, _)| h)
    }

    /// Like [`LasWriter::finish`] but hands back the underlying writer.
    pub fn finish_into_inner(mut self) -> Result<(LasHeader, W), LasError> {
        if self.count > u64::from(u32::MAX) {
            return Err(LasError::InvalidHeader("too many points for LAS 1.2".into()));
        }
        let mut header = self.header.clone();
        header.point_count = self.count;
        if self.count > 0 {
            header.bbox_min = self.min;
            header.bbox_max = self.max;
        }
        self.out.seek(SeekFrom::Start(0))?;
        self.out.write_all(&encode_header(&header))?;
        self.out.flush()?;
        Ok((header, self.out))
    }
}

fn encode_header(h: &LasHeader) -> Vec<u8> {
    let mut b = vec![0u8; LAS12_HEADER_SIZE as usize];
    b[0..4].copy_from_slice(b"LASF");
    b[24] = 1;
    b[25] = 2;
    let ident = b"biovista";
    b[26..26 + ident.len()].copy_from_slice(ident);
    b[58..58 + ident.len()].copy_from_slice(ident);
    b[94..96].copy_from_slice(&LAS12_HEADER_SIZE.to_le_bytes());
    b[96..100].copy_from_slice(&u32::from(LAS12_HEADER_SIZE).to_le_bytes());
    b[104] = 1;
    b[105..107].copy_from_slice(&FORMAT1_RECORD_LEN.to_le_bytes());
    let count = h.point_count as u32;
    b[107..111].copy_from_slice(&count.to_le_bytes());
    b[111..115].copy_from_slice(&count.to_le_bytes());
    let put = |b: &mut [u8], at: usize, v: f64| b[at..at + 8].copy_from_slice(&v.to_le_bytes());
    for axis in 0..3 {
        put(&mut b, 131 + 8 * axis, h.scale[axis]);
        put(&mut b, 155 + 8 * axis, h.offset[axis]);
        put(&mut b, 179 + 16 * axis, h.bbox_max[axis]);
        put(&mut b, 187 + 16 * axis, h.bbox_min[axis]);
    }
    b
}

/// Writes `points` with the scale and offset of `header`.
pub fn write_las(header: &LasHeader, points: &[AlsPoint], path: &Path) -> Result<LasHeader, LasError> {
    let mut w = LasWriter::create(path, header.scale, header.offset)?;
    for p in points {
        w.write_point(p)?;
    }
    w.finish()
}

type TileCell = (i64, i64);

/// Grid cell of a projected coordinate.
pub fn tile_cell(easting: f64, northing: f64) -> (i64, i64) {
    ((easting / TILE_SIZE_M).floor() as i64, (northing / TILE_SIZE_M).floor() as i64)
}

/// File name for a tile: `<year>_<easting_km>_<northing_km>.las`.
pub fn tile_file_name(year: i32, cell: (i64, i64)) -> String {
    format!("{year}_{}_{}.las", cell.0, cell.1)
}

fn parse_tile_name(name: &str) -> Option<(i32, (i64, i64))> {
    let stem = name.strip_suffix(".las")?;
    let mut parts = stem.split('_');
    let year = parts.next()?.parse().ok()?;
    let e = parts.next()?.parse().ok()?;
    let n = parts.next()?.parse().ok()?;
    if parts.next().is_some() {
        return None;
    }
    Some((year, (e, n)))
}

/// Maps `(year, 1 km cell)` to a tile path.
#[derive(Debug, Clone, Default)]
pub struct TileIndex {
    tiles: BTreeMap<(i32, i64, i64), PathBuf>,
}

impl TileIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Indexes every `<year>_<e>_<n>.las` file in `dir`; other files are ignored.
    pub fn scan(dir: &Path) -> Result<Self, LasError> {
        let mut index = Self::new();
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name();
            if let Some((year, cell)) = name.to_str().and_then(parse_tile_name) {
                index.insert(year, cell, entry.path());
            }
        }
        Ok(index)
    }

    /// Returns the previous path if the slot was taken.
    pub fn insert(&mut self, year: i32, cell: (i64, i64), path: PathBuf) -> Option<PathBuf> {
        self.tiles.insert((year, cell.0, cell.1), path)
    }

    pub fn get(&self, year: i32, cell: (i64, i64)) -> Option<&Path> {
        self.tiles.get(&(year, cell.0, cell.1)).map(PathBuf::as_path)
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (i32, (i64, i64), &Path)> {
        self.tiles.iter().map(|(&(y, e, n), p)| (y, (e, n), p.as_path()))
    }

    /// Tiles for the cells touched by the disc, or the missing cells.
    fn tiles_for_disc(&self, center: GeoPoint, radius: f64, year: i32) -> Result<Vec<(TileCell, &Path)>, LasError> {
        let cells = cells_touching_disc(center, radius);
        let mut found = Vec::with_capacity(cells.len());
        let mut missing = Vec::new();
        for cell in cells {
            match self.get(year, cell) {
                Some(p) => found.push((cell, p)),
                None => missing.push(cell),
            }
        }
        if missing.is_empty() {
            Ok(found)
        } else {
            Err(LasError::MissingTile { year, cells: missing })
        }
    }
}

/// Grid cells whose closed square intersects the closed disc, in row-major order.
pub fn cells_touching_disc(center: GeoPoint, radius: f64) -> Vec<(i64, i64)> {
    let (e0, n0) = tile_cell(center.easting - radius, center.northing - radius);
    let (e1, n1) = tile_cell(center.easting + radius, center.northing + radius);
    let mut cells = Vec::new();
    for cn in n0..=n1 {
        for ce in e0..=e1 {
            let lo_e = ce as f64 * TILE_SIZE_M;
            let lo_n = cn as f64 * TILE_SIZE_M;
            let de = (lo_e - center.easting).max(0.0).max(center.easting - (lo_e + TILE_SIZE_M));
            let dn = (lo_n - center.northing).max(0.0).max(center.northing - (lo_n + TILE_SIZE_M));
            if de.hypot(dn) <= radius {
                cells.push((ce, cn));
            }
        }
    }
    cells
}

fn source_name(tiles: &[((i64, i64), &Path)]) -> String {
    tiles
        .iter()
        .map(|(_, p)| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
        .collect::<Vec<_>>()
        .join(";")
}

/// Points of `year` whose planar distance to `center` is at most `radius`,
/// read from every tile the disc touches.
pub fn crop_circle(tiles: &TileIndex, center: GeoPoint, radius: f64, year: i32) -> Result<PointCloud, LasError> {
    assert!(radius > 0.0, "radius must be positive");
    let touched = tiles.tiles_for_disc(center, radius, year)?;
    let mut points = Vec::new();
    for (_, path) in &touched {
        for p in read_las(path)? {
            let p = p?;
            if p.xy_distance(center) <= radius {
                points.push(p);
            }
        }
    }
    Ok(PointCloud { points, source_tile: source_name(&touched), sample_id: String::new() })
}

const BUCKET_SIZE_M: f64 = 25.0;

/// A tile held in memory with points bucketed on a regular grid.
#[derive(Debug)]
struct LoadedTile {
    origin: (f64, f64),
    cols: usize,
    rows: usize,
    /// `starts[b]..starts[b + 1]` indexes `points` for bucket `b`.
    starts: Vec<usize>,
    points: Vec<AlsPoint>,
}

impl LoadedTile {
    fn build(points: Vec<AlsPoint>) -> Self {
        if points.is_empty() {
            return Self { origin: (0.0, 0.0), cols: 0, rows: 0, starts: vec![0], points };
        }
        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &points {
            min_x = min_x.min(p.x);
            min_y = min_y.min(p.y);
            max_x = max_x.max(p.x);
            max_y = max_y.max(p.y);
        }
        let cols = ((max_x - min_x) / BUCKET_SIZE_M).floor() as usize + 1;
        let rows = ((max_y - min_y) / BUCKET_SIZE_M).floor() as usize + 1;
        let bucket_of = |p: &AlsPoint| {
            let c = (((p.x - min_x) / BUCKET_SIZE_M).floor() as usize).min(cols - 1);
            let r = (((p.y - min_y) / BUCKET_SIZE_M).floor() as usize).min(rows - 1);
            r * cols + c
        };
        let mut starts = vec![0usize; cols * rows + 1];
        for p in &points {
            starts[bucket_of(p) + 1] += 1;
        }
        for i in 1..starts.len() {
            starts[i] += starts[i - 1];
        }
        let mut cursor = starts.clone();
        let mut sorted = vec![points[0]; points.len()];
        for p in &points {
            let b = bucket_of(p);
            sorted[cursor[b]] = *p;
            cursor[b] += 1;
        }
        Self { origin: (min_x, min_y), cols, rows, starts, points: sorted }
    }

    fn crop_into(&self, center: GeoPoint, radius: f64, out: &mut Vec<AlsPoint>) {
        if self.points.is_empty() {
            return;
        }
        let span = |lo: f64, hi: f64, origin: f64, n: usize| -> Option<(usize, usize)> {
            let b0 = ((lo - origin) / BUCKET_SIZE_M).floor();
            let b1 = ((hi - origin) / BUCKET_SIZE_M).floor();
            if b1 < 0.0 || b0 > (n - 1) as f64 {
                return None;
            }
            Some((b0.max(0.0) as usize, (b1 as usize).min(n - 1)))
        };
        let Some((c0, c1)) = span(center.easting - radius, center.easting + radius, self.origin.0, self.cols) else {
            return;
        };
        let Some((r0, r1)) = span(center.northing - radius, center.northing + radius, self.origin.1, self.rows) else {
            return;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                let b = r * self.cols + c;
                out.extend(self.points[self.starts[b]..self.starts[b + 1]].iter().filter(|p| p.xy_distance(center) <= radius));
            }
        }
    }
}

/// Read-through cache of bucketed tiles, shareable across threads.
#[derive(Debug)]
pub struct TileCache {
    index: TileIndex,
    loaded: Mutex<HashMap<PathBuf, Arc<LoadedTile>>>,
}

impl TileCache {
    pub fn new(index: TileIndex) -> Self {
        Self { index, loaded: Mutex::new(HashMap::new()) }
    }

    pub fn index(&self) -> &TileIndex {
        &self.index
    }

    fn tile(&self, path: &Path) -> Result<Arc<LoadedTile>, LasError> {
        if let Some(t) = self.loaded.lock().unwrap().get(path) {
            return Ok(Arc::clone(t));
        }
        let (_, points) = read_las(path)?.read_all()?;
        let tile = Arc::new(LoadedTile::build(points));
        let mut loaded = self.loaded.lock().unwrap();
        Ok(Arc::clone(loaded.entry(path.to_path_buf()).or_insert(tile)))
    }

    /// Same point set as [`crop_circle`], served from memory.
    pub fn crop_circle(&self, center: GeoPoint, radius: f64, year: i32) -> Result<PointCloud, LasError> {
        assert!(radius > 0.0, "radius must be positive");
        let touched = self.index.tiles_for_disc(center, radius, year)?;
        let mut points = Vec::new();
        for (_, path) in &touched {
            self.tile(path)?.crop_into(center, radius, &mut points);
        }
        Ok(PointCloud { points, source_tile: source_name(&touched), sample_id: String::new() })
    }
}

/// Fixed-size random subset. Clouds with at least `n` points give `n`
/// distinct points (partial Fisher-Yates); smaller clouds keep every point
/// and are padded with uniform draws with replacement.
pub fn subsample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud, LasError> {
    if cloud.is_empty() {
        return Err(LasError::EmptyCloud);
    }
    assert!(n >= 1, "subsample size must be at least 1");
    let indices = subsample_indices(cloud.len(), n, seed);
    Ok(PointCloud {
        points: indices.into_iter().map(|i| cloud.points[i]).collect(),
        source_tile: cloud.source_tile.clone(),
        sample_id: cloud.sample_id.clone(),
    })
}

/// Indices selected by [`subsample`] for a cloud of `len` points.
pub fn subsample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::seeded(seed);
    if len >= n {
        let mut idx: Vec<usize> = (0..len).collect();
        for i in 0..n {
            let j = rng.random_range(i..len);
            idx.swap(i, j);
        }
        idx.truncate(n);
        idx
    } else {
        let mut idx: Vec<usize> = (0..len).collect();
        idx.extend((len..n).map(|_| rng.random_range(0..len)));
        idx
    }
}

/// Moves `center` to the xy origin and the lowest point to z = 0.
pub fn normalize_xyz(cloud: &PointCloud, center: GeoPoint) -> Result<PointCloud, LasError> {
    let min_z = cloud.points.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    if cloud.is_empty() {
        return Err(LasError::EmptyCloud);
    }
    let points = cloud
        .points
        .iter()
        .map(|p| AlsPoint { x: p.x - center.easting, y: p.y - center.northing, z: p.z - min_z, ..*p })
        .collect();
    Ok(PointCloud { points, source_tile: cloud.source_tile.clone(), sample_id: cloud.sample_id.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn pt(x: f64, y: f64, z: f64) -> AlsPoint {
        AlsPoint { x, y, z, intensity: 7, classification: 2 }
    }

    fn write_mem(points: &[AlsPoint], scale: f64, offset: [f64; 3]) -> Result<Vec<u8>, LasError> {
        let mut w = LasWriter::new(Cursor::new(Vec::new()), [scale; 3], offset)?;
        for p in points {
            w.write_point(p)?;
        }
        Ok(w.finish_into_inner()?.1.into_inner())
    }

    #[test]
    fn empty_file_is_valid() {
        let bytes = write_mem(&[], 0.01, [0.0; 3]).unwrap();
        let reader = LasReader::new(Cursor::new(bytes)).unwrap();
        assert_eq!(reader.header().point_count, 0);
        assert_eq!(reader.count(), 0);
    }

    #[test]
    fn origin_point_has_zero_raw_ints() {
        let bytes = write_mem(&[pt(0.0, 0.0, 0.0)], 0.01, [0.0; 3]).unwrap();
        let rec = &bytes[LAS12_HEADER_SIZE as usize..];
        assert_eq!(&rec[0..12], &[0u8; 12]);
    }

    #[test]
    fn huge_coordinate_overflows() {
        let err = write_mem(&[pt(1e12, 0.0, 0.0)], 0.001, [0.0; 3]).unwrap_err();
        assert!(matches!(err, LasError::ScaleOverflow { .. }), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = write_mem(&[pt(1.0, 2.0, 3.0)], 0.01, [0.0; 3]).unwrap();
        let short = bytes[..bytes.len() - 5].to_vec();
        assert!(matches!(LasReader::new(Cursor::new(short)), Err(LasError::TruncatedFile(_))));
        assert!(matches!(LasReader::new(Cursor::new(bytes[..100].to_vec())), Err(LasError::TruncatedFile(_))));
        bytes[0] = b'X';
        assert!(matches!(LasReader::new(Cursor::new(bytes)), Err(LasError::BadMagic(_))));
    }

    #[test]
    fn version_and_format_checks() {
        let good = write_mem(&[pt(1.0, 2.0, 3.0)], 0.01, [0.0; 3]).unwrap();
        let mut v = good.clone();
        v[25] = 0;
        assert!(matches!(LasReader::new(Cursor::new(v)), Err(LasError::UnsupportedVersion(1, 0))));
        let mut f = good.clone();
        f[104] = 4;
        assert!(matches!(LasReader::new(Cursor::new(f)), Err(LasError::UnsupportedPointFormat(4))));
    }

    #[test]
    fn reads_format6_from_las14_header() {
        // hand-built LAS 1.4 file: 375-byte header, one format-6 record
        let mut b = vec![0u8; 375 + 30];
        b[0..4].copy_from_slice(b"LASF");
        b[24] = 1;
        b[25] = 4;
        b[94..96].copy_from_slice(&375u16.to_le_bytes());
        b[96..100].copy_from_slice(&375u32.to_le_bytes());
        b[104] = 6;
        b[105..107].copy_from_slice(&30u16.to_le_bytes());
        b[247..255].copy_from_slice(&1u64.to_le_bytes());
        for axis in 0..3 {
            b[131 + 8 * axis..139 + 8 * axis].copy_from_slice(&0.01f64.to_le_bytes());
        }
        b[155..163].copy_from_slice(&500_000f64.to_le_bytes());
        let rec = &mut b[375..];
        rec[0..4].copy_from_slice(&150i32.to_le_bytes());
        rec[4..8].copy_from_slice(&(-20i32).to_le_bytes());
        rec[8..12].copy_from_slice(&333i32.to_le_bytes());
        rec[12..14].copy_from_slice(&900u16.to_le_bytes());
        rec[16] = 5;
        let reader = LasReader::new(Cursor::new(b)).unwrap();
        assert_eq!(reader.header().version, (1, 4));
        let (_, pts) = reader.read_all().unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].x, 150.0 * 0.01 + 500_000.0);
        assert_eq!(pts[0].y, -20.0 * 0.01);
        assert_eq!(pts[0].z, 333.0 * 0.01);
        assert_eq!(pts[0].intensity, 900);
        assert_eq!(pts[0].classification, 5);
    }

    #[test]
    fn cells_for_corner_disc() {
        let cells = cells_touching_disc(GeoPoint::new(600_000.0, 6_200_000.0), 15.0);
        assert_eq!(cells, vec![(599, 6199), (600, 6199), (599, 6200), (600, 6200)]);
        let inner = cells_touching_disc(GeoPoint::new(600_500.0, 6_200_500.0), 15.0);
        assert_eq!(inner, vec![(600, 6200)]);
        // bounding box touches a diagonal cell the disc itself misses
        let near = cells_touching_disc(GeoPoint::new(600_012.0, 6_200_012.0), 15.0);
        assert_eq!(near, vec![(600, 6199), (599, 6200), (600, 6200)]);
    }

    #[test]
    fn tile_names_round_trip() {
        let name = tile_file_name(2021, (600, 6200));
        assert_eq!(name, "2021_600_6200.las");
        assert_eq!(parse_tile_name(&name), Some((2021, (600, 6200))));
        assert_eq!(parse_tile_name("2021_600.las"), None);
        assert_eq!(parse_tile_name("notes.txt"), None);
    }

    #[test]
    fn missing_tile_lists_cells() {
        let index = TileIndex::new();
        let err = crop_circle(&index, GeoPoint::new(100.0, 100.0), 15.0, 2020).unwrap_err();
        match err {
            LasError::MissingTile { cells, year } => {
                assert_eq!(year, 2020);
                assert_eq!(cells, vec![(0, 0)]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    fn cloud(points: Vec<AlsPoint>) -> PointCloud {
        PointCloud { points, source_tile: "t".into(), sample_id: "s".into() }
    }

    #[test]
    fn subsample_cases() {
        let base: Vec<AlsPoint> = (0..8192).map(|i| pt(i as f64, 0.0, 0.0)).collect();
        let same = subsample(&cloud(base.clone()), 8192, 3).unwrap();
        let mut xs: Vec<f64> = same.points.iter().map(|p| p.x).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, base.iter().map(|p| p.x).collect::<Vec<_>>());

        let big = cloud((0..20_000).map(|i| pt(i as f64, 0.0, 0.0)).collect());
        assert_eq!(subsample(&big, 8192, 11).unwrap(), subsample(&big, 8192, 11).unwrap());
        let distinct: std::collections::HashSet<u64> =
            subsample(&big, 8192, 11).unwrap().points.iter().map(|p| p.x.to_bits()).collect();
        assert_eq!(distinct.len(), 8192);

        let small = cloud((0..100).map(|i| pt(i as f64, 0.0, 0.0)).collect());
        let padded = subsample(&small, 8192, 5).unwrap();
        assert_eq!(padded.len(), 8192);
        let support: std::collections::BTreeSet<u64> = padded.points.iter().map(|p| p.x as u64).collect();
        assert_eq!(support, (0..100).collect());

        assert!(matches!(subsample(&cloud(vec![]), 10, 0), Err(LasError::EmptyCloud)));
    }

    #[test]
    fn subsample_selection_frequency() {
        let (len, n, trials) = (50usize, 20usize, 10_000u64);
        let mut hits = vec![0u32; len];
        for seed in 0..trials {
            for i in subsample_indices(len, n, seed) {
                hits[i] += 1;
            }
        }
        let p = n as f64 / len as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        for h in hits {
            let freq = f64::from(h) / trials as f64;
            assert!((freq - p).abs() <= 5.0 * sigma, "freq {freq} vs {p}");
        }
    }

    #[test]
    fn normalize_cases() {
        let c = GeoPoint::new(10.0, 20.0);
        let one = normalize_xyz(&cloud(vec![pt(10.0, 20.0, 5.0)]), c).unwrap();
        assert_eq!((one.points[0].x, one.points[0].y, one.points[0].z), (0.0, 0.0, 0.0));
        let two = normalize_xyz(&cloud(vec![pt(10.0, 20.0, 3.0), pt(11.0, 21.0, 7.0)]), c).unwrap();
        assert_eq!(two.points.iter().map(|p| p.z).collect::<Vec<_>>(), vec![0.0, 4.0]);
        assert!(matches!(normalize_xyz(&cloud(vec![]), c), Err(LasError::EmptyCloud)));
    }
}
