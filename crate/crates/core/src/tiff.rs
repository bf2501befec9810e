//! Minimal GeoTIFF codec.
//!
//! Reads classic (non-Big) TIFF in either byte order, stripped or tiled,
//! chunky or planar, uncompressed or DEFLATE (optionally with horizontal
//! differencing), with 8/16-bit unsigned or 32-bit float samples. The
//! georeference comes from ModelPixelScaleTag and ModelTiepointTag; nodata
//! from the GDAL_NODATA ASCII tag.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::ZlibDecoder;
use flate2::write::ZlibEncoder;

use crate::raster::{GeoTransform, PixelType, Raster, RasterData, RasterError};

const TAG_IMAGE_WIDTH: u16 = 256;
const TAG_IMAGE_LENGTH: u16 = 257;
const TAG_BITS_PER_SAMPLE: u16 = 258;
const TAG_COMPRESSION: u16 = 259;
const TAG_PHOTOMETRIC: u16 = 262;
const TAG_STRIP_OFFSETS: u16 = 273;
const TAG_SAMPLES_PER_PIXEL: u16 = 277;
const TAG_ROWS_PER_STRIP: u16 = 278;
const TAG_STRIP_BYTE_COUNTS: u16 = 279;
const TAG_PLANAR_CONFIG: u16 = 284;
const TAG_PREDICTOR: u16 = 317;
const TAG_TILE_WIDTH: u16 = 322;
const TAG_TILE_LENGTH: u16 = 323;
const TAG_TILE_OFFSETS: u16 = 324;
const TAG_TILE_BYTE_COUNTS: u16 = 325;
const TAG_EXTRA_SAMPLES: u16 = 338;
const TAG_SAMPLE_FORMAT: u16 = 339;
pub const TAG_MODEL_PIXEL_SCALE: u16 = 33550;
pub const TAG_MODEL_TIEPOINT: u16 = 33922;
const TAG_GEO_KEY_DIRECTORY: u16 = 34735;
const TAG_GDAL_NODATA: u16 = 42113;

const TYPE_BYTE: u16 = 1;
const TYPE_ASCII: u16 = 2;
const TYPE_SHORT: u16 = 3;
const TYPE_LONG: u16 = 4;
const TYPE_DOUBLE: u16 = 12;

const COMPRESSION_NONE: u64 = 1;
const COMPRESSION_DEFLATE: u64 = 8;
const COMPRESSION_DEFLATE_OLD: u64 = 32946;

const EPSG_DEFAULT: u16 = 25832;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ByteOrder {
    Little,
    Big,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    Strips { rows_per_strip: usize },
    Tiles { width: usize, height: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compression {
    None,
    Deflate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOptions {
    pub byte_order: ByteOrder,
    pub layout: Layout,
    pub compression: Compression,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self { byte_order: ByteOrder::Little, layout: Layout::Strips { rows_per_strip: 64 }, compression: Compression::None }
    }
}

fn corrupt(msg: impl Into<String>) -> RasterError {
    RasterError::CorruptIfd(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
    big: bool,
}

impl<'a> Cursor<'a> {
    fn bytes(&self, at: usize, n: usize) -> Result<&'a [u8], RasterError> {
        self.buf
            .get(at..at.checked_add(n).ok_or_else(|| corrupt("offset overflow"))?)
            .ok_or_else(|| corrupt(format!("read of {n} bytes at {at} past end of file ({})", self.buf.len())))
    }

    fn u16(&self, at: usize) -> Result<u16, RasterError> {
        let b: [u8; 2] = self.bytes(at, 2)?.try_into().unwrap();
        Ok(if self.big { u16::from_be_bytes(b) } else { u16::from_le_bytes(b) })
    }

    fn u32(&self, at: usize) -> Result<u32, RasterError> {
        let b: [u8; 4] = self.bytes(at, 4)?.try_into().unwrap();
        Ok(if self.big { u32::from_be_bytes(b) } else { u32::from_le_bytes(b) })
    }

    fn f64(&self, at: usize) -> Result<f64, RasterError> {
        let b: [u8; 8] = self.bytes(at, 8)?.try_into().unwrap();
        Ok(if self.big { f64::from_be_bytes(b) } else { f64::from_le_bytes(b) })
    }
}

#[derive(Debug, Clone)]
struct Entry {
    tag: u16,
    typ: u16,
    count: usize,
    /// Absolute offset of the value bytes.
    at: usize,
}

fn type_size(typ: u16) -> Option<usize> {
    match typ {
        1 | 2 | 6 | 7 => Some(1),
        3 | 8 => Some(2),
        4 | 9 | 11 => Some(4),
        5 | 10 | 12 => Some(8),
        _ => None,
    }
}

struct Ifd<'a> {
    cur: Cursor<'a>,
    entries: Vec<Entry>,
}

impl<'a> Ifd<'a> {
    fn parse(cur: Cursor<'a>, offset: usize) -> Result<Self, RasterError> {
        let n = usize::from(cur.u16(offset)?);
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let base = offset + 2 + 12 * i;
            let tag = cur.u16(base)?;
            let typ = cur.u16(base + 2)?;
            let count = cur.u32(base + 4)? as usize;
            let Some(size) = type_size(typ) else {
                // unknown field types are skipped per TIFF 6.0
                continue;
            };
            let total = size.checked_mul(count).ok_or_else(|| corrupt("field size overflow"))?;
            let at = if total <= 4 { base + 8 } else { cur.u32(base + 8)? as usize };
            cur.bytes(at, total)?;
            entries.push(Entry { tag, typ, count, at });
        }
        Ok(Self { cur, entries })
    }

    fn entry(&self, tag: u16) -> Option<&Entry> {
        self.entries.iter().find(|e| e.tag == tag)
    }

    fn uints(&self, tag: u16) -> Result<Option<Vec<u64>>, RasterError> {
        let Some(e) = self.entry(tag) else { return Ok(None) };
        let mut out = Vec::with_capacity(e.count);
        for i in 0..e.count {
            out.push(match e.typ {
                TYPE_BYTE => u64::from(self.cur.bytes(e.at + i, 1)?[0]),
                TYPE_SHORT => u64::from(self.cur.u16(e.at + 2 * i)?),
                TYPE_LONG => u64::from(self.cur.u32(e.at + 4 * i)?),
                other => return Err(corrupt(format!("tag {tag} has non-integer type {other}"))),
            });
        }
        Ok(Some(out))
    }

    fn uint(&self, tag: u16) -> Result<Option<u64>, RasterError> {
        Ok(self.uints(tag)?.and_then(|v| v.first().copied()))
    }

    fn required(&self, tag: u16, name: &str) -> Result<u64, RasterError> {
        self.uint(tag)?.ok_or_else(|| corrupt(format!("missing {name}")))
    }

    fn doubles(&self, tag: u16) -> Result<Option<Vec<f64>>, RasterError> {
        let Some(e) = self.entry(tag) else { return Ok(None) };
        if e.typ != TYPE_DOUBLE {
            return Err(corrupt(format!("tag {tag} must be DOUBLE")));
        }
        (0..e.count).map(|i| self.cur.f64(e.at + 8 * i)).collect::<Result<Vec<_>, _>>().map(Some)
    }

    fn ascii(&self, tag: u16) -> Result<Option<String>, RasterError> {
        let Some(e) = self.entry(tag) else { return Ok(None) };
        if e.typ != TYPE_ASCII {
            return Err(corrupt(format!("tag {tag} must be ASCII")));
        }
        let raw = self.cur.bytes(e.at, e.count)?;
        let text = raw.split(|&b| b == 0).next().unwrap_or_default();
        Ok(Some(String::from_utf8_lossy(text).trim().to_string()))
    }
}

trait Sample: Copy + Default {
    const SIZE: usize;
    fn read(b: &[u8], big: bool) -> Self;
    fn add(self, other: Self) -> Self;
}

impl Sample for u8 {
    const SIZE: usize = 1;
    fn read(b: &[u8], _: bool) -> Self {
        b[0]
    }
    fn add(self, other: Self) -> Self {
        self.wrapping_add(other)
    }
}

impl Sample for u16 {
    const SIZE: usize = 2;
    fn read(b: &[u8], big: bool) -> Self {
        let a = [b[0], b[1]];
        if big {
            u16::from_be_bytes(a)
        } else {
            u16::from_le_bytes(a)
        }
    }
    fn add(self, other: Self) -> Self {
        self.wrapping_add(other)
    }
}

impl Sample for f32 {
    const SIZE: usize = 4;
    fn read(b: &[u8], big: bool) -> Self {
        let a = [b[0], b[1], b[2], b[3]];
        f32::from_bits(if big { u32::from_be_bytes(a) } else { u32::from_le_bytes(a) })
    }
    fn add(self, _: Self) -> Self {
        unreachable!("floating-point predictor is rejected before decoding")
    }
}

struct Geometry {
    width: usize,
    height: usize,
    bands: usize,
    planar: bool,
    /// (chunk width, chunk height, chunks across, chunks down)
    chunk: (usize, usize, usize, usize),
    tiled: bool,
    predictor: bool,
}

fn decompress(raw: &[u8], compression: u64, expected: usize) -> Result<Vec<u8>, RasterError> {
    let mut out = match compression {
        COMPRESSION_NONE => raw.to_vec(),
        COMPRESSION_DEFLATE | COMPRESSION_DEFLATE_OLD => {
            let mut v = Vec::with_capacity(expected);
            ZlibDecoder::new(raw).read_to_end(&mut v).map_err(|e| corrupt(format!("deflate stream: {e}")))?;
            v
        }
        other => return Err(RasterError::UnsupportedCompression(compression_name(other))),
    };
    if out.len() < expected {
        return Err(corrupt(format!("chunk holds {} of {expected} bytes", out.len())));
    }
    out.truncate(expected);
    Ok(out)
}

fn compression_name(code: u64) -> String {
    match code {
        5 => "LZW (5)".into(),
        6 | 7 => format!("JPEG ({code})"),
        32773 => "PackBits (32773)".into(),
        other => format!("code {other}"),
    }
}

fn decode_samples<T: Sample>(
    cur: &Cursor<'_>,
    geo: &Geometry,
    compression: u64,
    offsets: &[u64],
    counts: &[u64],
) -> Result<Vec<T>, RasterError> {
    let (cw, ch, across, down) = geo.chunk;
    let per_pixel = if geo.planar { 1 } else { geo.bands };
    let planes = if geo.planar { geo.bands } else { 1 };
    let expected_chunks = across * down * planes;
    if offsets.len() < expected_chunks || counts.len() < expected_chunks {
        return Err(corrupt(format!("expected {expected_chunks} chunks, found {}", offsets.len().min(counts.len()))));
    }
    let mut out = vec![T::default(); geo.width * geo.height * geo.bands];
    for plane in 0..planes {
        for cy in 0..down {
            for cx in 0..across {
                let k = plane * across * down + cy * across + cx;
                let rows_here = if geo.tiled { ch } else { ch.min(geo.height - cy * ch) };
                let expected = rows_here * cw * per_pixel * T::SIZE;
                let raw = cur.bytes(offsets[k] as usize, counts[k] as usize)?;
                let bytes = decompress(raw, compression, expected)?;
                let mut samples: Vec<T> = bytes.chunks_exact(T::SIZE).map(|b| T::read(b, cur.big)).collect();
                if geo.predictor {
                    for row in samples.chunks_exact_mut(cw * per_pixel) {
                        for i in per_pixel..row.len() {
                            row[i] = row[i].add(row[i - per_pixel]);
                        }
                    }
                }
                let x0 = cx * cw;
                let y0 = cy * ch;
                for y in 0..rows_here {
                    let gy = y0 + y;
                    if gy >= geo.height {
                        break;
                    }
                    for x in 0..cw {
                        let gx = x0 + x;
                        if gx >= geo.width {
                            break;
                        }
                        for s in 0..per_pixel {
                            let band = if geo.planar { plane } else { s };
                            out[(band * geo.height + gy) * geo.width + gx] = samples[(y * cw + x) * per_pixel + s];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Decodes the first image of an in-memory GeoTIFF.
pub fn decode_geotiff(buf: &[u8]) -> Result<Raster, RasterError> {
    if buf.len() < 8 {
        return Err(corrupt("file shorter than TIFF header"));
    }
    let big = match &buf[0..2] {
        b"II" => false,
        b"MM" => true,
        _ => return Err(corrupt("missing II/MM byte-order mark")),
    };
    let cur = Cursor { buf, big };
    match cur.u16(2)? {
        42 => {}
        43 => return Err(RasterError::UnsupportedFormat("BigTIFF".into())),
        other => return Err(corrupt(format!("bad TIFF version {other}"))),
    }
    let ifd = Ifd::parse(Cursor { buf, big }, cur.u32(4)? as usize)?;

    let width = ifd.required(TAG_IMAGE_WIDTH, "ImageWidth")? as usize;
    let height = ifd.required(TAG_IMAGE_LENGTH, "ImageLength")? as usize;
    let bands = ifd.uint(TAG_SAMPLES_PER_PIXEL)?.unwrap_or(1) as usize;
    if width == 0 || height == 0 || bands == 0 {
        return Err(corrupt("zero image dimension"));
    }
    let compression = ifd.uint(TAG_COMPRESSION)?.unwrap_or(COMPRESSION_NONE);
    if !matches!(compression, COMPRESSION_NONE | COMPRESSION_DEFLATE | COMPRESSION_DEFLATE_OLD) {
        return Err(RasterError::UnsupportedCompression(compression_name(compression)));
    }
    let bits = ifd.uints(TAG_BITS_PER_SAMPLE)?.unwrap_or_else(|| vec![1]);
    let formats = ifd.uints(TAG_SAMPLE_FORMAT)?.unwrap_or_else(|| vec![1]);
    if bits.iter().any(|&b| b != bits[0]) || formats.iter().any(|&f| f != formats[0]) {
        return Err(RasterError::UnsupportedFormat("mixed sample types across bands".into()));
    }
    let pixel_type = match (bits[0], formats[0]) {
        (8, 1) => PixelType::U8,
        (16, 1) => PixelType::U16,
        (32, 3) => PixelType::F32,
        (b, f) => return Err(RasterError::UnsupportedFormat(format!("{b}-bit samples with format {f}"))),
    };
    let planar = match ifd.uint(TAG_PLANAR_CONFIG)?.unwrap_or(1) {
        1 => false,
        2 => true,
        other => return Err(corrupt(format!("PlanarConfiguration {other}"))),
    };
    let predictor = match ifd.uint(TAG_PREDICTOR)?.unwrap_or(1) {
        1 => false,
        2 if pixel_type != PixelType::F32 => true,
        other => return Err(RasterError::UnsupportedCompression(format!("predictor {other}"))),
    };

    let (tiled, chunk, offsets, counts) = if let Some(tw) = ifd.uint(TAG_TILE_WIDTH)? {
        let tw = tw as usize;
        let th = ifd.required(TAG_TILE_LENGTH, "TileLength")? as usize;
        if tw == 0 || th == 0 {
            return Err(corrupt("zero tile size"));
        }
        let offsets = ifd.uints(TAG_TILE_OFFSETS)?.ok_or_else(|| corrupt("missing TileOffsets"))?;
        let counts = ifd.uints(TAG_TILE_BYTE_COUNTS)?.ok_or_else(|| corrupt("missing TileByteCounts"))?;
        (true, (tw, th, width.div_ceil(tw), height.div_ceil(th)), offsets, counts)
    } else {
        let rps = (ifd.uint(TAG_ROWS_PER_STRIP)?.unwrap_or(height as u64) as usize).clamp(1, height);
        let offsets = ifd.uints(TAG_STRIP_OFFSETS)?.ok_or_else(|| corrupt("missing StripOffsets"))?;
        let counts = ifd.uints(TAG_STRIP_BYTE_COUNTS)?.ok_or_else(|| corrupt("missing StripByteCounts"))?;
        (false, (width, rps, 1, height.div_ceil(rps)), offsets, counts)
    };

    let scale = ifd.doubles(TAG_MODEL_PIXEL_SCALE)?.ok_or_else(|| RasterError::MissingGeoTags("ModelPixelScaleTag".into()))?;
    let tie = ifd.doubles(TAG_MODEL_TIEPOINT)?.ok_or_else(|| RasterError::MissingGeoTags("ModelTiepointTag".into()))?;
    if scale.len() < 2 || tie.len() < 6 {
        return Err(RasterError::MissingGeoTags("short pixel-scale or tiepoint tag".into()));
    }
    let geotransform = GeoTransform {
        origin_e: tie[3] - tie[0] * scale[0],
        origin_n: tie[4] + tie[1] * scale[1],
        pixel_size_e: scale[0],
        pixel_size_n: -scale[1],
    };
    let nodata = match ifd.ascii(TAG_GDAL_NODATA)? {
        Some(s) if !s.is_empty() => Some(s.parse::<f64>().map_err(|_| corrupt(format!("GDAL_NODATA {s:?}")))?),
        _ => None,
    };

    let geo = Geometry { width, height, bands, planar, chunk, tiled, predictor };
    let data = match pixel_type {
        PixelType::U8 => RasterData::U8(decode_samples(&cur, &geo, compression, &offsets, &counts)?),
        PixelType::U16 => RasterData::U16(decode_samples(&cur, &geo, compression, &offsets, &counts)?),
        PixelType::F32 => RasterData::F32(decode_samples(&cur, &geo, compression, &offsets, &counts)?),
    };
    Raster::new(width, height, bands, geotransform, data, nodata)
}

pub fn read_geotiff(path: &Path) -> Result<Raster, RasterError> {
    decode_geotiff(&std::fs::read(path)?)
}

struct Out {
    big: bool,
}

impl Out {
    fn u16(&self, v: u16) -> [u8; 2] {
        if self.big {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        }
    }
    fn u32(&self, v: u32) -> [u8; 4] {
        if self.big {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        }
    }
    fn f64(&self, v: f64) -> [u8; 8] {
        if self.big {
            v.to_be_bytes()
        } else {
            v.to_le_bytes()
        }
    }
}

enum Value {
    Shorts(Vec<u16>),
    Longs(Vec<u32>),
    Doubles(Vec<f64>),
    Ascii(String),
}

impl Value {
    fn typ_count(&self) -> (u16, usize) {
        match self {
            Value::Shorts(v) => (TYPE_SHORT, v.len()),
            Value::Longs(v) => (TYPE_LONG, v.len()),
            Value::Doubles(v) => (TYPE_DOUBLE, v.len()),
            Value::Ascii(s) => (TYPE_ASCII, s.len() + 1),
        }
    }

    fn bytes(&self, o: &Out) -> Vec<u8> {
        match self {
            Value::Shorts(v) => v.iter().flat_map(|&x| o.u16(x)).collect(),
            Value::Longs(v) => v.iter().flat_map(|&x| o.u32(x)).collect(),
            Value::Doubles(v) => v.iter().flat_map(|&x| o.f64(x)).collect(),
            Value::Ascii(s) => s.bytes().chain(std::iter::once(0)).collect(),
        }
    }
}

fn sample_bytes(r: &Raster, o: &Out, idx: usize, dst: &mut Vec<u8>) {
    match &r.data {
        RasterData::U8(v) => dst.push(v[idx]),
        RasterData::U16(v) => dst.extend_from_slice(&o.u16(v[idx])),
        RasterData::F32(v) => dst.extend_from_slice(&o.u32(v[idx].to_bits())),
    }
}

/// Serializes a raster as a chunky GeoTIFF.
pub fn encode_geotiff(r: &Raster, opts: &WriteOptions) -> Result<Vec<u8>, RasterError> {
    r.validate()?;
    let o = Out { big: opts.byte_order == ByteOrder::Big };
    let (cw, ch, across, down) = match opts.layout {
        Layout::Strips { rows_per_strip } => {
            let rps = rows_per_strip.clamp(1, r.height);
            (r.width, rps, 1, r.height.div_ceil(rps))
        }
        Layout::Tiles { width, height } => {
            if width == 0 || height == 0 || width % 16 != 0 || height % 16 != 0 {
                return Err(RasterError::Invalid(format!("tile size {width}x{height} must be positive multiples of 16")));
            }
            (width, height, r.width.div_ceil(width), r.height.div_ceil(height))
        }
    };
    let tiled = matches!(opts.layout, Layout::Tiles { .. });

    let mut file = Vec::new();
    file.extend_from_slice(if o.big { b"MM" } else { b"II" });
    file.extend_from_slice(&o.u16(42));
    file.extend_from_slice(&[0; 4]);

    let mut offsets = Vec::with_capacity(across * down);
    let mut counts = Vec::with_capacity(across * down);
    for cy in 0..down {
        for cx in 0..across {
            let rows_here = if tiled { ch } else { ch.min(r.height - cy * ch) };
            let mut chunk = Vec::with_capacity(rows_here * cw * r.bands * r.pixel_type().bytes());
            for y in 0..rows_here {
                for x in 0..cw {
                    let (gx, gy) = (cx * cw + x, cy * ch + y);
                    for b in 0..r.bands {
                        if gx < r.width && gy < r.height {
                            sample_bytes(r, &o, r.index(b, gx, gy), &mut chunk);
                        } else {
                            chunk.extend(std::iter::repeat_n(0u8, r.pixel_type().bytes()));
                        }
                    }
                }
            }
            let payload = match opts.compression {
                Compression::None => chunk,
                Compression::Deflate => {
                    let mut enc = ZlibEncoder::new(Vec::new(), flate2::Compression::default());
                    enc.write_all(&chunk)?;
                    enc.finish()?
                }
            };
            offsets.push(u32::try_from(file.len()).map_err(|_| RasterError::Invalid("file exceeds 4 GiB".into()))?);
            counts.push(payload.len() as u32);
            file.extend_from_slice(&payload);
            if file.len() % 2 == 1 {
                file.push(0);
            }
        }
    }

    let bits = (r.pixel_type().bytes() * 8) as u16;
    let format = if r.pixel_type() == PixelType::F32 { 3 } else { 1 };
    let gt = &r.geotransform;
    let mut entries: Vec<(u16, Value)> = vec![
        (TAG_IMAGE_WIDTH, Value::Longs(vec![r.width as u32])),
        (TAG_IMAGE_LENGTH, Value::Longs(vec![r.height as u32])),
        (TAG_BITS_PER_SAMPLE, Value::Shorts(vec![bits; r.bands])),
        (TAG_COMPRESSION, Value::Shorts(vec![if opts.compression == Compression::None { 1 } else { 8 }])),
        (TAG_PHOTOMETRIC, Value::Shorts(vec![if r.bands >= 3 && r.pixel_type() == PixelType::U8 { 2 } else { 1 }])),
        (TAG_SAMPLES_PER_PIXEL, Value::Shorts(vec![r.bands as u16])),
        (TAG_PLANAR_CONFIG, Value::Shorts(vec![1])),
        (TAG_SAMPLE_FORMAT, Value::Shorts(vec![format; r.bands])),
        (TAG_MODEL_PIXEL_SCALE, Value::Doubles(vec![gt.pixel_size_e, -gt.pixel_size_n, 0.0])),
        (TAG_MODEL_TIEPOINT, Value::Doubles(vec![0.0, 0.0, 0.0, gt.origin_e, gt.origin_n, 0.0])),
        (TAG_GEO_KEY_DIRECTORY, Value::Shorts(vec![1, 1, 0, 3, 1024, 0, 1, 1, 1025, 0, 1, 1, 3072, 0, 1, EPSG_DEFAULT])),
    ];
    let extra = if r.bands >= 3 && r.pixel_type() == PixelType::U8 { r.bands - 3 } else { r.bands - 1 };
    if extra > 0 {
        entries.push((TAG_EXTRA_SAMPLES, Value::Shorts(vec![0; extra])));
    }
    if tiled {
        entries.push((TAG_TILE_WIDTH, Value::Longs(vec![cw as u32])));
        entries.push((TAG_TILE_LENGTH, Value::Longs(vec![ch as u32])));
        entries.push((TAG_TILE_OFFSETS, Value::Longs(offsets)));
        entries.push((TAG_TILE_BYTE_COUNTS, Value::Longs(counts)));
    } else {
        entries.push((TAG_ROWS_PER_STRIP, Value::Longs(vec![ch as u32])));
        entries.push((TAG_STRIP_OFFSETS, Value::Longs(offsets)));
        entries.push((TAG_STRIP_BYTE_COUNTS, Value::Longs(counts)));
    }
    if let Some(nd) = r.nodata {
        entries.push((TAG_GDAL_NODATA, Value::Ascii(format!("{nd}"))));
    }
    entries.sort_by_key(|(tag, _)| *tag);

    let ifd_offset = file.len();
    let ifd_len = 2 + 12 * entries.len() + 4;
    let mut overflow = Vec::new();
    let mut ifd = Vec::with_capacity(ifd_len);
    ifd.extend_from_slice(&o.u16(entries.len() as u16));
    for (tag, value) in &entries {
        let (typ, count) = value.typ_count();
        let bytes = value.bytes(&o);
        ifd.extend_from_slice(&o.u16(*tag));
        ifd.extend_from_slice(&o.u16(typ));
        ifd.extend_from_slice(&o.u32(count as u32));
        if bytes.len() <= 4 {
            let mut inline = [0u8; 4];
            inline[..bytes.len()].copy_from_slice(&bytes);
            ifd.extend_from_slice(&inline);
        } else {
            let at = ifd_offset + ifd_len + overflow.len();
            ifd.extend_from_slice(&o.u32(at as u32));
            overflow.extend_from_slice(&bytes);
            if overflow.len() % 2 == 1 {
                overflow.push(0);
            }
        }
    }
    ifd.extend_from_slice(&o.u32(0));
    file.extend_from_slice(&ifd);
    file.extend_from_slice(&overflow);
    let head = o.u32(ifd_offset as u32);
    file[4..8].copy_from_slice(&head);
    Ok(file)
}

pub fn write_geotiff_with(r: &Raster, path: &Path, opts: &WriteOptions) -> Result<(), RasterError> {
    std::fs::write(path, encode_geotiff(r, opts)?)?;
    Ok(())
}

/// Writes an uncompressed, little-endian, stripped GeoTIFF.
pub fn write_geotiff(r: &Raster, path: &Path) -> Result<(), RasterError> {
    write_geotiff_with(r, path, &WriteOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster(w: usize, h: usize, bands: usize, data: RasterData, nodata: Option<f64>) -> Raster {
        Raster::new(w, h, bands, GeoTransform::new(600_000.0, 6_200_000.0, 0.125), data, nodata).unwrap()
    }

    fn assert_same(a: &Raster, b: &Raster) {
        assert_eq!((a.width, a.height, a.bands), (b.width, b.height, b.bands));
        assert_eq!(a.geotransform, b.geotransform);
        assert!(a.data.bit_eq(&b.data));
        assert_eq!(a.nodata.map(f64::to_bits), b.nodata.map(f64::to_bits));
    }

    #[test]
    fn single_pixel_round_trip() {
        let r = raster(1, 1, 1, RasterData::U8(vec![42]), None);
        let back = decode_geotiff(&encode_geotiff(&r, &WriteOptions::default()).unwrap()).unwrap();
        assert_same(&r, &back);
    }

    #[test]
    fn rgb_round_trip_all_encodings() {
        let data: Vec<u8> = (0..240 * 240 * 3).map(|i| (i * 7 % 251) as u8).collect();
        let r = raster(240, 240, 3, RasterData::U8(data), None);
        for byte_order in [ByteOrder::Little, ByteOrder::Big] {
            for layout in [Layout::Strips { rows_per_strip: 17 }, Layout::Tiles { width: 128, height: 64 }] {
                for compression in [Compression::None, Compression::Deflate] {
                    let opts = WriteOptions { byte_order, layout, compression };
                    let back = decode_geotiff(&encode_geotiff(&r, &opts).unwrap()).unwrap();
                    assert_same(&r, &back);
                }
            }
        }
    }

    #[test]
    fn float_nodata_survives() {
        let data = vec![1.0f32, 9.0, -9999.0, f32::NAN, 3.5, 0.0];
        let r = raster(3, 2, 1, RasterData::F32(data), Some(-9999.0));
        let opts = WriteOptions { byte_order: ByteOrder::Big, ..Default::default() };
        let back = decode_geotiff(&encode_geotiff(&r, &opts).unwrap()).unwrap();
        assert_same(&r, &back);
        assert_eq!(back.nodata, Some(-9999.0));
    }

    #[test]
    fn u16_round_trip() {
        let r = raster(33, 19, 2, RasterData::U16((0..33 * 19 * 2).map(|i| (i * 977) as u16).collect()), Some(0.0));
        let opts = WriteOptions {
            layout: Layout::Tiles { width: 16, height: 16 },
            compression: Compression::Deflate,
            ..Default::default()
        };
        assert_same(&r, &decode_geotiff(&encode_geotiff(&r, &opts).unwrap()).unwrap());
    }

    /// Patches the first IFD entry with `tag` to an inline SHORT value.
    fn patch_short(buf: &mut [u8], tag: u16, value: u16) {
        let ifd = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let n = u16::from_le_bytes([buf[ifd], buf[ifd + 1]]) as usize;
        for i in 0..n {
            let base = ifd + 2 + 12 * i;
            if u16::from_le_bytes([buf[base], buf[base + 1]]) == tag {
                buf[base + 8..base + 10].copy_from_slice(&value.to_le_bytes());
                return;
            }
        }
        panic!("tag {tag} not found");
    }

    #[test]
    fn jpeg_is_rejected() {
        let r = raster(4, 4, 3, RasterData::U8(vec![1; 48]), None);
        let mut buf = encode_geotiff(&r, &WriteOptions::default()).unwrap();
        patch_short(&mut buf, TAG_COMPRESSION, 7);
        match decode_geotiff(&buf) {
            Err(RasterError::UnsupportedCompression(msg)) => assert!(msg.contains("JPEG")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_geotags_and_corrupt_ifd() {
        let r = raster(4, 4, 1, RasterData::U8(vec![1; 16]), None);
        let mut buf = encode_geotiff(&r, &WriteOptions::default()).unwrap();
        // rename ModelPixelScaleTag so it is no longer recognized
        let ifd = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let n = u16::from_le_bytes([buf[ifd], buf[ifd + 1]]) as usize;
        for i in 0..n {
            let base = ifd + 2 + 12 * i;
            if u16::from_le_bytes([buf[base], buf[base + 1]]) == TAG_MODEL_PIXEL_SCALE {
                buf[base..base + 2].copy_from_slice(&33551u16.to_le_bytes());
            }
        }
        assert!(matches!(decode_geotiff(&buf), Err(RasterError::MissingGeoTags(_))));

        let mut bad = encode_geotiff(&r, &WriteOptions::default()).unwrap();
        let len = bad.len() as u32;
        bad[4..8].copy_from_slice(&(len + 100).to_le_bytes());
        assert!(matches!(decode_geotiff(&bad), Err(RasterError::CorruptIfd(_))));
    }

    #[test]
    fn reads_planar_separate_with_predictor() {
        // hand-built: 3x2, two planar U8 bands, deflate + horizontal differencing
        let band0 = [10u8, 20, 30, 1, 2, 3];
        let band1 = [200u8, 100, 50, 5, 5, 5];
        let diff = |b: &[u8]| -> Vec<u8> {
            b.chunks(3)
                .flat_map(|row| {
                    let mut out = vec![row[0]];
                    out.extend(row.windows(2).map(|w| w[1].wrapping_sub(w[0])));
                    out
                })
                .collect()
        };
        let compress = |d: &[u8]| {
            let mut e = ZlibEncoder::new(Vec::new(), flate2::Compression::default());
            e.write_all(d).unwrap();
            e.finish().unwrap()
        };
        let c0 = compress(&diff(&band0));
        let c1 = compress(&diff(&band1));
        let o = Out { big: false };
        let mut file = b"II".to_vec();
        file.extend_from_slice(&o.u16(42));
        file.extend_from_slice(&[0; 4]);
        let off0 = file.len() as u32;
        file.extend_from_slice(&c0);
        let off1 = file.len() as u32;
        file.extend_from_slice(&c1);
        let entries: Vec<(u16, Value)> = vec![
            (TAG_IMAGE_WIDTH, Value::Shorts(vec![3])),
            (TAG_IMAGE_LENGTH, Value::Shorts(vec![2])),
            (TAG_BITS_PER_SAMPLE, Value::Shorts(vec![8, 8])),
            (TAG_COMPRESSION, Value::Shorts(vec![8])),
            (TAG_STRIP_OFFSETS, Value::Longs(vec![off0, off1])),
            (TAG_SAMPLES_PER_PIXEL, Value::Shorts(vec![2])),
            (TAG_ROWS_PER_STRIP, Value::Shorts(vec![2])),
            (TAG_STRIP_BYTE_COUNTS, Value::Longs(vec![c0.len() as u32, c1.len() as u32])),
            (TAG_PLANAR_CONFIG, Value::Shorts(vec![2])),
            (TAG_PREDICTOR, Value::Shorts(vec![2])),
            (TAG_MODEL_PIXEL_SCALE, Value::Doubles(vec![10.0, 10.0, 0.0])),
            (TAG_MODEL_TIEPOINT, Value::Doubles(vec![1.0, 1.0, 0.0, 110.0, 190.0, 0.0])),
        ];
        let ifd_offset = file.len();
        let ifd_len = 2 + 12 * entries.len() + 4;
        let mut overflow = Vec::new();
        file.extend_from_slice(&o.u16(entries.len() as u16));
        for (tag, v) in &entries {
            let (typ, count) = v.typ_count();
            let bytes = v.bytes(&o);
            file.extend_from_slice(&o.u16(*tag));
            file.extend_from_slice(&o.u16(typ));
            file.extend_from_slice(&o.u32(count as u32));
            if bytes.len() <= 4 {
                let mut inline = [0u8; 4];
                inline[..bytes.len()].copy_from_slice(&bytes);
                file.extend_from_slice(&inline);
            } else {
                file.extend_from_slice(&o.u32((ifd_offset + ifd_len + overflow.len()) as u32));
                overflow.extend_from_slice(&bytes);
            }
        }
        file.extend_from_slice(&o.u32(0));
        file.extend_from_slice(&overflow);
        file[4..8].copy_from_slice(&o.u32(ifd_offset as u32));

        let r = decode_geotiff(&file).unwrap();
        assert_eq!(r.bands, 2);
        assert_eq!(r.data, RasterData::U8([band0, band1].concat()));
        // tiepoint at pixel (1,1) -> origin shifted one pixel up-left
        assert_eq!(r.geotransform, GeoTransform::new(100.0, 200.0, 10.0));
    }
}
