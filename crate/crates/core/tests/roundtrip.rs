//! Every on-disk format reads back to the same values and re-encodes to the same bytes.

use std::io::Cursor;

use biovista_core::embed::{decode_store, encode_store, EmbeddingRecord, EmbeddingStore, Modality, EMBED_DIM};
use biovista_core::fusion::{read_checkpoint, write_checkpoint, MlpParams};
use biovista_core::las::{AlsPoint, LasReader, LasWriter};
use biovista_core::raster::{GeoTransform, Raster, RasterData};
use biovista_core::tiff::{decode_geotiff, encode_geotiff, ByteOrder, Compression, Layout, WriteOptions};
use biovista_core::types::ClassProbs;
use proptest::collection::vec;
use proptest::prelude::*;

fn las_bytes(points: &[AlsPoint], scale: [f64; 3], offset: [f64; 3]) -> Vec<u8> {
    let mut w = LasWriter::new(Cursor::new(Vec::new()), scale, offset).unwrap();
    for p in points {
        w.write_point(p).unwrap();
    }
    w.finish_into_inner().unwrap().1.into_inner()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn las(raw in vec((-1_000_000i32..1_000_000, -1_000_000i32..1_000_000, -50_000i32..50_000, any::<u16>(), 0u8..32), 0..300),
           scale_exp in 1i32..4, off_e in 0u32..900, off_n in 0u32..9000) {
        let s = 10f64.powi(-scale_exp);
        let scale = [s; 3];
        let offset = [f64::from(off_e) * 1000.0, f64::from(off_n) * 1000.0, 0.0];
        let points: Vec<AlsPoint> = raw
            .iter()
            .map(|&(x, y, z, intensity, classification)| AlsPoint {
                x: offset[0] + f64::from(x) * s,
                y: offset[1] + f64::from(y) * s,
                z: offset[2] + f64::from(z) * s,
                intensity,
                classification,
            })
            .collect();
        let bytes = las_bytes(&points, scale, offset);
        let (header, back) = LasReader::new(Cursor::new(bytes.clone())).unwrap().read_all().unwrap();
        prop_assert_eq!(header.point_count as usize, points.len());
        prop_assert_eq!(&back, &points);
        prop_assert_eq!(las_bytes(&back, header.scale, header.offset), bytes);
    }

    #[test]
    fn geotiff(w in 1usize..70, h in 1usize..70, bands in 1usize..4, kind in 0u8..3, seed in any::<u64>(),
               big in any::<bool>(), tiled in any::<bool>(), deflate in any::<bool>(), rows in 1usize..40) {
        let n = w * h * bands;
        let mut s = seed;
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1); s >> 16 };
        let data = match kind {
            0 => RasterData::U8((0..n).map(|_| next() as u8).collect()),
            1 => RasterData::U16((0..n).map(|_| next() as u16).collect()),
            _ => RasterData::F32((0..n).map(|_| f32::from_bits(next() as u32 & 0x7f7f_ffff)).collect()),
        };
        let gt = GeoTransform::new(600_000.0 + (seed % 1000) as f64, 6_200_000.0, 0.125 * (1 + seed % 80) as f64);
        let nodata = (kind == 2).then_some(-9999.0);
        let r = Raster::new(w, h, bands, gt, data, nodata).unwrap();
        let opts = WriteOptions {
            byte_order: if big { ByteOrder::Big } else { ByteOrder::Little },
            layout: if tiled { Layout::Tiles { width: 16, height: 32 } } else { Layout::Strips { rows_per_strip: rows } },
            compression: if deflate { Compression::Deflate } else { Compression::None },
        };
        let bytes = encode_geotiff(&r, &opts).unwrap();
        let back = decode_geotiff(&bytes).unwrap();
        prop_assert!(back.data.bit_eq(&r.data));
        prop_assert_eq!((back.width, back.height, back.bands, back.geotransform, back.nodata), (w, h, bands, gt, nodata));
        prop_assert_eq!(encode_geotiff(&back, &opts).unwrap(), bytes);
    }

    #[test]
    fn bvem(n in 0usize..12, instances in 1u8..4, with_probs in any::<bool>(), seed in any::<u32>()) {
        let mut records = Vec::new();
        let mut s = u64::from(seed);
        let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 40) as f32 / (1u64 << 24) as f32 };
        for i in 0..n {
            for m in Modality::ALL {
                for inst in 0..instances {
                    let embedding: Vec<f32> = (0..EMBED_DIM).map(|_| next() * 20.0 - 10.0).collect();
                    let p = next();
                    let probs = with_probs.then(|| ClassProbs::new(f64::from(1.0 - p), f64::from(p)).unwrap());
                    records.push(EmbeddingRecord { sample_id: format!("s_{i:03}"), modality: m, instance: inst, embedding, probs });
                }
            }
        }
        let store = EmbeddingStore::from_records(records.clone()).unwrap();
        let bytes = encode_store(store.records()).unwrap();
        let back = decode_store(&bytes).unwrap();
        prop_assert_eq!(back.len(), records.len());
        for r in &records {
            let b = back.get(&r.sample_id, r.modality, r.instance).unwrap();
            prop_assert_eq!(&b.embedding, &r.embedding);
            prop_assert_eq!(b.probs.is_some(), r.probs.is_some());
            if let (Some(x), Some(y)) = (b.probs, r.probs) {
                prop_assert!((x.p_high() - y.p_high()).abs() < 1e-7);
            }
        }
        prop_assert_eq!(encode_store(back.records()).unwrap(), bytes);
    }

    #[test]
    fn checkpoint(dims in vec(1usize..24, 2..6), seed in any::<u64>()) {
        let params = MlpParams::init(&dims, seed);
        let mut bytes = Vec::new();
        write_checkpoint(&params, &mut bytes).unwrap();
        let back = read_checkpoint(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &params);
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        prop_assert_eq!(again, bytes);
    }
}

#[test]
fn truncated_files_are_rejected() {
    let params = MlpParams::init(&[4, 3, 2], 1);
    let mut bytes = Vec::new();
    write_checkpoint(&params, &mut bytes).unwrap();
    assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());

    let store = EmbeddingStore::from_records([EmbeddingRecord {
        sample_id: "a".into(),
        modality: Modality::Ortho2D,
        instance: 0,
        embedding: vec![0.5; EMBED_DIM],
        probs: None,
    }])
    .unwrap();
    let bvem = encode_store(store.records()).unwrap();
    assert_eq!(decode_store(&bvem[..bvem.len() - 1]).unwrap_err().name(), "Truncated");

    let las = las_bytes(&[AlsPoint { x: 1.0, y: 2.0, z: 3.0, intensity: 4, classification: 2 }], [0.01; 3], [0.0; 3]);
    let err = LasReader::new(Cursor::new(las[..las.len() - 5].to_vec())).err().unwrap();
    assert_eq!(err.name(), "TruncatedFile");
}
