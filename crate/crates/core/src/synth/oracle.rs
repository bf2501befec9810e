//! Slow reference implementations used to cross-check the fast paths.

use crate::dataset::BinaryMask;
use crate::fusion::MlpParams;
use crate::las::AlsPoint;
use crate::types::{BioLabel, ClassProbs, GeoPoint};

fn disc_offsets(r: usize) -> Vec<(i64, i64)> {
    let r = r as i64;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Pixel kept iff every disc offset lands on a set pixel inside the raster.
pub fn erode(m: &BinaryMask, r: usize) -> BinaryMask {
    let offs = disc_offsets(r);
    let mut out = BinaryMask::new(m.width, m.height, m.geotransform, m.label);
    for row in 0..m.height {
        for col in 0..m.width {
            let keep = offs.iter().all(|&(dx, dy)| m.get_signed(col as i64 + dx, row as i64 + dy));
            out.set(col, row, keep);
        }
    }
    out
}

pub fn dilate(m: &BinaryMask, r: usize) -> BinaryMask {
    let offs = disc_offsets(r);
    let mut out = BinaryMask::new(m.width, m.height, m.geotransform, m.label);
    for row in 0..m.height {
        for col in 0..m.width {
            let hit = offs.iter().any(|&(dx, dy)| m.get_signed(col as i64 + dx, row as i64 + dy));
            out.set(col, row, hit);
        }
    }
    out
}

pub fn open(m: &BinaryMask, r: usize) -> BinaryMask {
    dilate(&erode(m, r), r)
}

/// Sizes of 4-connected components via union-find, sorted descending.
pub fn component_sizes(m: &BinaryMask) -> Vec<usize> {
    let n = m.width * m.height;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for row in 0..m.height {
        for col in 0..m.width {
            if !m.get(col, row) {
                continue;
            }
            let i = row * m.width + col;
            if col + 1 < m.width && m.get(col + 1, row) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, i + 1));
                parent[a] = b;
            }
            if row + 1 < m.height && m.get(col, row + 1) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, i + m.width));
                parent[a] = b;
            }
        }
    }
    let mut sizes = std::collections::HashMap::new();
    for row in 0..m.height {
        for col in 0..m.width {
            if m.get(col, row) {
                *sizes.entry(find(&mut parent, row * m.width + col)).or_insert(0usize) += 1;
            }
        }
    }
    let mut v: Vec<usize> = sizes.into_values().collect();
    v.sort_unstable_by(|a, b| b.cmp(a));
    v
}

/// Shoelace area of a closed vertex ring.
pub fn shoelace(ring: &[(i64, i64)]) -> f64 {
    let n = ring.len();
    let twice: i64 = (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    twice.abs() as f64 / 2.0
}

/// Points within `radius` of `center` in the xy plane, in input order.
pub fn crop(points: &[AlsPoint], center: GeoPoint, radius: f64) -> Vec<AlsPoint> {
    points
        .iter()
        .filter(|p| {
            let (dx, dy) = (p.x - center.easting, p.y - center.northing);
            (dx * dx + dy * dy).sqrt() <= radius
        })
        .copied()
        .collect()
}

/// Pixels of a `side` square whose centers lie within the inscribed circle.
pub fn mask_count(side: usize) -> usize {
    let r = side as f64 / 2.0;
    let mut n = 0;
    for row in 0..side {
        for col in 0..side {
            let (dx, dy) = (col as f64 + 0.5 - r, row as f64 + 0.5 - r);
            if dx * dx + dy * dy <= r * r {
                n += 1;
            }
        }
    }
    n
}

/// Triple-loop forward pass for a single input.
#[allow(clippy::needless_range_loop)]
pub fn forward(params: &MlpParams, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let last = params.layers.len() - 1;
    for (i, l) in params.layers.iter().enumerate() {
        let mut z = vec![0.0; l.out];
        for o in 0..l.out {
            let mut s = l.b[o];
            for k in 0..l.inp {
                s += l.w[o * l.inp + k] * a[k];
            }
            z[o] = if i < last { s.max(0.0) } else { s };
        }
        a = z;
    }
    a
}

/// Cross-entropy of a single example, computed by direct logs.
pub fn ce_loss(params: &MlpParams, x: &[f64], target: BioLabel) -> f64 {
    let z = forward(params, x);
    let denom = z[0].exp() + z[1].exp();
    -(z[target.index()].exp() / denom).ln()
}

/// Central difference of the mean loss over `xs` with respect to flat parameter `idx`.
pub fn finite_difference(params: &MlpParams, xs: &[Vec<f64>], ys: &[BioLabel], idx: usize, h: f64) -> f64 {
    let mean = |p: &MlpParams| xs.iter().zip(ys).map(|(x, &y)| ce_loss(p, x, y)).sum::<f64>() / xs.len() as f64;
    let mut plus = params.clone();
    plus.set_flat(idx, params.get_flat(idx) + h);
    let mut minus = params.clone();
    minus.set_flat(idx, params.get_flat(idx) - h);
    (mean(&plus) - mean(&minus)) / (2.0 * h)
}

/// Exhaustive 0.01-step weight search with explicit per-class tallies.
pub fn best_weight(p2d: &[ClassProbs], p3d: &[ClassProbs], labels: &[BioLabel]) -> (f64, f64) {
    let mut best = (0.0, -1.0);
    for i in 0..=100 {
        let w = i as f64 / 100.0;
        let mut hit = [0usize; 2];
        let mut tot = [0usize; 2];
        for ((a, b), &y) in p2d.iter().zip(p3d).zip(labels) {
            let high = w * a.p_high() + (1.0 - w) * b.p_high();
            let low = w * a.p_low() + (1.0 - w) * b.p_low();
            let pred = if high > low { BioLabel::High } else { BioLabel::Low };
            tot[y.index()] += 1;
            hit[y.index()] += usize::from(pred == y);
        }
        let accs: Vec<f64> = (0..2).filter(|&c| tot[c] > 0).map(|c| hit[c] as f64 / tot[c] as f64).collect();
        let macc = accs.iter().sum::<f64>() / accs.len().max(1) as f64;
        if macc > best.1 {
            best = (w, macc);
        }
    }
    best
}
