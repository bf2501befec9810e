use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;

use crate::rng;
use crate::types::{BioLabel, ClassProbs};

use super::FusionError;

/// Input, three hidden layers, two logits (low, high).
pub const FUSION_DIMS: [usize; 5] = [1024, 1024, 1024, 512, 2];
const MAGIC: &[u8; 4] = b"BVML";
const VERSION: u16 = 1;

/// Dense layer with a row-major `out x inp` weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub out: usize,
    pub inp: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self { out, inp, w: vec![0.0; out * inp], b: vec![0.0; out] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn zeros(dims: &[usize]) -> Self {
        Self { layers: dims.windows(2).map(|d| Layer::zeros(d[1], d[0])).collect() }
    }

    /// Uniform `±sqrt(6 / fan_in)` weights and zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Self {
        let mut g = rng::stream(seed, "mlp-init");
        let mut p = Self::zeros(dims);
        for l in &mut p.layers {
            let bound = (6.0 / l.inp as f64).sqrt();
            for w in &mut l.w {
                *w = g.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn fusion(seed: u64) -> Self {
        Self::init(&FUSION_DIMS, seed)
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.layers.iter().map(|l| l.inp).collect();
        d.extend(self.layers.last().map(|l| l.out));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inp)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.dims() == other.dims()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }

    /// Flat view of parameter `i` in layer order (weights, then biases).
    pub fn get_flat(&self, mut i: usize) -> f64 {
        for l in &self.layers {
            if i < l.w.len() {
                return l.w[i];
            }
            i -= l.w.len();
            if i < l.b.len() {
                return l.b[i];
            }
            i -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn set_flat(&mut self, mut i: usize, v: f64) {
        for l in &mut self.layers {
            if i < l.w.len() {
                l.w[i] = v;
                return;
            }
            i -= l.w.len();
            if i < l.b.len() {
                l.b[i] = v;
                return;
            }
            i -= l.b.len();
        }
        panic!("parameter index out of range")
    }

    /// Every parameter slice in layer order, paired with the same slice of `other`.
    pub(crate) fn zip_mut<'a>(&'a mut self, other: &'a MlpParams) -> impl Iterator<Item = (&'a mut [f64], &'a [f64])> {
        self.layers
            .iter_mut()
            .zip(&other.layers)
            .flat_map(|(a, b)| [(a.w.as_mut_slice(), b.w.as_slice()), (a.b.as_mut_slice(), b.b.as_slice())])
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    /// Input of every layer; `inputs[0]` is the batch itself.
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer.
    pub pre: Vec<Vec<f64>>,
}

/// `c = a (m x k) * b^T` with `b` row-major `n x k`, plus bias rows.
fn affine(a: &[f64], m: usize, k: usize, w: &[f64], n: usize, bias: &[f64]) -> Vec<f64> {
    let mut c = Vec::with_capacity(m * n);
    for _ in 0..m {
        c.extend_from_slice(bias);
    }
    unsafe {
        // SAFETY: slices hold m*k, n*k and m*n elements matching the strides below.
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            w.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn check_input(x: &[f64], dim: usize, batch: usize) -> Result<(), FusionError> {
    if x.len() != dim * batch {
        return Err(FusionError::ShapeMismatch(format!("input has {} values, expected {batch} x {dim}", x.len())));
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(FusionError::NonFiniteInput(i));
    }
    Ok(())
}

/// Forward pass over a row-major batch; returns `batch x 2` logits.
pub fn mlp_forward_batch(params: &MlpParams, x: &[f64], batch: usize) -> Result<(Vec<f64>, ForwardCache), FusionError> {
    check_input(x, params.input_dim(), batch)?;
    let mut inputs = vec![x.to_vec()];
    let mut pre = Vec::with_capacity(params.layers.len());
    let last = params.layers.len() - 1;
    for (i, l) in params.layers.iter().enumerate() {
        let z = affine(inputs.last().unwrap(), batch, l.inp, &l.w, l.out, &l.b);
        if i < last {
            inputs.push(z.iter().map(|&v| v.max(0.0)).collect());
        }
        pre.push(z);
    }
    let logits = pre.last().unwrap().clone();
    Ok((logits, ForwardCache { batch, inputs, pre }))
}

pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<(Vec<f64>, ForwardCache), FusionError> {
    mlp_forward_batch(params, x, 1)
}

/// Gradients of `sum(dlogits * logits)` over the cached batch.
pub fn mlp_backward(params: &MlpParams, cache: &ForwardCache, dlogits: &[f64]) -> Result<MlpParams, FusionError> {
    let b = cache.batch;
    let n_out = params.layers.last().map_or(0, |l| l.out);
    if dlogits.len() != b * n_out || cache.pre.len() != params.layers.len() {
        return Err(FusionError::ShapeMismatch(format!("dlogits has {} values for a batch of {b} x {n_out}", dlogits.len())));
    }
    let mut grads = MlpParams::zeros(&params.dims());
    let mut dz = dlogits.to_vec();
    for (i, l) in params.layers.iter().enumerate().rev() {
        let a = &cache.inputs[i];
        let g = &mut grads.layers[i];
        unsafe {
            // SAFETY: dW (out x inp) = dZ^T (out x b) * A (b x inp); lengths match the strides.
            matrixmultiply::dgemm(
                l.out,
                b,
                l.inp,
                1.0,
                dz.as_ptr(),
                1,
                l.out as isize,
                a.as_ptr(),
                l.inp as isize,
                1,
                0.0,
                g.w.as_mut_ptr(),
                l.inp as isize,
                1,
            );
        }
        for row in dz.chunks_exact(l.out) {
            for (gb, d) in g.b.iter_mut().zip(row) {
                *gb += d;
            }
        }
        if i == 0 {
            break;
        }
        let mut da = vec![0.0; b * l.inp];
        unsafe {
            // SAFETY: dA (b x inp) = dZ (b x out) * W (out x inp).
            matrixmultiply::dgemm(
                b,
                l.out,
                l.inp,
                1.0,
                dz.as_ptr(),
                l.out as isize,
                1,
                l.w.as_ptr(),
                l.inp as isize,
                1,
                0.0,
                da.as_mut_ptr(),
                l.inp as isize,
                1,
            );
        }
        for (d, &z) in da.iter_mut().zip(&cache.pre[i - 1]) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        dz = da;
    }
    Ok(grads)
}

/// Numerically stable two-class softmax.
pub fn softmax(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

/// Cross-entropy against `(1 - s, s)` on (true, other) class, and its logit gradient.
pub fn softmax_ce_loss(logits: [f64; 2], target: BioLabel, smoothing: f64) -> (f64, [f64; 2]) {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    let log_q = [logits[0] - lse, logits[1] - lse];
    let mut t = [smoothing; 2];
    t[target.index()] = 1.0 - smoothing;
    let loss = -(t[0] * log_q[0] + t[1] * log_q[1]);
    let q = [log_q[0].exp(), log_q[1].exp()];
    (loss, [q[0] - t[0], q[1] - t[1]])
}

fn probs_from_logits(l: [f64; 2]) -> ClassProbs {
    let q = softmax(l);
    ClassProbs::new(q[0], q[1]).expect("softmax output is a distribution")
}

pub fn predict_fusion(params: &MlpParams, x: &[f64]) -> Result<ClassProbs, FusionError> {
    let (logits, _) = mlp_forward(params, x)?;
    Ok(probs_from_logits([logits[0], logits[1]]))
}

pub fn predict_fusion_batch(params: &MlpParams, x: &[f64], batch: usize) -> Result<Vec<ClassProbs>, FusionError> {
    let (logits, _) = mlp_forward_batch(params, x, batch)?;
    Ok(logits.chunks_exact(2).map(|l| probs_from_logits([l[0], l[1]])).collect())
}

/// BVML checkpoint: magic, version, then per layer `out u32`, `in u32`,
/// row-major f64 weights and f64 biases, all little-endian, until end of file.
pub fn write_checkpoint<W: Write>(params: &MlpParams, mut w: W) -> Result<(), FusionError> {
    let mut buf = Vec::with_capacity(6 + params.num_params() * 8 + params.layers.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for l in &params.layers {
        buf.extend_from_slice(&(l.out as u32).to_le_bytes());
        buf.extend_from_slice(&(l.inp as u32).to_le_bytes());
        for v in l.w.iter().chain(&l.b) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<MlpParams, FusionError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 6 || &buf[..4] != MAGIC {
        return Err(FusionError::Checkpoint("missing BVML magic".into()));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(FusionError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut pos = 6;
    let mut layers = Vec::new();
    let f64s = |pos: usize, n: usize| -> Vec<f64> {
        buf[pos..pos + 8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    };
    while pos < buf.len() {
        if buf.len() - pos < 8 {
            return Err(FusionError::Checkpoint(format!("truncated layer header at byte {pos}")));
        }
        let out = u32::from_le_bytes(buf[pos..pos + 4].try_into().unwrap()) as usize;
        let inp = u32::from_le_bytes(buf[pos + 4..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        let need = (out * inp + out) * 8;
        if buf.len() - pos < need {
            return Err(FusionError::Checkpoint(format!("layer {} truncated", layers.len())));
        }
        if let Some(prev) = layers.last().map(|l: &Layer| l.out) {
            if prev != inp {
                return Err(FusionError::ShapeMismatch(format!(
                    "layer {} takes {inp} inputs after {prev} outputs",
                    layers.len()
                )));
            }
        }
        let w = f64s(pos, out * inp);
        let b = f64s(pos + out * inp * 8, out);
        pos += need;
        layers.push(Layer { out, inp, w, b });
    }
    if layers.is_empty() {
        return Err(FusionError::Checkpoint("no layers".into()));
    }
    Ok(MlpParams { layers })
}

pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<(), FusionError> {
    write_checkpoint(params, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams, FusionError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_output_bias() {
        let mut p = MlpParams::zeros(&[4, 3, 3, 2, 2]);
        p.layers[3].b = vec![0.25, -1.5];
        let (l, _) = mlp_forward(&p, &[1.0, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(l, vec![0.25, -1.5]);
    }

    #[test]
    fn non_finite_input() {
        let p = MlpParams::zeros(&[3, 2, 2]);
        assert!(matches!(mlp_forward(&p, &[0.0, f64::NAN, 1.0]), Err(FusionError::NonFiniteInput(1))));
        assert!(matches!(mlp_forward(&p, &[0.0]), Err(FusionError::ShapeMismatch(_))));
    }

    #[test]
    fn uniform_softmax_loss() {
        let (loss, d) = softmax_ce_loss([0.0, 0.0], BioLabel::Low, 0.0);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(d, [-0.5, 0.5]);
        let (loss, d) = softmax_ce_loss([50.0, -50.0], BioLabel::Low, 0.0);
        assert!((0.0..1e-40).contains(&loss));
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn single_layer_gradient_is_outer_product() {
        let mut p = MlpParams::init(&[3, 2], 1);
        p.layers[0].b = vec![0.1, 0.2];
        let x = [1.0, -2.0, 0.5];
        let (_, cache) = mlp_forward(&p, &x).unwrap();
        let g = mlp_backward(&p, &cache, &[0.3, -0.7]).unwrap();
        assert_eq!(g.layers[0].w, vec![0.3, -0.6, 0.15, -0.7, 1.4, -0.35]);
        assert_eq!(g.layers[0].b, vec![0.3, -0.7]);
        let zero = mlp_backward(&p, &cache, &[0.0, 0.0]).unwrap();
        assert!(zero.layers[0].w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn symmetric_output_is_even() {
        let mut p = MlpParams::init(&[5, 4, 2], 3);
        let row: Vec<f64> = p.layers[1].w[..4].to_vec();
        p.layers[1].w[4..].copy_from_slice(&row);
        let q = predict_fusion(&p, &[0.1, 0.2, -0.3, 0.4, 0.5]).unwrap();
        assert_eq!(q.p_low(), 0.5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = MlpParams::init(&[6, 5, 4, 2], 11);
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(buf.len(), 6 + 3 * 8 + p.num_params() * 8);
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), p);
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        assert!(read_checkpoint(&b"BVMX\x01\x00"[..]).is_err());
    }
}
