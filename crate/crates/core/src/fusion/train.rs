use std::io::Write;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embed::{join_modalities, EmbeddingStore, JoinedSample, JOINT_DIM};
use crate::metrics::ClassCounts;
use crate::rng;
use crate::types::{argmax_class, BioLabel, Manifest, Split};

use super::{
    adam_step, mlp_backward, mlp_forward_batch, predict_fusion_batch, softmax_ce_loss, AdamState, FusionError, MlpParams,
    FUSION_DIMS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub label_smoothing: f64,
    pub lr: f64,
    pub seed: u64,
    /// Backbone run whose embeddings are fused.
    pub instance: u8,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 128, label_smoothing: 0.0, lr: 1e-6, seed: 0, instance: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.batch_size == 0 {
            return Err(FusionError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(FusionError::InvalidConfig(format!("label_smoothing {} outside [0, 0.5)", self.label_smoothing)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FusionError::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_oacc: f64,
    pub val_macc: f64,
    pub val_acc_high: Option<f64>,
    pub val_acc_low: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch, or the initial ones without training.
    pub params: MlpParams,
    pub log: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    /// Mean training loss of the initial parameters.
    pub initial_loss: f64,
}

fn to_matrix(samples: &[&JoinedSample]) -> Vec<f64> {
    samples.iter().flat_map(|s| s.features.iter().map(|&v| f64::from(v))).collect()
}

fn mean_loss(params: &MlpParams, x: &[f64], labels: &[BioLabel], smoothing: f64) -> Result<f64, FusionError> {
    let mut total = 0.0;
    for (xc, lc) in x.chunks(JOINT_DIM * 256).zip(labels.chunks(256)) {
        let (logits, _) = mlp_forward_batch(params, xc, lc.len())?;
        for (l, &y) in logits.chunks_exact(2).zip(lc) {
            total += softmax_ce_loss([l[0], l[1]], y, smoothing).0;
        }
    }
    Ok(total / labels.len() as f64)
}

fn evaluate(params: &MlpParams, x: &[f64], labels: &[BioLabel]) -> Result<ClassCounts, FusionError> {
    let mut counts = ClassCounts::default();
    for (xc, lc) in x.chunks(JOINT_DIM * 256).zip(labels.chunks(256)) {
        for (p, &y) in predict_fusion_batch(params, xc, lc.len())?.into_iter().zip(lc) {
            counts.add(y, argmax_class(p));
        }
    }
    Ok(counts)
}

/// Mini-batch Adam training on concatenated embeddings, keeping the best validation epoch.
pub fn train_fusion(store: &EmbeddingStore, manifest: &Manifest, cfg: &TrainConfig) -> Result<TrainOutcome, FusionError> {
    cfg.validate()?;
    let fit =
        Manifest { samples: manifest.samples.iter().filter(|s| s.split != Split::Test).cloned().collect(), ..manifest.clone() };
    let joined = join_modalities(store, &fit, cfg.instance)?;
    let train: Vec<&JoinedSample> = joined.iter().filter(|s| s.split == Split::Train).collect();
    let val: Vec<&JoinedSample> = joined.iter().filter(|s| s.split == Split::Val).collect();
    if train.is_empty() {
        return Err(FusionError::EmptyTraining);
    }
    if val.is_empty() {
        return Err(FusionError::EmptyValidation);
    }
    let x_val = to_matrix(&val);
    let y_val: Vec<BioLabel> = val.iter().map(|s| s.label).collect();
    let x_train = to_matrix(&train);
    let y_train: Vec<BioLabel> = train.iter().map(|s| s.label).collect();

    let mut params = MlpParams::fusion(cfg.seed);
    let initial_loss = mean_loss(&params, &x_train, &y_train, cfg.label_smoothing)?;
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut best: Option<(f64, usize, MlpParams)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &format!("epoch/{epoch}")));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut x = Vec::with_capacity(b * JOINT_DIM);
            for &i in chunk {
                x.extend_from_slice(&x_train[i * JOINT_DIM..(i + 1) * JOINT_DIM]);
            }
            let (logits, cache) = mlp_forward_batch(&params, &x, b)?;
            let mut dlogits = Vec::with_capacity(2 * b);
            for (l, &i) in logits.chunks_exact(2).zip(chunk) {
                let (loss, d) = softmax_ce_loss([l[0], l[1]], y_train[i], cfg.label_smoothing);
                loss_sum += loss;
                dlogits.extend(d.iter().map(|v| v / b as f64));
            }
            let grads = mlp_backward(&params, &cache, &dlogits)?;
            adam_step(&mut params, &grads, &mut adam)?;
        }
        let counts = evaluate(&params, &x_val, &y_val)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_oacc: counts.oacc().unwrap_or(0.0),
            val_macc: counts.present_class_mean().unwrap_or(0.0),
            val_acc_high: counts.class_accuracy(BioLabel::High),
            val_acc_low: counts.class_accuracy(BioLabel::Low),
        };
        info!("epoch {epoch}: loss {:.5}, val MAcc {:.4}", entry.train_loss, entry.val_macc);
        if best.as_ref().is_none_or(|(m, _, _)| entry.val_macc > *m) {
            best = Some((entry.val_macc, epoch, params.clone()));
        }
        log.push(entry);
    }
    let (params, best_epoch) = match best {
        Some((_, e, p)) => (p, Some(e)),
        None => (params, None),
    };
    debug_assert_eq!(params.dims(), FUSION_DIMS);
    Ok(TrainOutcome { params, log, best_epoch, initial_loss })
}

/// CSV log, `epoch,train_loss,val_oacc,val_macc,val_acc_high,val_acc_low`.
pub fn write_train_log<W: Write>(log: &[EpochLog], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,val_oacc,val_macc,val_acc_high,val_acc_low")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for e in log {
        writeln!(
            w,
            "{},{:.8},{:.6},{:.6},{},{}",
            e.epoch,
            e.train_loss,
            e.val_oacc,
            e.val_macc,
            opt(e.val_acc_high),
            opt(e.val_acc_low)
        )?;
    }
    w.flush()
}
