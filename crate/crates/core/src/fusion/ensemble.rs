use crate::metrics::ClassCounts;
use crate::types::{argmax_class, BioLabel, ClassProbs};

use super::FusionError;

/// Weight grid `0.00, 0.01, ..., 1.00`.
pub const GRID_STEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleWeights {
    w_2d: f64,
}

impl EnsembleWeights {
    pub fn new(w_2d: f64) -> Result<Self, FusionError> {
        if !(0.0..=1.0).contains(&w_2d) {
            return Err(FusionError::InvalidConfig(format!("w_2d = {w_2d} outside [0, 1]")));
        }
        Ok(Self { w_2d })
    }

    /// Grid point `i` of [`GRID_STEPS`].
    pub fn grid(i: usize) -> Self {
        Self::grid_of(i, GRID_STEPS)
    }

    /// Grid point `i` of `steps` equal intervals on `[0, 1]`.
    pub fn grid_of(i: usize, steps: usize) -> Self {
        Self { w_2d: i.min(steps) as f64 / steps.max(1) as f64 }
    }

    pub fn w_2d(&self) -> f64 {
        self.w_2d
    }

    pub fn w_3d(&self) -> f64 {
        1.0 - self.w_2d
    }
}

pub fn ensemble_probs(p2d: ClassProbs, p3d: ClassProbs, w: EnsembleWeights) -> ClassProbs {
    let (a, b) = (w.w_2d(), w.w_3d());
    let low = a * p2d.p_low() + b * p3d.p_low();
    let high = a * p2d.p_high() + b * p3d.p_high();
    ClassProbs::new(low.clamp(0.0, 1.0), high.clamp(0.0, 1.0)).expect("convex combination of valid probabilities")
}

/// MAcc of predictions, averaging only the classes that occur.
pub fn macc_of(labels: &[BioLabel], preds: impl IntoIterator<Item = BioLabel>) -> f64 {
    ClassCounts::from_pairs(labels.iter().copied().zip(preds)).present_class_mean().unwrap_or(0.0)
}

/// Grid search for the 2D weight maximizing validation MAcc; the smallest weight wins ties.
pub fn search_weights(val_2d: &[ClassProbs], val_3d: &[ClassProbs], labels: &[BioLabel]) -> Result<EnsembleWeights, FusionError> {
    search_weights_grid(val_2d, val_3d, labels, GRID_STEPS)
}

/// [`search_weights`] over `steps + 1` evenly spaced weights.
pub fn search_weights_grid(
    val_2d: &[ClassProbs],
    val_3d: &[ClassProbs],
    labels: &[BioLabel],
    steps: usize,
) -> Result<EnsembleWeights, FusionError> {
    if steps == 0 {
        return Err(FusionError::InvalidConfig("weight grid needs at least one step".into()));
    }
    if val_2d.is_empty() {
        return Err(FusionError::EmptyValidation);
    }
    if val_2d.len() != val_3d.len() || val_2d.len() != labels.len() {
        return Err(FusionError::ShapeMismatch(format!("{} 2D, {} 3D and {} labels", val_2d.len(), val_3d.len(), labels.len())));
    }
    let mut best = (f64::NEG_INFINITY, EnsembleWeights::grid_of(0, steps));
    for i in 0..=steps {
        let w = EnsembleWeights::grid_of(i, steps);
        let preds = val_2d.iter().zip(val_3d).map(|(&a, &b)| argmax_class(ensemble_probs(a, b, w)));
        let m = macc_of(labels, preds);
        if m > best.0 {
            best = (m, w);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(low: f64) -> ClassProbs {
        ClassProbs::new(low, 1.0 - low).unwrap()
    }

    #[test]
    fn arithmetic() {
        let out = ensemble_probs(p(0.8), p(0.4), EnsembleWeights::new(0.5).unwrap());
        assert!((out.p_low() - 0.6).abs() < 1e-12);
        assert_eq!(ensemble_probs(p(0.3), p(0.9), EnsembleWeights::new(1.0).unwrap()), p(0.3));
    }

    #[test]
    fn dominance_and_ties() {
        use BioLabel::*;
        let labels = [High, Low, High, Low];
        let right: Vec<_> = labels.iter().map(|&l| ClassProbs::certain(l)).collect();
        let wrong: Vec<_> = labels.iter().map(|&l| ClassProbs::certain(l.other())).collect();
        assert_eq!(search_weights(&wrong, &right, &labels).unwrap().w_2d(), 0.0);
        assert_eq!(search_weights(&right, &wrong, &labels).unwrap().w_2d(), 0.51);
        assert_eq!(search_weights(&right, &right, &labels).unwrap().w_2d(), 0.0);
        assert!(matches!(search_weights(&[], &[], &[]), Err(FusionError::EmptyValidation)));
    }
}
