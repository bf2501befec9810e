use super::{FusionError, MlpParams};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: MlpParams,
    pub v: MlpParams,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams, lr: f64) -> Self {
        let zeros = MlpParams::zeros(&params.dims());
        Self { step: 0, m: zeros.clone(), v: zeros, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(params: &mut MlpParams, grads: &MlpParams, state: &mut AdamState) -> Result<(), FusionError> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(FusionError::ShapeMismatch("parameters, gradients and moments differ in shape".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.lr, state.eps);
    for ((m, g), (v, _)) in state.m.zip_mut(grads).zip(state.v.zip_mut(grads)) {
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        }
    }
    for ((p, m), v) in params.zip_mut(&state.m).zip(state.v.layers.iter().flat_map(|l| [&l.w, &l.b])) {
        for i in 0..p.len() {
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = MlpParams::init(&[3, 2], 0);
        let before = p.clone();
        let mut s = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &MlpParams::zeros(&[3, 2]), &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn two_step_scalar_trace() {
        let mut p = MlpParams::zeros(&[1, 1]);
        p.layers[0].w[0] = 1.0;
        let mut g = MlpParams::zeros(&[1, 1]);
        g.layers[0].w[0] = 0.5;
        let mut s = AdamState::new(&p, 0.1);
        adam_step(&mut p, &g, &mut s).unwrap();
        adam_step(&mut p, &g, &mut s).unwrap();
        // hand trace
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.9 * m + (1.0 - 0.9) * 0.5;
            v = 0.999 * v + (1.0 - 0.999) * 0.25;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert_eq!(p.layers[0].w[0], w);
        assert_eq!(p.layers[0].b[0], 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = MlpParams::zeros(&[3, 2]);
        let mut s = AdamState::new(&p, 1e-3);
        assert!(adam_step(&mut p, &MlpParams::zeros(&[2, 2]), &mut s).is_err());
    }
}
