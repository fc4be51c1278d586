use crate::element::Element;
use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Decoupled (AdamW-style) decay; 0 disables it.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig { lr, betas: (0.9, 0.99), eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T: Element> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self::for_tensors(store.tensors())
    }

    pub fn for_tensors<'a>(ts: impl Iterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<_> = ts.map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        AdamState { step: 0, v: m.clone(), m }
    }
}

/// One bias-corrected Adam update over `params` in place.
pub fn adam_step<'a, T: Element>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(AutodiffError::Optimizer(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(AutodiffError::Optimizer(format!(
            "{} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(AutodiffError::Optimizer(format!(
                "shape mismatch: param {:?}, grad {:?}, state {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    let lr = T::from_f64c(cfg.lr);
    let decay = T::from_f64c(1.0 - cfg.lr * cfg.weight_decay);
    let (b1t, b2t) = (T::from_f64c(b1), T::from_f64c(b2));
    let (c1, c2) = (T::from_f64c(1.0 - b1), T::from_f64c(1.0 - b2));
    let (bc1, bc2, eps) = (T::from_f64c(bc1), T::from_f64c(bc2), T::from_f64c(cfg.eps));
    for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let pd = p.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            let mi = b1t * m.data()[i] + c1 * gi;
            let vi = b2t * v.data()[i] + c2 * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            if cfg.weight_decay > 0.0 {
                pd[i] *= decay;
            }
            pd[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Adam over a whole [`ParamStore`].
pub fn adam_step_store<T: Element>(
    store: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    adam_step(store.tensors_mut(), grads, state, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = [Tensor::<f64>::new([2], vec![0.3, -0.7]).unwrap()];
        let mut st = AdamState::for_tensors(p.iter());
        adam_step(p.iter_mut(), &[Tensor::zeros([2])], &mut st, &AdamConfig::new(0.1)).unwrap();
        assert_eq!(p[0].data(), &[0.3, -0.7]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut p = [Tensor::<f64>::new([3], vec![0.0, 0.0, 0.0]).unwrap()];
        let g = Tensor::new([3], vec![2.0, -0.01, 50.0]).unwrap();
        let mut st = AdamState::for_tensors(p.iter());
        adam_step(p.iter_mut(), &[g], &mut st, &AdamConfig::new(0.05)).unwrap();
        let d = p[0].data();
        assert!((d[0] + 0.05).abs() < 1e-6);
        assert!((d[1] - 0.05).abs() < 1e-4);
        assert!((d[2] + 0.05).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = [Tensor::<f32>::zeros([2])];
        let mut st = AdamState::for_tensors(p.iter());
        let r = adam_step(p.iter_mut(), &[Tensor::zeros([3])], &mut st, &AdamConfig::new(0.1));
        assert!(r.is_err());
    }

    #[test]
    fn weight_decay_shrinks_params() {
        let mut p = [Tensor::<f64>::new([1], vec![1.0]).unwrap()];
        let mut st = AdamState::for_tensors(p.iter());
        let cfg = AdamConfig { weight_decay: 0.5, ..AdamConfig::new(0.1) };
        adam_step(p.iter_mut(), &[Tensor::zeros([1])], &mut st, &cfg).unwrap();
        assert!((p[0].data()[0] - 0.95).abs() < 1e-12);
    }
}
