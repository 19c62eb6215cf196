//! AdamW with decoupled weight decay.

use crate::predictor::{ParamKind, Parameters, Real};

use super::TrainConfig;

/// First/second moment buffers mirroring the parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<F = f32> {
    pub step: u64,
    pub first: Parameters<F>,
    pub second: Parameters<F>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &Parameters<F>) -> Self {
        OptimizerState {
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }
}

/// One AdamW update:
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
/// Decay applies to [`ParamKind::Weight`] tensors only.
pub fn adamw_step<F: Real>(params: &mut Parameters<F>, grads: &Parameters<F>, state: &mut OptimizerState<F>, cfg: &TrainConfig) {
    state.step += 1;
    let f = |v: f64| F::from_f64(v).expect("finite hyperparameter");
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let t = state.step as i32;
    let c1 = f(1.0 - b1.powi(t));
    let c2 = f(1.0 - b2.powi(t));
    let (b1, b2) = (f(b1), f(b2));
    let (one, lr, eps, wd) = (F::one(), f(cfg.learning_rate), f(cfg.epsilon), f(cfg.weight_decay));
    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(state.first.tensors_mut().into_iter().zip(state.second.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        let decay = if p.kind == ParamKind::Weight { wd } else { F::zero() };
        for (((theta, &grad), mi), vi) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
            *mi = b1 * *mi + (one - b1) * grad;
            *vi = b2 * *vi + (one - b2) * grad * grad;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= lr * (m_hat / (v_hat.sqrt() + eps) + decay * *theta);
        }
    }
}
