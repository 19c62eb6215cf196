//! Central finite-difference verification of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::cross_entropy;
use crate::error::Result;
use crate::predictor::{Mode, Parameters, PredictorModel};

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are judged by absolute error instead.
pub const GRADCHECK_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorGradCheck {
    pub name: &'static str,
    pub elements: usize,
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `max |analytic - numeric|` over the tensor divided by the tensor's largest
    /// gradient magnitude (analytic or numeric), floored like the element-wise form.
    pub scaled_error: f64,
    /// Analytic and numeric values at the element with the largest relative error.
    pub worst: (f64, f64),
}

/// Shifts every parameter by `U(-spread, spread)`.
///
/// Fresh initializations are a poor place to check gradients: with zero
/// biases the LayerNorm inputs of a narrow network have almost no variance,
/// the loss is sharply curved there, and `h = 1e-3` central differences carry
/// truncation error far above any useful tolerance. A generic point avoids that.
pub fn perturb_parameters(model: &mut PredictorModel<f64>, spread: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params.tensors_mut() {
        for v in &mut p.data {
            *v += rng.random_range(-spread..=spread);
        }
    }
}

/// Compares every parameter gradient of the cross-entropy loss against
/// `(L(theta + h) - L(theta - h)) / 2h`, using the same dropout mask.
pub fn gradient_check(
    model: &PredictorModel<f64>,
    motion: &[f64],
    descriptors: &[f64],
    label: usize,
    mode: Mode,
    h: f64,
) -> Result<Vec<TensorGradCheck>> {
    let (out, cache) = model.forward_raw(motion, descriptors, mode)?;
    let (_, dlogits) = cross_entropy(&out.logits, label);
    let mut analytic = model.params.zeros_like();
    model.backward(&cache, &dlogits, &mut analytic);

    let mut probe = model.clone();
    let loss_at = |probe: &PredictorModel<f64>| -> Result<f64> {
        let (out, _) = probe.forward_raw(motion, descriptors, mode)?;
        Ok(cross_entropy(&out.logits, label).0)
    };

    let mut report = Vec::with_capacity(Parameters::<f64>::NAMES.len());
    for (t, name) in Parameters::<f64>::NAMES.iter().enumerate() {
        let elements = analytic.tensors()[t].len();
        let (mut max_rel, mut max_abs, mut worst) = (0.0f64, 0.0f64, (0.0, 0.0));
        let mut max_mag = 0.0f64;
        for e in 0..elements {
            let original = probe.params.tensors()[t].data[e];
            probe.params.tensors_mut()[t].data[e] = original + h;
            let plus = loss_at(&probe)?;
            probe.params.tensors_mut()[t].data[e] = original - h;
            let minus = loss_at(&probe)?;
            probe.params.tensors_mut()[t].data[e] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic.tensors()[t].data[e];
            let abs = (exact - numeric).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            max_abs = max_abs.max(abs);
            max_mag = max_mag.max(exact.abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
                worst = (exact, numeric);
            }
        }
        report.push(TensorGradCheck {
            name,
            elements,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            scaled_error: max_abs / max_mag.max(GRADCHECK_FLOOR),
            worst,
        });
    }
    Ok(report)
}
