//! Forward pass with an activation cache, and exact reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    gelu_backward, gelu_forward, layer_norm, layer_norm_backward, linear, linear_backward, matmul, sigmoid, softmax,
    NormCache,
};
use super::{argmax_low, Parameters, PredictorModel, Real};
use crate::error::{Error, Result};
use crate::features::{temporal_resample, MotionTensor, SpatialDescriptors};

/// Whether dropout is active. Training masks are a pure function of the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Training { dropout_seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<F> {
    /// Class scores `o`, length `K`.
    pub logits: Vec<F>,
    /// Temporal attention weights, length `T'`.
    pub attention: Vec<F>,
    /// Fusion gate, length `H`.
    pub gate: Vec<F>,
}

/// Intermediate activations needed by [`PredictorModel::backward`].
#[derive(Debug, Clone)]
pub struct Cache<F> {
    conv_cols: [Vec<F>; 3],
    conv_pre: [Vec<F>; 3],
    conv_cdf: [Vec<F>; 3],
    pooled: Vec<F>,
    z: Vec<F>,
    attention: Vec<F>,
    motion_norm: NormCache<F>,
    motion_norm_out: Vec<F>,
    motion_pre: Vec<F>,
    motion_cdf: Vec<F>,
    resampled: Vec<F>,
    spatial_norm: NormCache<F>,
    spatial_norm_out: Vec<F>,
    spatial_pre: Vec<F>,
    spatial_cdf: Vec<F>,
    h_spatial: Vec<F>,
    concat: Vec<F>,
    gate: Vec<F>,
    head_norm: NormCache<F>,
    head_in: Vec<F>,
    head_pre: Vec<F>,
    head_cdf: Vec<F>,
    classifier_in: Vec<F>,
    masks: Option<[Vec<F>; 2]>,
}

/// Inverted-dropout masks (`0` or `1/(1-p)`) for the two head dropouts.
fn dropout_masks<F: Real>(seed: u64, width: usize, rate: f64) -> [Vec<F>; 2] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = F::from_f64(1.0 / (1.0 - rate)).expect("finite");
    let mut draw = || -> Vec<F> {
        (0..width)
            .map(|_| if rng.random::<f64>() < rate { F::zero() } else { keep })
            .collect()
    };
    let first = draw();
    let second = draw();
    [first, second]
}

fn weighted_rows<F: Real>(weights: &[F], rows: &[F], dim: usize) -> Vec<F> {
    let mut out = vec![F::zero(); dim];
    for (&a, row) in weights.iter().zip(rows.chunks_exact(dim)) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += a * v;
        }
    }
    out
}

fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn convert<F: Real>(data: &[f32]) -> Vec<F> {
    data.iter().map(|&v| F::from_f32(v).expect("finite input")).collect()
}

impl<F: Real> PredictorModel<F> {
    /// Forward pass on a cropped motion tensor `[2, T, crop, crop]` and descriptors `[T, D_s]`.
    pub fn forward(&self, motion: &MotionTensor, descriptors: &SpatialDescriptors, mode: Mode) -> Result<ForwardOutput<F>> {
        Ok(self.forward_cached(motion, descriptors, mode)?.0)
    }

    pub fn forward_cached(
        &self,
        motion: &MotionTensor,
        descriptors: &SpatialDescriptors,
        mode: Mode,
    ) -> Result<(ForwardOutput<F>, Cache<F>)> {
        motion.expect_shape(self.config.frames, self.config.crop)?;
        descriptors.expect_shape(self.config.frames, self.config.descriptor_dim)?;
        self.forward_raw(&convert(motion.data()), &convert(descriptors.data()), mode)
    }

    /// Forward pass on flat buffers already in the network's scalar type.
    pub fn forward_raw(&self, motion: &[F], descriptors: &[F], mode: Mode) -> Result<(ForwardOutput<F>, Cache<F>)> {
        let c = &self.config;
        let p = &self.params;
        if motion.len() != c.motion_len() {
            return Err(Error::Shape {
                what: "motion input".into(),
                expected: vec![c.motion_len()],
                actual: vec![motion.len()],
            });
        }
        if descriptors.len() != c.descriptor_len() {
            return Err(Error::Shape {
                what: "descriptor input".into(),
                expected: vec![c.descriptor_len()],
                actual: vec![descriptors.len()],
            });
        }
        if motion.iter().chain(descriptors).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("predictor input"));
        }

        // Motion encoder.
        let geoms = c.conv_geometry();
        let conv_params = [
            (&p.conv1_weight, &p.conv1_bias),
            (&p.conv2_weight, &p.conv2_bias),
            (&p.conv3_weight, &p.conv3_bias),
        ];
        let mut x = motion.to_vec();
        let mut cols: [Vec<F>; 3] = Default::default();
        let mut pres: [Vec<F>; 3] = Default::default();
        let mut cdfs: [Vec<F>; 3] = Default::default();
        for (i, (g, (w, b))) in geoms.iter().zip(conv_params).enumerate() {
            let (pre, col) = g.forward(&w.data, &b.data, &x);
            let (act, cdf) = gelu_forward(&pre);
            cols[i] = col;
            pres[i] = pre;
            cdfs[i] = cdf;
            x = act;
        }

        // Spatial average pool: [c3, T', H3, W3] -> pooled [T', c3].
        let last = geoms[2];
        let steps = last.output[0];
        let plane = last.output[1] * last.output[2];
        let c3 = last.out_channels;
        let inv_plane = F::one() / F::from_usize(plane).unwrap();
        let mut pooled = vec![F::zero(); steps * c3];
        for ch in 0..c3 {
            for t in 0..steps {
                let start = (ch * steps + t) * plane;
                pooled[t * c3 + ch] = x[start..start + plane].iter().copied().sum::<F>() * inv_plane;
            }
        }

        // Z [T', D_m] = pooled W^T + b.
        let dm = c.motion_dim;
        let mut z = vec![F::zero(); steps * dm];
        for row in z.chunks_exact_mut(dm) {
            row.copy_from_slice(&p.motion_proj_bias.data);
        }
        matmul(&pooled, &p.motion_proj_weight.data, &mut z, steps, c3, dm, false, true, true);

        // Temporal attention.
        let scores: Vec<F> = z
            .chunks_exact(dm)
            .map(|row| dot(&p.attention_weight.data, row) + p.attention_bias.data[0])
            .collect();
        let attention = softmax(&scores);
        let z_bar = weighted_rows(&attention, &z, dm);

        let (motion_norm_out, motion_norm) = layer_norm(&z_bar, &p.motion_norm_scale.data, &p.motion_norm_shift.data);
        let motion_pre = linear(&p.motion_fc_weight.data, &p.motion_fc_bias.data, &motion_norm_out);
        let (h_motion, motion_cdf) = gelu_forward(&motion_pre);

        // Spatial branch pooled with the same attention weights.
        let ds = c.descriptor_dim;
        let resampled = temporal_resample(descriptors, c.frames, ds, steps);
        let s_bar = weighted_rows(&attention, &resampled, ds);
        let (spatial_norm_out, spatial_norm) =
            layer_norm(&s_bar, &p.spatial_norm_scale.data, &p.spatial_norm_shift.data);
        let spatial_pre = linear(&p.spatial_fc_weight.data, &p.spatial_fc_bias.data, &spatial_norm_out);
        let (h_spatial, spatial_cdf) = gelu_forward(&spatial_pre);

        // Gated addition.
        let concat: Vec<F> = h_motion.iter().chain(&h_spatial).copied().collect();
        let gate: Vec<F> = linear(&p.gate_weight.data, &p.gate_bias.data, &concat)
            .into_iter()
            .map(sigmoid)
            .collect();
        let fused: Vec<F> = h_motion
            .iter()
            .zip(&h_spatial)
            .zip(&gate)
            .map(|((&m, &s), &g)| m + g * s)
            .collect();

        // Head: LN -> Dropout -> Linear -> GELU -> Dropout -> classifier.
        let masks = match mode {
            Mode::Inference => None,
            Mode::Training { dropout_seed } => Some(dropout_masks::<F>(dropout_seed, c.hidden_dim, c.dropout)),
        };
        let (mut head_in, head_norm) = layer_norm(&fused, &p.head_norm_scale.data, &p.head_norm_shift.data);
        if let Some([m1, _]) = &masks {
            head_in.iter_mut().zip(m1).for_each(|(v, &k)| *v *= k);
        }
        let head_pre = linear(&p.head_fc_weight.data, &p.head_fc_bias.data, &head_in);
        let (mut classifier_in, head_cdf) = gelu_forward(&head_pre);
        if let Some([_, m2]) = &masks {
            classifier_in.iter_mut().zip(m2).for_each(|(v, &k)| *v *= k);
        }
        let logits = linear(&p.classifier_weight.data, &p.classifier_bias.data, &classifier_in);

        let output = ForwardOutput {
            logits,
            attention: attention.clone(),
            gate: gate.clone(),
        };
        let cache = Cache {
            conv_cols: cols,
            conv_pre: pres,
            conv_cdf: cdfs,
            pooled,
            z,
            attention,
            motion_norm,
            motion_norm_out,
            motion_pre,
            motion_cdf,
            resampled,
            spatial_norm,
            spatial_norm_out,
            spatial_pre,
            spatial_cdf,
            h_spatial,
            concat,
            gate,
            head_norm,
            head_in,
            head_pre,
            head_cdf,
            classifier_in,
            masks,
        };
        Ok((output, cache))
    }

    /// Accumulates `d loss / d params` into `grads`, given `d loss / d logits`.
    pub fn backward(&self, cache: &Cache<F>, dlogits: &[F], grads: &mut Parameters<F>) {
        let c = &self.config;
        let p = &self.params;
        let g = grads;
        assert_eq!(dlogits.len(), c.classes, "logit gradient length");

        // Head.
        let mut d_classifier_in = linear_backward(
            &p.classifier_weight.data,
            &cache.classifier_in,
            dlogits,
            &mut g.classifier_weight.data,
            &mut g.classifier_bias.data,
        );
        if let Some([_, m2]) = &cache.masks {
            d_classifier_in.iter_mut().zip(m2).for_each(|(v, &k)| *v *= k);
        }
        gelu_backward(&cache.head_pre, &cache.head_cdf, &mut d_classifier_in);
        let mut d_head_in = linear_backward(
            &p.head_fc_weight.data,
            &cache.head_in,
            &d_classifier_in,
            &mut g.head_fc_weight.data,
            &mut g.head_fc_bias.data,
        );
        if let Some([m1, _]) = &cache.masks {
            d_head_in.iter_mut().zip(m1).for_each(|(v, &k)| *v *= k);
        }
        let d_fused = layer_norm_backward(
            &cache.head_norm,
            &p.head_norm_scale.data,
            &d_head_in,
            &mut g.head_norm_scale.data,
            &mut g.head_norm_shift.data,
        );

        // Gated addition: fused = m + gate * s.
        let h = c.hidden_dim;
        let mut d_motion = d_fused.clone();
        let mut d_spatial: Vec<F> = d_fused.iter().zip(&cache.gate).map(|(&d, &k)| d * k).collect();
        let d_gate_pre: Vec<F> = d_fused
            .iter()
            .zip(&cache.h_spatial)
            .zip(&cache.gate)
            .map(|((&d, &s), &k)| d * s * k * (F::one() - k))
            .collect();
        let d_concat = linear_backward(
            &p.gate_weight.data,
            &cache.concat,
            &d_gate_pre,
            &mut g.gate_weight.data,
            &mut g.gate_bias.data,
        );
        for i in 0..h {
            d_motion[i] += d_concat[i];
            d_spatial[i] += d_concat[h + i];
        }

        // Spatial branch (descriptors are inputs, so only attention receives gradient).
        gelu_backward(&cache.spatial_pre, &cache.spatial_cdf, &mut d_spatial);
        let d_spatial_norm_out = linear_backward(
            &p.spatial_fc_weight.data,
            &cache.spatial_norm_out,
            &d_spatial,
            &mut g.spatial_fc_weight.data,
            &mut g.spatial_fc_bias.data,
        );
        let d_s_bar = layer_norm_backward(
            &cache.spatial_norm,
            &p.spatial_norm_scale.data,
            &d_spatial_norm_out,
            &mut g.spatial_norm_scale.data,
            &mut g.spatial_norm_shift.data,
        );

        // Motion branch.
        gelu_backward(&cache.motion_pre, &cache.motion_cdf, &mut d_motion);
        let d_motion_norm_out = linear_backward(
            &p.motion_fc_weight.data,
            &cache.motion_norm_out,
            &d_motion,
            &mut g.motion_fc_weight.data,
            &mut g.motion_fc_bias.data,
        );
        let d_z_bar = layer_norm_backward(
            &cache.motion_norm,
            &p.motion_norm_scale.data,
            &d_motion_norm_out,
            &mut g.motion_norm_scale.data,
            &mut g.motion_norm_shift.data,
        );

        // Attention pooling: z_bar = sum a_t Z_t, s_bar = sum a_t S'_t.
        let dm = c.motion_dim;
        let ds = c.descriptor_dim;
        let alpha = &cache.attention;
        let steps = alpha.len();
        let d_alpha: Vec<F> = (0..steps)
            .map(|t| {
                dot(&d_z_bar, &cache.z[t * dm..(t + 1) * dm]) + dot(&d_s_bar, &cache.resampled[t * ds..(t + 1) * ds])
            })
            .collect();
        let mean = dot(alpha, &d_alpha);
        let d_scores: Vec<F> = alpha.iter().zip(&d_alpha).map(|(&a, &d)| a * (d - mean)).collect();
        let mut d_z = vec![F::zero(); steps * dm];
        for t in 0..steps {
            let row = &cache.z[t * dm..(t + 1) * dm];
            let d_row = &mut d_z[t * dm..(t + 1) * dm];
            g.attention_bias.data[0] += d_scores[t];
            for j in 0..dm {
                g.attention_weight.data[j] += d_scores[t] * row[j];
                d_row[j] = alpha[t] * d_z_bar[j] + d_scores[t] * p.attention_weight.data[j];
            }
        }

        // Motion projection: Z = pooled W^T + b.
        let geoms = c.conv_geometry();
        let last = geoms[2];
        let c3 = last.out_channels;
        for row in d_z.chunks_exact(dm) {
            for (b, &d) in g.motion_proj_bias.data.iter_mut().zip(row) {
                *b += d;
            }
        }
        // dW [D_m, c3] += dZ^T [D_m, T'] * pooled [T', c3]
        matmul(&d_z, &cache.pooled, &mut g.motion_proj_weight.data, dm, steps, c3, true, false, true);
        let mut d_pooled = vec![F::zero(); steps * c3];
        matmul(&d_z, &p.motion_proj_weight.data, &mut d_pooled, steps, dm, c3, false, false, false);

        // Spatial average pool.
        let plane = last.output[1] * last.output[2];
        let inv_plane = F::one() / F::from_usize(plane).unwrap();
        let mut d_act = vec![F::zero(); last.out_channels * last.positions()];
        for ch in 0..c3 {
            for t in 0..steps {
                let start = (ch * steps + t) * plane;
                d_act[start..start + plane].fill(d_pooled[t * c3 + ch] * inv_plane);
            }
        }

        // Conv blocks in reverse.
        let conv_params = [&p.conv1_weight, &p.conv2_weight, &p.conv3_weight];
        for i in (0..3).rev() {
            gelu_backward(&cache.conv_pre[i], &cache.conv_cdf[i], &mut d_act);
            let (dw, db) = match i {
                0 => (&mut g.conv1_weight.data, &mut g.conv1_bias.data),
                1 => (&mut g.conv2_weight.data, &mut g.conv2_bias.data),
                _ => (&mut g.conv3_weight.data, &mut g.conv3_bias.data),
            };
            match geoms[i].backward(&conv_params[i].data, &cache.conv_cols[i], &d_act, dw, db, i > 0) {
                Some(d_input) => d_act = d_input,
                None => break,
            }
        }
    }

    /// Argmax of the inference-mode logits; ties go to the cheaper level.
    pub fn predict(&self, motion: &MotionTensor, descriptors: &SpatialDescriptors) -> Result<usize> {
        let out = self.forward(motion, descriptors, Mode::Inference)?;
        Ok(argmax_low(&out.logits))
    }
}

#[cfg(test)]
mod tests {
    use super::super::PredictorConfig;
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn random_inputs(c: &PredictorConfig, seed: u64) -> (MotionTensor, SpatialDescriptors) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0f32, 1.0).unwrap();
        let m: Vec<f32> = (0..c.motion_len()).map(|_| n.sample(&mut rng)).collect();
        let s: Vec<f32> = (0..c.descriptor_len()).map(|_| n.sample(&mut rng)).collect();
        (
            MotionTensor::new(c.frames, c.crop, c.crop, m).unwrap(),
            SpatialDescriptors::new(c.frames, c.descriptor_dim, s).unwrap(),
        )
    }

    #[test]
    fn default_shapes_and_ranges() {
        let c = PredictorConfig::default();
        let model = PredictorModel::<f32>::init(&c, 1).unwrap();
        let (m, s) = random_inputs(&c, 2);
        let (out, cache) = model.forward_cached(&m, &s, Mode::Inference).unwrap();
        assert_eq!(out.logits.len(), 5);
        assert_eq!(out.attention.len(), 8);
        assert_eq!(out.gate.len(), 128);
        assert_eq!(cache.z.len(), 8 * 64);
        assert_eq!(cache.resampled.len(), 8 * 384);
        let sum: f32 = out.attention.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(out.attention.iter().all(|&a| a >= 0.0));
        assert!(out.gate.iter().all(|&g| g > 0.0 && g < 1.0));
        assert!(out.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_input_zero_bias_hand_trace() {
        // With all-zero inputs and zero biases every conv pre-activation is 0,
        // so GELU(0) = 0, Z = 0, scores are equal and attention is uniform.
        // Both LayerNorm inputs are constant vectors, so their outputs are the
        // shifts (0); the fc layers then output their biases (0), GELU gives 0,
        // the gate is sigmoid(0) = 1/2, the fused vector is 0 and the logits
        // equal the classifier bias (0).
        let c = PredictorConfig::default();
        let model = PredictorModel::<f64>::init(&c, 3).unwrap();
        let m = MotionTensor::zeros(c.frames, c.crop, c.crop);
        let s = SpatialDescriptors::new(c.frames, c.descriptor_dim, vec![0.0; c.descriptor_len()]).unwrap();
        let out = model.forward(&m, &s, Mode::Inference).unwrap();
        assert!(out.attention.iter().all(|&a| (a - 0.125).abs() < 1e-15));
        assert!(out.gate.iter().all(|&g| g == 0.5));
        assert!(out.logits.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn inference_is_pure_and_training_masks_follow_seed() {
        let c = PredictorConfig::tiny();
        let model = PredictorModel::<f64>::init(&c, 5).unwrap();
        let (m, s) = random_inputs(&c, 6);
        let a = model.forward(&m, &s, Mode::Inference).unwrap();
        assert_eq!(a, model.forward(&m, &s, Mode::Inference).unwrap());
        let t1 = model.forward(&m, &s, Mode::Training { dropout_seed: 9 }).unwrap();
        let t2 = model.forward(&m, &s, Mode::Training { dropout_seed: 9 }).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(model.predict(&m, &s).unwrap(), model.predict(&m, &s).unwrap());
    }

    #[test]
    fn dropout_masks_are_inverted_and_seeded() {
        let [a, b] = dropout_masks::<f64>(11, 10_000, 0.3);
        let keep = 1.0 / 0.7;
        assert!(a.iter().chain(&b).all(|&v| v == 0.0 || v == keep));
        let dropped = a.iter().filter(|&&v| v == 0.0).count() as f64 / 10_000.0;
        assert!((dropped - 0.3).abs() < 0.02);
        assert_eq!(dropout_masks::<f64>(11, 10_000, 0.3), [a, b]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let c = PredictorConfig::tiny();
        let model = PredictorModel::<f64>::init(&c, 5).unwrap();
        let m = MotionTensor::zeros(c.frames, c.crop + 1, c.crop + 1);
        let s = SpatialDescriptors::new(c.frames, c.descriptor_dim, vec![0.0; c.descriptor_len()]).unwrap();
        assert!(matches!(model.forward(&m, &s, Mode::Inference), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradient_scales_with_loss() {
        let c = PredictorConfig::tiny();
        let model = PredictorModel::<f64>::init(&c, 5).unwrap();
        let (m, s) = random_inputs(&c, 7);
        let (_, cache) = model.forward_cached(&m, &s, Mode::Training { dropout_seed: 1 }).unwrap();
        let d = [0.3, -0.1, 0.2, -0.25, -0.15];
        let mut g1 = model.params.zeros_like();
        model.backward(&cache, &d, &mut g1);
        let mut g2 = model.params.zeros_like();
        let d2: Vec<f64> = d.iter().map(|v| v * 2.0).collect();
        model.backward(&cache, &d2, &mut g2);
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }
}
