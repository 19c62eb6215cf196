//! No-reference resolution predictor.
//!
//! ```text
//! M [2,T,H,W] -> 3 x (Conv3D 3x3x3 + GELU) -> spatial mean -> Linear c3->Dm = Z [T',Dm]
//! attention: s_t = w.Z_t + b, alpha = softmax(s), z = sum alpha_t Z_t
//! h_motion  = GELU(Linear(LayerNorm(z)))                       Dm -> H
//! S [T,Ds] -> adaptive pool to T' -> s = sum alpha_t S'_t
//! h_spatial = GELU(Linear(LayerNorm(s)))                       Ds -> H
//! g = sigmoid(W [h_motion || h_spatial]),  h = h_motion + g * h_spatial
//! logits = Linear(Dropout(GELU(Linear(Dropout(LayerNorm(h))))))    H -> K
//! ```
//!
//! The network is generic over [`Real`] so the same code trains in `f32`
//! and runs gradient checks in `f64`.

mod io;
pub mod layers;
mod network;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{DESCRIPTOR_DIM, MOTION_CHANNELS};
use crate::manifest::CLIP_FRAMES;
use layers::{ConvGeom, KERNEL_VOLUME};

pub use io::{load_checkpoint, load_model, save_checkpoint, save_model, ModelHeader};
pub use network::{Cache, ForwardOutput, Mode};

/// Scalar type the network runs in.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    fn erf(self) -> Self;

    /// `c = a * b` (`c += a * b` when `accumulate`) with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        c: &mut [Self],
        accumulate: bool,
    );
}

macro_rules! impl_real {
    ($t:ty, $erf:path, $gemm:path) => {
        impl Real for $t {
            fn erf(self) -> Self {
                $erf(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(m > 0 && n > 0);
                if k > 0 {
                    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "lhs out of bounds");
                    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "rhs out of bounds");
                }
                assert!(m * n <= c.len(), "output out of bounds");
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every index the kernel touches was bounds-checked above,
                // and `c` does not alias `a` or `b` (distinct borrows).
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_real!(f32, libm::erff, matrixmultiply::sgemm);
impl_real!(f64, libm::erf, matrixmultiply::dgemm);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub conv_channels: [usize; 3],
    pub conv_strides_temporal: [usize; 3],
    pub conv_strides_spatial: [usize; 3],
    /// Motion embedding width `D_m`.
    pub motion_dim: usize,
    /// Spatial descriptor width `D_s`.
    pub descriptor_dim: usize,
    /// Hidden width `H`.
    pub hidden_dim: usize,
    /// Number of ladder levels `K`.
    pub classes: usize,
    pub dropout: f64,
    /// Frames per clip `T`.
    pub frames: usize,
    /// Square crop side of the motion input.
    pub crop: usize,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            conv_channels: [8, 16, 32],
            conv_strides_temporal: [2, 2, 1],
            conv_strides_spatial: [2, 2, 1],
            motion_dim: 64,
            descriptor_dim: DESCRIPTOR_DIM,
            hidden_dim: 128,
            classes: 5,
            dropout: 0.3,
            frames: CLIP_FRAMES,
            crop: 70,
        }
    }
}

impl PredictorConfig {
    /// Small network used for finite-difference gradient checks.
    pub fn tiny() -> Self {
        PredictorConfig {
            conv_channels: [2, 2, 2],
            motion_dim: 4,
            hidden_dim: 8,
            frames: 7,
            crop: 14,
            ..PredictorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = self.conv_channels.iter().all(|&c| c > 0)
            && self.conv_strides_temporal.iter().all(|&s| s > 0)
            && self.conv_strides_spatial.iter().all(|&s| s > 0)
            && self.motion_dim > 0
            && self.descriptor_dim > 0
            && self.hidden_dim > 0
            && self.classes > 0
            && self.frames > 0
            && self.crop > 0;
        if !positive {
            return Err(Error::Config(format!("predictor sizes must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn conv_geometry(&self) -> [ConvGeom; 3] {
        let mut input = [self.frames, self.crop, self.crop];
        let mut in_channels = MOTION_CHANNELS;
        std::array::from_fn(|i| {
            let g = ConvGeom::new(
                in_channels,
                self.conv_channels[i],
                input,
                self.conv_strides_temporal[i],
                self.conv_strides_spatial[i],
            );
            input = g.output;
            in_channels = g.out_channels;
            g
        })
    }

    /// Attention steps `T'` after the temporal strides.
    pub fn attention_steps(&self) -> usize {
        self.conv_geometry()[2].output[0]
    }

    pub fn motion_len(&self) -> usize {
        MOTION_CHANNELS * self.frames * self.crop * self.crop
    }

    pub fn descriptor_len(&self) -> usize {
        self.frames * self.descriptor_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Conv/linear weights; the only kind that receives weight decay.
    Weight,
    Bias,
    /// LayerNorm scale and shift.
    Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub dims: Vec<usize>,
    pub kind: ParamKind,
    pub data: Vec<F>,
}

impl<F: Real> Param<F> {
    fn filled(dims: Vec<usize>, kind: ParamKind, value: F) -> Self {
        let n = dims.iter().product();
        Param {
            dims,
            kind,
            data: vec![value; n],
        }
    }
}

impl<F> Param<F> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

macro_rules! parameter_set {
    ($($field:ident),* $(,)?) => {
        /// Every trainable tensor of the predictor. Also used for gradients
        /// and optimizer moments, which mirror the parameter shapes.
        #[derive(Debug, Clone, PartialEq)]
        pub struct Parameters<F> {
            $(pub $field: Param<F>,)*
        }

        impl<F> Parameters<F> {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn tensors(&self) -> Vec<&Param<F>> {
                vec![$(&self.$field),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<&mut Param<F>> {
                vec![$(&mut self.$field),*]
            }
        }
    };
}

parameter_set!(
    conv1_weight,
    conv1_bias,
    conv2_weight,
    conv2_bias,
    conv3_weight,
    conv3_bias,
    motion_proj_weight,
    motion_proj_bias,
    attention_weight,
    attention_bias,
    motion_norm_scale,
    motion_norm_shift,
    motion_fc_weight,
    motion_fc_bias,
    spatial_norm_scale,
    spatial_norm_shift,
    spatial_fc_weight,
    spatial_fc_bias,
    gate_weight,
    gate_bias,
    head_norm_scale,
    head_norm_shift,
    head_fc_weight,
    head_fc_bias,
    classifier_weight,
    classifier_bias,
);

impl<F: Real> Parameters<F> {
    /// Zero-filled tensors shaped for `config`; LayerNorm scales start at 1.
    pub fn shaped(config: &PredictorConfig) -> Self {
        use ParamKind::*;
        let z = F::zero();
        let [c1, c2, c3] = config.conv_channels;
        let (dm, ds, h, k) = (config.motion_dim, config.descriptor_dim, config.hidden_dim, config.classes);
        let conv = |cout: usize, cin: usize| Param::filled(vec![cout, cin, 3, 3, 3], Weight, z);
        Parameters {
            conv1_weight: conv(c1, MOTION_CHANNELS),
            conv1_bias: Param::filled(vec![c1], Bias, z),
            conv2_weight: conv(c2, c1),
            conv2_bias: Param::filled(vec![c2], Bias, z),
            conv3_weight: conv(c3, c2),
            conv3_bias: Param::filled(vec![c3], Bias, z),
            motion_proj_weight: Param::filled(vec![dm, c3], Weight, z),
            motion_proj_bias: Param::filled(vec![dm], Bias, z),
            attention_weight: Param::filled(vec![1, dm], Weight, z),
            attention_bias: Param::filled(vec![1], Bias, z),
            motion_norm_scale: Param::filled(vec![dm], Norm, F::one()),
            motion_norm_shift: Param::filled(vec![dm], Norm, z),
            motion_fc_weight: Param::filled(vec![h, dm], Weight, z),
            motion_fc_bias: Param::filled(vec![h], Bias, z),
            spatial_norm_scale: Param::filled(vec![ds], Norm, F::one()),
            spatial_norm_shift: Param::filled(vec![ds], Norm, z),
            spatial_fc_weight: Param::filled(vec![h, ds], Weight, z),
            spatial_fc_bias: Param::filled(vec![h], Bias, z),
            gate_weight: Param::filled(vec![h, 2 * h], Weight, z),
            gate_bias: Param::filled(vec![h], Bias, z),
            head_norm_scale: Param::filled(vec![h], Norm, F::one()),
            head_norm_shift: Param::filled(vec![h], Norm, z),
            head_fc_weight: Param::filled(vec![h, h], Weight, z),
            head_fc_bias: Param::filled(vec![h], Bias, z),
            classifier_weight: Param::filled(vec![k, h], Weight, z),
            classifier_bias: Param::filled(vec![k], Bias, z),
        }
    }

    /// Same shapes, every element zero (gradient / moment buffers).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for p in out.tensors_mut() {
            p.data.fill(F::zero());
        }
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|p| p.len()).sum()
    }

    /// `self += other * scale`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Parameters<F>, scale: F) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, &s) in dst.data.iter_mut().zip(&src.data) {
                *d += s * scale;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for p in self.tensors_mut() {
            for v in &mut p.data {
                *v *= factor;
            }
        }
    }

    pub fn cast<G: Real>(&self) -> Parameters<G> {
        let mut out = Parameters::<G>::shaped_like(self);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, &s) in dst.data.iter_mut().zip(&src.data) {
                *d = G::from(s).expect("finite parameter");
            }
        }
        out
    }
}

impl<G: Real> Parameters<G> {
    fn shaped_like<F>(other: &Parameters<F>) -> Self {
        // Rebuild from dims so the field order is shared with `shaped`.
        let mut tensors = other.tensors().into_iter();
        let mut next = || {
            let p = tensors.next().expect("same field count");
            Param::filled(p.dims.clone(), p.kind, G::zero())
        };
        Parameters {
            conv1_weight: next(),
            conv1_bias: next(),
            conv2_weight: next(),
            conv2_bias: next(),
            conv3_weight: next(),
            conv3_bias: next(),
            motion_proj_weight: next(),
            motion_proj_bias: next(),
            attention_weight: next(),
            attention_bias: next(),
            motion_norm_scale: next(),
            motion_norm_shift: next(),
            motion_fc_weight: next(),
            motion_fc_bias: next(),
            spatial_norm_scale: next(),
            spatial_norm_shift: next(),
            spatial_fc_weight: next(),
            spatial_fc_bias: next(),
            gate_weight: next(),
            gate_bias: next(),
            head_norm_scale: next(),
            head_norm_shift: next(),
            head_fc_weight: next(),
            head_fc_bias: next(),
            classifier_weight: next(),
            classifier_bias: next(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel<F = f32> {
    pub config: PredictorConfig,
    pub params: Parameters<F>,
}

/// One row of the layer-by-layer parameter breakdown.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub layer: &'static str,
    pub params: usize,
}

impl<F: Real> PredictorModel<F> {
    /// Weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)), biases 0, LayerNorm (1, 0).
    pub fn init(config: &PredictorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Parameters::<F>::shaped(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in params.tensors_mut() {
            if p.kind != ParamKind::Weight {
                continue;
            }
            let fan_in: usize = p.dims[1..].iter().product();
            let bound = (1.0 / fan_in as f64).sqrt();
            for v in &mut p.data {
                *v = F::from_f64(rng.random_range(-bound..bound)).expect("finite");
            }
        }
        Ok(PredictorModel {
            config: config.clone(),
            params,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<G: Real>(&self) -> PredictorModel<G> {
        PredictorModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Parameter counts grouped by layer, in forward order.
    pub fn describe(&self) -> Vec<LayerCount> {
        let p = &self.params;
        let n = |ps: &[&Param<F>]| ps.iter().map(|x| x.len()).sum();
        vec![
            LayerCount { layer: "conv1", params: n(&[&p.conv1_weight, &p.conv1_bias]) },
            LayerCount { layer: "conv2", params: n(&[&p.conv2_weight, &p.conv2_bias]) },
            LayerCount { layer: "conv3", params: n(&[&p.conv3_weight, &p.conv3_bias]) },
            LayerCount { layer: "motion_proj", params: n(&[&p.motion_proj_weight, &p.motion_proj_bias]) },
            LayerCount { layer: "attention", params: n(&[&p.attention_weight, &p.attention_bias]) },
            LayerCount { layer: "motion_norm", params: n(&[&p.motion_norm_scale, &p.motion_norm_shift]) },
            LayerCount { layer: "motion_fc", params: n(&[&p.motion_fc_weight, &p.motion_fc_bias]) },
            LayerCount { layer: "spatial_norm", params: n(&[&p.spatial_norm_scale, &p.spatial_norm_shift]) },
            LayerCount { layer: "spatial_fc", params: n(&[&p.spatial_fc_weight, &p.spatial_fc_bias]) },
            LayerCount { layer: "gate", params: n(&[&p.gate_weight, &p.gate_bias]) },
            LayerCount { layer: "head_norm", params: n(&[&p.head_norm_scale, &p.head_norm_shift]) },
            LayerCount { layer: "head_fc", params: n(&[&p.head_fc_weight, &p.head_fc_bias]) },
            LayerCount { layer: "classifier", params: n(&[&p.classifier_weight, &p.classifier_bias]) },
        ]
    }
}

/// Argmax with ties resolved toward the lower (cheaper) index.
pub fn argmax_low<F: PartialOrd + Copy>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

// Patch rows per output channel, for documentation of conv weight layout.
const _: () = assert!(KERNEL_VOLUME == 27);

#[cfg(test)]
mod tests {
    use super::*;

    /// Layer-by-layer count written out independently of `Parameters::shaped`.
    fn closed_form(c: &PredictorConfig) -> usize {
        let [c1, c2, c3] = c.conv_channels;
        let conv = |cin: usize, cout: usize| cout * cin * 27 + cout;
        let lin = |i: usize, o: usize| i * o + o;
        let (dm, ds, h, k) = (c.motion_dim, c.descriptor_dim, c.hidden_dim, c.classes);
        conv(2, c1) + conv(c1, c2) + conv(c2, c3)
            + lin(c3, dm)
            + lin(dm, 1)
            + 2 * dm + lin(dm, h)
            + 2 * ds + lin(ds, h)
            + lin(2 * h, h)
            + 2 * h + lin(h, h) + lin(h, k)
    }

    #[test]
    fn default_parameter_budget() {
        let m = PredictorModel::<f32>::init(&PredictorConfig::default(), 0).unwrap();
        assert_eq!(m.parameter_count(), closed_form(&m.config));
        assert_eq!(m.parameter_count(), 128_750);
        assert!((110_000..=140_000).contains(&m.parameter_count()));
        assert_eq!(m.describe().iter().map(|l| l.params).sum::<usize>(), 128_750);
    }

    #[test]
    fn tiny_parameter_count() {
        let c = PredictorConfig::tiny();
        let m = PredictorModel::<f64>::init(&c, 0).unwrap();
        assert_eq!(m.parameter_count(), closed_form(&c));
    }

    #[test]
    fn stride_schedule_gives_eight_steps() {
        let c = PredictorConfig::default();
        let g = c.conv_geometry();
        assert_eq!(g[0].output, [16, 35, 35]);
        assert_eq!(g[1].output, [8, 18, 18]);
        assert_eq!(g[2].output, [8, 18, 18]);
        assert_eq!(c.attention_steps(), 8);
        assert_eq!(PredictorConfig::tiny().attention_steps(), 2);
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let c = PredictorConfig::default();
        let a = PredictorModel::<f32>::init(&c, 42).unwrap();
        let b = PredictorModel::<f32>::init(&c, 42).unwrap();
        assert_eq!(a, b);
        let d = PredictorModel::<f32>::init(&c, 43).unwrap();
        assert_ne!(a.params, d.params);
        let bound = (1.0f32 / 54.0).sqrt();
        assert!(a.params.conv1_weight.data.iter().all(|w| w.abs() <= bound));
        assert!(a.params.conv1_bias.data.iter().all(|&b| b == 0.0));
        assert!(a.params.head_norm_scale.data.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_low(&[0.1, 0.9, 0.3, 0.2, 0.0]), 1);
        assert_eq!(argmax_low(&[0.5; 5]), 0);
        assert_eq!(argmax_low(&[0.0, 1.0, 1.0]), 1);
    }

    #[test]
    fn rejects_bad_config() {
        let c = PredictorConfig { dropout: 1.0, ..PredictorConfig::default() };
        assert!(PredictorModel::<f32>::init(&c, 0).is_err());
    }
}
