//! Predictor inputs: motion tensors, per-frame spatial descriptors, center
//! crops and temporal resampling.
//!
//! # Builtin descriptor layout
//!
//! The builtin statistical provider maps one luma frame (values in `[0, 1]`)
//! to a 384-vector. Energies are compressed as `ln(1 + E / 1e-3)`: a flat
//! frame yields exact zeros, energies below the reference (about a 3% RMS
//! luma contrast) stay nearly linear and larger ones are log-compressed, so
//! contrast changes the shape of the energy block rather than only shifting
//! it (a uniform shift would be removed by the downstream LayerNorm).
//!
//! | index        | feature                                                     |
//! |--------------|-------------------------------------------------------------|
//! | 0            | luma mean                                                   |
//! | 1            | log luma variance                                           |
//! | 2..34        | log gradient energy, 4 pyramid scales x 8 orientation bins  |
//! | 34..38       | log Laplacian energy per pyramid scale                      |
//! | 38..38+H     | per-row luma standard deviation                             |
//! | 38+H..38+H+W | per-column luma standard deviation                          |
//! | rest         | zero padding (truncated if the crop is very large)          |
//!
//! Pyramid scales are successive 2x2 box averages of the frame. Gradients are
//! central differences on interior pixels; orientation is folded into
//! `[0, pi)` and split into 8 equal bins. Each energy is averaged over the
//! pixel count of its scale.

use std::f64::consts::PI;
use std::path::Path;
use std::str::FromStr;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::manifest::CLIP_FRAMES;
use crate::tensor::TensorBlob;

pub const MOTION_CHANNELS: usize = 2;
pub const CROP_SIZE: usize = 70;
pub const DESCRIPTOR_DIM: usize = 384;

const ENERGY_FLOOR: f64 = 1e-3;
const SCALES: usize = 4;
const ORIENTATIONS: usize = 8;
const GRAD_OFFSET: usize = 2;
const LAPLACE_OFFSET: usize = GRAD_OFFSET + SCALES * ORIENTATIONS;
const PROFILE_OFFSET: usize = LAPLACE_OFFSET + SCALES;

/// Per-pixel 2-D motion vectors, layout `[2, T, H, W]`.
///
/// Units are pixels of displacement per frame at native 1080p; channel 0 is
/// dx (rightward positive), channel 1 is dy (downward positive).
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTensor {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl MotionTensor {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let dims = vec![MOTION_CHANNELS, frames, height, width];
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::DimensionMismatch {
                expected: dims.iter().product(),
                dims,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("motion tensor"));
        }
        Ok(MotionTensor {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        MotionTensor {
            frames,
            height,
            width,
            data: vec![0.0; MOTION_CHANNELS * frames * height * width],
        }
    }

    pub fn from_blob(blob: TensorBlob) -> Result<Self> {
        let dims = blob.dims().to_vec();
        if dims.len() != 4 || dims[0] != MOTION_CHANNELS {
            return Err(Error::Shape {
                what: "motion tensor".into(),
                expected: vec![MOTION_CHANNELS, CLIP_FRAMES, CROP_SIZE, CROP_SIZE],
                actual: dims,
            });
        }
        let (_, data) = blob.into_parts();
        MotionTensor::new(dims[1], dims[2], dims[3], data)
    }

    pub fn to_blob(&self) -> TensorBlob {
        TensorBlob::new(self.dims().to_vec(), self.data.clone()).expect("consistent dims")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        MotionTensor::from_blob(TensorBlob::load(path)?)
    }

    pub fn dims(&self) -> [usize; 4] {
        [MOTION_CHANNELS, self.frames, self.height, self.width]
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Fails unless the tensor is exactly `[2, frames, crop, crop]`.
    pub fn expect_shape(&self, frames: usize, crop: usize) -> Result<()> {
        let want = [MOTION_CHANNELS, frames, crop, crop];
        if self.dims() != want {
            return Err(Error::Shape {
                what: "motion tensor".into(),
                expected: want.to_vec(),
                actual: self.dims().to_vec(),
            });
        }
        Ok(())
    }

    /// Mean of per-pixel vector magnitudes.
    pub fn mean_magnitude(&self) -> f64 {
        let plane = self.frames * self.height * self.width;
        if plane == 0 {
            return 0.0;
        }
        let (dx, dy) = self.data.split_at(plane);
        dx.iter()
            .zip(dy)
            .map(|(&x, &y)| f64::from(x).hypot(f64::from(y)))
            .sum::<f64>()
            / plane as f64
    }
}

/// One descriptor row per frame, layout `[T, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDescriptors {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl SpatialDescriptors {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::DimensionMismatch {
                dims: vec![frames, dim],
                expected: frames * dim,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spatial descriptors"));
        }
        Ok(SpatialDescriptors { frames, dim, data })
    }

    pub fn from_blob(blob: TensorBlob) -> Result<Self> {
        let dims = blob.dims().to_vec();
        if dims.len() != 2 {
            return Err(Error::Shape {
                what: "spatial descriptors".into(),
                expected: vec![CLIP_FRAMES, DESCRIPTOR_DIM],
                actual: dims,
            });
        }
        let (_, data) = blob.into_parts();
        SpatialDescriptors::new(dims[0], dims[1], data)
    }

    pub fn to_blob(&self) -> TensorBlob {
        TensorBlob::new(vec![self.frames, self.dim], self.data.clone()).expect("consistent dims")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn expect_shape(&self, frames: usize, dim: usize) -> Result<()> {
        if (self.frames, self.dim) != (frames, dim) {
            return Err(Error::Shape {
                what: "spatial descriptors".into(),
                expected: vec![frames, dim],
                actual: vec![self.frames, self.dim],
            });
        }
        Ok(())
    }
}

/// Center crop of a `[C, H, W]` frame. No interpolation: output values are
/// copied from the window with top-left `((H - size) / 2, (W - size) / 2)`.
pub fn center_crop<T: Copy>(frame: &[T], dims: [usize; 3], size: usize) -> Result<Vec<T>> {
    let [channels, height, width] = dims;
    if frame.len() != channels * height * width {
        return Err(Error::DimensionMismatch {
            dims: dims.to_vec(),
            expected: channels * height * width,
            actual: frame.len(),
        });
    }
    if height < size || width < size {
        return Err(Error::CropTooLarge { size, height, width });
    }
    let (top, left) = crop_origin(height, width, size);
    let mut out = Vec::with_capacity(channels * size * size);
    for c in 0..channels {
        for y in top..top + size {
            let start = (c * height + y) * width + left;
            out.extend_from_slice(&frame[start..start + size]);
        }
    }
    Ok(out)
}

/// Top-left corner `(row, col)` of a centered `size` window.
pub fn crop_origin(height: usize, width: usize, size: usize) -> (usize, usize) {
    ((height - size) / 2, (width - size) / 2)
}

/// Input row range `[floor(i*T/T'), ceil((i+1)*T/T'))` pooled into output row `i`.
pub fn pool_bin(i: usize, input_len: usize, output_len: usize) -> (usize, usize) {
    let start = (i * input_len) / output_len;
    let end = ((i + 1) * input_len).div_ceil(output_len);
    (start, end)
}

/// 1-D adaptive average pooling over the rows of a `[T, D]` matrix.
pub fn temporal_resample<F: Float>(rows: &[F], input_len: usize, dim: usize, output_len: usize) -> Vec<F> {
    assert!(input_len >= 1 && output_len >= 1, "empty sequence");
    assert_eq!(rows.len(), input_len * dim, "row data does not match [T, D]");
    let mut out = vec![F::zero(); output_len * dim];
    for i in 0..output_len {
        let (start, end) = pool_bin(i, input_len, output_len);
        let scale = F::one() / F::from(end - start).expect("small count");
        let dst = &mut out[i * dim..(i + 1) * dim];
        for t in start..end {
            for (d, &v) in dst.iter_mut().zip(&rows[t * dim..(t + 1) * dim]) {
                *d = *d + v;
            }
        }
        for d in dst.iter_mut() {
            *d = *d * scale;
        }
    }
    out
}

/// A single-channel luma frame, row-major `[H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaFrame {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl LumaFrame {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::DimensionMismatch {
                dims: vec![height, width],
                expected: height * width,
                actual: pixels.len(),
            });
        }
        Ok(LumaFrame {
            height,
            width,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        LumaFrame {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorProvider {
    /// Load a `[T, 384]` tensor blob verbatim.
    Precomputed,
    /// Deterministic handcrafted statistics, see the module docs.
    BuiltinStatistical,
}

impl FromStr for DescriptorProvider {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "precomputed" => Ok(DescriptorProvider::Precomputed),
            "builtin" | "builtin-statistical" => Ok(DescriptorProvider::BuiltinStatistical),
            other => Err(Error::UnknownProvider(other.to_string())),
        }
    }
}

pub enum DescriptorSource<'a> {
    File(&'a Path),
    Frames(&'a [LumaFrame]),
}

pub fn provide_descriptors(
    source: DescriptorSource<'_>,
    provider: DescriptorProvider,
    frames: usize,
) -> Result<SpatialDescriptors> {
    let descriptors = match (source, provider) {
        (DescriptorSource::File(path), DescriptorProvider::Precomputed) => {
            SpatialDescriptors::from_blob(TensorBlob::load(path)?)?
        }
        (DescriptorSource::Frames(seq), DescriptorProvider::BuiltinStatistical) => builtin_descriptors(seq),
        (DescriptorSource::File(_), p) | (DescriptorSource::Frames(_), p) => {
            return Err(Error::Config(format!("provider {p:?} cannot use this input")))
        }
    };
    descriptors.expect_shape(frames, DESCRIPTOR_DIM)?;
    Ok(descriptors)
}

pub fn builtin_descriptors(frames: &[LumaFrame]) -> SpatialDescriptors {
    let mut data = Vec::with_capacity(frames.len() * DESCRIPTOR_DIM);
    for frame in frames {
        data.extend(frame_descriptor(frame).iter().map(|&v| v as f32));
    }
    SpatialDescriptors::new(frames.len(), DESCRIPTOR_DIM, data).expect("finite descriptors")
}

fn log_energy(e: f64) -> f64 {
    (e / ENERGY_FLOOR).ln_1p()
}

pub fn frame_descriptor(frame: &LumaFrame) -> [f64; DESCRIPTOR_DIM] {
    let mut out = [0.0; DESCRIPTOR_DIM];
    let (h, w) = (frame.height, frame.width);
    let pixels: Vec<f64> = frame.pixels.iter().map(|&p| f64::from(p)).collect();
    let n = (h * w).max(1) as f64;

    let mean = pixels.iter().sum::<f64>() / n;
    let var = pixels.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
    out[0] = mean;
    out[1] = log_energy(var);

    let mut level = pixels;
    let (mut lh, mut lw) = (h, w);
    for scale in 0..SCALES {
        let count = (lh * lw).max(1) as f64;
        let mut bins = [0.0f64; ORIENTATIONS];
        let mut laplace = 0.0;
        for y in 1..lh.saturating_sub(1) {
            for x in 1..lw.saturating_sub(1) {
                let at = |yy: usize, xx: usize| level[yy * lw + xx];
                let gx = 0.5 * (at(y, x + 1) - at(y, x - 1));
                let gy = 0.5 * (at(y + 1, x) - at(y - 1, x));
                let energy = gx * gx + gy * gy;
                if energy > 0.0 {
                    let theta = gy.atan2(gx).rem_euclid(PI);
                    let bin = ((theta / (PI / ORIENTATIONS as f64)) as usize).min(ORIENTATIONS - 1);
                    bins[bin] += energy;
                }
                let lap = at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
                laplace += lap * lap;
            }
        }
        for (o, e) in bins.iter().enumerate() {
            out[GRAD_OFFSET + scale * ORIENTATIONS + o] = log_energy(e / count);
        }
        out[LAPLACE_OFFSET + scale] = log_energy(laplace / count);
        if scale + 1 < SCALES {
            let (nh, nw) = (lh / 2, lw / 2);
            let mut next = vec![0.0; nh * nw];
            for y in 0..nh {
                for x in 0..nw {
                    next[y * nw + x] = 0.25
                        * (level[2 * y * lw + 2 * x]
                            + level[2 * y * lw + 2 * x + 1]
                            + level[(2 * y + 1) * lw + 2 * x]
                            + level[(2 * y + 1) * lw + 2 * x + 1]);
                }
            }
            level = next;
            lh = nh;
            lw = nw;
        }
    }

    let rows = (0..h).map(|y| std_dev(frame.pixels[y * w..(y + 1) * w].iter().copied()));
    let cols = (0..w).map(|x| std_dev((0..h).map(|y| frame.pixels[y * w + x])));
    for (slot, v) in out[PROFILE_OFFSET..].iter_mut().zip(rows.chain(cols)) {
        *slot = v;
    }
    out
}

fn std_dev(values: impl Iterator<Item = f32> + Clone) -> f64 {
    let (sum, count) = values.clone().fold((0.0, 0usize), |(s, c), v| (s + f64::from(v), c + 1));
    if count == 0 {
        return 0.0;
    }
    let mean = sum / count as f64;
    let var = values.map(|v| (f64::from(v) - mean).powi(2)).sum::<f64>() / count as f64;
    var.sqrt()
}
