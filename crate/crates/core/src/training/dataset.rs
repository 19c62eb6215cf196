//! Sources of labeled clips for training and prediction.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::{center_crop, MotionTensor, SpatialDescriptors, MOTION_CHANNELS};
use crate::manifest::{resolve, ClipManifestEntry, DatasetManifest};
use crate::tensor::TensorBlob;

/// Random-access clip collection. Implementations must be cheap to share
/// across threads; `load` may hit the filesystem.
pub trait ClipDataset: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scene identifier, used to split train/validation without content leakage.
    fn scene(&self, index: usize) -> &str;

    fn clip_id(&self, index: usize) -> &str;

    fn label(&self, index: usize) -> Option<usize>;

    /// Motion tensor cropped to `crop` and the matching descriptors.
    fn load(&self, index: usize, crop: usize) -> Result<(MotionTensor, SpatialDescriptors)>;
}

/// Clips listed in a manifest; tensors are read lazily from disk.
#[derive(Debug, Clone)]
pub struct ManifestDataset {
    pub manifest: DatasetManifest,
    root: PathBuf,
}

impl ManifestDataset {
    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(path)?;
        Ok(Self::new(manifest, path))
    }

    /// `manifest_path` anchors the relative blob paths.
    pub fn new(manifest: DatasetManifest, manifest_path: &Path) -> Self {
        ManifestDataset {
            manifest,
            root: manifest_path.to_path_buf(),
        }
    }

    pub fn entry(&self, index: usize) -> &ClipManifestEntry {
        &self.manifest.clips[index]
    }
}

/// Crops a full-frame motion tensor to the square network input.
pub fn crop_motion(motion: MotionTensor, crop: usize) -> Result<MotionTensor> {
    let [channels, frames, height, width] = motion.dims();
    if height == crop && width == crop {
        return Ok(motion);
    }
    let mut data = Vec::with_capacity(channels * frames * crop * crop);
    let plane = height * width;
    // Treat each (channel, frame) plane as a one-channel frame.
    for chunk in motion.data().chunks_exact(plane) {
        data.extend(center_crop(chunk, [1, height, width], crop)?);
    }
    debug_assert_eq!(channels, MOTION_CHANNELS);
    MotionTensor::new(frames, crop, crop, data)
}

impl ClipDataset for ManifestDataset {
    fn len(&self) -> usize {
        self.manifest.clips.len()
    }

    fn scene(&self, index: usize) -> &str {
        &self.manifest.clips[index].scene
    }

    fn clip_id(&self, index: usize) -> &str {
        &self.manifest.clips[index].clip_id
    }

    fn label(&self, index: usize) -> Option<usize> {
        self.manifest.clips[index].label
    }

    fn load(&self, index: usize, crop: usize) -> Result<(MotionTensor, SpatialDescriptors)> {
        let entry = &self.manifest.clips[index];
        let motion = MotionTensor::load(resolve(&self.root, &entry.motion_path))?;
        if motion.frames() != entry.frame_count {
            return Err(Error::Shape {
                what: format!("motion frames of {}", entry.clip_id),
                expected: vec![entry.frame_count],
                actual: vec![motion.frames()],
            });
        }
        let descriptors = SpatialDescriptors::from_blob(TensorBlob::load(resolve(&self.root, &entry.descriptor_path))?)?;
        Ok((crop_motion(motion, crop)?, descriptors))
    }
}

/// A fully materialized clip.
#[derive(Debug, Clone)]
pub struct MemoryClip {
    pub clip_id: String,
    pub scene: String,
    pub label: Option<usize>,
    pub motion: MotionTensor,
    pub descriptors: SpatialDescriptors,
}

/// Clips held in memory (tests and small experiments).
#[derive(Debug, Clone, Default)]
pub struct MemoryDataset {
    pub clips: Vec<MemoryClip>,
}

impl ClipDataset for MemoryDataset {
    fn len(&self) -> usize {
        self.clips.len()
    }

    fn scene(&self, index: usize) -> &str {
        &self.clips[index].scene
    }

    fn clip_id(&self, index: usize) -> &str {
        &self.clips[index].clip_id
    }

    fn label(&self, index: usize) -> Option<usize> {
        self.clips[index].label
    }

    fn load(&self, index: usize, crop: usize) -> Result<(MotionTensor, SpatialDescriptors)> {
        let clip = &self.clips[index];
        Ok((crop_motion(clip.motion.clone(), crop)?, clip.descriptors.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_motion_takes_center_window_per_plane() {
        // 2 channels x 1 frame x 4x4, values encode (channel, row, col).
        let data: Vec<f32> = (0..2 * 16).map(|i| i as f32).collect();
        let m = MotionTensor::new(1, 4, 4, data).unwrap();
        let c = crop_motion(m, 2).unwrap();
        assert_eq!(c.dims(), [2, 1, 2, 2]);
        assert_eq!(c.data(), &[5.0, 6.0, 9.0, 10.0, 21.0, 22.0, 25.0, 26.0]);
    }

    #[test]
    fn crop_motion_rejects_small_frames() {
        let m = MotionTensor::zeros(1, 4, 4);
        assert!(crop_motion(m, 5).is_err());
    }
}
