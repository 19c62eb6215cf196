//! Dataset manifest: the clip list with relative paths to tensor blobs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::ResolutionLadder;

/// Frames per clip: one 250 ms window at 120 Hz.
pub const CLIP_FRAMES: usize = 31;
/// Nominal clip duration used for timestamps and decision cadence.
pub const CLIP_MS: u64 = 250;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifestEntry {
    pub clip_id: String,
    pub scene: String,
    pub setting: String,
    pub frame_count: usize,
    /// Temporal position of the clip inside its source video; clips never overlap.
    #[serde(default)]
    pub clip_index: usize,
    pub motion_path: PathBuf,
    pub descriptor_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

impl ClipManifestEntry {
    pub fn start_ms(&self) -> u64 {
        self.clip_index as u64 * CLIP_MS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub frame_rate: f64,
    pub ladder: Vec<crate::ladder::ResolutionLevel>,
    pub clips: Vec<ClipManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn new(ladder: &ResolutionLadder, clips: Vec<ClipManifestEntry>) -> Self {
        DatasetManifest {
            frame_rate: ladder.frame_rate,
            ladder: ladder.levels.clone(),
            clips,
            provenance: None,
        }
    }

    pub fn ladder(&self) -> Result<ResolutionLadder> {
        ResolutionLadder::new(self.ladder.clone(), self.frame_rate)
    }

    pub fn validate(&self) -> Result<()> {
        let ladder = self.ladder()?;
        let mut seen = std::collections::HashSet::new();
        for clip in &self.clips {
            if clip.frame_count != CLIP_FRAMES {
                return Err(Error::Config(format!(
                    "clip {} has {} frames, expected {CLIP_FRAMES}",
                    clip.clip_id, clip.frame_count
                )));
            }
            if let Some(label) = clip.label {
                ladder.level(label)?;
            }
            if !seen.insert((&clip.clip_id, &clip.setting)) {
                return Err(Error::Config(format!(
                    "duplicate clip {} / {}",
                    clip.clip_id, clip.setting
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io_at(path, e))
    }
}

/// Resolves a manifest-relative path against the manifest's directory.
pub fn resolve(manifest_path: &Path, relative: &Path) -> PathBuf {
    if relative.is_absolute() {
        return relative.to_path_buf();
    }
    manifest_path
        .parent()
        .map(|dir| dir.join(relative))
        .unwrap_or_else(|| relative.to_path_buf())
}
