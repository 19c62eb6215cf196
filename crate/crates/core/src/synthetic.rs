//! Procedural stand-in dataset: clips with controllable motion magnitude and
//! spatial complexity, scored by a parametric JOD oracle.
//!
//! The oracle is
//! `Q(h) = clamp(10 - a * c * (h_max / h - 1) / (1 + b * v), 0, 10)`:
//! quality falls off with resolution in proportion to content complexity `c`,
//! and the drop shrinks as motion `v` grows (temporal masking).
//!
//! Each scene is one video of `clip_count` consecutive 31-frame clips sharing
//! a [`SceneSpec`]. Scenes draw from their own RNG stream, derived from the
//! dataset seed and scene index, so the output does not depend on
//! scheduling order.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{builtin_descriptors, LumaFrame, MotionTensor, SpatialDescriptors, CROP_SIZE};
use crate::labeling::{save_labels, select_label, LabelRecord, QualityRow, QualityTable, DEFAULT_TOLERANCE};
use crate::ladder::{ResolutionLadder, ResolutionLevel};
use crate::manifest::{ClipManifestEntry, DatasetManifest, CLIP_FRAMES};
use crate::provenance::csv_comment;
use crate::training::derive_seed;

pub const MAX_MOTION: f64 = 40.0;
pub const JOD_CEILING: f64 = 10.0;
pub const SETTINGS: [&str; 4] = ["S1", "S2", "S3", "S4"];

/// RNG stream tags for [`derive_seed`].
const SCENE_STREAM: u64 = 0x5CE7E;
const CLIP_STREAM: u64 = 0xC11B;
/// Rejection-sampling budget per scene before giving up on a class.
const MAX_ATTEMPTS: usize = 100_000;
const GRATINGS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pattern {
    /// A sum of drifting gratings, flow `(v, 0)` everywhere.
    TranslatingTexture,
    /// An angular grating spinning about the frame center.
    RotatingGradient,
    /// A still texture; zero flow.
    Static,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// Mean motion magnitude, pixels per frame.
    pub motion_magnitude: f64,
    /// Content complexity in `[0, 1]`; scales texture contrast.
    pub spatial_complexity: f64,
    pub pattern: Pattern,
    pub clip_count: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let v = self.motion_magnitude;
        let c = self.spatial_complexity;
        if !(v.is_finite() && (0.0..=MAX_MOTION).contains(&v)) {
            return Err(Error::Config(format!("motion magnitude {v} outside [0, {MAX_MOTION}]")));
        }
        if !(c.is_finite() && (0.0..=1.0).contains(&c)) {
            return Err(Error::Config(format!("spatial complexity {c} outside [0, 1]")));
        }
        if self.pattern == Pattern::Static && v != 0.0 {
            return Err(Error::Config("static scenes have zero motion".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JodOracle {
    /// Quality-drop gain.
    pub a: f64,
    /// Motion-masking gain.
    pub b: f64,
}

impl Default for JodOracle {
    fn default() -> Self {
        JodOracle { a: 3.0, b: 0.15 }
    }
}

impl JodOracle {
    pub fn validate(&self) -> Result<()> {
        if !(self.a.is_finite() && self.a > 0.0 && self.b.is_finite() && self.b >= 0.0) {
            return Err(Error::Config(format!("oracle needs a > 0, b >= 0 (got a={}, b={})", self.a, self.b)));
        }
        Ok(())
    }

    pub fn jod(&self, motion: f64, complexity: f64, height: u32, max_height: u32) -> f64 {
        let drop = self.a * complexity * (f64::from(max_height) / f64::from(height) - 1.0) / (1.0 + self.b * motion);
        (JOD_CEILING - drop).clamp(0.0, JOD_CEILING)
    }

    /// JOD at every ladder level, ascending.
    pub fn jods(&self, spec: &SceneSpec, ladder: &ResolutionLadder) -> Vec<f64> {
        let top = ladder.top().height;
        ladder
            .levels
            .iter()
            .map(|l| self.jod(spec.motion_magnitude, spec.spatial_complexity, l.height, top))
            .collect()
    }
}

/// The oracle against a 1080-line reference.
pub fn oracle_jod(oracle: &JodOracle, spec: &SceneSpec, level: &ResolutionLevel) -> f64 {
    oracle.jod(spec.motion_magnitude, spec.spatial_complexity, level.height, 1080)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub oracle: JodOracle,
    pub tolerance: f64,
    /// Clips per scene (video); 8 clips span one 2 s decision segment.
    pub clip_count: usize,
    /// Standard deviation of the additive motion noise, pixels per frame.
    pub motion_noise: f64,
    /// Probability that a scene is static (no motion).
    pub static_share: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            oracle: JodOracle::default(),
            tolerance: DEFAULT_TOLERANCE,
            clip_count: 8,
            motion_noise: 0.1,
            static_share: 0.15,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        self.oracle.validate()?;
        if self.clip_count == 0 {
            return Err(Error::Config("clip_count must be > 0".into()));
        }
        if !(self.motion_noise.is_finite() && self.motion_noise >= 0.0) {
            return Err(Error::Config("motion_noise must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.static_share) {
            return Err(Error::Config("static_share must lie in [0, 1]".into()));
        }
        if !(self.tolerance.is_finite() && self.tolerance >= 0.0) {
            return Err(Error::Config("tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

/// One generated clip with the luma frames its descriptors came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticClip {
    pub motion: MotionTensor,
    pub descriptors: SpatialDescriptors,
    pub frames: Vec<LumaFrame>,
}

#[derive(Debug, Clone, Copy)]
struct Grating {
    fx: f64,
    fy: f64,
    phase: f64,
}

/// Texture parameters fixed per scene so consecutive clips are continuous.
#[derive(Debug, Clone)]
struct Texture {
    gratings: [Grating; GRATINGS],
    spokes: f64,
    rings: f64,
}

impl Texture {
    fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gratings = std::array::from_fn(|_| {
            let freq = rng.random_range(0.08..0.12);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            Grating {
                fx: freq * angle.cos(),
                fy: freq * angle.sin(),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        });
        Texture {
            gratings,
            spokes: f64::from(rng.random_range(4u32..7)),
            rings: rng.random_range(0.15..0.25),
        }
    }
}

/// Mean distance of the crop's pixel centers from the crop center.
fn mean_radius(size: usize) -> f64 {
    let center = (size as f64 - 1.0) / 2.0;
    let mut total = 0.0;
    for y in 0..size {
        for x in 0..size {
            total += (x as f64 - center).hypot(y as f64 - center);
        }
    }
    total / (size * size) as f64
}

/// Renders clip `clip_index` of a scene: analytic flow plus Gaussian noise
/// (none for static scenes), and frames whose contrast is the scene's
/// complexity. Deterministic in `(spec, clip_index, noise_seed)`.
pub fn generate_clip(spec: &SceneSpec, clip_index: usize, motion_noise: f64, noise_seed: u64) -> Result<SyntheticClip> {
    spec.validate()?;
    let size = CROP_SIZE;
    let plane = size * size;
    let center = (size as f64 - 1.0) / 2.0;
    let texture = Texture::draw(spec.seed);
    let v = spec.motion_magnitude;
    let omega = v / mean_radius(size);
    let t0 = (clip_index * CLIP_FRAMES) as f64;

    let mut data = vec![0.0f32; 2 * CLIP_FRAMES * plane];
    let (dx, dy) = data.split_at_mut(CLIP_FRAMES * plane);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = match spec.pattern {
                Pattern::TranslatingTexture => (v, 0.0),
                Pattern::RotatingGradient => (-omega * (y as f64 - center), omega * (x as f64 - center)),
                Pattern::Static => (0.0, 0.0),
            };
            for t in 0..CLIP_FRAMES {
                dx[t * plane + y * size + x] = fx as f32;
                dy[t * plane + y * size + x] = fy as f32;
            }
        }
    }
    if spec.pattern != Pattern::Static && motion_noise > 0.0 {
        let noise = Normal::new(0.0, motion_noise).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for value in data.iter_mut() {
            *value += noise.sample(&mut rng) as f32;
        }
    }
    let motion = MotionTensor::new(CLIP_FRAMES, size, size, data)?;

    let contrast = 0.45 * spec.spatial_complexity;
    let frames: Vec<LumaFrame> = (0..CLIP_FRAMES)
        .map(|t| {
            let time = t0 + t as f64;
            let mut pixels = Vec::with_capacity(plane);
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f64 - center, y as f64 - center);
                    let g = match spec.pattern {
                        Pattern::RotatingGradient => {
                            let theta = py.atan2(px) - omega * time;
                            let r = px.hypot(py);
                            (texture.spokes * theta).sin() * (0.5 + 0.5 * (texture.rings * r).cos())
                        }
                        Pattern::TranslatingTexture | Pattern::Static => {
                            let shift = if spec.pattern == Pattern::Static { 0.0 } else { v * time };
                            texture
                                .gratings
                                .iter()
                                .map(|g| (std::f64::consts::TAU * (g.fx * (px - shift) + g.fy * py) + g.phase).sin())
                                .sum::<f64>()
                                / GRATINGS as f64
                        }
                    };
                    pixels.push((0.5 + contrast * g) as f32);
                }
            }
            LumaFrame::new(size, size, pixels)
        })
        .collect::<Result<_>>()?;
    let descriptors = builtin_descriptors(&frames);
    Ok(SyntheticClip {
        motion,
        descriptors,
        frames,
    })
}

/// Draws a scene whose label is `target`, by rejection sampling
/// `v ~ U[0, 40]` (0 for static scenes) and `c ~ U[0, 1]`.
pub fn sample_scene(
    target: usize,
    seed: u64,
    cfg: &SyntheticConfig,
    ladder: &ResolutionLadder,
) -> Result<(SceneSpec, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let pattern = if rng.random_bool(cfg.static_share) {
            Pattern::Static
        } else if rng.random_bool(0.5) {
            Pattern::TranslatingTexture
        } else {
            Pattern::RotatingGradient
        };
        let v = if pattern == Pattern::Static {
            0.0
        } else {
            rng.random_range(0.0..=MAX_MOTION)
        };
        let spec = SceneSpec {
            seed: rng.random(),
            motion_magnitude: v,
            spatial_complexity: rng.random_range(0.0..=1.0),
            pattern,
            clip_count: cfg.clip_count,
        };
        let jods = cfg.oracle.jods(&spec, ladder);
        if crate::labeling::select_label_index(&jods, ladder, cfg.tolerance)? == target {
            return Ok((spec, jods));
        }
    }
    Err(Error::Config(format!(
        "label class {target} unreachable under oracle a={}, b={}",
        cfg.oracle.a, cfg.oracle.b
    )))
}

/// Paths and label histogram of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SyntheticSummary {
    pub manifest: PathBuf,
    pub quality_table: PathBuf,
    pub labels: PathBuf,
    pub scenes: Vec<SceneSpec>,
    pub class_counts: Vec<usize>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const QUALITY_FILE: &str = "quality.csv";
pub const LABELS_FILE: &str = "labels.json";
pub const CLIP_DIR: &str = "clips";

pub fn scene_name(index: usize) -> String {
    format!("scene{index:04}")
}

/// Writes `n_scenes` videos to `out_dir`: tensor blobs under `clips/`, the
/// manifest, the quality table and the labels. Scene `i` targets label class
/// `i mod K`, so classes are balanced to within one scene.
pub fn generate_dataset(
    n_scenes: usize,
    seed: u64,
    out_dir: &Path,
    cfg: &SyntheticConfig,
    provenance: Option<serde_json::Value>,
) -> Result<SyntheticSummary> {
    if n_scenes == 0 {
        return Err(Error::Empty("scene count"));
    }
    cfg.validate()?;
    let ladder = ResolutionLadder::default();
    let clip_dir = out_dir.join(CLIP_DIR);
    fs::create_dir_all(&clip_dir).map_err(|e| Error::io_at(&clip_dir, e))?;

    type SceneOutput = (SceneSpec, Vec<f64>, Vec<ClipManifestEntry>);
    let scenes: Vec<SceneOutput> = (0..n_scenes)
        .into_par_iter()
        .map(|i| -> Result<SceneOutput> {
            let target = i % ladder.len();
            let (spec, jods) = sample_scene(target, derive_seed(seed, SCENE_STREAM, i as u64), cfg, &ladder)?;
            let scene = scene_name(i);
            let setting = SETTINGS[i % SETTINGS.len()];
            let mut entries = Vec::with_capacity(spec.clip_count);
            for k in 0..spec.clip_count {
                let clip_id = format!("{scene}_c{k:03}");
                let noise_seed = derive_seed(spec.seed, CLIP_STREAM, k as u64);
                let clip = generate_clip(&spec, k, cfg.motion_noise, noise_seed)?;
                let motion_path = PathBuf::from(CLIP_DIR).join(format!("{clip_id}.motion.sten"));
                let descriptor_path = PathBuf::from(CLIP_DIR).join(format!("{clip_id}.desc.sten"));
                clip.motion.to_blob().save(out_dir.join(&motion_path))?;
                clip.descriptors.to_blob().save(out_dir.join(&descriptor_path))?;
                entries.push(ClipManifestEntry {
                    clip_id,
                    scene: scene.clone(),
                    setting: setting.to_string(),
                    frame_count: CLIP_FRAMES,
                    clip_index: k,
                    motion_path,
                    descriptor_path,
                    label: None,
                });
            }
            Ok((spec, jods, entries))
        })
        .collect::<Result<_>>()?;

    let mut table = QualityTable::default();
    let mut labels: Vec<LabelRecord> = Vec::new();
    let mut clips = Vec::new();
    let mut specs = Vec::with_capacity(n_scenes);
    let mut class_counts = vec![0usize; ladder.len()];
    for (spec, jods, entries) in scenes {
        for mut entry in entries {
            let record = select_label(&entry.clip_id, &entry.setting, &jods, &ladder, cfg.tolerance)?;
            table.insert(
                &entry.clip_id,
                &entry.setting,
                QualityRow {
                    scene: entry.scene.clone(),
                    jods: jods.clone(),
                },
            );
            entry.label = Some(record.label);
            class_counts[record.label] += 1;
            labels.push(record);
            clips.push(entry);
        }
        specs.push(spec);
    }

    let mut manifest = DatasetManifest::new(&ladder, clips);
    manifest.provenance = provenance.clone();
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;

    let quality_path = out_dir.join(QUALITY_FILE);
    let preamble = provenance.as_ref().map(csv_comment);
    let csv = table.to_csv(&ladder, preamble.as_deref())?;
    fs::write(&quality_path, csv).map_err(|e| Error::io_at(&quality_path, e))?;

    let labels_path = out_dir.join(LABELS_FILE);
    save_labels(&labels_path, &labels, provenance)?;

    Ok(SyntheticSummary {
        manifest: manifest_path,
        quality_table: quality_path,
        labels: labels_path,
        scenes: specs,
        class_counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{label_table, load_labels, load_quality_table_file, select_label_index};

    fn spec(v: f64, c: f64, pattern: Pattern) -> SceneSpec {
        SceneSpec {
            seed: 11,
            motion_magnitude: v,
            spatial_complexity: c,
            pattern,
            clip_count: 1,
        }
    }

    #[test]
    fn oracle_examples() {
        let ladder = ResolutionLadder::default();
        let o = JodOracle::default();
        for &(v, c) in &[(0.0, 1.0), (40.0, 0.3), (7.0, 0.0)] {
            assert_eq!(oracle_jod(&o, &spec(v, c, Pattern::TranslatingTexture), ladder.top()), 10.0);
        }
        let blank = o.jods(&spec(5.0, 0.0, Pattern::TranslatingTexture), &ladder);
        assert!(blank.iter().all(|&q| q == 10.0));
        assert_eq!(select_label_index(&blank, &ladder, 0.1).unwrap(), 0);
        let q = oracle_jod(&o, &spec(0.0, 1.0, Pattern::Static), &ladder.levels[0]);
        assert!((q - 4.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_is_monotone_and_masks_with_motion() {
        let ladder = ResolutionLadder::default();
        let o = JodOracle { a: 5.0, b: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let (v, c) = (rng.random_range(0.0..40.0), rng.random_range(0.0..1.0));
            let q = o.jods(&spec(v, c, Pattern::TranslatingTexture), &ladder);
            assert!(q.windows(2).all(|w| w[0] <= w[1]));
            let faster = o.jods(&spec(v + 1.0, c, Pattern::TranslatingTexture), &ladder);
            assert!(q.iter().zip(&faster).all(|(a, b)| a <= b));
            let l0 = select_label_index(&q, &ladder, 0.1).unwrap();
            let l1 = select_label_index(&faster, &ladder, 0.1).unwrap();
            assert!(ladder.cost(l1).unwrap() <= ladder.cost(l0).unwrap());
        }
    }

    #[test]
    fn static_clip_has_zero_motion() {
        let clip = generate_clip(&spec(0.0, 0.7, Pattern::Static), 0, 0.1, 5).unwrap();
        assert!(clip.motion.data().iter().all(|&v| v == 0.0));
        assert_eq!(clip.motion.dims(), [2, 31, 70, 70]);
        assert_eq!(clip.descriptors.frames(), 31);
    }

    #[test]
    fn translating_clip_mean_magnitude() {
        let clip = generate_clip(&spec(10.0, 0.5, Pattern::TranslatingTexture), 2, 0.1, 9).unwrap();
        assert!((clip.motion.mean_magnitude() - 10.0).abs() < 0.5);
        let rot = generate_clip(&spec(10.0, 0.5, Pattern::RotatingGradient), 0, 0.1, 9).unwrap();
        assert!((rot.motion.mean_magnitude() - 10.0).abs() < 0.5);
    }

    #[test]
    fn clip_generation_is_deterministic() {
        let s = spec(12.5, 0.4, Pattern::RotatingGradient);
        assert_eq!(generate_clip(&s, 3, 0.1, 77).unwrap(), generate_clip(&s, 3, 0.1, 77).unwrap());
        assert_ne!(generate_clip(&s, 3, 0.1, 77).unwrap(), generate_clip(&s, 3, 0.1, 78).unwrap());
    }

    #[test]
    fn complexity_shows_in_descriptors() {
        // Descriptor 1 is the log luma variance, which rises with contrast.
        let lo = generate_clip(&spec(3.0, 0.1, Pattern::TranslatingTexture), 0, 0.0, 1).unwrap();
        let hi = generate_clip(&spec(3.0, 0.8, Pattern::TranslatingTexture), 0, 0.0, 1).unwrap();
        assert!(hi.descriptors.row(0)[1] > lo.descriptors.row(0)[1] + 2.0);
        let blank = generate_clip(&spec(3.0, 0.0, Pattern::TranslatingTexture), 0, 0.0, 1).unwrap();
        assert_eq!(blank.descriptors.row(0)[1], 0.0);
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(spec(41.0, 0.5, Pattern::TranslatingTexture).validate().is_err());
        assert!(spec(1.0, 1.5, Pattern::TranslatingTexture).validate().is_err());
        assert!(spec(1.0, 0.5, Pattern::Static).validate().is_err());
        assert!(JodOracle { a: 0.0, b: 0.1 }.validate().is_err());
    }

    #[test]
    fn dataset_is_balanced_consistent_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            clip_count: 1,
            ..SyntheticConfig::default()
        };
        let summary = generate_dataset(100, 7, dir.path(), &cfg, None).unwrap();
        let total: usize = summary.class_counts.iter().sum();
        assert_eq!(total, 100);
        assert!(summary.class_counts.iter().all(|&n| n * 20 >= total));

        let ladder = ResolutionLadder::default();
        let table = load_quality_table_file(&summary.quality_table, &ladder).unwrap();
        let mut relabeled = label_table(&table, &ladder, cfg.tolerance).unwrap();
        let mut emitted = load_labels(&summary.labels).unwrap();
        let key = |r: &LabelRecord| (r.clip_id.clone(), r.setting.clone());
        relabeled.sort_by_key(key);
        emitted.sort_by_key(key);
        assert_eq!(relabeled, emitted);

        let again = tempfile::tempdir().unwrap();
        generate_dataset(100, 7, again.path(), &cfg, None).unwrap();
        for file in [MANIFEST_FILE, QUALITY_FILE, LABELS_FILE, "clips/scene0042_c000.motion.sten"] {
            assert_eq!(
                fs::read(dir.path().join(file)).unwrap(),
                fs::read(again.path().join(file)).unwrap(),
                "{file}"
            );
        }
    }

    #[test]
    fn zero_scenes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(0, 1, dir.path(), &SyntheticConfig::default(), None).is_err());
    }
}
