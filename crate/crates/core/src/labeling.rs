//! Ground-truth labels from full-reference JOD tables.
//!
//! The label of a clip is the cheapest ladder level whose JOD is within
//! `tolerance` of the best level for the same (clip, setting):
//!
//! ```text
//! r* = argmin_r cost(r)   s.t.   Q* - Q(r) <= tolerance
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ladder::ResolutionLadder;
use crate::manifest::DatasetManifest;

pub const DEFAULT_TOLERANCE: f64 = 0.1;
pub const JOD_MAX: f64 = 10.0;

/// JOD tables arrive as decimal text, so a gap of "exactly 0.1" can come out
/// as 0.1000000000000014 in binary. Gaps within this slack of the tolerance
/// count as on the boundary, which is inclusive.
pub const JOD_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub scene: String,
    /// One JOD per ladder level, ascending ladder order.
    pub jods: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QualityTable {
    entries: BTreeMap<(String, String), QualityRow>,
}

impl QualityTable {
    pub fn insert(&mut self, clip_id: &str, setting: &str, row: QualityRow) {
        self.entries
            .insert((clip_id.to_string(), setting.to_string()), row);
    }

    pub fn get(&self, clip_id: &str, setting: &str) -> Result<&QualityRow> {
        self.entries
            .get(&(clip_id.to_string(), setting.to_string()))
            .ok_or_else(|| Error::MissingQuality {
                clip_id: clip_id.to_string(),
                setting: setting.to_string(),
            })
    }

    pub fn jod(&self, clip_id: &str, setting: &str, level: usize) -> Result<f64> {
        let row = self.get(clip_id, setting)?;
        row.jods.get(level).copied().ok_or(Error::InvalidLevel {
            index: level,
            levels: row.jods.len(),
        })
    }

    /// Number of (clip, setting, level) entries.
    pub fn entry_count(&self) -> usize {
        self.entries.values().map(|r| r.jods.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &QualityRow)> {
        self.entries
            .iter()
            .map(|((clip, setting), row)| (clip.as_str(), setting.as_str(), row))
    }

    /// CSV with header `scene,clip_id,setting,resolution,jod`, one row per level.
    pub fn to_csv(&self, ladder: &ResolutionLadder, preamble: Option<&str>) -> Result<String> {
        let mut out = String::new();
        if let Some(p) = preamble {
            out.push_str(p);
        }
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(["scene", "clip_id", "setting", "resolution", "jod"])?;
        for (clip, setting, row) in self.iter() {
            for (level, jod) in ladder.levels.iter().zip(&row.jods) {
                writer.write_record([
                    row.scene.as_str(),
                    clip,
                    setting,
                    level.name.as_str(),
                    &format!("{jod}"),
                ])?;
            }
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| Error::Io(e.into_error()))?;
        out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
        Ok(out)
    }
}

#[derive(Debug, Deserialize)]
struct QualityCsvRow {
    scene: String,
    clip_id: String,
    setting: String,
    resolution: String,
    jod: f64,
}

/// Parses a quality-table CSV. Lines starting with `#` are comments.
pub fn load_quality_table<R: Read>(source: R, ladder: &ResolutionLadder) -> Result<QualityTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(source);

    let k = ladder.len();
    let mut partial: BTreeMap<(String, String), (String, Vec<Option<f64>>)> = BTreeMap::new();
    for row in reader.deserialize::<QualityCsvRow>() {
        let row = row?;
        let level = ladder.index_of(&row.resolution)?;
        if !(row.jod.is_finite() && (0.0..=JOD_MAX).contains(&row.jod)) {
            return Err(Error::JodOutOfRange {
                clip_id: row.clip_id,
                value: row.jod,
            });
        }
        let slot = partial
            .entry((row.clip_id.clone(), row.setting.clone()))
            .or_insert_with(|| (row.scene.clone(), vec![None; k]));
        if slot.1[level].replace(row.jod).is_some() {
            return Err(Error::DuplicateEntry {
                clip_id: row.clip_id,
                setting: row.setting,
                resolution: row.resolution,
            });
        }
    }

    let mut table = QualityTable::default();
    for ((clip_id, setting), (scene, jods)) in partial {
        let missing: Vec<String> = jods
            .iter()
            .zip(&ladder.levels)
            .filter(|(j, _)| j.is_none())
            .map(|(_, l)| l.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::IncompleteLadder {
                clip_id,
                setting,
                missing,
            });
        }
        let jods = jods.into_iter().map(|j| j.expect("checked")).collect();
        table.insert(&clip_id, &setting, QualityRow { scene, jods });
    }
    Ok(table)
}

pub fn load_quality_table_file(path: impl AsRef<Path>, ladder: &ResolutionLadder) -> Result<QualityTable> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    load_quality_table(std::io::BufReader::new(file), ladder)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub clip_id: String,
    pub setting: String,
    pub label: usize,
    #[serde(default)]
    pub resolution: String,
    pub q_star: f64,
    pub q_at_label: f64,
}

/// Index of the cheapest level within `tolerance` JOD of the best level.
pub fn select_label_index(jods: &[f64], ladder: &ResolutionLadder, tolerance: f64) -> Result<usize> {
    if jods.len() != ladder.len() {
        return Err(Error::Shape {
            what: "per-level jod array".into(),
            expected: vec![ladder.len()],
            actual: vec![jods.len()],
        });
    }
    if jods.iter().any(|j| !j.is_finite()) {
        return Err(Error::NonFinite("jod array"));
    }
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(Error::Config(format!("tolerance must be >= 0, got {tolerance}")));
    }
    let q_star = jods.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<(usize, f64)> = None;
    for (i, &q) in jods.iter().enumerate() {
        if q_star - q <= tolerance + JOD_SLACK {
            let cost = ladder.cost(i)?;
            if best.is_none_or(|(_, c)| cost < c) {
                best = Some((i, cost));
            }
        }
    }
    Ok(best.expect("the argmax level always qualifies").0)
}

pub fn select_label(
    clip_id: &str,
    setting: &str,
    jods: &[f64],
    ladder: &ResolutionLadder,
    tolerance: f64,
) -> Result<LabelRecord> {
    let label = select_label_index(jods, ladder, tolerance)?;
    Ok(LabelRecord {
        clip_id: clip_id.to_string(),
        setting: setting.to_string(),
        label,
        resolution: ladder.levels[label].name.clone(),
        q_star: jods.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        q_at_label: jods[label],
    })
}

/// Labels for every (clip, setting) of the table, in table order.
pub fn label_table(table: &QualityTable, ladder: &ResolutionLadder, tolerance: f64) -> Result<Vec<LabelRecord>> {
    table
        .iter()
        .map(|(clip, setting, row)| select_label(clip, setting, &row.jods, ladder, tolerance))
        .collect()
}

/// Inverse-frequency sampling weights: `total / (K * count[c])`, zero for absent classes.
pub fn class_weights(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    if labels.is_empty() {
        return Err(Error::Empty("label list"));
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        *counts.get_mut(l).ok_or(Error::InvalidLevel {
            index: l,
            levels: classes,
        })? += 1;
    }
    let total = labels.len() as f64;
    Ok(counts
        .into_iter()
        .map(|n| {
            if n == 0 {
                0.0
            } else {
                total / (classes as f64 * n as f64)
            }
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
    labels: Vec<LabelRecord>,
}

pub fn save_labels(path: impl AsRef<Path>, labels: &[LabelRecord], provenance: Option<serde_json::Value>) -> Result<()> {
    let path = path.as_ref();
    let file = LabelFile {
        provenance,
        labels: labels.to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&file)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

/// Reads either a bare JSON list of records or `{"labels": [...]}`.
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.is_array() {
        Ok(serde_json::from_value(value)?)
    } else {
        Ok(serde_json::from_value::<LabelFile>(value)?.labels)
    }
}

/// Copies labels onto the manifest entries, matching on (clip_id, setting).
pub fn attach_labels(manifest: &mut DatasetManifest, labels: &[LabelRecord]) -> Result<()> {
    let by_key: BTreeMap<(&str, &str), usize> = labels
        .iter()
        .map(|r| ((r.clip_id.as_str(), r.setting.as_str()), r.label))
        .collect();
    for clip in &mut manifest.clips {
        let label = by_key
            .get(&(clip.clip_id.as_str(), clip.setting.as_str()))
            .copied()
            .ok_or_else(|| Error::Unlabeled(clip.clip_id.clone()))?;
        clip.label = Some(label);
    }
    Ok(())
}
