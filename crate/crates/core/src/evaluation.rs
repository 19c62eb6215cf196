//! Metrics and reports: relative JOD error, resolution error, accuracy and
//! pixel-throughput savings per 2 s segment and per setting.
//!
//! The relative JOD error of `N` clips is
//! `(exp(mean_i |ln R_test_i - ln R_ref_i|) - 1) * 100`, where `R_test` is the
//! quality-table JOD of the predicted level and `R_ref` the JOD of the
//! reference label, both clamped below at [`JOD_FLOOR`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::{smooth_stream, switch_count, Decision, EmissionRecord, TransitionGraph};
use crate::error::{Error, Result};
use crate::labeling::{LabelRecord, QualityTable};
use crate::ladder::ResolutionLadder;
use crate::manifest::{DatasetManifest, CLIP_MS};
use crate::predictor::argmax_low;
use crate::provenance::csv_comment;

pub const SEGMENT_MS: u64 = 2000;
/// Lower clamp applied to JOD values before taking logarithms.
pub const JOD_FLOOR: f64 = 1e-6;

pub const METRICS_FILE: &str = "metrics.json";
pub const SEGMENTS_FILE: &str = "segments.csv";
pub const SETTINGS_FILE: &str = "savings_by_setting.csv";
pub const RECORDS_FILE: &str = "records.csv";
pub const TABLE_FILE: &str = "table1.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub clip_id: String,
    pub setting: String,
    pub video: String,
    pub clip_index: usize,
    pub predicted: usize,
    pub reference_label: usize,
    pub jod_predicted: f64,
    pub jod_reference: f64,
}

fn non_empty<T>(records: &[T]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Empty("evaluation records"));
    }
    Ok(())
}

/// Relative JOD error in percent over `(R_test, R_ref)` pairs.
pub fn jod_relative_error_pairs(pairs: &[(f64, f64)]) -> Result<f64> {
    non_empty(pairs)?;
    let mut total = 0.0;
    for &(test, reference) in pairs {
        if !(test.is_finite() && reference.is_finite()) {
            return Err(Error::NonFinite("jod pair"));
        }
        total += (test.max(JOD_FLOOR).ln() - reference.max(JOD_FLOOR).ln()).abs();
    }
    Ok((total / pairs.len() as f64).exp_m1() * 100.0)
}

pub fn jod_relative_error(records: &[EvalRecord]) -> Result<f64> {
    let pairs: Vec<(f64, f64)> = records.iter().map(|r| (r.jod_predicted, r.jod_reference)).collect();
    jod_relative_error_pairs(&pairs)
}

/// Mean absolute ladder-index difference between prediction and label.
pub fn resolution_error(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    let total: usize = records.iter().map(|r| r.predicted.abs_diff(r.reference_label)).sum();
    Ok(total as f64 / records.len() as f64)
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    non_empty(records)?;
    let hits = records.iter().filter(|r| r.predicted == r.reference_label).count();
    Ok(hits as f64 / records.len() as f64)
}

/// One video's decision timeline: each decision holds from its `t_ms` until
/// the next decision, the last one until `end_ms`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionStream {
    pub setting: String,
    pub video: String,
    pub decisions: Vec<Decision>,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentSaving {
    pub setting: String,
    pub video: String,
    pub segment_index: usize,
    /// Level name, or `+`-joined names when the level changes inside the segment.
    pub selected: String,
    pub baseline: String,
    pub savings_pct: f64,
    #[serde(skip)]
    pub duration_ms: u64,
    #[serde(skip)]
    pub cost: f64,
    #[serde(skip)]
    pub baseline_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettingSavings {
    pub setting: String,
    pub segments: usize,
    /// Mean of per-segment percentages.
    pub mean_savings_pct: f64,
    /// `1 - sum(cost_selected) / sum(cost_baseline)` over time, in percent.
    pub cost_ratio_savings_pct: f64,
    /// Segments more expensive than the baseline.
    pub negative_segments: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SavingsReport {
    pub segments: Vec<SegmentSaving>,
    pub by_setting: Vec<SettingSavings>,
    pub overall: SettingSavings,
}

/// Splits one timeline into `segment_ms` segments and scores each by its
/// time-weighted pixel cost against the baseline level.
pub fn segment_savings(
    stream: &DecisionStream,
    ladder: &ResolutionLadder,
    baseline: usize,
    segment_ms: u64,
) -> Result<Vec<SegmentSaving>> {
    if segment_ms == 0 {
        return Err(Error::Config("segment length must be > 0".into()));
    }
    let mut decisions = stream.decisions.clone();
    decisions.sort_by_key(|d| d.t_ms);
    let first = decisions.first().ok_or(Error::Empty("decision timeline"))?.t_ms;
    if stream.end_ms <= decisions.last().expect("non-empty").t_ms {
        return Err(Error::Config(format!(
            "timeline of {} ends at {} ms, before its last decision",
            stream.video, stream.end_ms
        )));
    }
    let base_cost = ladder.cost(baseline)?;
    let base_name = ladder.level(baseline)?.name.clone();
    let mut out = Vec::new();
    let mut seg = first / segment_ms;
    while seg * segment_ms < stream.end_ms {
        let (lo, hi) = (seg * segment_ms, ((seg + 1) * segment_ms).min(stream.end_ms));
        let (mut cost, mut covered) = (0.0, 0u64);
        let mut names: Vec<String> = Vec::new();
        for (k, d) in decisions.iter().enumerate() {
            let until = decisions.get(k + 1).map_or(stream.end_ms, |n| n.t_ms);
            let (a, b) = (d.t_ms.max(lo), until.min(hi));
            if b > a {
                cost += ladder.cost(d.resolution)? * (b - a) as f64;
                covered += b - a;
                let name = &ladder.level(d.resolution)?.name;
                if names.last() != Some(name) {
                    names.push(name.clone());
                }
            }
        }
        if covered > 0 {
            let mean_cost = cost / covered as f64;
            out.push(SegmentSaving {
                setting: stream.setting.clone(),
                video: stream.video.clone(),
                segment_index: seg as usize,
                selected: names.join("+"),
                baseline: base_name.clone(),
                savings_pct: (1.0 - mean_cost / base_cost) * 100.0,
                duration_ms: covered,
                cost: mean_cost,
                baseline_cost: base_cost,
            });
        }
        seg += 1;
    }
    Ok(out)
}

fn summarize(setting: &str, segments: &[&SegmentSaving]) -> SettingSavings {
    let n = segments.len();
    let mean = segments.iter().map(|s| s.savings_pct).sum::<f64>() / n as f64;
    let spent: f64 = segments.iter().map(|s| s.cost * s.duration_ms as f64).sum();
    let base: f64 = segments.iter().map(|s| s.baseline_cost * s.duration_ms as f64).sum();
    SettingSavings {
        setting: setting.to_string(),
        segments: n,
        mean_savings_pct: mean,
        cost_ratio_savings_pct: (1.0 - spent / base) * 100.0,
        negative_segments: segments.iter().filter(|s| s.savings_pct < 0.0).count(),
    }
}

/// Per-segment savings of every stream plus per-setting and overall aggregates.
pub fn savings_report(
    streams: &[DecisionStream],
    ladder: &ResolutionLadder,
    baseline: usize,
    segment_ms: u64,
) -> Result<SavingsReport> {
    let mut segments = Vec::new();
    for stream in streams {
        segments.extend(segment_savings(stream, ladder, baseline, segment_ms)?);
    }
    if segments.is_empty() {
        return Err(Error::Empty("decision timeline"));
    }
    let mut groups: BTreeMap<&str, Vec<&SegmentSaving>> = BTreeMap::new();
    for s in &segments {
        groups.entry(s.setting.as_str()).or_default().push(s);
    }
    let by_setting = groups.iter().map(|(k, v)| summarize(k, v)).collect();
    let all: Vec<&SegmentSaving> = segments.iter().collect();
    let overall = summarize("overall", &all);
    Ok(SavingsReport {
        segments,
        by_setting,
        overall,
    })
}

/// One clip's predictor output; also the line format of prediction files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub clip_id: String,
    pub video: String,
    pub setting: String,
    pub t_ms: u64,
    pub log_probs: Vec<f64>,
}

impl PredictionRecord {
    pub fn predicted(&self) -> usize {
        argmax_low(&self.log_probs)
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Viterbi smoothing graph; `None` evaluates raw per-clip predictions.
    pub smoothing: Option<TransitionGraph>,
    /// Controller start level; the baseline level when unset.
    pub start: Option<usize>,
    pub baseline: usize,
    pub segment_ms: u64,
    /// Model parameter count, when a model produced the predictions.
    pub params: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub res_error: f64,
    pub jod_error_pct: f64,
    pub accuracy: f64,
    pub params: Option<usize>,
    pub clips: usize,
    pub smoothed: bool,
    pub switches: usize,
    pub savings_overall_pct: f64,
    pub savings_overall_cost_ratio_pct: f64,
    pub savings_by_setting: BTreeMap<String, f64>,
    pub negative_savings_segments: usize,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub metrics: RunMetrics,
    pub records: Vec<EvalRecord>,
    pub savings: SavingsReport,
}

/// Scores predictions against labels and the quality table, smoothing each
/// (video, setting) stream first when requested. Under smoothing every clip
/// takes the decision of the 8-clip window it belongs to.
pub fn evaluate_predictions(
    manifest: &DatasetManifest,
    table: &QualityTable,
    labels: &[LabelRecord],
    predictions: &[PredictionRecord],
    opts: &EvalOptions,
) -> Result<Evaluation> {
    non_empty(predictions)?;
    let ladder = manifest.ladder()?;
    ladder.level(opts.baseline)?;
    let label_of: BTreeMap<(&str, &str), usize> = labels
        .iter()
        .map(|r| ((r.clip_id.as_str(), r.setting.as_str()), r.label))
        .collect();
    let known: BTreeMap<(&str, &str), &str> = manifest
        .clips
        .iter()
        .map(|c| ((c.clip_id.as_str(), c.setting.as_str()), c.scene.as_str()))
        .collect();

    let mut streams: BTreeMap<(String, String), Vec<&PredictionRecord>> = BTreeMap::new();
    for p in predictions {
        if p.log_probs.len() != ladder.len() {
            return Err(Error::Shape {
                what: format!("log-probs of {}", p.clip_id),
                expected: vec![ladder.len()],
                actual: vec![p.log_probs.len()],
            });
        }
        if !known.contains_key(&(p.clip_id.as_str(), p.setting.as_str())) {
            return Err(Error::Config(format!("prediction for unknown clip {} / {}", p.clip_id, p.setting)));
        }
        streams.entry((p.setting.clone(), p.video.clone())).or_default().push(p);
    }

    let start = opts.start.unwrap_or(opts.baseline);
    let mut records = Vec::with_capacity(predictions.len());
    let mut timelines = Vec::with_capacity(streams.len());
    let mut switches = 0;
    for ((setting, video), mut clips) in streams {
        clips.sort_by_key(|p| p.t_ms);
        let end_ms = clips.last().expect("non-empty stream").t_ms + CLIP_MS;
        let per_clip: Vec<Decision> = clips
            .iter()
            .map(|p| Decision {
                t_ms: p.t_ms,
                resolution: p.predicted(),
            })
            .collect();
        let decisions = match &opts.smoothing {
            Some(graph) => {
                let emissions: Vec<EmissionRecord> = clips
                    .iter()
                    .map(|p| EmissionRecord {
                        t_ms: p.t_ms,
                        log_probs: p.log_probs.clone(),
                    })
                    .collect();
                smooth_stream(&emissions, graph, start)?
            }
            None => per_clip,
        };
        switches += switch_count(start, &decisions);
        for p in &clips {
            let active = decisions
                .iter()
                .rev()
                .find(|d| d.t_ms <= p.t_ms)
                .unwrap_or(&decisions[0])
                .resolution;
            let label = *label_of
                .get(&(p.clip_id.as_str(), p.setting.as_str()))
                .ok_or_else(|| Error::Unlabeled(p.clip_id.clone()))?;
            records.push(EvalRecord {
                clip_id: p.clip_id.clone(),
                setting: p.setting.clone(),
                video: video.clone(),
                clip_index: (p.t_ms / CLIP_MS) as usize,
                predicted: active,
                reference_label: label,
                jod_predicted: table.jod(&p.clip_id, &p.setting, active)?,
                jod_reference: table.jod(&p.clip_id, &p.setting, label)?,
            });
        }
        timelines.push(DecisionStream {
            setting,
            video,
            decisions,
            end_ms,
        });
    }

    let savings = savings_report(&timelines, &ladder, opts.baseline, opts.segment_ms)?;
    let metrics = RunMetrics {
        res_error: resolution_error(&records)?,
        jod_error_pct: jod_relative_error(&records)?,
        accuracy: accuracy(&records)?,
        params: opts.params,
        clips: records.len(),
        smoothed: opts.smoothing.is_some(),
        switches,
        savings_overall_pct: savings.overall.mean_savings_pct,
        savings_overall_cost_ratio_pct: savings.overall.cost_ratio_savings_pct,
        savings_by_setting: savings
            .by_setting
            .iter()
            .map(|s| (s.setting.clone(), s.mean_savings_pct))
            .collect(),
        negative_savings_segments: savings.overall.negative_segments,
    };
    Ok(Evaluation {
        metrics,
        records,
        savings,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &str, preamble: &str) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        writer.write_record(header.split(','))?;
    }
    for row in rows {
        writer.serialize(row)?;
    }
    let body = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    let mut text = preamble.to_string();
    text.push_str(&String::from_utf8(body).expect("csv is utf-8"));
    fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

#[derive(Serialize)]
struct TableRow<'a> {
    method: &'a str,
    res_error: f64,
    jod_error_pct: f64,
    accuracy: f64,
    params: Option<usize>,
}

/// Writes `metrics.json`, `segments.csv`, `savings_by_setting.csv`,
/// `records.csv` and the one-row `table1.csv` into `out_dir`.
pub fn write_evaluation(out_dir: &Path, eval: &Evaluation, method: &str, provenance: Option<&serde_json::Value>) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io_at(out_dir, e))?;
    let mut metrics = serde_json::to_value(&eval.metrics)?;
    if let Some(p) = provenance {
        metrics["provenance"] = p.clone();
    }
    let path = out_dir.join(METRICS_FILE);
    let mut text = serde_json::to_string_pretty(&metrics)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io_at(&path, e))?;

    let preamble = provenance.map(csv_comment).unwrap_or_default();
    write_csv(
        &out_dir.join(SEGMENTS_FILE),
        &eval.savings.segments,
        "setting,video,segment_index,selected,baseline,savings_pct",
        &preamble,
    )?;
    let mut settings = eval.savings.by_setting.clone();
    settings.push(eval.savings.overall.clone());
    write_csv(
        &out_dir.join(SETTINGS_FILE),
        &settings,
        "setting,segments,mean_savings_pct,cost_ratio_savings_pct,negative_segments",
        &preamble,
    )?;
    write_csv(
        &out_dir.join(RECORDS_FILE),
        &eval.records,
        "clip_id,setting,video,clip_index,predicted,reference_label,jod_predicted,jod_reference",
        &preamble,
    )?;
    let row = TableRow {
        method,
        res_error: eval.metrics.res_error,
        jod_error_pct: eval.metrics.jod_error_pct,
        accuracy: eval.metrics.accuracy,
        params: eval.metrics.params,
    };
    write_csv(&out_dir.join(TABLE_FILE), &[row], "", &preamble)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{QualityRow, DEFAULT_TOLERANCE};
    use crate::manifest::{ClipManifestEntry, CLIP_FRAMES};
    use proptest::prelude::*;

    fn record(pred: usize, label: usize, test: f64, reference: f64) -> EvalRecord {
        EvalRecord {
            clip_id: "c".into(),
            setting: "S1".into(),
            video: "v".into(),
            clip_index: 0,
            predicted: pred,
            reference_label: label,
            jod_predicted: test,
            jod_reference: reference,
        }
    }

    #[test]
    fn jod_error_examples() {
        let same: Vec<EvalRecord> = (1..6).map(|i| record(0, 0, i as f64, i as f64)).collect();
        assert_eq!(jod_relative_error(&same).unwrap(), 0.0);
        let ratio: Vec<EvalRecord> = (1..6).map(|i| record(0, 0, 1.1 * i as f64, i as f64)).collect();
        assert!((jod_relative_error(&ratio).unwrap() - 10.0).abs() < 1e-9);
        let mixed = [record(0, 0, 1.2 * 8.0, 8.0), record(0, 0, 5.0 / 1.2, 5.0)];
        assert!((jod_relative_error(&mixed).unwrap() - 20.0).abs() < 1e-9);
        assert!(jod_relative_error(&[]).is_err());
    }

    #[test]
    fn jod_error_clamps_zero() {
        let r = jod_relative_error(&[record(0, 0, 0.0, 1e-6)]).unwrap();
        assert_eq!(r, 0.0);
        assert!(jod_relative_error(&[record(0, 0, 0.0, 1.0)]).unwrap().is_finite());
    }

    #[test]
    fn resolution_error_and_accuracy_examples() {
        let exact = [record(2, 2, 1.0, 1.0), record(0, 0, 1.0, 1.0)];
        assert_eq!(resolution_error(&exact).unwrap(), 0.0);
        assert_eq!(accuracy(&exact).unwrap(), 1.0);
        let off = [record(3, 2, 1.0, 1.0), record(0, 1, 1.0, 1.0)];
        assert_eq!(resolution_error(&off).unwrap(), 1.0);
        let mix = [record(1, 1, 1.0, 1.0), record(4, 4, 1.0, 1.0), record(0, 2, 1.0, 1.0), record(3, 4, 1.0, 1.0)];
        assert_eq!(resolution_error(&mix).unwrap(), 0.75);
        assert_eq!(accuracy(&mix).unwrap(), 0.5);
    }

    fn stream(setting: &str, levels: &[usize]) -> DecisionStream {
        DecisionStream {
            setting: setting.into(),
            video: "v".into(),
            decisions: levels
                .iter()
                .enumerate()
                .map(|(k, &r)| Decision {
                    t_ms: k as u64 * SEGMENT_MS,
                    resolution: r,
                })
                .collect(),
            end_ms: levels.len() as u64 * SEGMENT_MS,
        }
    }

    #[test]
    fn savings_examples() {
        let ladder = ResolutionLadder::default();
        let base = savings_report(&[stream("S1", &[4, 4, 4])], &ladder, 4, SEGMENT_MS).unwrap();
        assert!(base.segments.iter().all(|s| s.savings_pct == 0.0));

        let r720 = savings_report(&[stream("S1", &[2, 2, 2, 2])], &ladder, 4, SEGMENT_MS).unwrap();
        for s in &r720.segments {
            assert!((s.savings_pct - 500.0 / 9.0).abs() < 1e-9);
        }
        let half = savings_report(&[stream("S1", &[4, 2, 4, 2])], &ladder, 4, SEGMENT_MS).unwrap();
        assert!((half.overall.mean_savings_pct - 250.0 / 9.0).abs() < 1e-9);
        assert!((half.overall.cost_ratio_savings_pct - 250.0 / 9.0).abs() < 1e-9);
    }

    #[test]
    fn savings_flags_negative_segments() {
        let ladder = ResolutionLadder::default();
        let r = savings_report(&[stream("S1", &[4, 2])], &ladder, 2, SEGMENT_MS).unwrap();
        assert_eq!(r.overall.negative_segments, 1);
        assert!(r.segments[0].savings_pct < 0.0);
    }

    #[test]
    fn mid_segment_switch_is_time_weighted() {
        let ladder = ResolutionLadder::default();
        let s = DecisionStream {
            setting: "S1".into(),
            video: "v".into(),
            decisions: vec![
                Decision { t_ms: 0, resolution: 4 },
                Decision { t_ms: 1000, resolution: 2 },
            ],
            end_ms: 2000,
        };
        let seg = segment_savings(&s, &ladder, 4, SEGMENT_MS).unwrap();
        assert_eq!(seg.len(), 1);
        assert_eq!(seg[0].selected, "1080p+720p");
        assert!((seg[0].savings_pct - 250.0 / 9.0).abs() < 1e-9);
    }

    #[test]
    fn empty_timeline_rejected() {
        let ladder = ResolutionLadder::default();
        assert!(savings_report(&[], &ladder, 4, SEGMENT_MS).is_err());
        assert!(savings_report(&[stream("S1", &[])], &ladder, 4, SEGMENT_MS).is_err());
    }

    proptest! {
        #[test]
        fn aggregate_forms_agree(levels in proptest::collection::vec(0usize..5, 1..40)) {
            let ladder = ResolutionLadder::default();
            let r = savings_report(&[stream("S1", &levels)], &ladder, 4, SEGMENT_MS).unwrap();
            prop_assert!((r.overall.mean_savings_pct - r.overall.cost_ratio_savings_pct).abs() < 1e-9);
        }

        #[test]
        fn jod_error_is_scale_invariant_and_non_negative(
            pairs in proptest::collection::vec((0.1f64..10.0, 0.1f64..10.0), 1..30),
            k in 0.01f64..100.0,
        ) {
            let base = jod_relative_error_pairs(&pairs).unwrap();
            let scaled: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| (a * k, b * k)).collect();
            prop_assert!(base >= 0.0);
            prop_assert!((base - jod_relative_error_pairs(&scaled).unwrap()).abs() <= 1e-9 * base.max(1.0));
            // Replacing any prediction by its reference never raises the error.
            for i in 0..pairs.len() {
                let mut fixed = pairs.clone();
                fixed[i].0 = fixed[i].1;
                prop_assert!(jod_relative_error_pairs(&fixed).unwrap() <= base + 1e-12);
            }
        }
    }

    fn tiny_run() -> (DatasetManifest, QualityTable, Vec<LabelRecord>) {
        let ladder = ResolutionLadder::default();
        let mut table = QualityTable::default();
        let mut clips = Vec::new();
        let mut labels = Vec::new();
        for k in 0..16 {
            let id = format!("v0_c{k:03}");
            let jods = if k < 8 {
                vec![8.0, 9.0, 9.95, 10.0, 10.0]
            } else {
                vec![9.95, 10.0, 10.0, 10.0, 10.0]
            };
            labels.push(crate::labeling::select_label(&id, "S1", &jods, &ladder, DEFAULT_TOLERANCE).unwrap());
            table.insert(&id, "S1", QualityRow { scene: "v0".into(), jods });
            clips.push(ClipManifestEntry {
                clip_id: id.clone(),
                scene: "v0".into(),
                setting: "S1".into(),
                frame_count: CLIP_FRAMES,
                clip_index: k,
                motion_path: format!("{id}.m").into(),
                descriptor_path: format!("{id}.d").into(),
                label: None,
            });
        }
        (DatasetManifest::new(&ladder, clips), table, labels)
    }

    fn oracle_predictions(manifest: &DatasetManifest, labels: &[LabelRecord]) -> Vec<PredictionRecord> {
        manifest
            .clips
            .iter()
            .zip(labels)
            .map(|(c, l)| PredictionRecord {
                clip_id: c.clip_id.clone(),
                video: c.scene.clone(),
                setting: c.setting.clone(),
                t_ms: c.start_ms(),
                log_probs: crate::controller::hard_label_emissions(l.label, 5),
            })
            .collect()
    }

    #[test]
    fn perfect_predictor_scores_zero_error() {
        let (manifest, table, labels) = tiny_run();
        assert_eq!(labels[0].label, 2);
        assert_eq!(labels[8].label, 0);
        let preds = oracle_predictions(&manifest, &labels);
        let opts = EvalOptions {
            smoothing: None,
            start: None,
            baseline: 4,
            segment_ms: SEGMENT_MS,
            params: Some(7),
        };
        let eval = evaluate_predictions(&manifest, &table, &labels, &preds, &opts).unwrap();
        assert_eq!(eval.metrics.res_error, 0.0);
        assert_eq!(eval.metrics.jod_error_pct, 0.0);
        assert_eq!(eval.metrics.accuracy, 1.0);
        assert_eq!(eval.savings.segments.len(), 2);
        let expected = (500.0 / 9.0 + (1.0 - 27_648_000.0 / 248_832_000.0) * 100.0) / 2.0;
        assert!((eval.metrics.savings_overall_pct - expected).abs() < 1e-9);

        let smoothed = EvalOptions {
            smoothing: Some(TransitionGraph::linear(5, 0.5).unwrap()),
            ..opts
        };
        let eval = evaluate_predictions(&manifest, &table, &labels, &preds, &smoothed).unwrap();
        assert_eq!(eval.metrics.accuracy, 1.0);
        assert_eq!(eval.metrics.switches, 2);

        let dir = tempfile::tempdir().unwrap();
        write_evaluation(dir.path(), &eval, "test", Some(&serde_json::json!({"tool": "t"}))).unwrap();
        let segs = fs::read_to_string(dir.path().join(SEGMENTS_FILE)).unwrap();
        let mut lines = segs.lines();
        assert!(lines.next().unwrap().starts_with("# provenance: "));
        assert_eq!(lines.next().unwrap(), "setting,video,segment_index,selected,baseline,savings_pct");
        assert!(lines.next().unwrap().starts_with("S1,v0,0,720p,1080p,55.55"));
        let metrics: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap()).unwrap();
        assert_eq!(metrics["res_error"], 0.0);
        assert_eq!(metrics["provenance"]["tool"], "t");
    }

    #[test]
    fn constant_top_predictor_saves_nothing() {
        let (manifest, table, labels) = tiny_run();
        let mut preds = oracle_predictions(&manifest, &labels);
        for p in &mut preds {
            p.log_probs = crate::controller::hard_label_emissions(4, 5);
        }
        let opts = EvalOptions {
            smoothing: None,
            start: None,
            baseline: 4,
            segment_ms: SEGMENT_MS,
            params: None,
        };
        let eval = evaluate_predictions(&manifest, &table, &labels, &preds, &opts).unwrap();
        assert_eq!(eval.metrics.savings_overall_pct, 0.0);
        assert!(eval.metrics.jod_error_pct > 0.0);
        assert_eq!(eval.metrics.accuracy, 0.0);
    }

    #[test]
    fn unknown_clip_rejected() {
        let (manifest, table, labels) = tiny_run();
        let mut preds = oracle_predictions(&manifest, &labels);
        preds[0].clip_id = "ghost".into();
        let opts = EvalOptions {
            smoothing: None,
            start: None,
            baseline: 4,
            segment_ms: SEGMENT_MS,
            params: None,
        };
        assert!(evaluate_predictions(&manifest, &table, &labels, &preds, &opts).is_err());
    }
}
