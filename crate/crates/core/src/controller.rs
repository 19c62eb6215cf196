//! Viterbi smoothing of per-clip predictions into committed resolutions.
//!
//! Every 250 ms clip contributes one emission vector (log-probabilities over
//! the ladder). Path scores are updated with
//! `delta'_j = max_i (delta_i - w(i, j)) + e_j` and renormalized so the best
//! score is 0. Every eight steps (2000 ms, one GOP) the controller commits to
//! the argmax of the scores, ties going to the cheaper level. Scores are never
//! reset, so path memory spans decision boundaries.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::CLIP_MS;
use crate::predictor::layers::log_softmax;

/// Steps per committed decision: 2000 ms / 250 ms.
pub const STEPS_PER_DECISION: usize = 8;
pub const DEFAULT_LAMBDA: f64 = 0.5;
/// Stand-in for minus infinity on unreachable states.
pub const UNREACHABLE: f64 = -1e30;
/// Log-emission assigned to non-predicted levels in hard-label mode.
pub const HARD_LABEL_FLOOR: f64 = -20.0;
/// Longest sequence `brute_force_best_path` will enumerate.
pub const MAX_BRUTE_FORCE_STEPS: usize = 8;

/// Switch penalties `w(i, j)`: non-negative with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionGraph {
    weights: Vec<Vec<f64>>,
}

/// On-disk form: `{"lambda": x}` or `{"weights": [[...], ...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GraphSpec {
    Lambda { lambda: f64 },
    Weights { weights: Vec<Vec<f64>> },
}

impl TransitionGraph {
    /// `w(i, j) = lambda * |i - j|`.
    pub fn linear(levels: usize, lambda: f64) -> Result<Self> {
        let weights = (0..levels)
            .map(|i| (0..levels).map(|j| lambda * i.abs_diff(j) as f64).collect())
            .collect();
        Self::from_weights(weights)
    }

    pub fn from_weights(weights: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::Controller("transition graph has no states".into()));
        }
        for (i, row) in weights.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Controller(format!("weight row {i} has {} entries, expected {k}", row.len())));
            }
            for (j, &w) in row.iter().enumerate() {
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Controller(format!("w({i},{j}) = {w} must be finite and >= 0")));
                }
                if i == j && w != 0.0 {
                    return Err(Error::Controller(format!("self-penalty w({i},{i}) = {w} must be 0")));
                }
            }
        }
        Ok(TransitionGraph { weights })
    }

    pub fn from_spec(spec: &GraphSpec, levels: usize) -> Result<Self> {
        let graph = match spec {
            GraphSpec::Lambda { lambda } => Self::linear(levels, *lambda)?,
            GraphSpec::Weights { weights } => Self::from_weights(weights.clone())?,
        };
        if graph.levels() != levels {
            return Err(Error::Controller(format!(
                "graph has {} states but the ladder has {levels} levels",
                graph.levels()
            )));
        }
        Ok(graph)
    }

    pub fn load(path: impl AsRef<Path>, levels: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Self::from_spec(&serde_json::from_str(&text)?, levels)
    }

    pub fn levels(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, from: usize, to: usize) -> f64 {
        self.weights[from][to]
    }
}

/// A committed resolution for the segment starting at `t_ms`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub t_ms: u64,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    graph: TransitionGraph,
    scores: Vec<f64>,
    current: usize,
    steps_since_decision: usize,
    steps_per_decision: usize,
    total_steps: usize,
    history: Vec<Decision>,
}

fn argmax_low(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl ControllerState {
    /// Only `start` has a finite score.
    pub fn new(graph: TransitionGraph, start: usize) -> Result<Self> {
        Self::with_cadence(graph, start, STEPS_PER_DECISION)
    }

    pub fn with_cadence(graph: TransitionGraph, start: usize, steps_per_decision: usize) -> Result<Self> {
        let k = graph.levels();
        if start >= k {
            return Err(Error::InvalidLevel { index: start, levels: k });
        }
        if steps_per_decision == 0 {
            return Err(Error::Controller("steps per decision must be positive".into()));
        }
        let mut scores = vec![UNREACHABLE; k];
        scores[start] = 0.0;
        Ok(ControllerState {
            graph,
            scores,
            current: start,
            steps_since_decision: 0,
            steps_per_decision,
            total_steps: 0,
            history: Vec::new(),
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn current_resolution(&self) -> usize {
        self.current
    }

    pub fn steps_since_decision(&self) -> usize {
        self.steps_since_decision
    }

    pub fn history(&self) -> &[Decision] {
        &self.history
    }

    pub fn graph(&self) -> &TransitionGraph {
        &self.graph
    }

    /// True once a full decision window has been accumulated.
    pub fn decision_due(&self) -> bool {
        self.steps_since_decision == self.steps_per_decision
    }

    /// One Viterbi update with a vector of log-emissions.
    pub fn step(&mut self, emissions: &[f64]) -> Result<()> {
        let k = self.graph.levels();
        if emissions.len() != k {
            return Err(Error::Controller(format!("{} emissions for {k} states", emissions.len())));
        }
        if emissions.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("emission log-probabilities"));
        }
        if self.decision_due() {
            return Err(Error::Controller("a decision is due before the next step".into()));
        }
        let next: Vec<f64> = (0..k)
            .map(|j| {
                let best = (0..k)
                    .map(|i| self.scores[i] - self.graph.weight(i, j))
                    .fold(f64::NEG_INFINITY, f64::max);
                best + emissions[j]
            })
            .collect();
        let max = next.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Unreachable states stay pinned at the sentinel instead of drifting upward.
        self.scores = next.into_iter().map(|s| (s - max).max(UNREACHABLE)).collect();
        self.steps_since_decision += 1;
        self.total_steps += 1;
        Ok(())
    }

    /// Commits after a full window of steps.
    pub fn decide(&mut self) -> Result<Decision> {
        if !self.decision_due() {
            return Err(Error::Controller(format!(
                "decision requested after {} of {} steps",
                self.steps_since_decision, self.steps_per_decision
            )));
        }
        Ok(self.commit())
    }

    /// Commits immediately from the current scores, whatever the step count.
    pub fn flush(&mut self) -> Decision {
        self.commit()
    }

    fn commit(&mut self) -> Decision {
        let resolution = argmax_low(&self.scores);
        let segment_start = (self.total_steps - self.steps_since_decision) as u64 * CLIP_MS;
        let decision = Decision {
            t_ms: segment_start,
            resolution,
        };
        self.current = resolution;
        self.steps_since_decision = 0;
        self.history.push(decision);
        decision
    }
}

/// Exhaustive maximum of `sum e_t(s_t) - w(start, s_1) - sum w(s_{t-1}, s_t)`.
///
/// Among optimal paths, the one whose final state has the lowest index is
/// returned (matching the controller's tie rule).
pub fn brute_force_best_path(emissions: &[Vec<f64>], graph: &TransitionGraph, start: usize) -> Result<(Vec<usize>, f64)> {
    let k = graph.levels();
    let steps = emissions.len();
    if steps > MAX_BRUTE_FORCE_STEPS {
        return Err(Error::TooManySteps {
            steps,
            max: MAX_BRUTE_FORCE_STEPS,
        });
    }
    if start >= k {
        return Err(Error::InvalidLevel { index: start, levels: k });
    }
    if let Some(bad) = emissions.iter().find(|e| e.len() != k) {
        return Err(Error::Controller(format!("{} emissions for {k} states", bad.len())));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut path = vec![0usize; steps];
    let total = k.pow(steps as u32);
    for code in 0..total {
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % k;
            c /= k;
        }
        let mut score = 0.0;
        let mut prev = start;
        for (t, &s) in path.iter().enumerate() {
            score += emissions[t][s] - graph.weight(prev, s);
            prev = s;
        }
        let better = match &best {
            None => true,
            Some((bp, bs)) => score > *bs || (score == *bs && path.last() < bp.last()),
        };
        if better {
            best = Some((path.clone(), score));
        }
    }
    Ok(best.expect("at least one path"))
}

/// One-hot log-emissions with `HARD_LABEL_FLOOR` off the predicted level.
pub fn hard_label_emissions(label: usize, levels: usize) -> Vec<f64> {
    (0..levels).map(|j| if j == label { 0.0 } else { HARD_LABEL_FLOOR }).collect()
}

/// Log-softmax of predictor logits as controller emissions.
pub fn logit_emissions(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits)
}

/// One emission record of a stream: the clip's start time and log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionRecord {
    pub t_ms: u64,
    pub log_probs: Vec<f64>,
}

/// Runs a stream through a fresh controller: a decision every full window,
/// plus a forced flush of any trailing partial window. Records are processed
/// in `t_ms` order; each decision is stamped with its window's first `t_ms`.
pub fn smooth_stream(records: &[EmissionRecord], graph: &TransitionGraph, start: usize) -> Result<Vec<Decision>> {
    let mut ordered: Vec<&EmissionRecord> = records.iter().collect();
    ordered.sort_by_key(|r| r.t_ms);
    let mut state = ControllerState::new(graph.clone(), start)?;
    let mut decisions = Vec::new();
    let mut window_start = None;
    for record in ordered {
        window_start.get_or_insert(record.t_ms);
        state.step(&record.log_probs)?;
        if state.decision_due() {
            let d = state.decide()?;
            decisions.push(Decision {
                t_ms: window_start.take().expect("window started"),
                resolution: d.resolution,
            });
        }
    }
    if let Some(t_ms) = window_start {
        let d = state.flush();
        decisions.push(Decision {
            t_ms,
            resolution: d.resolution,
        });
    }
    Ok(decisions)
}

/// Number of level changes, counting a change away from `start` at the first decision.
pub fn switch_count(start: usize, decisions: &[Decision]) -> usize {
    let mut prev = start;
    let mut switches = 0;
    for d in decisions {
        if d.resolution != prev {
            switches += 1;
        }
        prev = d.resolution;
    }
    switches
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_state() -> (Vec<Vec<f64>>, TransitionGraph) {
        let e = vec![vec![-0.1, -2.0], vec![-2.0, -0.1], vec![-2.0, -0.1]];
        (e, TransitionGraph::from_weights(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap())
    }

    #[test]
    fn two_state_example_by_enumeration() {
        let (e, g) = two_state();
        let (path, score) = brute_force_best_path(&e, &g, 0).unwrap();
        assert_eq!(path, vec![0, 1, 1]);
        assert!((score + 1.3).abs() < 1e-12);
        let mut s = ControllerState::with_cadence(g, 0, 3).unwrap();
        for row in &e {
            s.step(row).unwrap();
        }
        assert_eq!(s.decide().unwrap().resolution, 1);
    }

    #[test]
    fn initialization_and_degenerate_flush() {
        let g = TransitionGraph::linear(5, 0.5).unwrap();
        let mut s = ControllerState::new(g.clone(), 4).unwrap();
        assert_eq!(s.scores().iter().filter(|&&v| v > UNREACHABLE).count(), 1);
        assert_eq!(s.scores()[4], 0.0);
        assert!(s.decide().is_err());
        assert_eq!(s.flush().resolution, 4);
        assert!(matches!(ControllerState::new(g, 7), Err(Error::InvalidLevel { index: 7, levels: 5 })));
    }

    #[test]
    fn zero_penalty_follows_per_step_argmax() {
        let g = TransitionGraph::linear(3, 0.0).unwrap();
        let e = [vec![-1.0, -0.2, -3.0], vec![-0.1, -2.0, -1.0], vec![-2.0, -2.5, -0.3]];
        let mut s = ControllerState::with_cadence(g.clone(), 0, 3).unwrap();
        for row in &e {
            s.step(row).unwrap();
        }
        // With free switching the best path is the per-step argmax chain [1, 0, 2].
        let (path, _) = brute_force_best_path(&e, &g, 0).unwrap();
        assert_eq!(path, vec![1, 0, 2]);
        assert_eq!(s.decide().unwrap().resolution, 2);
    }

    #[test]
    fn eight_steps_favoring_720p_from_1080p() {
        // Every step favors 720p (index 2) over 1080p (index 4) by 1.0; the
        // one-off cost of moving from 1080p is 2 * lambda = 1.0 < 8 * 1.0.
        let g = TransitionGraph::linear(5, 0.5).unwrap();
        let e: Vec<Vec<f64>> = (0..8).map(|_| vec![-4.0, -3.0, -0.5, -2.0, -1.5]).collect();
        let (path, _) = brute_force_best_path(&e, &g, 4).unwrap();
        let mut s = ControllerState::new(g, 4).unwrap();
        for row in &e {
            s.step(row).unwrap();
        }
        let d = s.decide().unwrap();
        assert_eq!(d.resolution, 2);
        assert_eq!(*path.last().unwrap(), 2);
        assert_eq!(d.t_ms, 0);
    }

    #[test]
    fn ties_go_to_the_cheaper_level() {
        let g = TransitionGraph::linear(5, 0.0).unwrap();
        let mut s = ControllerState::with_cadence(g, 4, 1).unwrap();
        s.step(&[-5.0, -1.0, -1.0, -3.0, -3.0]).unwrap();
        assert_eq!(s.decide().unwrap().resolution, 1);
    }

    #[test]
    fn forced_flush_resets_the_window() {
        let g = TransitionGraph::linear(5, 0.5).unwrap();
        let mut s = ControllerState::new(g, 4).unwrap();
        for _ in 0..3 {
            s.step(&[-0.1, -3.0, -3.0, -3.0, -3.0]).unwrap();
        }
        let d = s.flush();
        assert_eq!(s.steps_since_decision(), 0);
        assert_eq!(d.resolution, 0);
        assert_eq!(s.current_resolution(), 0);
    }

    #[test]
    fn rejects_bad_emissions_and_graphs() {
        let g = TransitionGraph::linear(3, 1.0).unwrap();
        let mut s = ControllerState::new(g.clone(), 0).unwrap();
        assert!(matches!(s.step(&[0.0, f64::NAN, 0.0]), Err(Error::NonFinite(_))));
        assert!(s.step(&[0.0, 0.0]).is_err());
        assert!(TransitionGraph::from_weights(vec![vec![0.0, -1.0], vec![1.0, 0.0]]).is_err());
        assert!(TransitionGraph::from_weights(vec![vec![0.5, 1.0], vec![1.0, 0.0]]).is_err());
        let long = vec![vec![0.0; 3]; 9];
        assert!(matches!(brute_force_best_path(&long, &g, 0), Err(Error::TooManySteps { steps: 9, max: 8 })));
    }

    #[test]
    fn graph_spec_parsing() {
        let g = TransitionGraph::from_spec(&serde_json::from_str(r#"{"lambda": 2.0}"#).unwrap(), 3).unwrap();
        assert_eq!(g.weight(0, 2), 4.0);
        let w: GraphSpec = serde_json::from_str(r#"{"weights": [[0, 1], [3, 0]]}"#).unwrap();
        let g = TransitionGraph::from_spec(&w, 2).unwrap();
        assert_eq!(g.weight(1, 0), 3.0);
        assert!(TransitionGraph::from_spec(&w, 5).is_err());
    }

    #[test]
    fn smooth_stream_stamps_windows_and_flushes_tail() {
        let g = TransitionGraph::linear(2, 1.0).unwrap();
        let records: Vec<EmissionRecord> = (0..10)
            .map(|i| EmissionRecord {
                t_ms: i * 250,
                log_probs: if i < 8 { vec![-2.0, -0.1] } else { vec![-0.1, -5.0] },
            })
            .collect();
        let d = smooth_stream(&records, &g, 0).unwrap();
        // The two-step tail favors level 0 by 4.9 per step, outweighing the switch cost of 1.
        assert_eq!(d, vec![Decision { t_ms: 0, resolution: 1 }, Decision { t_ms: 2000, resolution: 0 }]);
        assert_eq!(switch_count(0, &d), 2);
    }

    #[test]
    fn huge_penalty_never_leaves_start() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = TransitionGraph::linear(5, 1e6).unwrap();
        let records: Vec<EmissionRecord> = (0..64)
            .map(|i| EmissionRecord {
                t_ms: i * 250,
                log_probs: (0..5).map(|_| rng.random_range(-5.0..0.0)).collect(),
            })
            .collect();
        let d = smooth_stream(&records, &g, 4).unwrap();
        assert_eq!(switch_count(4, &d), 0);
    }

    #[test]
    fn dominant_start_state_never_changes() {
        for lambda in [0.0, 0.5, 3.0] {
            let g = TransitionGraph::linear(5, lambda).unwrap();
            let records: Vec<EmissionRecord> = (0..24)
                .map(|i| EmissionRecord { t_ms: i * 250, log_probs: vec![-3.0, -2.0, -0.1, -2.0, -3.0] })
                .collect();
            assert!(smooth_stream(&records, &g, 2).unwrap().iter().all(|d| d.resolution == 2));
        }
    }

    fn emissions_strategy(steps: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-5.0f64..0.0, 5), steps)
    }

    proptest! {
        #[test]
        fn viterbi_matches_enumeration(e in emissions_strategy(6), lambda in 0.0f64..2.0, start in 0usize..5) {
            let g = TransitionGraph::linear(5, lambda).unwrap();
            let (path, _) = brute_force_best_path(&e, &g, start).unwrap();
            let mut s = ControllerState::with_cadence(g, start, 6).unwrap();
            for row in &e {
                s.step(row).unwrap();
            }
            prop_assert_eq!(s.decide().unwrap().resolution, *path.last().unwrap());
        }

        #[test]
        fn constant_shift_does_not_change_decisions(e in emissions_strategy(16), shift in -50.0f64..50.0) {
            let g = TransitionGraph::linear(5, 0.7).unwrap();
            let plain: Vec<EmissionRecord> = e.iter().enumerate()
                .map(|(i, row)| EmissionRecord { t_ms: i as u64 * 250, log_probs: row.clone() }).collect();
            let shifted: Vec<EmissionRecord> = plain.iter()
                .map(|r| EmissionRecord { t_ms: r.t_ms, log_probs: r.log_probs.iter().map(|v| v + shift).collect() }).collect();
            prop_assert_eq!(smooth_stream(&plain, &g, 4).unwrap(), smooth_stream(&shifted, &g, 4).unwrap());
        }

        #[test]
        fn single_step_is_penalized_argmax(e in emissions_strategy(1), lambda in 0.0f64..2.0, start in 0usize..5) {
            let g = TransitionGraph::linear(5, lambda).unwrap();
            let (path, score) = brute_force_best_path(&e, &g, start).unwrap();
            let vals: Vec<f64> = (0..5).map(|j| e[0][j] - g.weight(start, j)).collect();
            prop_assert_eq!(path[0], argmax_low(&vals));
            prop_assert_eq!(score, vals[path[0]]);
        }
    }
}
