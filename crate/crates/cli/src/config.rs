//! Run configuration: file values (JSON or TOML) overlaid by command-line flags.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use seenough_core::controller::DEFAULT_LAMBDA;
use seenough_core::labeling::DEFAULT_TOLERANCE;
use seenough_core::ladder::{DEFAULT_FRAME_RATE, DEFAULT_HEIGHTS};
use seenough_core::predictor::PredictorConfig;
use seenough_core::synthetic::SyntheticConfig;
use seenough_core::training::TrainConfig;
use seenough_core::ResolutionLadder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub ladder_heights: Vec<u32>,
    pub frame_rate: f64,
    pub tolerance: f64,
    /// Linear switching penalty of the smoothing controller.
    pub lambda: f64,
    /// Baseline level name for savings; also the controller start level.
    pub baseline: String,
    pub seed: u64,
    pub deterministic: bool,
    pub model: PredictorConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            ladder_heights: DEFAULT_HEIGHTS.to_vec(),
            frame_rate: DEFAULT_FRAME_RATE,
            tolerance: DEFAULT_TOLERANCE,
            lambda: DEFAULT_LAMBDA,
            baseline: "1080p".into(),
            seed: 0,
            deterministic: false,
            model: PredictorConfig::default(),
            train: TrainConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses `.toml` files as TOML and anything else as JSON.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).with_context(|| format!("parsing TOML config {}", path.display()))?
        } else {
            serde_json::from_str(&text).with_context(|| format!("parsing JSON config {}", path.display()))?
        };
        Ok(config)
    }

    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }

    pub fn ladder(&self) -> anyhow::Result<ResolutionLadder> {
        Ok(ResolutionLadder::widescreen(&self.ladder_heights, self.frame_rate)?)
    }

    /// Copies the top-level seed and determinism flag into the training
    /// section and validates the result.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        self.train.seed = self.seed;
        self.train.deterministic = self.deterministic;
        self.train.validate()?;
        self.model.validate()?;
        self.synthetic.validate()?;
        let ladder = self.ladder()?;
        ladder.index_of(&self.baseline)?;
        if self.model.classes != ladder.len() {
            bail!(
                "model predicts {} classes but the ladder has {} levels",
                self.model.classes,
                ladder.len()
            );
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            bail!("lambda must be >= 0, got {}", self.lambda);
        }
        Ok(self)
    }
}
