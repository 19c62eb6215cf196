//! Candidate rendering resolutions and the pixel-throughput cost model.
//!
//! Cost is `frame_rate * width * height` pixels per second. At a fixed 16:9
//! aspect ratio this orders levels exactly like `f * r^2` with `r` the height.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FRAME_RATE: f64 = 120.0;
pub const DEFAULT_HEIGHTS: [u32; 5] = [360, 480, 720, 864, 1080];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolutionLevel {
    pub name: String,
    pub height: u32,
    pub width: u32,
    pub ladder_index: usize,
}

impl ResolutionLevel {
    /// A 16:9 level of the given height, width rounded to the nearest even number.
    pub fn widescreen(height: u32, ladder_index: usize) -> Self {
        ResolutionLevel {
            name: format!("{height}p"),
            height,
            width: even_width_16_9(height),
            ladder_index,
        }
    }

    pub fn pixels(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }
}

/// `round_to_even(height * 16 / 9)`: the nearest even integer.
pub fn even_width_16_9(height: u32) -> u32 {
    let exact = f64::from(height) * 16.0 / 9.0;
    ((exact / 2.0).round() * 2.0) as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionLadder {
    pub levels: Vec<ResolutionLevel>,
    pub frame_rate: f64,
}

impl Default for ResolutionLadder {
    fn default() -> Self {
        ResolutionLadder::widescreen(&DEFAULT_HEIGHTS, DEFAULT_FRAME_RATE)
            .expect("default ladder is valid")
    }
}

impl ResolutionLadder {
    pub fn widescreen(heights: &[u32], frame_rate: f64) -> Result<Self> {
        let levels = heights
            .iter()
            .enumerate()
            .map(|(i, &h)| ResolutionLevel::widescreen(h, i))
            .collect();
        ResolutionLadder::new(levels, frame_rate)
    }

    pub fn new(levels: Vec<ResolutionLevel>, frame_rate: f64) -> Result<Self> {
        let ladder = ResolutionLadder { levels, frame_rate };
        ladder.validate()?;
        Ok(ladder)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return Err(Error::Ladder(format!(
                "frame rate must be positive, got {}",
                self.frame_rate
            )));
        }
        if self.levels.is_empty() {
            return Err(Error::Ladder("no levels".into()));
        }
        for (i, level) in self.levels.iter().enumerate() {
            if level.ladder_index != i {
                return Err(Error::Ladder(format!(
                    "level {} has ladder_index {}, expected {i}",
                    level.name, level.ladder_index
                )));
            }
            if level.height == 0 || level.width == 0 {
                return Err(Error::Ladder(format!("level {} has zero extent", level.name)));
            }
        }
        for pair in self.levels.windows(2) {
            if pair[1].height <= pair[0].height || pair[1].pixels() <= pair[0].pixels() {
                return Err(Error::Ladder(format!(
                    "levels must be strictly ascending: {} then {}",
                    pair[0].name, pair[1].name
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, index: usize) -> Result<&ResolutionLevel> {
        self.levels.get(index).ok_or(Error::InvalidLevel {
            index,
            levels: self.levels.len(),
        })
    }

    pub fn top(&self) -> &ResolutionLevel {
        self.levels.last().expect("validated ladder is non-empty")
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.levels
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownResolution(name.to_string()))
    }

    /// Pixel throughput of the level at `index` at the ladder's frame rate.
    pub fn cost(&self, index: usize) -> Result<f64> {
        Ok(pixel_cost(self.level(index)?, self.frame_rate))
    }
}

pub fn pixel_cost(level: &ResolutionLevel, frame_rate: f64) -> f64 {
    frame_rate * level.pixels() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_ladder_dims() {
        let ladder = ResolutionLadder::default();
        let dims: Vec<(u32, u32)> = ladder.levels.iter().map(|l| (l.width, l.height)).collect();
        assert_eq!(
            dims,
            vec![(640, 360), (854, 480), (1280, 720), (1536, 864), (1920, 1080)]
        );
        assert_eq!(ladder.len(), 5);
        assert_eq!(ladder.index_of("864p").unwrap(), 3);
    }

    #[test]
    fn cost_examples() {
        let ladder = ResolutionLadder::default();
        assert_eq!(ladder.cost(4).unwrap(), 248_832_000.0);
        assert_eq!(ladder.cost(2).unwrap(), 110_592_000.0);
        assert_eq!(ladder.cost(0).unwrap(), 27_648_000.0);
        let saving = 1.0 - ladder.cost(2).unwrap() / ladder.cost(4).unwrap();
        assert!((saving - 5.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn cost_order_matches_height_squared() {
        let ladder = ResolutionLadder::default();
        for i in 0..ladder.len() {
            for j in 0..ladder.len() {
                let by_cost = ladder.cost(i).unwrap().partial_cmp(&ladder.cost(j).unwrap());
                let hi = f64::from(ladder.levels[i].height);
                let hj = f64::from(ladder.levels[j].height);
                let by_r2 = (120.0 * hi * hi).partial_cmp(&(120.0 * hj * hj));
                assert_eq!(by_cost, by_r2, "levels {i} and {j}");
            }
        }
    }

    #[test]
    fn rejects_unsorted_or_bad_rate() {
        assert!(ResolutionLadder::widescreen(&[720, 480], 120.0).is_err());
        assert!(ResolutionLadder::widescreen(&[480, 720], 0.0).is_err());
        assert!(ResolutionLadder::default().level(7).is_err());
    }
}
