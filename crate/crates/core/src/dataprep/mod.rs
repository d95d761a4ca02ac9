//! Motion scoring, clip filtering and recaption requests.
//!
//! A clip's score is the mean over consecutive frame pairs of the mean
//! per-pixel flow magnitude, divided by the frame width by default so the
//! thresholds are resolution-independent fractions.

pub mod flow;
pub mod manifest;
pub mod pgm;
pub mod recaption;
pub mod synthetic;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use flow::{optical_flow, FlowField};
pub use manifest::{parse_manifest, score_manifest, verdict_lines, ManifestEntry, VerdictRecord};
pub use pgm::GrayFrame;
pub use recaption::{build_consolidation_request, build_recaption_request, consolidate_captions};

pub const DEFAULT_S1: f64 = 0.25;
pub const DEFAULT_S2: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowFilterConfig {
    pub s1: f64,
    pub s2: f64,
    /// Divide mean displacement by the frame width.
    pub normalize: bool,
}

impl Default for FlowFilterConfig {
    fn default() -> Self {
        Self {
            s1: DEFAULT_S1,
            s2: DEFAULT_S2,
            normalize: true,
        }
    }
}

impl FlowFilterConfig {
    pub fn new(s1: f64, s2: f64) -> Result<Self> {
        let cfg = Self {
            s1,
            s2,
            normalize: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s1 >= 0.0 && self.s1 < self.s2) {
            return Err(Error::validation(
                "thresholds",
                format!("need 0 <= s1 < s2, got s1 = {}, s2 = {}", self.s1, self.s2),
            ));
        }
        Ok(())
    }
}

/// Mean flow magnitude of each consecutive pair, in order.
pub fn pair_scores(frames: &[GrayFrame], cfg: &FlowFilterConfig) -> Result<Vec<f64>> {
    if frames.len() < 2 {
        return Err(Error::validation(
            "frames",
            format!("need at least 2 frames, got {}", frames.len()),
        ));
    }
    frames
        .windows(2)
        .map(|p| {
            let m = optical_flow(&p[0], &p[1])?.mean_magnitude();
            Ok(if cfg.normalize { m / p[0].width() as f64 } else { m })
        })
        .collect()
}

pub fn flow_score(frames: &[GrayFrame], cfg: &FlowFilterConfig) -> Result<f64> {
    let pairs = pair_scores(frames, cfg)?;
    Ok(pairs.iter().sum::<f64>() / pairs.len() as f64)
}

/// Scores several clips in parallel; output order follows input order.
pub fn score_clips(clips: &[Vec<GrayFrame>], cfg: &FlowFilterConfig) -> Result<Vec<f64>> {
    clips.par_iter().map(|c| flow_score(c, cfg)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictReason {
    #[serde(rename = "below_s1")]
    BelowS1,
    #[serde(rename = "above_s2")]
    AboveS2,
    InRange,
}

impl VerdictReason {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictReason::BelowS1 => "below_s1",
            VerdictReason::AboveS2 => "above_s2",
            VerdictReason::InRange => "in_range",
        }
    }
}

impl std::fmt::Display for VerdictReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipVerdict {
    pub id: String,
    pub score: f64,
    pub kept: bool,
    pub reason: VerdictReason,
}

/// Keeps clips with `s1 <= score <= s2`. A NaN score fails both bounds and
/// is reported below `s1`.
pub fn filter_clips(scores: &[(String, f64)], cfg: &FlowFilterConfig) -> Vec<ClipVerdict> {
    scores
        .iter()
        .map(|(id, score)| {
            let reason = if *score > cfg.s2 {
                VerdictReason::AboveS2
            } else if *score >= cfg.s1 {
                VerdictReason::InRange
            } else {
                VerdictReason::BelowS1
            };
            ClipVerdict {
                id: id.clone(),
                score: *score,
                kept: reason == VerdictReason::InRange,
                reason,
            }
        })
        .collect()
}
