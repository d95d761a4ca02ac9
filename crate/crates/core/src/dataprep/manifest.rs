//! JSON-lines clip manifests and verdict records.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pgm::{load_pgm, GrayFrame};
use super::{filter_clips, flow_score, ClipVerdict, FlowFilterConfig, VerdictReason};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub frames: Vec<String>,
    pub caption: String,
}

/// One manifest entry extended with its verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub id: String,
    pub frames: Vec<String>,
    pub caption: String,
    pub score: f64,
    pub kept: bool,
    pub reason: VerdictReason,
}

/// Parses one JSON object per non-blank line. Errors carry the 1-based line.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })
        })
        .collect()
}

fn load_clip(entry: &ManifestEntry, base: &Path) -> Result<Vec<GrayFrame>> {
    entry
        .frames
        .iter()
        .map(|f| {
            let p = PathBuf::from(f);
            load_pgm(if p.is_absolute() { p } else { base.join(p) })
        })
        .collect()
}

/// Loads and scores every clip (frame paths relative to `base`), then filters.
pub fn score_manifest(entries: &[ManifestEntry], base: &Path, cfg: &FlowFilterConfig) -> Result<Vec<ClipVerdict>> {
    cfg.validate()?;
    let scores = entries
        .par_iter()
        .map(|e| Ok((e.id.clone(), flow_score(&load_clip(e, base)?, cfg)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(filter_clips(&scores, cfg))
}

/// Verdict output: one JSON object per line, in manifest order.
pub fn verdict_lines(entries: &[ManifestEntry], verdicts: &[ClipVerdict]) -> Result<String> {
    if entries.len() != verdicts.len() {
        return Err(Error::validation(
            "verdicts",
            format!("{} verdicts for {} entries", verdicts.len(), entries.len()),
        ));
    }
    let mut out = String::new();
    for (e, v) in entries.iter().zip(verdicts) {
        let rec = VerdictRecord {
            id: e.id.clone(),
            frames: e.frames.clone(),
            caption: e.caption.clone(),
            score: v.score,
            kept: v.kept,
            reason: v.reason,
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable record"));
        out.push('\n');
    }
    Ok(out)
}
