//! Spatio-temporally decomposed prompts: frame-indexed segments, each split
//! into sub-objects with normalized boxes, plus binary region masks.
//!
//! Plan documents are JSON:
//!
//! ```json
//! {"total_frames": 80, "alpha": 0.5, "allow_overlap": false,
//!  "segments": [{"start_frame": 0, "prompt": "...",
//!                "objects": [{"prompt": "...", "box": [x, y, w, h]}]}]}
//! ```
//!
//! Boxes are `[top-left x, top-left y, width, height]` in `[0, 1]` image
//! coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Segment start frames must be a multiple of this.
pub const FRAME_QUANTUM: usize = 8;
pub const DEFAULT_ALPHA: f64 = 0.5;
const EDGE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub width: f64,
    pub height: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x, y, width, height]: [f64; 4]) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.width, b.height]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self {
            x,
            y,
            width,
            height,
        }
    }

    pub const FULL: BBox = BBox {
        x: 0.0,
        y: 0.0,
        width: 1.0,
        height: 1.0,
    };

    pub fn validate(&self, field: &str) -> Result<()> {
        let vals = [self.x, self.y, self.width, self.height];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(field, "box values must be finite"));
        }
        if !(0.0..=1.0).contains(&self.x) || !(0.0..=1.0).contains(&self.y) {
            return Err(Error::validation(field, "box origin must lie in [0, 1]"));
        }
        if !(self.width > 0.0 && self.width <= 1.0) || !(self.height > 0.0 && self.height <= 1.0)
        {
            return Err(Error::validation(field, "box width and height must lie in (0, 1]"));
        }
        if self.x + self.width > 1.0 + EDGE_TOL || self.y + self.height > 1.0 + EDGE_TOL {
            return Err(Error::validation(field, "box extends past the frame"));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.width * self.height
    }

    /// True when the two boxes share more than a degenerate sliver.
    pub fn overlaps(&self, other: &BBox) -> bool {
        let w = (self.x + self.width).min(other.x + other.width) - self.x.max(other.x);
        let h = (self.y + self.height).min(other.y + other.height) - self.y.max(other.y);
        w > EDGE_TOL && h > EDGE_TOL
    }

    /// Half-open membership test for a normalized point.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x + self.width && py >= self.y && py < self.y + self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubObject {
    pub prompt: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl SubObject {
    pub fn new(prompt: impl Into<String>, bbox: BBox) -> Self {
        Self {
            prompt: prompt.into(),
            bbox,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalSegment {
    pub start_frame: usize,
    #[serde(rename = "prompt")]
    pub global_prompt: String,
    #[serde(rename = "objects")]
    pub sub_objects: Vec<SubObject>,
}

impl TemporalSegment {
    pub fn new(start_frame: usize, global_prompt: impl Into<String>, sub_objects: Vec<SubObject>) -> Self {
        Self {
            start_frame,
            global_prompt: global_prompt.into(),
            sub_objects,
        }
    }

    pub fn object(&self, prompt: &str) -> Option<&SubObject> {
        self.sub_objects.iter().find(|o| o.prompt == prompt)
    }
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPlan {
    pub total_frames: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub allow_overlap: bool,
    pub segments: Vec<TemporalSegment>,
}

impl PromptPlan {
    /// Builds and validates a plan, sorting segments by start frame.
    pub fn new(total_frames: usize, alpha: f64, segments: Vec<TemporalSegment>) -> Result<Self> {
        let mut plan = Self {
            total_frames,
            alpha,
            allow_overlap: false,
            segments,
        };
        plan.normalize();
        plan.validate()?;
        Ok(plan)
    }

    /// A single-segment plan whose only sub-object covers the whole frame.
    pub fn single(total_frames: usize, prompt: &str) -> Result<Self> {
        Self::new(
            total_frames,
            DEFAULT_ALPHA,
            vec![TemporalSegment::new(
                0,
                prompt,
                vec![SubObject::new(prompt, BBox::FULL)],
            )],
        )
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        self.alpha = alpha;
        self.validate()?;
        Ok(self)
    }

    fn normalize(&mut self) {
        self.segments.sort_by_key(|s| s.start_frame);
    }

    /// Checks every plan invariant. Returns warnings for conditions that are
    /// tolerated (box overlap when `allow_overlap` is set).
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if self.total_frames == 0 {
            return Err(Error::validation("total_frames", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::validation(
                "alpha",
                format!("must lie in [0, 1], got {}", self.alpha),
            ));
        }
        if self.segments.is_empty() {
            return Err(Error::validation("segments", "plan has no segments"));
        }
        if self.segments[0].start_frame != 0 {
            return Err(Error::validation(
                "segments[0].start_frame",
                "first segment must start at frame 0",
            ));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            let field = format!("segments[{i}]");
            if seg.start_frame % FRAME_QUANTUM != 0 {
                return Err(Error::validation(
                    format!("{field}.start_frame"),
                    format!(
                        "start_frame not multiple of {FRAME_QUANTUM} (got {})",
                        seg.start_frame
                    ),
                ));
            }
            if seg.start_frame >= self.total_frames {
                return Err(Error::validation(
                    format!("{field}.start_frame"),
                    format!(
                        "start_frame {} is not below total_frames {}",
                        seg.start_frame, self.total_frames
                    ),
                ));
            }
            if i > 0 && seg.start_frame <= self.segments[i - 1].start_frame {
                return Err(Error::validation(
                    format!("{field}.start_frame"),
                    "start frames must be strictly increasing",
                ));
            }
            if seg.global_prompt.trim().is_empty() {
                return Err(Error::validation(format!("{field}.prompt"), "prompt is empty"));
            }
            if seg.sub_objects.is_empty() {
                return Err(Error::validation(
                    format!("{field}.objects"),
                    "segment needs at least one sub-object",
                ));
            }
            for (j, obj) in seg.sub_objects.iter().enumerate() {
                let ofield = format!("{field}.objects[{j}]");
                if obj.prompt.trim().is_empty() {
                    return Err(Error::validation(format!("{ofield}.prompt"), "prompt is empty"));
                }
                obj.bbox.validate(&format!("{ofield}.box"))?;
            }
            for a in 0..seg.sub_objects.len() {
                for b in a + 1..seg.sub_objects.len() {
                    if seg.sub_objects[a].bbox.overlaps(&seg.sub_objects[b].bbox) {
                        let msg = format!("objects {a} and {b} have overlapping boxes");
                        if self.allow_overlap {
                            warnings.push(format!("{field}: {msg}"));
                        } else {
                            return Err(Error::validation(format!("{field}.objects"), msg));
                        }
                    }
                }
            }
        }
        Ok(warnings)
    }

    /// The segment with the greatest start frame not after `frame`.
    pub fn segment_for_frame(&self, frame: usize) -> Result<&TemporalSegment> {
        if frame >= self.total_frames {
            return Err(Error::Range(format!(
                "frame {frame} outside [0, {})",
                self.total_frames
            )));
        }
        let idx = self.segments.partition_point(|s| s.start_frame <= frame);
        Ok(&self.segments[idx - 1])
    }

    pub fn segment_index_for_frame(&self, frame: usize) -> Result<usize> {
        self.segment_for_frame(frame)?;
        Ok(self.segments.partition_point(|s| s.start_frame <= frame) - 1)
    }

    /// The sub-plan covering frames `[start, start + len)`, re-based to frame 0.
    pub fn slice(&self, start: usize, len: usize) -> Result<PromptPlan> {
        if len == 0 || start + len > self.total_frames {
            return Err(Error::Range(format!(
                "slice [{start}, {}) of a {}-frame plan",
                start + len,
                self.total_frames
            )));
        }
        let first = self.segment_index_for_frame(start)?;
        let mut segments = Vec::new();
        for (i, seg) in self.segments.iter().enumerate().skip(first) {
            if seg.start_frame >= start + len {
                break;
            }
            let mut seg = seg.clone();
            seg.start_frame = if i == first { 0 } else { seg.start_frame - start };
            segments.push(seg);
        }
        let plan = PromptPlan {
            total_frames: len,
            alpha: self.alpha,
            allow_overlap: self.allow_overlap,
            segments,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plan serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{} segment{}, {} frames",
            self.segments.len(),
            if self.segments.len() == 1 { "" } else { "s" },
            self.total_frames
        )
    }
}

/// Parses and validates a plan document. Warnings are logged.
pub fn parse_plan(text: &str) -> Result<PromptPlan> {
    let (plan, warnings) = parse_plan_with_warnings(text)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(plan)
}

pub fn parse_plan_with_warnings(text: &str) -> Result<(PromptPlan, Vec<String>)> {
    let mut plan: PromptPlan = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    plan.normalize();
    let warnings = plan.validate()?;
    Ok((plan, warnings))
}

/// Binary spatial mask at one resolution, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl RegionMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::dim(format!(
                "mask {height}x{width} with {} values",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        Self {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    /// Mask values as 0/1 multipliers.
    pub fn weights(&self) -> Vec<f32> {
        self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }

    pub fn union(&self, other: &RegionMask) -> Result<RegionMask> {
        if self.resolution() != other.resolution() {
            return Err(Error::dim(format!(
                "mask union {:?} vs {:?}",
                self.resolution(),
                other.resolution()
            )));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().zip(&other.values).map(|(a, b)| *a || *b).collect(),
        })
    }

    pub fn is_disjoint(&self, other: &RegionMask) -> bool {
        self.resolution() == other.resolution()
            && !self.values.iter().zip(&other.values).any(|(a, b)| *a && *b)
    }

    /// Same mask repeated for `times` stacked grids (frame-major token order).
    pub fn repeat(&self, times: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.values.len() * times);
        for _ in 0..times {
            out.extend_from_slice(&self.values);
        }
        out
    }
}

/// Cell `(r, c)` is set iff its center `((c+0.5)/W, (r+0.5)/H)` lies in the box.
pub fn rasterize_mask(bbox: &BBox, height: usize, width: usize) -> RegionMask {
    assert!(height > 0 && width > 0, "mask dimensions must be positive");
    let mut values = Vec::with_capacity(height * width);
    for r in 0..height {
        let cy = (r as f64 + 0.5) / height as f64;
        for c in 0..width {
            let cx = (c as f64 + 0.5) / width as f64;
            values.push(bbox.contains(cx, cy));
        }
    }
    RegionMask {
        height,
        width,
        values,
    }
}

/// Nearest-center resampling of a mask to a new resolution.
pub fn downsample_mask(mask: &RegionMask, height: usize, width: usize) -> RegionMask {
    assert!(height > 0 && width > 0, "mask dimensions must be positive");
    if mask.resolution() == (height, width) {
        return mask.clone();
    }
    let mut values = Vec::with_capacity(height * width);
    for r in 0..height {
        let sr = (((r as f64 + 0.5) / height as f64) * mask.height as f64) as usize;
        let sr = sr.min(mask.height - 1);
        for c in 0..width {
            let sc = (((c as f64 + 0.5) / width as f64) * mask.width as f64) as usize;
            values.push(mask.get(sr, sc.min(mask.width - 1)));
        }
    }
    RegionMask {
        height,
        width,
        values,
    }
}
