//! Planner and recaption request templates, response parsing, and the
//! two-stage prompt decomposer.
//!
//! Responses are bracketed lists of `key: value` pairs. Keys and values may
//! use single or double quotes; a box value may be a quoted or a bare
//! `[x, y, w, h]` list.

use crate::client::TextClient;
use crate::error::{Error, Result};
use crate::plan::{BBox, PromptPlan, SubObject, TemporalSegment, DEFAULT_ALPHA};

pub const STORY_PLANNER_TEMPLATE: &str = include_str!("../resources/templates/story_planner.txt");
pub const REGION_PLANNER_TEMPLATE: &str = include_str!("../resources/templates/region_planner.txt");
pub const RECAPTION_TEMPLATE: &str = include_str!("../resources/templates/recaption.txt");

/// Slot replaced by the user input in every template.
pub const PLACEHOLDER: &str = "{the input user prompt}";

pub(crate) fn fill(template: &str, input: &str) -> String {
    template.replacen(PLACEHOLDER, input, 1)
}

/// Temporal planning request for a story spanning `total_frames`.
pub fn render_story_planner(story: &str, total_frames: usize) -> Result<String> {
    if story.trim().is_empty() {
        return Err(Error::validation("story", "must not be empty"));
    }
    Ok(fill(
        STORY_PLANNER_TEMPLATE,
        &format!("{} Total frames: {total_frames}", story.trim_end()),
    ))
}

/// Spatial planning request for one segment prompt.
pub fn render_region_planner(prompt: &str) -> Result<String> {
    if prompt.trim().is_empty() {
        return Err(Error::validation("prompt", "must not be empty"));
    }
    Ok(fill(REGION_PLANNER_TEMPLATE, prompt))
}

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Text(String),
    List(Vec<f64>),
}

struct Scanner<'a> {
    s: &'a [u8],
    pos: usize,
    raw: &'a str,
}

impl<'a> Scanner<'a> {
    fn fail<T>(&self, what: &str) -> Result<T> {
        Err(Error::ClientResponse {
            reason: format!("{what} at byte {}", self.pos),
            raw: self.raw.to_owned(),
        })
    }

    fn ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.ws();
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn quoted(&mut self) -> Result<String> {
        self.ws();
        let q = match self.s.get(self.pos) {
            Some(&q @ (b'"' | b'\'')) => q,
            _ => return self.fail("expected a quoted string"),
        };
        let start = self.pos + 1;
        let Some(len) = self.s[start..].iter().position(|&c| c == q) else {
            return self.fail("unterminated string");
        };
        self.pos = start + len + 1;
        Ok(self.raw[start..start + len].to_owned())
    }

    fn number_list(&mut self) -> Result<Vec<f64>> {
        if !self.eat(b'[') {
            return self.fail("expected '['");
        }
        let start = self.pos;
        let Some(len) = self.s[start..].iter().position(|&c| c == b']') else {
            return self.fail("unterminated list");
        };
        self.pos = start + len + 1;
        parse_numbers(&self.raw[start..start + len]).map_or_else(|| self.fail("bad number list"), Ok)
    }

    fn value(&mut self) -> Result<Value> {
        self.ws();
        match self.s.get(self.pos) {
            Some(b'[') => Ok(Value::List(self.number_list()?)),
            _ => Ok(Value::Text(self.quoted()?)),
        }
    }

    fn pairs(&mut self) -> Result<Vec<(String, Value)>> {
        if !self.eat(b'[') && !self.eat(b'{') {
            return self.fail("expected '['");
        }
        let mut out = Vec::new();
        loop {
            if self.eat(b']') || self.eat(b'}') {
                return Ok(out);
            }
            let key = self.quoted()?;
            if !self.eat(b':') {
                return self.fail("expected ':'");
            }
            out.push((key, self.value()?));
            if !self.eat(b',') {
                if self.eat(b']') || self.eat(b'}') {
                    return Ok(out);
                }
                return self.fail("expected ',' or ']'");
            }
        }
    }
}

fn parse_numbers(s: &str) -> Option<Vec<f64>> {
    s.split(',').map(|p| p.trim().parse::<f64>().ok()).collect()
}

/// Locates the list after the last `Output:` marker, or the first list.
fn pairs_of(raw: &str) -> Result<Vec<(String, Value)>> {
    let from = raw.rfind("Output:").map_or(0, |i| i + "Output:".len());
    let Some(open) = raw[from..].find(['[', '{']) else {
        return Err(Error::ClientResponse {
            reason: "no bracketed list in response".into(),
            raw: raw.to_owned(),
        });
    };
    Scanner {
        s: raw.as_bytes(),
        pos: from + open,
        raw,
    }
    .pairs()
}

/// `(start_frame, prompt)` pairs from a temporal planner response.
pub fn parse_story_response(raw: &str) -> Result<Vec<(usize, String)>> {
    let bad = |reason: String| Error::ClientResponse {
        reason,
        raw: raw.to_owned(),
    };
    let pairs = pairs_of(raw)?;
    if pairs.is_empty() {
        return Err(bad("empty segment list".into()));
    }
    pairs
        .into_iter()
        .map(|(k, v)| {
            let frame = k
                .trim()
                .parse::<usize>()
                .map_err(|_| bad(format!("frame key {k:?} is not an integer")))?;
            match v {
                Value::Text(p) => Ok((frame, p)),
                Value::List(_) => Err(bad(format!("segment {k} has no prompt"))),
            }
        })
        .collect()
}

/// `(object prompt, box)` pairs from a region planner response.
pub fn parse_region_response(raw: &str) -> Result<Vec<(String, BBox)>> {
    let bad = |reason: String| Error::ClientResponse {
        reason,
        raw: raw.to_owned(),
    };
    pairs_of(raw)?
        .into_iter()
        .map(|(name, v)| {
            let nums = match v {
                Value::List(n) => n,
                Value::Text(t) => {
                    let t = t.trim();
                    t.strip_prefix('[')
                        .and_then(|t| t.strip_suffix(']'))
                        .and_then(parse_numbers)
                        .ok_or_else(|| bad(format!("box for {name:?} is not a number list")))?
                }
            };
            match nums[..] {
                [x, y, w, h] => Ok((name, BBox::new(x, y, w, h))),
                _ => Err(bad(format!("box for {name:?} has {} values", nums.len()))),
            }
        })
        .collect()
}

/// Plans a story: one temporal request, then one spatial request per
/// segment. The result is validated like any hand-written plan.
pub fn decompose(story: &str, total_frames: usize, client: &dyn TextClient) -> Result<PromptPlan> {
    let temporal = client.complete(&render_story_planner(story, total_frames)?)?;
    let segments = parse_story_response(&temporal)?;
    let mut out = Vec::with_capacity(segments.len());
    for (start, prompt) in segments {
        let raw = client.complete(&render_region_planner(&prompt)?)?;
        let objects = parse_region_response(&raw)?;
        if objects.is_empty() {
            return Err(Error::ClientResponse {
                reason: format!("no objects for segment at frame {start}"),
                raw,
            });
        }
        let objects = objects
            .into_iter()
            .map(|(p, b)| SubObject::new(p, b))
            .collect();
        out.push(TemporalSegment::new(start, prompt, objects));
    }
    PromptPlan::new(total_frames, DEFAULT_ALPHA, out)
}
