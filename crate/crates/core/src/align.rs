//! Word-level alignment of frame features.
//!
//! A frame belongs to a word when its timestamp lies in the half-open span
//! `[start, end)`; each word's vector is the arithmetic mean of its frames
//! (weighted, if the track carries per-frame weights).
//! Words that cover no frame get a zero vector and are listed in
//! [`Alignment::empty`].

use serde::{Deserialize, Serialize};

use crate::data::MultimodalExample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WordSpan {
    pub start: f64,
    pub end: f64,
}

impl WordSpan {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTrack {
    timestamps: Vec<f64>,
    features: Vec<Vec<f64>>,
    weights: Option<Vec<f64>>,
    dim: usize,
}

impl FrameTrack {
    pub fn new(timestamps: Vec<f64>, features: Vec<Vec<f64>>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Alignment("feature dimension must be positive".into()));
        }
        if timestamps.len() != features.len() {
            return Err(Error::Alignment(format!(
                "{} timestamps but {} feature rows",
                timestamps.len(),
                features.len()
            )));
        }
        if let Some(i) = features.iter().position(|r| r.len() != dim) {
            return Err(Error::Alignment(format!(
                "frame {i} has {} features, expected {dim}",
                features[i].len()
            )));
        }
        if let Some(i) = timestamps.iter().position(|t| !t.is_finite()) {
            return Err(Error::Alignment(format!("frame {i} has a non-finite timestamp")));
        }
        if let Some(i) = timestamps.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Alignment(format!(
                "timestamps not strictly increasing at frame {}",
                i + 1
            )));
        }
        Ok(Self {
            timestamps,
            features,
            weights: None,
            dim,
        })
    }

    /// Attach positive per-frame weights; a frame of weight 2 counts as two
    /// identical frames.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.timestamps.len() {
            return Err(Error::Alignment(format!(
                "{} weights for {} frames",
                weights.len(),
                self.timestamps.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Alignment(format!("frame {i} weight must be positive")));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn features(&self) -> &[Vec<f64>] {
        &self.features
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// One row per span.
    pub rows: Vec<Vec<f64>>,
    /// Indices of spans that covered no frame.
    pub empty: Vec<usize>,
}

fn validate_spans(spans: &[WordSpan]) -> Result<()> {
    for (i, s) in spans.iter().enumerate() {
        if !(s.start.is_finite() && s.end.is_finite()) || s.start < 0.0 || s.start >= s.end {
            return Err(Error::Alignment(format!(
                "span {i} [{}, {}) must satisfy 0 <= start < end",
                s.start, s.end
            )));
        }
    }
    if let Some(i) = spans.windows(2).position(|w| w[1].start < w[0].end) {
        return Err(Error::Alignment(format!(
            "span {} overlaps or precedes span {i}",
            i + 1
        )));
    }
    Ok(())
}

pub fn align_average(spans: &[WordSpan], track: &FrameTrack) -> Result<Alignment> {
    validate_spans(spans)?;
    let ts = &track.timestamps;
    let mut rows = Vec::with_capacity(spans.len());
    let mut empty = Vec::new();
    let mut f = 0;
    for (w, span) in spans.iter().enumerate() {
        while f < ts.len() && ts[f] < span.start {
            f += 1;
        }
        let mut sum = vec![0.0; track.dim];
        let mut total = 0.0;
        while f < ts.len() && ts[f] < span.end {
            match &track.weights {
                None => {
                    for (s, v) in sum.iter_mut().zip(&track.features[f]) {
                        *s += v;
                    }
                    total += 1.0;
                }
                Some(ws) => {
                    for (s, v) in sum.iter_mut().zip(&track.features[f]) {
                        *s += ws[f] * v;
                    }
                    total += ws[f];
                }
            }
            f += 1;
        }
        if total == 0.0 {
            empty.push(w);
        } else {
            sum.iter_mut().for_each(|s| *s /= total);
        }
        rows.push(sum);
    }
    Ok(Alignment { rows, empty })
}

/// Frame-level track as stored in raw alignment files. `dim` is only
/// needed when the track has no frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTrack {
    pub timestamps: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl RawTrack {
    pub fn into_track(self) -> Result<FrameTrack> {
        let dim = match (self.features.first(), self.dim) {
            (Some(r), Some(d)) if r.len() != d => {
                return Err(Error::Alignment(format!("declared dim {d} but rows have {}", r.len())))
            }
            (Some(r), _) => r.len(),
            (None, Some(d)) => d,
            (None, None) => return Err(Error::Alignment("track without frames needs `dim`".into())),
        };
        let track = FrameTrack::new(self.timestamps, self.features, dim)?;
        match self.weights {
            Some(w) => track.with_weights(w),
            None => Ok(track),
        }
    }
}

/// One line of a raw alignment file: words with time spans plus the two
/// frame-level tracks of the same segment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAlignmentRecord {
    pub tokens: Vec<u32>,
    pub spans: Vec<WordSpan>,
    pub acoustic: RawTrack,
    pub visual: RawTrack,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignedRecord {
    pub example: MultimodalExample,
    pub acoustic_empty: Vec<usize>,
    pub visual_empty: Vec<usize>,
}

pub fn align_record(raw: RawAlignmentRecord) -> Result<AlignedRecord> {
    if raw.tokens.len() != raw.spans.len() {
        return Err(Error::Alignment(format!(
            "{} tokens but {} spans",
            raw.tokens.len(),
            raw.spans.len()
        )));
    }
    let a = align_average(&raw.spans, &raw.acoustic.into_track()?)?;
    let v = align_average(&raw.spans, &raw.visual.into_track()?)?;
    Ok(AlignedRecord {
        example: MultimodalExample {
            tokens: raw.tokens,
            acoustic: a.rows,
            visual: v.rows,
            label: raw.label,
        },
        acoustic_empty: a.empty,
        visual_empty: v.empty,
    })
}

/// Align every line of a raw JSON Lines file; errors carry the line number.
pub fn align_jsonl(text: &str) -> Result<Vec<AlignedRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let data_err = |field: &str, message: String| Error::Data {
            line,
            field: field.into(),
            message,
        };
        let rec: RawAlignmentRecord =
            serde_json::from_str(raw).map_err(|e| data_err("-", e.to_string()))?;
        let aligned = align_record(rec).map_err(|e| match e {
            Error::Alignment(m) => data_err("spans", m),
            other => other,
        })?;
        aligned.example.validate(line)?;
        out.push(aligned);
    }
    Ok(out)
}
