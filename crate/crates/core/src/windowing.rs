//! Model-ready input construction.
//!
//! Video: a target second is extended to a `tau`-second window ending at the
//! target, each second uniformly sampled to `F` frames. Seconds before the
//! start of the lesson are replaced by second 0 so the input shape stays
//! constant for batched heads.
//!
//! Transcripts: the target utterance is serialized together with up to two
//! marked predecessor utterances, e.g.
//! `<ctx_i-1> Teacher 1: ... </ctx_i-1> <curr> Student 3: ... </curr>`.

use ndarray::Array2;

use crate::corpus::{Partition, TranscriptTurn, VideoAnnotationTrack};
use crate::error::{Error, Result};

/// A `tau`-second visual window around target second `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipWindow {
    pub lesson_id: String,
    pub target_t: u32,
    pub tau: u32,
    pub fps: u32,
    /// `tau x F` global frame indices into the lesson's frame stream; row
    /// `r` samples the window's `r`-th second (oldest first).
    pub frame_indices: Array2<usize>,
    /// Multi-hot labels of the target second only.
    pub gold: Vec<u8>,
}

impl ClipWindow {
    /// Source second for each window row, oldest first. Seconds before 0
    /// are clamped to 0, so rows may repeat at the lesson start.
    pub fn seconds(&self) -> Vec<u32> {
        (0..self.tau)
            .map(|r| (self.target_t + r + 1).saturating_sub(self.tau))
            .collect()
    }

    pub fn frames_per_second(&self) -> usize {
        self.frame_indices.ncols()
    }
}

/// Builds the visual window for target second `t`.
///
/// Within each second the `F` frame offsets are evenly spaced as
/// `floor(k * fps / F)`; global indices are `second * fps + offset`.
pub fn build_window(
    track: &VideoAnnotationTrack,
    t: u32,
    tau: u32,
    frames_per_second: u32,
    fps: u32,
) -> Result<ClipWindow> {
    if t >= track.duration_s {
        return Err(Error::IndexOutOfRange {
            index: t as usize,
            len: track.duration_s as usize,
        });
    }
    if tau < 1 || frames_per_second < 1 || fps < 1 {
        return Err(Error::invalid(
            "tau, frames_per_second, and fps must all be at least 1",
        ));
    }
    let f = frames_per_second as usize;
    let mut frame_indices = Array2::<usize>::zeros((tau as usize, f));
    for (r, second) in (0..tau)
        .map(|r| (t + r + 1).saturating_sub(tau))
        .enumerate()
    {
        let base = second as usize * fps as usize;
        for k in 0..f {
            frame_indices[(r, k)] = base + k * fps as usize / f;
        }
    }
    Ok(ClipWindow {
        lesson_id: track.lesson_id.clone(),
        target_t: t,
        tau,
        fps,
        frame_indices,
        gold: track.raster.row(t as usize).to_vec(),
    })
}

/// Thins a clip list to every `stride`-th entry for train/val; test keeps
/// the complete list.
pub fn subsample_clips(targets: &[u32], stride: usize, phase: Partition) -> Vec<u32> {
    match phase {
        Partition::Test => targets.to_vec(),
        Partition::Train | Partition::Val => targets
            .iter()
            .step_by(stride.max(1))
            .copied()
            .collect(),
    }
}

/// Marker tokens for the context serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentMarker {
    CtxMinus2,
    CtxMinus1,
    Curr,
}

impl SegmentMarker {
    pub fn open(&self) -> &'static str {
        match self {
            SegmentMarker::CtxMinus2 => "<ctx_i-2>",
            SegmentMarker::CtxMinus1 => "<ctx_i-1>",
            SegmentMarker::Curr => "<curr>",
        }
    }

    pub fn close(&self) -> &'static str {
        match self {
            SegmentMarker::CtxMinus2 => "</ctx_i-2>",
            SegmentMarker::CtxMinus1 => "</ctx_i-1>",
            SegmentMarker::Curr => "</curr>",
        }
    }
}

/// One marked segment of a contextual input.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSegment {
    pub marker: SegmentMarker,
    pub speaker: String,
    pub text: String,
}

/// A target utterance plus its marked predecessors, serialized for a text
/// encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextualUtterance {
    /// In order: ctx_i-2 (when present), ctx_i-1 (when present), curr.
    pub segments: Vec<ContextSegment>,
    pub gold: Vec<u8>,
    pub serialized: String,
    /// Whitespace tokens dropped from context segments to meet the budget.
    pub truncated_tokens: usize,
}

/// Context construction parameters.
#[derive(Debug, Clone, Copy)]
pub struct ContextConfig {
    /// Number of preceding utterances to include, at most 2.
    pub n_ctx: usize,
    /// Whitespace-token budget for the serialized input.
    pub max_len: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        ContextConfig {
            n_ctx: 2,
            max_len: 576,
        }
    }
}

fn serialize_segments(segments: &[ContextSegment]) -> String {
    let mut parts = Vec::with_capacity(segments.len());
    for seg in segments {
        if seg.text.is_empty() {
            parts.push(format!(
                "{} {}: {}",
                seg.marker.open(),
                seg.speaker,
                seg.marker.close()
            ));
        } else {
            parts.push(format!(
                "{} {}: {} {}",
                seg.marker.open(),
                seg.speaker,
                seg.text,
                seg.marker.close()
            ));
        }
    }
    parts.join(" ")
}

fn token_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Builds the contextual input for utterance `i`: the target plus up to
/// `min(i, n_ctx)` predecessors.
///
/// If the serialization exceeds the token budget, leading tokens are dropped
/// from the oldest context segment's text first, then the next; the current
/// utterance is never truncated.
pub fn build_context_input(
    turns: &[TranscriptTurn],
    i: usize,
    config: &ContextConfig,
) -> Result<ContextualUtterance> {
    if i >= turns.len() {
        return Err(Error::IndexOutOfRange {
            index: i,
            len: turns.len(),
        });
    }
    if config.n_ctx > 2 {
        return Err(Error::invalid(
            "context markers are defined for at most 2 predecessors",
        ));
    }

    let n_ctx = i.min(config.n_ctx);
    let mut segments = Vec::with_capacity(n_ctx + 1);
    for back in (1..=n_ctx).rev() {
        let turn = &turns[i - back];
        let marker = if back == 2 {
            SegmentMarker::CtxMinus2
        } else {
            SegmentMarker::CtxMinus1
        };
        segments.push(ContextSegment {
            marker,
            speaker: turn.speaker.to_string(),
            text: turn.text.clone(),
        });
    }
    segments.push(ContextSegment {
        marker: SegmentMarker::Curr,
        speaker: turns[i].speaker.to_string(),
        text: turns[i].text.clone(),
    });

    let mut truncated_tokens = 0usize;
    let mut serialized = serialize_segments(&segments);
    if token_count(&serialized) > config.max_len {
        // Oldest context first; the current utterance (last segment) is
        // exempt.
        let ctx_count = segments.len() - 1;
        'outer: for seg_idx in 0..ctx_count {
            loop {
                let over = token_count(&serialized) as i64 - config.max_len as i64;
                if over <= 0 {
                    break 'outer;
                }
                let words: Vec<&str> = segments[seg_idx].text.split_whitespace().collect();
                if words.is_empty() {
                    break;
                }
                let drop = (over as usize).min(words.len());
                segments[seg_idx].text = words[drop..].join(" ");
                truncated_tokens += drop;
                serialized = serialize_segments(&segments);
            }
        }
    }

    Ok(ContextualUtterance {
        gold: turns[i].labels.clone(),
        segments,
        serialized,
        truncated_tokens,
    })
}
