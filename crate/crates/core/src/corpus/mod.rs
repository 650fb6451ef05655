//! Corpus model: per-second video annotation rasters, timestamped transcript
//! turns, lesson-independent splits, and the canonical interchange formats.
//!
//! The canonical formats are UTF-8 line-delimited JSON records:
//!
//! * annotations — `{"lesson_id", "duration_s"}` headers plus
//!   `{"lesson_id", "second", "active_labels": [names]}` cells;
//! * transcripts — `{"lesson_id", "speaker", "start_s", "end_s", "text",
//!   "labels": [names]}`.
//!
//! ELAN EAF files are an import path only (see [`eaf`]); exports always use
//! the canonical format.

pub mod eaf;
pub mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelspace::LabelSpace;

/// Dense per-second multi-hot annotations for one lesson's video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotationTrack {
    pub lesson_id: String,
    pub duration_s: u32,
    /// `duration_s x label_count` matrix of {0,1}; row `t` holds the labels
    /// active during second `t`.
    pub raster: Array2<u8>,
}

impl VideoAnnotationTrack {
    pub fn zeros(lesson_id: impl Into<String>, duration_s: u32, label_count: usize) -> Self {
        VideoAnnotationTrack {
            lesson_id: lesson_id.into(),
            duration_s,
            raster: Array2::zeros((duration_s as usize, label_count)),
        }
    }

    pub fn label_count(&self) -> usize {
        self.raster.ncols()
    }
}

/// Who produced a transcript turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

/// Speaker attribution: a role plus an optional numeric tag
/// ("Teacher 1", "Student 8").
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Speaker {
    pub role: Role,
    pub tag: Option<u32>,
}

impl Speaker {
    pub fn teacher(tag: Option<u32>) -> Self {
        Speaker { role: Role::Teacher, tag }
    }

    pub fn student(tag: Option<u32>) -> Self {
        Speaker { role: Role::Student, tag }
    }

    /// Parses "teacher", "Teacher 1", "student 8", case-insensitive.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let role = match parts.next().map(|w| w.to_ascii_lowercase()).as_deref() {
            Some("teacher") => Role::Teacher,
            Some("student") => Role::Student,
            _ => return Err(Error::invalid(format!("unrecognized speaker {s:?}"))),
        };
        let tag = match parts.next() {
            None => None,
            Some(t) => Some(t.parse::<u32>().map_err(|_| {
                Error::invalid(format!("unrecognized speaker tag in {s:?}"))
            })?),
        };
        if parts.next().is_some() {
            return Err(Error::invalid(format!("unrecognized speaker {s:?}")));
        }
        Ok(Speaker { role, tag })
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let role = match self.role {
            Role::Teacher => "Teacher",
            Role::Student => "Student",
        };
        match self.tag {
            Some(tag) => write!(f, "{role} {tag}"),
            None => write!(f, "{role}"),
        }
    }
}

/// One transcribed talk turn with optional discourse labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptTurn {
    pub lesson_id: String,
    /// Position within the lesson after sorting by start time, 0-based.
    pub index: usize,
    pub speaker: Speaker,
    pub start_s: u32,
    pub end_s: u32,
    pub text: String,
    /// Multi-hot over the discourse space; all zeros for unlabeled data.
    pub labels: Vec<u8>,
}

/// Everything known about one lesson. A lesson may carry video annotations,
/// transcript turns, or both.
#[derive(Debug, Clone, Default)]
pub struct LessonData {
    pub video: Option<VideoAnnotationTrack>,
    pub turns: Option<Vec<TranscriptTurn>>,
}

impl LessonData {
    /// Lesson weight for duration-balanced splitting: annotated video
    /// duration when present, otherwise the transcript time span.
    pub fn duration_s(&self) -> u32 {
        if let Some(video) = &self.video {
            return video.duration_s;
        }
        match &self.turns {
            Some(turns) if !turns.is_empty() => {
                turns.iter().map(|t| t.end_s).max().unwrap_or(0)
            }
            _ => 0,
        }
    }
}

/// A corpus of lessons plus the two label spaces its annotations refer to.
#[derive(Debug, Clone)]
pub struct LessonCorpus {
    pub lessons: BTreeMap<String, LessonData>,
    pub activity_space: Arc<LabelSpace>,
    pub discourse_space: Arc<LabelSpace>,
}

impl LessonCorpus {
    pub fn new(activity_space: Arc<LabelSpace>, discourse_space: Arc<LabelSpace>) -> Self {
        LessonCorpus {
            lessons: BTreeMap::new(),
            activity_space,
            discourse_space,
        }
    }

    pub fn insert_video(&mut self, track: VideoAnnotationTrack) {
        self.lessons
            .entry(track.lesson_id.clone())
            .or_default()
            .video = Some(track);
    }

    pub fn insert_turns(&mut self, lesson_id: &str, turns: Vec<TranscriptTurn>) {
        self.lessons
            .entry(lesson_id.to_string())
            .or_default()
            .turns = Some(turns);
    }

    pub fn lesson_ids(&self) -> impl Iterator<Item = &str> {
        self.lessons.keys().map(|k| k.as_str())
    }
}

/// Dataset partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

/// The result of a lesson-independent split: every lesson assigned to
/// exactly one partition, so the three lesson sets are disjoint by
/// construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub assignment: BTreeMap<String, Partition>,
}

impl SplitAssignment {
    pub fn lessons_in(&self, partition: Partition) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, p)| **p == partition)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        file.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

// ---------------------------------------------------------------------------
// Canonical annotation records
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    lesson_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    duration_s: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    second: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    active_labels: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TranscriptRecord {
    lesson_id: String,
    speaker: String,
    start_s: u32,
    end_s: u32,
    text: String,
    #[serde(default)]
    labels: Vec<String>,
}

fn record_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Record {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Imports canonical annotation records into per-lesson rasters.
///
/// Every lesson mentioned must carry exactly one duration header; cells not
/// mentioned stay 0. Returned tracks are sorted by lesson id.
pub fn import_annotations(
    path: impl AsRef<Path>,
    space: &LabelSpace,
) -> Result<Vec<VideoAnnotationTrack>> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut durations: BTreeMap<String, u32> = BTreeMap::new();
    let mut cells: Vec<(usize, String, u32, Vec<String>)> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| record_err(path, lineno + 1, e.to_string()))?;
        match (rec.duration_s, rec.second, rec.active_labels) {
            (Some(d), None, None) => {
                if let Some(prev) = durations.insert(rec.lesson_id.clone(), d) {
                    if prev != d {
                        return Err(record_err(
                            path,
                            lineno + 1,
                            format!(
                                "conflicting durations for lesson {:?}: {prev} vs {d}",
                                rec.lesson_id
                            ),
                        ));
                    }
                }
            }
            (None, Some(s), Some(labels)) => {
                cells.push((lineno + 1, rec.lesson_id, s, labels));
            }
            _ => {
                return Err(record_err(
                    path,
                    lineno + 1,
                    "record must be either a duration header or a second cell",
                ))
            }
        }
    }

    let mut tracks: BTreeMap<String, VideoAnnotationTrack> = durations
        .iter()
        .map(|(id, d)| {
            (
                id.clone(),
                VideoAnnotationTrack::zeros(id.clone(), *d, space.len()),
            )
        })
        .collect();

    for (lineno, lesson_id, second, labels) in cells {
        let track = tracks.get_mut(&lesson_id).ok_or_else(|| {
            record_err(
                path,
                lineno,
                format!("lesson {lesson_id:?} has no duration header"),
            )
        })?;
        if second >= track.duration_s {
            return Err(record_err(
                path,
                lineno,
                format!(
                    "second {second} outside lesson duration {}",
                    track.duration_s
                ),
            ));
        }
        for name in labels {
            let idx = space
                .index_of(&name)
                .ok_or(Error::UnknownLabel(name))?;
            track.raster[(second as usize, idx)] = 1;
        }
    }

    Ok(tracks.into_values().collect())
}

/// Writes tracks in the canonical annotation format. Re-importing the output
/// reproduces the rasters exactly.
pub fn export_annotations<W: Write>(
    tracks: &[VideoAnnotationTrack],
    space: &LabelSpace,
    mut out: W,
) -> Result<()> {
    let names: Vec<&str> = space.names().collect();
    for track in tracks {
        let header = AnnotationRecord {
            lesson_id: track.lesson_id.clone(),
            duration_s: Some(track.duration_s),
            second: None,
            active_labels: None,
        };
        writeln!(out, "{}", serde_json::to_string(&header)?)?;
        for (t, row) in track.raster.rows().into_iter().enumerate() {
            let active: Vec<String> = row
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0)
                .map(|(j, _)| names[j].to_string())
                .collect();
            if active.is_empty() {
                continue;
            }
            let rec = AnnotationRecord {
                lesson_id: track.lesson_id.clone(),
                duration_s: None,
                second: Some(t as u32),
                active_labels: Some(active),
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    Ok(())
}

/// Imports canonical transcript records, grouped per lesson. Turns within a
/// lesson come back sorted by start time with indices `0..K`.
pub fn import_transcript(
    path: impl AsRef<Path>,
    space: &LabelSpace,
) -> Result<BTreeMap<String, Vec<TranscriptTurn>>> {
    let path = path.as_ref();
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut by_lesson: BTreeMap<String, Vec<TranscriptTurn>> = BTreeMap::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TranscriptRecord = serde_json::from_str(&line)
            .map_err(|e| record_err(path, lineno + 1, e.to_string()))?;
        if rec.end_s < rec.start_s {
            return Err(record_err(
                path,
                lineno + 1,
                format!("turn ends ({}) before it starts ({})", rec.end_s, rec.start_s),
            ));
        }
        let speaker = Speaker::parse(&rec.speaker)
            .map_err(|e| record_err(path, lineno + 1, e.to_string()))?;
        let mut labels = vec![0u8; space.len()];
        for name in &rec.labels {
            let idx = space
                .index_of(name)
                .ok_or_else(|| Error::UnknownLabel(name.clone()))?;
            labels[idx] = 1;
        }
        by_lesson
            .entry(rec.lesson_id.clone())
            .or_default()
            .push(TranscriptTurn {
                lesson_id: rec.lesson_id,
                index: 0,
                speaker,
                start_s: rec.start_s,
                end_s: rec.end_s,
                text: rec.text,
                labels,
            });
    }

    for turns in by_lesson.values_mut() {
        turns.sort_by_key(|t| (t.start_s, t.end_s));
        for (i, turn) in turns.iter_mut().enumerate() {
            turn.index = i;
        }
    }
    Ok(by_lesson)
}

/// Writes turns in the canonical transcript format.
pub fn export_transcript<W: Write>(
    by_lesson: &BTreeMap<String, Vec<TranscriptTurn>>,
    space: &LabelSpace,
    mut out: W,
) -> Result<()> {
    let names: Vec<&str> = space.names().collect();
    for turns in by_lesson.values() {
        for turn in turns {
            let rec = TranscriptRecord {
                lesson_id: turn.lesson_id.clone(),
                speaker: turn.speaker.to_string(),
                start_s: turn.start_s,
                end_s: turn.end_s,
                text: turn.text.clone(),
                labels: turn
                    .labels
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0)
                    .map(|(j, _)| names[j].to_string())
                    .collect(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Lesson-independent splitting
// ---------------------------------------------------------------------------

/// Splits lessons into train/val/test so that every lesson lands in exactly
/// one partition.
///
/// Lessons are shuffled with the seed, then assigned greedily: each lesson
/// goes to the partition that minimizes the summed squared deviation of
/// assigned durations from the ratio targets. Deterministic for a fixed
/// seed.
pub fn split_by_lesson(
    corpus: &LessonCorpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<SplitAssignment> {
    let ratios = [ratios.0, ratios.1, ratios.2];
    if ratios.iter().any(|r| *r <= 0.0) {
        return Err(Error::invalid("split ratios must be positive"));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios must sum to 1 (got {sum})"
        )));
    }
    if corpus.lessons.len() < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 lessons to split, got {}",
            corpus.lessons.len()
        )));
    }

    let mut lessons: Vec<(&str, f64)> = corpus
        .lessons
        .iter()
        .map(|(id, data)| (id.as_str(), f64::from(data.duration_s().max(1))))
        .collect();
    let total: f64 = lessons.iter().map(|(_, w)| w).sum();
    let targets = [ratios[0] * total, ratios[1] * total, ratios[2] * total];

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    lessons.shuffle(&mut rng);

    let mut assigned = [0.0f64; 3];
    let mut assignment = BTreeMap::new();
    for (id, weight) in lessons {
        let mut best = 0;
        let mut best_cost = f64::INFINITY;
        for cand in 0..3 {
            let mut cost = 0.0;
            for p in 0..3 {
                let a = assigned[p] + if p == cand { weight } else { 0.0 };
                cost += (a - targets[p]) * (a - targets[p]);
            }
            // Strict < keeps the earliest partition on ties (train < val < test).
            if cost < best_cost {
                best_cost = cost;
                best = cand;
            }
        }
        assigned[best] += weight;
        assignment.insert(id.to_string(), Partition::ALL[best]);
    }

    Ok(SplitAssignment {
        seed,
        ratios,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn annotation_import_builds_column_sums() {
        let space = LabelSpace::bundled_activity();
        let mut lines = vec![r#"{"lesson_id": "L1", "duration_s": 10}"#.to_string()];
        for s in 0..10 {
            lines.push(format!(
                r#"{{"lesson_id": "L1", "second": {s}, "active_labels": ["Teacher standing"]}}"#
            ));
        }
        let f = write_temp(&lines.join("\n"));
        let tracks = import_annotations(f.path(), &space).unwrap();
        assert_eq!(tracks.len(), 1);
        let track = &tracks[0];
        assert_eq!(track.raster.nrows(), 10);
        let col = space.index_of("Teacher standing").unwrap();
        let sum: u32 = track.raster.column(col).iter().map(|v| u32::from(*v)).sum();
        assert_eq!(sum, 10);
    }

    #[test]
    fn empty_annotation_list_gives_zero_raster() {
        let space = LabelSpace::bundled_activity();
        let f = write_temp(r#"{"lesson_id": "L1", "duration_s": 5}"#);
        let tracks = import_annotations(f.path(), &space).unwrap();
        assert_eq!(tracks[0].raster.dim(), (5, 24));
        assert!(tracks[0].raster.iter().all(|v| *v == 0));
    }

    #[test]
    fn unknown_label_is_rejected() {
        let space = LabelSpace::bundled_activity();
        let f = write_temp(
            "{\"lesson_id\": \"L1\", \"duration_s\": 5}\n{\"lesson_id\": \"L1\", \"second\": 0, \"active_labels\": [\"Teacher flying\"]}",
        );
        match import_annotations(f.path(), &space) {
            Err(Error::UnknownLabel(name)) => assert_eq!(name, "Teacher flying"),
            other => panic!("expected unknown-label error, got {other:?}"),
        }
    }

    #[test]
    fn negative_or_overflowing_seconds_are_rejected() {
        let space = LabelSpace::bundled_activity();
        let neg = write_temp(
            "{\"lesson_id\": \"L1\", \"duration_s\": 5}\n{\"lesson_id\": \"L1\", \"second\": -1, \"active_labels\": []}",
        );
        assert!(import_annotations(neg.path(), &space).is_err());
        let over = write_temp(
            "{\"lesson_id\": \"L1\", \"duration_s\": 5}\n{\"lesson_id\": \"L1\", \"second\": 5, \"active_labels\": []}",
        );
        assert!(import_annotations(over.path(), &space).is_err());
    }

    #[test]
    fn annotation_round_trip_is_identity() {
        let space = LabelSpace::bundled_activity();
        let mut track = VideoAnnotationTrack::zeros("L1", 7, space.len());
        track.raster[(0, 0)] = 1;
        track.raster[(3, 7)] = 1;
        track.raster[(6, 23)] = 1;
        let mut buf = Vec::new();
        export_annotations(&[track.clone()], &space, &mut buf).unwrap();
        let f = write_temp(std::str::from_utf8(&buf).unwrap());
        let back = import_annotations(f.path(), &space).unwrap();
        assert_eq!(back, vec![track]);
    }

    #[test]
    fn transcript_turns_are_sorted_and_indexed() {
        let space = LabelSpace::bundled_discourse();
        let f = write_temp(concat!(
            "{\"lesson_id\": \"L1\", \"speaker\": \"Teacher\", \"start_s\": 20, \"end_s\": 25, \"text\": \"c\"}\n",
            "{\"lesson_id\": \"L1\", \"speaker\": \"Student 3\", \"start_s\": 0, \"end_s\": 4, \"text\": \"a\"}\n",
            "{\"lesson_id\": \"L1\", \"speaker\": \"Teacher 1\", \"start_s\": 10, \"end_s\": 14, \"text\": \"b\"}",
        ));
        let by_lesson = import_transcript(f.path(), &space).unwrap();
        let turns = &by_lesson["L1"];
        assert_eq!(turns.len(), 3);
        assert_eq!(
            turns.iter().map(|t| t.text.as_str()).collect::<Vec<_>>(),
            ["a", "b", "c"]
        );
        assert_eq!(
            turns.iter().map(|t| t.index).collect::<Vec<_>>(),
            [0, 1, 2]
        );
    }

    #[test]
    fn transcript_labels_become_multi_hot() {
        let space = LabelSpace::bundled_discourse();
        let f = write_temp(
            r#"{"lesson_id": "L1", "speaker": "Teacher", "start_s": 0, "end_s": 2, "text": "x", "labels": ["Report Request (Teacher)", "Questions Closed-Ended"]}"#,
        );
        let by_lesson = import_transcript(f.path(), &space).unwrap();
        let turn = &by_lesson["L1"][0];
        assert_eq!(turn.labels.iter().map(|v| u32::from(*v)).sum::<u32>(), 2);
        assert_eq!(turn.labels[space.index_of("Questions Closed-Ended").unwrap()], 1);
    }

    #[test]
    fn turn_ending_before_start_is_rejected() {
        let space = LabelSpace::bundled_discourse();
        let f = write_temp(
            r#"{"lesson_id": "L1", "speaker": "Teacher", "start_s": 9, "end_s": 3, "text": "x"}"#,
        );
        assert!(import_transcript(f.path(), &space).is_err());
    }

    fn equal_lesson_corpus(n: usize, duration: u32) -> LessonCorpus {
        let mut corpus = LessonCorpus::new(
            LabelSpace::bundled_activity(),
            LabelSpace::bundled_discourse(),
        );
        for i in 0..n {
            corpus.insert_video(VideoAnnotationTrack::zeros(
                format!("lesson-{i:03}"),
                duration,
                24,
            ));
        }
        corpus
    }

    #[test]
    fn ten_equal_lessons_split_6_2_2() {
        let corpus = equal_lesson_corpus(10, 60);
        let split = split_by_lesson(&corpus, (0.6, 0.2, 0.2), 7).unwrap();
        assert_eq!(split.lessons_in(Partition::Train).len(), 6);
        assert_eq!(split.lessons_in(Partition::Val).len(), 2);
        assert_eq!(split.lessons_in(Partition::Test).len(), 2);
    }

    #[test]
    fn split_is_deterministic_and_covers_all_lessons() {
        let corpus = equal_lesson_corpus(17, 30);
        let a = split_by_lesson(&corpus, (0.6, 0.2, 0.2), 41).unwrap();
        let b = split_by_lesson(&corpus, (0.6, 0.2, 0.2), 41).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.assignment.len(), 17);
    }

    #[test]
    fn split_rejects_bad_inputs() {
        let corpus = equal_lesson_corpus(2, 30);
        assert!(split_by_lesson(&corpus, (0.6, 0.2, 0.2), 1).is_err());
        let corpus = equal_lesson_corpus(5, 30);
        assert!(split_by_lesson(&corpus, (0.7, 0.2, 0.2), 1).is_err());
        assert!(split_by_lesson(&corpus, (0.8, 0.3, -0.1), 1).is_err());
    }

    #[test]
    fn split_assignment_round_trips_through_file() {
        let corpus = equal_lesson_corpus(6, 30);
        let split = split_by_lesson(&corpus, (0.6, 0.2, 0.2), 3).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        split.save(f.path()).unwrap();
        let back = SplitAssignment::load(f.path()).unwrap();
        assert_eq!(back.assignment, split.assignment);
        assert_eq!(back.seed, split.seed);
    }
}
