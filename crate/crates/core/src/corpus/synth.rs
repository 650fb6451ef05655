//! Synthetic desk-scale corpora with controlled label imbalance.
//!
//! Real classroom recordings and large pretrained encoders are unavailable
//! at desk scale, so end-to-end runs use generated corpora in which every
//! instance carries a deterministic latent signal that makes labels linearly
//! separable:
//!
//! * video — each second gets a feature vector `sum_j y_j * u_j + noise`
//!   over orthonormal label prototypes `u_j`, stored in a [`FeatureStore`]
//!   that the synthetic video encoder reads in place of frames;
//! * transcripts — each turn's text contains tokens derived from its active
//!   labels, which the hashed bag-of-tokens text encoder maps to separable
//!   embeddings.
//!
//! Per-label positive counts are drawn exactly (`round(rate * instances)`
//! positives placed uniformly at random), so empirical rates track requested
//! rates up to rounding.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{LessonCorpus, Role, Speaker, TranscriptTurn, VideoAnnotationTrack};
use crate::error::{Error, Result};
use crate::labelspace::LabelSpace;

/// Latent feature generator identifier. The only bundled generator derives
/// features from orthonormal per-label prototypes.
pub const ORTHOGONAL_PROTOTYPES: &str = "orthogonal-prototypes";

/// Inclusive integer range used for lesson durations and turn counts.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Range {
    pub min: u32,
    pub max: u32,
}

impl Range {
    pub fn fixed(v: u32) -> Self {
        Range { min: v, max: v }
    }

    fn sample(&self, rng: &mut impl Rng) -> u32 {
        if self.min >= self.max {
            self.min
        } else {
            rng.random_range(self.min..=self.max)
        }
    }
}

/// Video side of a synthesis request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoSynthesis {
    pub duration_s: Range,
    /// Requested positive rate per activity label, each in (0, 1).
    pub rates: Vec<f64>,
}

/// Transcript side of a synthesis request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptSynthesis {
    pub turns_per_lesson: Range,
    /// Requested positive rate per discourse label, each in (0, 1).
    pub rates: Vec<f64>,
}

/// Full synthesis request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub lesson_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<VideoSynthesis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<TranscriptSynthesis>,
    pub feature_generator: String,
    /// Latent dimension for video features; must be at least the activity
    /// label count.
    pub feature_dim: usize,
    /// Standard deviation of the additive feature noise.
    pub noise_sigma: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            lesson_count: 8,
            video: None,
            transcript: None,
            feature_generator: ORTHOGONAL_PROTOTYPES.to_string(),
            feature_dim: 32,
            noise_sigma: 0.05,
        }
    }
}

/// Per-second latent features for synthetic video lessons, keyed by
/// `(lesson_id, second)`.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    dim: usize,
    map: BTreeMap<(String, u32), Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct FeatureRecord {
    lesson_id: String,
    second: u32,
    features: Vec<f64>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        FeatureStore {
            dim,
            map: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, lesson_id: &str, second: u32, features: Vec<f64>) {
        debug_assert_eq!(features.len(), self.dim);
        self.map.insert((lesson_id.to_string(), second), features);
    }

    pub fn get(&self, lesson_id: &str, second: u32) -> Option<&[f64]> {
        self.map
            .get(&(lesson_id.to_string(), second))
            .map(|v| v.as_slice())
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        for ((lesson_id, second), features) in &self.map {
            let rec = FeatureRecord {
                lesson_id: lesson_id.clone(),
                second: *second,
                features: features.clone(),
            };
            writeln!(out, "{}", serde_json::to_string(&rec)?)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(std::fs::File::open(path.as_ref())?);
        let mut store = FeatureStore::default();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FeatureRecord = serde_json::from_str(&line)?;
            if store.map.is_empty() {
                store.dim = rec.features.len();
            } else if rec.features.len() != store.dim {
                return Err(Error::invalid(format!(
                    "feature dim {} != {} in feature store",
                    rec.features.len(),
                    store.dim
                )));
            }
            store
                .map
                .insert((rec.lesson_id, rec.second), rec.features);
        }
        Ok(store)
    }
}

/// A generated corpus plus the latent features backing its video lessons.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: LessonCorpus,
    pub video_features: FeatureStore,
}

/// Text token derived from a label name: lowercase with non-alphanumeric
/// runs collapsed to underscores.
pub fn label_token(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut pending_sep = false;
    for c in name.chars() {
        if c.is_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.extend(c.to_lowercase());
        } else {
            pending_sep = true;
        }
    }
    out
}

const FILLERS: [&str; 8] = ["okay", "so", "let", "us", "look", "at", "this", "now"];

fn validate_rates(rates: &[f64], space: &LabelSpace, what: &str) -> Result<()> {
    if rates.len() != space.len() {
        return Err(Error::LengthMismatch {
            expected: space.len(),
            got: rates.len(),
        });
    }
    for (j, r) in rates.iter().enumerate() {
        if !(r.is_finite() && *r > 0.0 && *r < 1.0) {
            return Err(Error::invalid(format!(
                "{what} rate for label {j} must lie in (0, 1), got {r}"
            )));
        }
    }
    Ok(())
}

/// Draws `round(rate * n)` distinct positions per label.
fn exact_count_positives(
    rates: &[f64],
    n: usize,
    rng: &mut ChaCha20Rng,
) -> Vec<Vec<usize>> {
    rates
        .iter()
        .map(|rate| {
            let count = ((rate * n as f64).round() as usize).min(n);
            let mut positions = sample(rng, n, count).into_vec();
            positions.sort_unstable();
            positions
        })
        .collect()
}

/// Orthonormal label prototypes: seeded Gaussian rows orthonormalized by
/// Gram-Schmidt. Requires `dim >= labels`.
fn prototypes(labels: usize, dim: usize, rng: &mut ChaCha20Rng) -> Result<Array2<f64>> {
    if dim < labels {
        return Err(Error::invalid(format!(
            "feature_dim {dim} must be at least the label count {labels}"
        )));
    }
    let normal = StandardNormal;
    let mut u = Array2::<f64>::zeros((labels, dim));
    for j in 0..labels {
        let mut row = Array1::from_shape_fn(dim, |_| normal.sample(rng));
        for k in 0..j {
            let prev = u.row(k);
            let proj = row.dot(&prev);
            row = &row - &(&prev * proj);
        }
        let norm = row.dot(&row).sqrt();
        if norm < 1e-9 {
            return Err(Error::invalid(
                "degenerate prototype draw; use a different seed",
            ));
        }
        u.row_mut(j).assign(&(&row / norm));
    }
    Ok(u)
}

/// Generates a corpus per the synthesis request. Deterministic: the same
/// seed yields an identical corpus.
pub fn generate_synthetic_corpus(
    config: &SynthesisConfig,
    seed: u64,
    activity_space: Arc<LabelSpace>,
    discourse_space: Arc<LabelSpace>,
) -> Result<SyntheticCorpus> {
    if config.feature_generator != ORTHOGONAL_PROTOTYPES {
        return Err(Error::invalid(format!(
            "unknown feature generator {:?}",
            config.feature_generator
        )));
    }
    if config.lesson_count == 0 {
        return Err(Error::invalid("lesson_count must be positive"));
    }
    if let Some(video) = &config.video {
        validate_rates(&video.rates, &activity_space, "video")?;
    }
    if let Some(transcript) = &config.transcript {
        validate_rates(&transcript.rates, &discourse_space, "transcript")?;
    }

    let mut corpus = LessonCorpus::new(activity_space.clone(), discourse_space.clone());
    let mut features = FeatureStore::new(config.feature_dim);
    let lesson_ids: Vec<String> = (0..config.lesson_count)
        .map(|i| format!("lesson-{i:03}"))
        .collect();

    // Independent deterministic streams per purpose.
    let mut stream = |n: u64| {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(n);
        rng
    };

    if let Some(video) = &config.video {
        let mut rng = stream(1);
        let durations: Vec<u32> = lesson_ids
            .iter()
            .map(|_| video.duration_s.sample(&mut rng))
            .collect();
        let total: usize = durations.iter().map(|d| *d as usize).sum();
        let positives = exact_count_positives(&video.rates, total, &mut rng);

        let mut tracks: Vec<VideoAnnotationTrack> = lesson_ids
            .iter()
            .zip(&durations)
            .map(|(id, d)| VideoAnnotationTrack::zeros(id.clone(), *d, activity_space.len()))
            .collect();
        // Global second index -> (lesson index, second).
        let mut locate = Vec::with_capacity(total);
        for (li, d) in durations.iter().enumerate() {
            for s in 0..*d {
                locate.push((li, s));
            }
        }
        for (j, positions) in positives.iter().enumerate() {
            for &pos in positions {
                let (li, s) = locate[pos];
                tracks[li].raster[(s as usize, j)] = 1;
            }
        }

        let u = prototypes(activity_space.len(), config.feature_dim, &mut stream(2))?;
        let mut noise_rng = stream(3);
        let normal = StandardNormal;
        for track in &tracks {
            for s in 0..track.duration_s {
                let mut x = vec![0.0f64; config.feature_dim];
                for j in 0..activity_space.len() {
                    if track.raster[(s as usize, j)] != 0 {
                        for (xk, uk) in x.iter_mut().zip(u.row(j).iter()) {
                            *xk += uk;
                        }
                    }
                }
                for xk in x.iter_mut() {
                    let n: f64 = normal.sample(&mut noise_rng);
                    *xk += config.noise_sigma * n;
                }
                features.insert(&track.lesson_id, s, x);
            }
        }
        for track in tracks {
            corpus.insert_video(track);
        }
    }

    if let Some(transcript) = &config.transcript {
        let mut rng = stream(4);
        let counts: Vec<u32> = lesson_ids
            .iter()
            .map(|_| transcript.turns_per_lesson.sample(&mut rng))
            .collect();
        let total: usize = counts.iter().map(|c| *c as usize).sum();
        let positives = exact_count_positives(&transcript.rates, total, &mut rng);

        let mut gold = vec![vec![0u8; discourse_space.len()]; total];
        for (j, positions) in positives.iter().enumerate() {
            for &pos in positions {
                gold[pos][j] = 1;
            }
        }

        let tokens: Vec<String> = discourse_space.names().map(label_token).collect();
        {
            let mut dedup = tokens.clone();
            dedup.sort();
            dedup.dedup();
            if dedup.len() != tokens.len() {
                return Err(Error::invalid(
                    "label names collide after tokenization; rename labels",
                ));
            }
        }

        let mut flat = 0usize;
        for (lesson_id, count) in lesson_ids.iter().zip(&counts) {
            let mut turns = Vec::with_capacity(*count as usize);
            for i in 0..*count {
                let labels = gold[flat].clone();
                flat += 1;
                let speaker = if rng.random_bool(0.6) {
                    Speaker {
                        role: Role::Teacher,
                        tag: Some(1),
                    }
                } else {
                    Speaker {
                        role: Role::Student,
                        tag: Some(rng.random_range(1..=8)),
                    }
                };
                let filler_count = rng.random_range(1..=3usize);
                let mut words: Vec<&str> = (0..filler_count)
                    .map(|_| FILLERS[rng.random_range(0..FILLERS.len())])
                    .collect();
                for (j, on) in labels.iter().enumerate() {
                    if *on != 0 {
                        words.push(&tokens[j]);
                        words.push(&tokens[j]);
                    }
                }
                turns.push(TranscriptTurn {
                    lesson_id: lesson_id.clone(),
                    index: i as usize,
                    speaker,
                    start_s: i * 6,
                    end_s: i * 6 + 5,
                    text: words.join(" "),
                    labels,
                });
            }
            corpus.insert_turns(lesson_id, turns);
        }
    }

    Ok(SyntheticCorpus {
        corpus,
        video_features: features,
    })
}
