//! Desk-scale deterministic encoders.
//!
//! [`HashedTextEncoder`] embeds text as a bag of hashed tokens: every token
//! maps to a seeded pseudo-random vector and the embedding is their sum.
//! When scope-aware, tokens are salted with the context segment they fall
//! in (`<ctx_i-2>`/`<ctx_i-1>`/`<curr>` markers), so the same word carries
//! distinct directions in context versus the current utterance.
//!
//! [`SyntheticVideoEncoder`] stands in for a frozen video backbone over
//! synthetic corpora: it resolves each window second to its latent feature
//! vector from a [`FeatureStore`] and applies a seeded random projection,
//! either pooling the window (concatenate then project) or emitting one
//! token per second with an additive window-position embedding. The
//! position embedding comes from the encoder, mirroring backbones whose
//! tokens carry positional information before any probe sees them.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::synth::FeatureStore;
use crate::error::{Error, Result};
use crate::heads::plugin::{Embedding, EncoderInput, EncoderPlugin, Modality};
use crate::windowing::SegmentMarker;

/// Stable 64-bit FNV-1a over the given byte chunks.
fn fnv1a(chunks: &[&[u8]]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for chunk in chunks {
        for &b in *chunk {
            hash ^= u64::from(b);
            hash = hash.wrapping_mul(0x100000001b3);
        }
        hash ^= 0xff;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Deterministic bag-of-hashed-tokens text encoder.
pub struct HashedTextEncoder {
    id: String,
    dim: usize,
    seed: u64,
    scope_aware: bool,
}

impl HashedTextEncoder {
    pub fn new(id: impl Into<String>, dim: usize, seed: u64, scope_aware: bool) -> Self {
        HashedTextEncoder {
            id: id.into(),
            dim,
            seed,
            scope_aware,
        }
    }

    fn token_vector(&self, scope: &str, token: &str) -> Array1<f64> {
        let h = fnv1a(&[
            &self.seed.to_le_bytes(),
            scope.as_bytes(),
            token.as_bytes(),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let normal = StandardNormal;
        let scale = 1.0 / (self.dim as f64).sqrt();
        Array1::from_shape_fn(self.dim, |_| {
            let v: f64 = normal.sample(&mut rng);
            v * scale
        })
    }
}

impl EncoderPlugin for HashedTextEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn modality(&self) -> Modality {
        Modality::Text
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn encode(&self, input: EncoderInput<'_>) -> Result<Embedding> {
        let text = match input {
            EncoderInput::Text(t) => t,
            EncoderInput::Window(_) => {
                return Err(Error::Encoder {
                    id: self.id.clone(),
                    msg: "text encoder received a video window".into(),
                })
            }
        };
        let mut sum = Array1::<f64>::zeros(self.dim);
        let mut scope = "plain";
        for token in text.split_whitespace() {
            if self.scope_aware {
                let mut is_marker = true;
                match token {
                    t if t == SegmentMarker::CtxMinus2.open() => scope = "ctx2",
                    t if t == SegmentMarker::CtxMinus1.open() => scope = "ctx1",
                    t if t == SegmentMarker::Curr.open() => scope = "curr",
                    t if t == SegmentMarker::CtxMinus2.close()
                        || t == SegmentMarker::CtxMinus1.close()
                        || t == SegmentMarker::Curr.close() =>
                    {
                        scope = "plain"
                    }
                    _ => is_marker = false,
                }
                if is_marker {
                    continue;
                }
            }
            sum += &self.token_vector(scope, token);
        }
        Ok(Embedding::Pooled(sum))
    }
}

/// Whether a video encoder pools the window or emits per-second tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VideoOutput {
    Pooled,
    Tokens,
}

/// Deterministic video encoder over synthetic latent features.
pub struct SyntheticVideoEncoder {
    id: String,
    store: Arc<FeatureStore>,
    tau: u32,
    dim: usize,
    output: VideoOutput,
    /// `dim x (tau * feature_dim)` projection for pooled output.
    proj_pooled: Array2<f64>,
    /// `dim x feature_dim` per-token projection.
    proj_token: Array2<f64>,
    /// `tau x dim` additive position embedding for token output.
    positions: Array2<f64>,
}

impl SyntheticVideoEncoder {
    pub fn new(
        id: impl Into<String>,
        store: Arc<FeatureStore>,
        tau: u32,
        dim: usize,
        seed: u64,
        output: VideoOutput,
    ) -> Result<Self> {
        let id = id.into();
        if store.is_empty() {
            return Err(Error::Encoder {
                id,
                msg: "empty feature store".into(),
            });
        }
        let fdim = store.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = StandardNormal;
        let concat = tau as usize * fdim;
        let proj_pooled = Array2::from_shape_fn((dim, concat), |_| {
            let v: f64 = normal.sample(&mut rng);
            v / (concat as f64).sqrt()
        });
        let proj_token = Array2::from_shape_fn((dim, fdim), |_| {
            let v: f64 = normal.sample(&mut rng);
            v / (fdim as f64).sqrt()
        });
        let positions = Array2::from_shape_fn((tau as usize, dim), |_| {
            let v: f64 = normal.sample(&mut rng);
            v * 0.5
        });
        Ok(SyntheticVideoEncoder {
            id,
            store,
            tau,
            dim,
            output,
            proj_pooled,
            proj_token,
            positions,
        })
    }

    fn second_features(&self, lesson_id: &str, second: u32) -> Result<&[f64]> {
        self.store.get(lesson_id, second).ok_or_else(|| Error::Encoder {
            id: self.id.clone(),
            msg: format!("no features for lesson {lesson_id:?} second {second}"),
        })
    }
}

impl EncoderPlugin for SyntheticVideoEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn modality(&self) -> Modality {
        Modality::Video
    }

    fn output_dim(&self) -> usize {
        self.dim
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn encode(&self, input: EncoderInput<'_>) -> Result<Embedding> {
        let window = match input {
            EncoderInput::Window(w) => w,
            EncoderInput::Text(_) => {
                return Err(Error::Encoder {
                    id: self.id.clone(),
                    msg: "video encoder received text".into(),
                })
            }
        };
        if window.tau != self.tau {
            return Err(Error::Encoder {
                id: self.id.clone(),
                msg: format!(
                    "window tau {} does not match encoder tau {}",
                    window.tau, self.tau
                ),
            });
        }
        let fdim = self.store.dim();
        let seconds = window.seconds();
        match self.output {
            VideoOutput::Pooled => {
                let mut concat = Array1::<f64>::zeros(self.tau as usize * fdim);
                for (r, &s) in seconds.iter().enumerate() {
                    let feat = self.second_features(&window.lesson_id, s)?;
                    concat
                        .slice_mut(ndarray::s![r * fdim..(r + 1) * fdim])
                        .assign(&Array1::from_iter(feat.iter().copied()));
                }
                Ok(Embedding::Pooled(self.proj_pooled.dot(&concat)))
            }
            VideoOutput::Tokens => {
                let mut tokens = Array2::<f64>::zeros((self.tau as usize, self.dim));
                for (r, &s) in seconds.iter().enumerate() {
                    let feat = Array1::from_iter(
                        self.second_features(&window.lesson_id, s)?.iter().copied(),
                    );
                    let projected = self.proj_token.dot(&feat) + self.positions.row(r);
                    tokens.row_mut(r).assign(&projected);
                }
                Ok(Embedding::Tokens(tokens))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::VideoAnnotationTrack;
    use crate::windowing::build_window;

    #[test]
    fn hashed_encoder_is_deterministic_and_order_insensitive_in_sum() {
        let enc = HashedTextEncoder::new("hb", 16, 7, true);
        let a = enc.encode(EncoderInput::Text("alpha beta")).unwrap();
        let b = enc.encode(EncoderInput::Text("beta alpha")).unwrap();
        let a2 = enc.encode(EncoderInput::Text("alpha beta")).unwrap();
        assert_eq!(a, a2);
        match (a, b) {
            (Embedding::Pooled(x), Embedding::Pooled(y)) => {
                for (u, v) in x.iter().zip(y.iter()) {
                    assert!((u - v).abs() < 1e-12);
                }
            }
            _ => panic!("expected pooled embeddings"),
        }
    }

    #[test]
    fn scope_changes_token_direction() {
        let enc = HashedTextEncoder::new("hb", 32, 7, true);
        let plain = enc.encode(EncoderInput::Text("word")).unwrap();
        let curr = enc
            .encode(EncoderInput::Text("<curr> word </curr>"))
            .unwrap();
        assert_ne!(plain, curr);
    }

    #[test]
    fn scope_resets_after_close_marker() {
        let enc = HashedTextEncoder::new("hb", 32, 7, true);
        let a = enc
            .encode(EncoderInput::Text("<curr> x </curr> word"))
            .unwrap();
        let b = enc.encode(EncoderInput::Text("<curr> x </curr>")).unwrap();
        let plain_word = enc.encode(EncoderInput::Text("word")).unwrap();
        match (a, b, plain_word) {
            (Embedding::Pooled(a), Embedding::Pooled(b), Embedding::Pooled(w)) => {
                let diff = &a - &b;
                for (d, wv) in diff.iter().zip(w.iter()) {
                    assert!((d - wv).abs() < 1e-12);
                }
            }
            _ => panic!("expected pooled embeddings"),
        }
    }

    fn store_with(lesson: &str, seconds: u32, dim: usize) -> Arc<FeatureStore> {
        let mut store = FeatureStore::new(dim);
        for s in 0..seconds {
            let feat: Vec<f64> = (0..dim).map(|k| (s as f64) + 0.01 * k as f64).collect();
            store.insert(lesson, s, feat);
        }
        Arc::new(store)
    }

    #[test]
    fn video_encoder_pooled_and_token_shapes() {
        let store = store_with("L1", 10, 4);
        let track = VideoAnnotationTrack::zeros("L1", 10, 24);
        let window = build_window(&track, 5, 2, 8, 30).unwrap();

        let pooled =
            SyntheticVideoEncoder::new("vp", store.clone(), 2, 12, 3, VideoOutput::Pooled)
                .unwrap();
        match pooled.encode(EncoderInput::Window(&window)).unwrap() {
            Embedding::Pooled(v) => assert_eq!(v.len(), 12),
            _ => panic!("expected pooled"),
        }

        let tokens =
            SyntheticVideoEncoder::new("vt", store, 2, 12, 3, VideoOutput::Tokens).unwrap();
        match tokens.encode(EncoderInput::Window(&window)).unwrap() {
            Embedding::Tokens(t) => assert_eq!(t.dim(), (2, 12)),
            _ => panic!("expected tokens"),
        }
    }

    #[test]
    fn missing_second_features_is_an_encoder_error() {
        let store = store_with("L1", 3, 4);
        let track = VideoAnnotationTrack::zeros("L2", 10, 24);
        let window = build_window(&track, 5, 2, 8, 30).unwrap();
        let enc = SyntheticVideoEncoder::new("vp", store, 2, 8, 3, VideoOutput::Pooled).unwrap();
        assert!(enc.encode(EncoderInput::Window(&window)).is_err());
    }

    #[test]
    fn token_positions_distinguish_window_slots() {
        // Same features in both seconds still yield distinct tokens.
        let mut store = FeatureStore::new(3);
        store.insert("L1", 0, vec![1.0, 2.0, 3.0]);
        store.insert("L1", 1, vec![1.0, 2.0, 3.0]);
        let track = VideoAnnotationTrack::zeros("L1", 2, 24);
        let window = build_window(&track, 1, 2, 4, 30).unwrap();
        let enc = SyntheticVideoEncoder::new("vt", Arc::new(store), 2, 8, 3, VideoOutput::Tokens)
            .unwrap();
        match enc.encode(EncoderInput::Window(&window)).unwrap() {
            Embedding::Tokens(t) => assert_ne!(t.row(0), t.row(1)),
            _ => panic!("expected tokens"),
        }
    }
}
