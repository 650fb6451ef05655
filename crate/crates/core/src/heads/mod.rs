//! Classification heads over pluggable frozen encoders.
//!
//! Three heads share one training loop:
//!
//! * [`SimilarityHead`] — scaled cosine similarity between a pooled video
//!   embedding and frozen per-label text embeddings;
//! * [`AttentiveProbe`] — self-attention blocks plus single-query
//!   cross-attention pooling over a token sequence;
//! * [`LinearHead`] — a single linear layer over a pooled embedding, used
//!   for the transcript pathway.
//!
//! Heads expose their parameters as one flat vector so the optimizer,
//! checkpoints, and gradient checks stay uniform across kinds.

pub mod attn;
pub mod encoders;
pub mod linear;
pub mod optim;
pub mod plugin;
pub mod train;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::Result;

pub use attn::{default_head_count, AttentiveProbe, ProbeConfig};
pub use encoders::{HashedTextEncoder, SyntheticVideoEncoder, VideoOutput};
pub use linear::{similarity_logits, utterance_logits, LinearHead, SimilarityHead};
pub use optim::{AdamW, OptimizerConfig};
pub use plugin::{Embedding, EncoderInput, EncoderPlugin, EncoderRegistry, Modality};
pub use train::{
    build_head, encode_transcript_dataset, encode_video_dataset, predict_scores, train_head,
    Checkpoint, EncodedDataset, EpochRecord, HeadSpec, InstanceRef, TrainState, WindowConfig,
};

/// Head families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Similarity,
    Probe,
}

/// A trainable multi-label classifier over encoder embeddings.
///
/// Forward passes are pure given parameters; gradient accumulation writes
/// `d loss / d params` into a caller-owned flat buffer so batches can sum
/// instance gradients before an optimizer step.
pub trait ClassifierHead: Send {
    fn kind(&self) -> HeadKind;
    fn input_dim(&self) -> usize;
    fn label_count(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];
    fn logits(&self, input: &Embedding) -> Result<Array1<f64>>;
    fn accumulate_grad(
        &self,
        input: &Embedding,
        grad_logits: ArrayView1<'_, f64>,
        grads: &mut [f64],
    ) -> Result<()>;
}
