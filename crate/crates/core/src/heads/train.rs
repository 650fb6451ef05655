//! Shared training loop for all classification heads, plus dataset
//! assembly from corpus views.
//!
//! Training is deterministic for a fixed seed and deterministic encoders:
//! batch order comes from seeded shuffles, the optimizer is AdamW, and the
//! best validation epoch (by post-threshold macro-F1) is retained. Each
//! epoch searches per-label thresholds on the validation scores, so epoch
//! selection and threshold selection stay coupled.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    binarize, f1_per_label, macro_f1, search_thresholds, PredictionMatrix, ThresholdVector,
};
use crate::corpus::{LessonCorpus, Partition};
use crate::error::{Error, Result};
use crate::heads::attn::{AttentiveProbe, ProbeConfig};
use crate::heads::linear::{LinearHead, SimilarityHead};
use crate::heads::optim::{AdamW, OptimizerConfig};
use crate::heads::plugin::{Embedding, EncoderInput, EncoderPlugin};
use crate::heads::{ClassifierHead, HeadKind};
use crate::losses::{compute_pos_weights, loss_and_grad, LossConfig, PosWeights};
use crate::windowing::{build_context_input, build_window, subsample_clips, ContextConfig};

/// Which corpus instance an encoded row came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRef {
    pub lesson_id: String,
    /// Target second (video) or turn index (transcript).
    pub index: u32,
}

/// Encoded instances aligned with their gold rows.
#[derive(Debug, Clone)]
pub struct EncodedDataset {
    pub inputs: Vec<Embedding>,
    pub gold: Array2<f64>,
    pub ids: Vec<InstanceRef>,
    pub labels: Vec<String>,
    pub space_name: String,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Window construction parameters for the vision pathway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub tau: u32,
    pub frames_per_second: u32,
    pub fps: u32,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            tau: 2,
            frames_per_second: 8,
            fps: 30,
            stride: 5,
        }
    }
}

/// Encodes the video seconds of the given lessons: clip subsampling by
/// phase, window construction, then the encoder. Lessons are processed in
/// sorted order so the output is deterministic.
pub fn encode_video_dataset(
    corpus: &LessonCorpus,
    lesson_ids: &[&str],
    phase: Partition,
    encoder: &dyn EncoderPlugin,
    window: &WindowConfig,
) -> Result<EncodedDataset> {
    let space = &corpus.activity_space;
    let mut ids = Vec::new();
    let mut inputs = Vec::new();
    let mut gold_rows: Vec<Vec<f64>> = Vec::new();
    let mut lesson_ids: Vec<&str> = lesson_ids.to_vec();
    lesson_ids.sort_unstable();
    for lesson_id in lesson_ids {
        let lesson = corpus
            .lessons
            .get(lesson_id)
            .ok_or_else(|| Error::invalid(format!("unknown lesson {lesson_id:?}")))?;
        let Some(track) = &lesson.video else {
            continue;
        };
        let targets: Vec<u32> = (0..track.duration_s).collect();
        for t in subsample_clips(&targets, window.stride, phase) {
            let clip = build_window(track, t, window.tau, window.frames_per_second, window.fps)?;
            let embedding = encoder.encode(EncoderInput::Window(&clip))?;
            gold_rows.push(clip.gold.iter().map(|v| f64::from(*v)).collect());
            inputs.push(embedding);
            ids.push(InstanceRef {
                lesson_id: lesson_id.to_string(),
                index: t,
            });
        }
    }
    let gold = rows_to_matrix(gold_rows, space.len());
    Ok(EncodedDataset {
        inputs,
        gold,
        ids,
        labels: space.names().map(str::to_string).collect(),
        space_name: space.name().to_string(),
    })
}

/// Encodes the transcript turns of the given lessons with context
/// augmentation.
pub fn encode_transcript_dataset(
    corpus: &LessonCorpus,
    lesson_ids: &[&str],
    encoder: &dyn EncoderPlugin,
    context: &ContextConfig,
) -> Result<EncodedDataset> {
    let space = &corpus.discourse_space;
    let mut ids = Vec::new();
    let mut inputs = Vec::new();
    let mut gold_rows: Vec<Vec<f64>> = Vec::new();
    let mut lesson_ids: Vec<&str> = lesson_ids.to_vec();
    lesson_ids.sort_unstable();
    for lesson_id in lesson_ids {
        let lesson = corpus
            .lessons
            .get(lesson_id)
            .ok_or_else(|| Error::invalid(format!("unknown lesson {lesson_id:?}")))?;
        let Some(turns) = &lesson.turns else {
            continue;
        };
        for i in 0..turns.len() {
            let ctx = build_context_input(turns, i, context)?;
            let embedding = encoder.encode(EncoderInput::Text(&ctx.serialized))?;
            gold_rows.push(ctx.gold.iter().map(|v| f64::from(*v)).collect());
            inputs.push(embedding);
            ids.push(InstanceRef {
                lesson_id: lesson_id.to_string(),
                index: i as u32,
            });
        }
    }
    let gold = rows_to_matrix(gold_rows, space.len());
    Ok(EncodedDataset {
        inputs,
        gold,
        ids,
        labels: space.names().map(str::to_string).collect(),
        space_name: space.name().to_string(),
    })
}

fn rows_to_matrix(rows: Vec<Vec<f64>>, cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), cols));
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

/// Result of a training run. The trained head is left holding the best
/// validation epoch's parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub best_epoch: u32,
    pub best_val_macro_f1: f64,
    pub best_params: Vec<f64>,
    pub best_thresholds: ThresholdVector,
    pub history: Vec<EpochRecord>,
    pub optimizer: AdamW,
    pub pos_weights: PosWeights,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scores a dataset with the current head parameters.
pub fn predict_scores(
    head: &dyn ClassifierHead,
    data: &EncodedDataset,
    partition: Partition,
) -> Result<PredictionMatrix> {
    let mut scores = Array2::zeros((data.len(), head.label_count()));
    for (i, input) in data.inputs.iter().enumerate() {
        let logits = head.logits(input)?;
        for (j, &x) in logits.iter().enumerate() {
            scores[(i, j)] = sigmoid(x);
        }
    }
    PredictionMatrix::new(
        scores,
        data.gold.clone(),
        data.labels.clone(),
        data.space_name.clone(),
        partition,
    )
}

fn val_macro_f1_with_thresholds(
    head: &dyn ClassifierHead,
    val: &EncodedDataset,
) -> Result<(f64, ThresholdVector)> {
    let matrix = predict_scores(head, val, Partition::Val)?;
    let thresholds = search_thresholds(&matrix);
    let pred = binarize(matrix.scores.view(), &thresholds)?;
    let score = macro_f1(&f1_per_label(pred.view(), matrix.gold.view())?)?;
    Ok((score, thresholds))
}

/// Trains a head with AdamW on the train view, tracking post-threshold
/// validation macro-F1 each epoch and retaining the best epoch's
/// parameters.
pub fn train_head(
    head: &mut dyn ClassifierHead,
    train: &EncodedDataset,
    val: &EncodedDataset,
    loss: &LossConfig,
    opt: &OptimizerConfig,
    seed: u64,
) -> Result<TrainState> {
    loss.validate()?;
    opt.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train and val views must be nonempty"));
    }
    if train.gold.ncols() != head.label_count() || val.gold.ncols() != head.label_count() {
        return Err(Error::ShapeMismatch(format!(
            "head emits {} labels but views carry {}/{}",
            head.label_count(),
            train.gold.ncols(),
            val.gold.ncols()
        )));
    }

    let pos_weights = if loss.use_pw {
        compute_pos_weights(train.gold.view(), loss.pw_cap)
    } else {
        PosWeights::disabled(head.label_count())
    };

    let label_count = head.label_count();
    let param_len = head.params().len();
    let mut optimizer = AdamW::new(param_len, opt);
    let mut grads = vec![0.0; param_len];
    let mut history = Vec::with_capacity(opt.epochs as usize);
    let mut best_epoch = 0u32;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_params = head.params().to_vec();
    let mut best_thresholds = None;
    let mut stale_epochs = 0u32;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=opt.epochs {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(epoch));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(opt.batch_size) {
            let mut logits = Array2::zeros((batch.len(), label_count));
            let mut gold = Array2::zeros((batch.len(), label_count));
            for (r, &idx) in batch.iter().enumerate() {
                let row = head.logits(&train.inputs[idx])?;
                logits.row_mut(r).assign(&row);
                gold.row_mut(r).assign(&train.gold.row(idx));
            }
            let (batch_loss, grad_logits) =
                loss_and_grad(loss, logits.view(), gold.view(), &pos_weights)?;
            if !batch_loss.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch} (batch of {})",
                    batch.len()
                )));
            }
            loss_sum += batch_loss * batch.len() as f64;

            grads.iter_mut().for_each(|g| *g = 0.0);
            for (r, &idx) in batch.iter().enumerate() {
                head.accumulate_grad(&train.inputs[idx], grad_logits.row(r), &mut grads)?;
            }
            optimizer.step(head.params_mut(), &grads);
        }
        let train_loss = loss_sum / train.len() as f64;

        let (val_score, thresholds) = val_macro_f1_with_thresholds(head, val)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_macro_f1: val_score,
        });

        if val_score > best_score {
            best_score = val_score;
            best_epoch = epoch;
            best_params = head.params().to_vec();
            let mut t = thresholds;
            t.provenance.epoch = Some(epoch);
            best_thresholds = Some(t);
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if let Some(patience) = opt.early_stop_patience {
                if stale_epochs >= patience {
                    break;
                }
            }
        }
    }

    head.params_mut().copy_from_slice(&best_params);
    Ok(TrainState {
        best_epoch,
        best_val_macro_f1: best_score,
        best_params,
        best_thresholds: best_thresholds.expect("at least one epoch ran"),
        history,
        optimizer,
        pos_weights,
    })
}

/// Everything needed to rebuild a head.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum HeadSpec {
    Linear {
        input_dim: usize,
    },
    Similarity {
        input_dim: usize,
        label_embeddings: Vec<Vec<f64>>,
        adapter: bool,
    },
    Probe {
        config: ProbeConfig,
    },
}

impl HeadSpec {
    pub fn kind(&self) -> HeadKind {
        match self {
            HeadSpec::Linear { .. } => HeadKind::Linear,
            HeadSpec::Similarity { .. } => HeadKind::Similarity,
            HeadSpec::Probe { .. } => HeadKind::Probe,
        }
    }
}

/// Builds a freshly initialized head from its spec.
pub fn build_head(
    spec: &HeadSpec,
    label_count: usize,
    seed: u64,
) -> Result<Box<dyn ClassifierHead>> {
    match spec {
        HeadSpec::Linear { input_dim } => Ok(Box::new(LinearHead::new(*input_dim, label_count))),
        HeadSpec::Similarity {
            input_dim,
            label_embeddings,
            adapter,
        } => {
            if label_embeddings.len() != label_count {
                return Err(Error::LengthMismatch {
                    expected: label_count,
                    got: label_embeddings.len(),
                });
            }
            let mut z = Array2::zeros((label_count, *input_dim));
            for (i, row) in label_embeddings.iter().enumerate() {
                if row.len() != *input_dim {
                    return Err(Error::ShapeMismatch(format!(
                        "label embedding {i} has dim {} (expected {input_dim})",
                        row.len()
                    )));
                }
                z.row_mut(i).assign(&Array1::from_vec(row.clone()));
            }
            Ok(Box::new(SimilarityHead::new(z, *adapter)?))
        }
        HeadSpec::Probe { config } => {
            if config.labels != label_count {
                return Err(Error::LengthMismatch {
                    expected: label_count,
                    got: config.labels,
                });
            }
            Ok(Box::new(AttentiveProbe::new(*config, seed)?))
        }
    }
}

/// Persisted training artifact: head spec, parameters, optimizer moments,
/// and identification metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub spec: HeadSpec,
    pub labels: Vec<String>,
    pub space_name: String,
    pub params: Vec<f64>,
    pub optimizer: AdamW,
    pub pos_weights: PosWeights,
    pub best_epoch: u32,
    pub best_val_macro_f1: f64,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Rebuilds the head with the stored parameters.
    pub fn restore_head(&self) -> Result<Box<dyn ClassifierHead>> {
        let mut head = build_head(&self.spec, self.labels.len(), self.seed)?;
        if head.params().len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} params, head expects {}",
                self.params.len(),
                head.params().len()
            )));
        }
        head.params_mut().copy_from_slice(&self.params);
        Ok(head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{
        generate_synthetic_corpus, Range, SynthesisConfig, TranscriptSynthesis,
    };
    use crate::corpus::split_by_lesson;
    use crate::heads::encoders::HashedTextEncoder;
    use crate::labelspace::LabelSpace;

    fn small_text_setup() -> (EncodedDataset, EncodedDataset) {
        let cfg = SynthesisConfig {
            lesson_count: 8,
            transcript: Some(TranscriptSynthesis {
                turns_per_lesson: Range::fixed(30),
                rates: vec![0.3, 0.2, 0.15, 0.1, 0.25],
            }),
            ..SynthesisConfig::default()
        };
        let labels = r#"{"name": "A", "description": "a"}
{"name": "B", "description": "b"}
{"name": "C", "description": "c"}
{"name": "D", "description": "d"}
{"name": "E", "description": "e"}"#;
        let discourse =
            std::sync::Arc::new(LabelSpace::from_catalog_str("mini", labels).unwrap());
        let out = generate_synthetic_corpus(
            &cfg,
            42,
            LabelSpace::bundled_activity(),
            discourse,
        )
        .unwrap();
        let split = split_by_lesson(&out.corpus, (0.5, 0.25, 0.25), 11).unwrap();
        let encoder = HashedTextEncoder::new("hb", 32, 5, true);
        let train = encode_transcript_dataset(
            &out.corpus,
            &split.lessons_in(Partition::Train),
            &encoder,
            &ContextConfig::default(),
        )
        .unwrap();
        let val = encode_transcript_dataset(
            &out.corpus,
            &split.lessons_in(Partition::Val),
            &encoder,
            &ContextConfig::default(),
        )
        .unwrap();
        (train, val)
    }

    #[test]
    fn train_loss_decreases_on_separable_corpus() {
        let (train, val) = small_text_setup();
        let mut head = LinearHead::new(32, 5);
        let opt = OptimizerConfig {
            epochs: 5,
            lr: 0.05,
            early_stop_patience: None,
            ..OptimizerConfig::default()
        };
        let state = train_head(
            &mut head,
            &train,
            &val,
            &LossConfig::default(),
            &opt,
            7,
        )
        .unwrap();
        assert_eq!(state.history.len(), 5);
        for pair in state.history.windows(2) {
            assert!(
                pair[1].train_loss < pair[0].train_loss,
                "loss did not decrease: {:?}",
                state.history
            );
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_and_flat_history() {
        let (train, val) = small_text_setup();
        let mut head = LinearHead::new(32, 5);
        let before = head.params().to_vec();
        let opt = OptimizerConfig {
            epochs: 3,
            lr: 0.0,
            early_stop_patience: None,
            ..OptimizerConfig::default()
        };
        let state = train_head(
            &mut head,
            &train,
            &val,
            &LossConfig::default(),
            &opt,
            7,
        )
        .unwrap();
        assert_eq!(head.params(), before.as_slice());
        let first = state.history[0].train_loss;
        for rec in &state.history {
            assert_eq!(rec.train_loss, first);
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_history() {
        let (train, val) = small_text_setup();
        let opt = OptimizerConfig {
            epochs: 4,
            lr: 0.05,
            early_stop_patience: None,
            ..OptimizerConfig::default()
        };
        let run = |seed| {
            let mut head = LinearHead::new(32, 5);
            train_head(&mut head, &train, &val, &LossConfig::default(), &opt, seed).unwrap()
        };
        let a = run(9);
        let b = run(9);
        assert_eq!(a.history, b.history);
        assert_eq!(a.best_params, b.best_params);
        let c = run(10);
        assert_ne!(a.history, c.history);
    }

    #[test]
    fn empty_split_is_rejected() {
        let (train, _) = small_text_setup();
        let empty = EncodedDataset {
            inputs: vec![],
            gold: Array2::zeros((0, 5)),
            ids: vec![],
            labels: train.labels.clone(),
            space_name: train.space_name.clone(),
        };
        let mut head = LinearHead::new(32, 5);
        assert!(train_head(
            &mut head,
            &train,
            &empty,
            &LossConfig::default(),
            &OptimizerConfig::default(),
            7
        )
        .is_err());
    }

    #[test]
    fn predict_scores_are_sigmoid_probabilities() {
        let (train, _) = small_text_setup();
        let head = LinearHead::new(32, 5);
        let m = predict_scores(&head, &train, Partition::Train).unwrap();
        // Zero-initialized head -> all logits 0 -> all scores 0.5.
        assert!(m.scores.iter().all(|s| (*s - 0.5).abs() < 1e-12));
        assert_eq!(m.scores.dim(), (train.len(), 5));
    }

    #[test]
    fn checkpoint_round_trips_and_restores_head() {
        let (train, val) = small_text_setup();
        let mut head = LinearHead::new(32, 5);
        let opt = OptimizerConfig {
            epochs: 3,
            lr: 0.05,
            early_stop_patience: None,
            ..OptimizerConfig::default()
        };
        let state =
            train_head(&mut head, &train, &val, &LossConfig::default(), &opt, 7).unwrap();
        let checkpoint = Checkpoint {
            version: crate::VERSION.to_string(),
            config_hash: "deadbeef".into(),
            seed: 7,
            spec: HeadSpec::Linear { input_dim: 32 },
            labels: train.labels.clone(),
            space_name: train.space_name.clone(),
            params: state.best_params.clone(),
            optimizer: state.optimizer.clone(),
            pos_weights: state.pos_weights.clone(),
            best_epoch: state.best_epoch,
            best_val_macro_f1: state.best_val_macro_f1,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        checkpoint.save(f.path()).unwrap();
        let back = Checkpoint::load(f.path()).unwrap();
        let restored = back.restore_head().unwrap();
        assert_eq!(restored.params(), state.best_params.as_slice());
        let a = predict_scores(&*restored, &val, Partition::Val).unwrap();
        let b = predict_scores(&head, &val, Partition::Val).unwrap();
        assert_eq!(a.scores, b.scores);
    }
}
