//! Encoder plugin contract.
//!
//! Pretrained backbones stay outside the toolkit: anything that can map a
//! frame-index window or a serialized text to a fixed-dimension embedding
//! can register as an [`EncoderPlugin`]. Providers may be in-process or
//! remote; training only requires that deterministic providers return the
//! same output for the same input.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::windowing::ClipWindow;

/// Input side of the plugin contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Text,
}

/// What a plugin receives per instance.
#[derive(Debug)]
pub enum EncoderInput<'a> {
    Window(&'a ClipWindow),
    Text(&'a str),
}

/// What a plugin returns: a pooled embedding or a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    Pooled(Array1<f64>),
    Tokens(Array2<f64>),
}

impl Embedding {
    pub fn dim(&self) -> usize {
        match self {
            Embedding::Pooled(v) => v.len(),
            Embedding::Tokens(t) => t.ncols(),
        }
    }
}

/// A named embedding provider with a fixed output dimension.
pub trait EncoderPlugin: Send + Sync {
    fn id(&self) -> &str;
    fn modality(&self) -> Modality;
    fn output_dim(&self) -> usize;
    /// Whether identical inputs always produce identical outputs. Training
    /// and tests require deterministic providers.
    fn is_deterministic(&self) -> bool;
    fn encode(&self, input: EncoderInput<'_>) -> Result<Embedding>;
}

/// Registry of encoder providers keyed by id.
#[derive(Default, Clone)]
pub struct EncoderRegistry {
    plugins: BTreeMap<String, Arc<dyn EncoderPlugin>>,
}

impl EncoderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, plugin: Arc<dyn EncoderPlugin>) {
        self.plugins.insert(plugin.id().to_string(), plugin);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn EncoderPlugin>> {
        self.plugins.get(id).cloned().ok_or_else(|| Error::Encoder {
            id: id.to_string(),
            msg: format!(
                "not registered (available: {})",
                self.plugins
                    .keys()
                    .map(String::as_str)
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        })
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.plugins.keys().map(String::as_str)
    }
}
