//! Desk-scale model and trainer used to show that each objective learns
//! planted structure.
//!
//! The stack is a per-frame `tanh` encoder, a pooling layer (mean or
//! multi-head attention), and up to three heads: a linear multi-tag
//! classifier, a parallel-decoding readout with one learned query per
//! (position, token), and a token-embedding table standing in for the text
//! tower in contrastive runs. Backpropagation is written out by hand and
//! checked against finite differences in the test suite.

mod data;
mod metrics;
mod model;
mod pool;
mod train;

use serde::{Deserialize, Serialize};

pub use data::{
    contrastive_floor, par_entropy_floor, planted_contrastive, planted_mtc, planted_mtl, planted_par,
    PlantedConfig, PlantedSet,
};
pub use metrics::{average_precision, eval_map, MapReport};
pub use model::{ModelShape, PoolKind, SeqShape, ToyModelParams};
pub use pool::{attention_pool, attention_weights, mean_pool, AttentionParams};
pub use train::{batch_objective, evaluate_loss, evaluate_map, train_toy, Objective, TracePoint, TrainConfig};

use crate::tensor::Matrix;

/// Synthetic clip: `frames` is `T_f x F`. Which optional targets are
/// required depends on the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureClip {
    pub frames: Matrix,
    /// Sorted positive class indices (multi-tag targets).
    #[serde(default)]
    pub label: Option<Vec<usize>>,
    /// Token targets for parallel decoding.
    #[serde(default)]
    pub tokens: Option<Vec<usize>>,
    /// Row of the text table paired with this clip.
    #[serde(default)]
    pub caption_id: Option<usize>,
}

impl FeatureClip {
    pub fn new(frames: Matrix) -> Self {
        Self {
            frames,
            label: None,
            tokens: None,
            caption_id: None,
        }
    }
}

/// Default per-frame feature width, matching an 80-bin log-Mel front end.
pub const DEFAULT_FEATURES: usize = 80;
