//! Attention encoder-decoder.
//!
//! A bidirectional multi-layer LSTM encodes the source into annotations. A
//! stacked LSTM decoder attends over them with an additive scorer
//! `v·tanh(W_a·h + U_a·e)` and predicts each target token from
//! `softmax(W_y·[h_top, context] + b_y)`. Everything runs in `f64` with
//! hand-written backpropagation through time.

mod backprop;
mod checkpoint;
mod decode;
mod lstm;
mod model;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backprop::{batch_loss_and_gradients, sequence_log_prob, step_log_probs, BatchLoss, SoftmaxMode};
pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use decode::{translate, Translation};
pub use lstm::{LstmCache, LstmParams};
pub use model::{DecoderOutput, DecoderState, EncodedSource, Gradients, ModelConfig, Seq2SeqModel};
pub use train::{
    clip_global_norm, global_norm, perplexity, sgd_update, train, EpochLog, Example, TrainConfig,
    TrainReport, TrainState,
};

#[derive(Debug, Error)]
pub enum NmtError {
    #[error("empty {0} sequence")]
    EmptySequence(&'static str),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{side} vocabulary does not match checkpoint (expected hash {expected}, got {actual})")]
    VocabMismatch {
        side: &'static str,
        expected: String,
        actual: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NmtError>;

/// Alignment weights, one row per emitted target token and one column per
/// source position, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMatrix {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

impl AttentionMatrix {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(NmtError::Shape(format!(
                "{rows}x{cols} attention matrix given {} weights",
                weights.len()
            )));
        }
        Ok(Self { rows, cols, weights })
    }

    pub fn from_rows(cols: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut weights = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NmtError::Shape(format!(
                    "attention row of length {} where {cols} expected",
                    r.len()
                )));
            }
            weights.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            weights,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Largest deviation of a row sum from 1, or an error naming the first
    /// negative or non-finite entry.
    pub fn max_row_deviation(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for r in 0..self.rows {
            let row = self.row(r);
            if let Some(c) = row.iter().position(|w| !w.is_finite() || *w < 0.0) {
                return Err(NmtError::NonFinite(format!(
                    "attention weight ({r}, {c}) = {}",
                    row[c]
                )));
            }
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        Ok(worst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_matrix_shapes() {
        assert!(AttentionMatrix::new(2, 3, vec![0.0; 5]).is_err());
        let m = AttentionMatrix::from_rows(2, &[vec![0.25, 0.75], vec![1.0, 0.0]]).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 2));
        assert_eq!(m.row(1), &[1.0, 0.0]);
        assert!(m.max_row_deviation().unwrap() < 1e-15);
        let bad = AttentionMatrix::new(1, 2, vec![1.5, -0.5]).unwrap();
        assert!(bad.max_row_deviation().is_err());
    }
}
