//! Morphology-aware neural machine translation toolkit.
//!
//! The crate covers the full pipeline for translating into an agglutinative
//! target language:
//!
//! * [`corpus`]: text normalization, vocabularies, and length bucketing.
//! * [`morphseg`]: semi-supervised MDL morph segmentation with Viterbi decoding.
//! * [`embedding`]: skip-gram vectors trained with a hierarchical softmax.
//! * [`nmt`]: bidirectional LSTM encoder, additive attention decoder,
//!   backpropagation through time, SGD with global-norm clipping, and decoding.
//! * [`eval`]: corpus BLEU and judgment agreement (Kappa).
//! * [`export`]: attention heatmap export.

pub mod corpus;
pub mod embedding;
pub mod eval;
pub mod export;
pub mod linalg;
pub mod morphseg;
pub mod nmt;

pub use corpus::{BucketScheme, Sentence, Vocabulary};
pub use embedding::{EmbeddingModel, HuffmanTree};
pub use eval::{BleuReport, KappaReport};
pub use morphseg::MorphModel;
pub use nmt::{AttentionMatrix, Seq2SeqModel};
