use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, Seq2SeqModel};
use super::{NmtError, Result};
use crate::corpus::Vocabulary;

pub const CHECKPOINT_FORMAT: &str = "morphnmt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

/// JSON container: a config block, the SHA-256 of both vocabularies, free
/// form metadata, and every tensor in the model's declared order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub source_vocab_hash: String,
    pub target_vocab_hash: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Seq2SeqModel,
        source_vocab: &Vocabulary,
        target_vocab: &Vocabulary,
        metadata: serde_json::Value,
    ) -> Self {
        let tensors = model
            .tensors()
            .into_iter()
            .map(|(name, t)| TensorRecord {
                name,
                shape: [t.rows(), t.cols()],
                data: t.as_slice().to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            source_vocab_hash: source_vocab.content_hash(),
            target_vocab_hash: target_vocab.content_hash(),
            metadata,
            tensors,
        }
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let ck: Self = serde_json::from_reader(r)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(NmtError::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(NmtError::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        Ok(ck)
    }

    /// Errors unless both vocabularies hash to the recorded values.
    pub fn check_vocabularies(&self, source: &Vocabulary, target: &Vocabulary) -> Result<()> {
        for (side, expected, vocab) in [
            ("source", &self.source_vocab_hash, source),
            ("target", &self.target_vocab_hash, target),
        ] {
            let actual = vocab.content_hash();
            if &actual != expected {
                return Err(NmtError::VocabMismatch {
                    side,
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }

    /// Rebuilds the model, checking every tensor name and shape against the
    /// layout implied by the config.
    pub fn to_model(&self) -> Result<Seq2SeqModel> {
        let mut model = Seq2SeqModel::new(self.config.clone())?;
        let mut slots = model.tensors_mut();
        if slots.len() != self.tensors.len() {
            return Err(NmtError::Checkpoint(format!(
                "expected {} tensors, found {}",
                slots.len(),
                self.tensors.len()
            )));
        }
        for ((name, slot), rec) in slots.iter_mut().zip(&self.tensors) {
            if *name != rec.name {
                return Err(NmtError::Checkpoint(format!(
                    "expected tensor `{name}`, found `{}`",
                    rec.name
                )));
            }
            if [slot.rows(), slot.cols()] != rec.shape || rec.data.len() != slot.as_slice().len() {
                return Err(NmtError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?} with {} values, expected {:?}",
                    rec.shape,
                    rec.data.len(),
                    slot.shape()
                )));
            }
            slot.as_mut_slice().copy_from_slice(&rec.data);
        }
        drop(slots);
        if !model.is_finite() {
            return Err(NmtError::Checkpoint("non-finite parameter".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Sentence;

    fn vocabs() -> (Vocabulary, Vocabulary) {
        let a = Sentence::from_whitespace("a b c");
        let b = Sentence::from_whitespace("x y");
        (
            Vocabulary::build([&a], 10).unwrap(),
            Vocabulary::build([&b], 10).unwrap(),
        )
    }

    fn model(sv: &Vocabulary, tv: &Vocabulary) -> Seq2SeqModel {
        let mut cfg = ModelConfig::new(sv.len(), tv.len(), 3, 4, 2);
        cfg.seed = 8;
        Seq2SeqModel::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let (sv, tv) = vocabs();
        let m = model(&sv, &tv);
        let ck = Checkpoint::from_model(&m, &sv, &tv, serde_json::json!({"note": "x"}));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        back.check_vocabularies(&sv, &tv).unwrap();
        assert_eq!(back.to_model().unwrap(), m);
        assert_eq!(back.metadata["note"], "x");
    }

    #[test]
    fn vocabulary_mismatch_detected() {
        let (sv, tv) = vocabs();
        let m = model(&sv, &tv);
        let ck = Checkpoint::from_model(&m, &sv, &tv, serde_json::Value::Null);
        assert!(matches!(
            ck.check_vocabularies(&tv, &sv),
            Err(NmtError::VocabMismatch { side: "source", .. })
        ));
    }

    #[test]
    fn shape_tampering_detected() {
        let (sv, tv) = vocabs();
        let m = model(&sv, &tv);
        let mut ck = Checkpoint::from_model(&m, &sv, &tv, serde_json::Value::Null);
        ck.config.hidden_size = 5;
        ck.config.attention_size = 5;
        assert!(ck.to_model().is_err());
        let mut ck = Checkpoint::from_model(&m, &sv, &tv, serde_json::Value::Null);
        ck.tensors.pop();
        assert!(ck.to_model().is_err());
        let mut ck = Checkpoint::from_model(&m, &sv, &tv, serde_json::Value::Null);
        ck.format = "other".into();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(buf.as_slice()).is_err());
    }
}
