use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{LstmCache, LstmParams};
use super::{NmtError, Result};
use crate::corpus::Vocabulary;
use crate::embedding::WordVectors;
use crate::linalg::{dot, softmax_in_place, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub embedding_dim: usize,
    pub hidden_size: usize,
    pub layers: usize,
    pub attention_size: usize,
    pub init_scale: f64,
    pub forget_bias: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Attention size defaults to the hidden size, weights to `±0.08`, and the
    /// forget-gate bias to 1.
    pub fn new(
        source_vocab_size: usize,
        target_vocab_size: usize,
        embedding_dim: usize,
        hidden_size: usize,
        layers: usize,
    ) -> Self {
        Self {
            source_vocab_size,
            target_vocab_size,
            embedding_dim,
            hidden_size,
            layers,
            attention_size: hidden_size,
            init_scale: 0.08,
            forget_bias: 1.0,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("source_vocab_size", self.source_vocab_size),
            ("target_vocab_size", self.target_vocab_size),
            ("embedding_dim", self.embedding_dim),
            ("hidden_size", self.hidden_size),
            ("layers", self.layers),
            ("attention_size", self.attention_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NmtError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.init_scale.is_finite() && self.init_scale >= 0.0) {
            return Err(NmtError::InvalidConfig("init_scale must be finite and >= 0".into()));
        }
        if !self.forget_bias.is_finite() {
            return Err(NmtError::InvalidConfig("forget_bias must be finite".into()));
        }
        Ok(())
    }
}

/// All trainable tensors. The same struct, zero-initialized, holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    pub source_embedding: Matrix,
    pub target_embedding: Matrix,
    pub encoder_fwd: Vec<LstmParams>,
    pub encoder_bwd: Vec<LstmParams>,
    pub decoder: Vec<LstmParams>,
    /// `A × H`, applied to the previous top decoder state.
    pub attn_w: Matrix,
    /// `A × 2H`, applied to annotations.
    pub attn_u: Matrix,
    /// `1 × A`
    pub attn_v: Matrix,
    /// `V_t × 3H` over `[h_top, context]`.
    pub out_w: Matrix,
    /// `V_t × 1`
    pub out_b: Matrix,
}

/// Gradients share the model's layout.
pub type Gradients = Seq2SeqModel;

/// Per-layer decoder state.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl DecoderState {
    pub fn zeros(layers: usize, hidden: usize) -> Self {
        Self {
            h: vec![vec![0.0; hidden]; layers],
            c: vec![vec![0.0; hidden]; layers],
        }
    }

    pub fn top(&self) -> &[f64] {
        self.h.last().expect("at least one layer")
    }
}

/// Annotations together with their projections `U_a·e_m`, which every
/// decoder step reuses.
#[derive(Debug, Clone)]
pub struct EncodedSource {
    pub annotations: Vec<Vec<f64>>,
    pub(crate) keys: Vec<Vec<f64>>,
}

impl EncodedSource {
    pub fn from_annotations(model: &Seq2SeqModel, annotations: Vec<Vec<f64>>) -> Result<Self> {
        if annotations.is_empty() {
            return Err(NmtError::EmptySequence("annotation"));
        }
        let width = 2 * model.config.hidden_size;
        if let Some(a) = annotations.iter().find(|a| a.len() != width) {
            return Err(NmtError::Shape(format!(
                "annotation of size {} where {width} expected",
                a.len()
            )));
        }
        let keys = annotations.iter().map(|e| model.attn_u.matvec(e)).collect();
        Ok(Self { annotations, keys })
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub distribution: Vec<f64>,
    pub state: DecoderState,
    pub weights: Vec<f64>,
}

pub(crate) struct LayerTrace {
    pub inputs: Vec<Vec<f64>>,
    pub fwd: Vec<LstmCache>,
    /// indexed by source position
    pub bwd: Vec<LstmCache>,
}

pub(crate) struct EncoderTrace {
    pub layers: Vec<LayerTrace>,
    pub annotations: Vec<Vec<f64>>,
}

pub(crate) struct AttentionTrace {
    pub h_prev: Vec<f64>,
    /// `tanh(W_a·h + U_a·e_m)` per source position
    pub hidden: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub context: Vec<f64>,
}

pub(crate) struct StepTrace {
    pub y_prev: u32,
    pub attention: AttentionTrace,
    pub caches: Vec<LstmCache>,
    /// `[h_top, context]`
    pub out_in: Vec<f64>,
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, h, a, s) = (
            config.embedding_dim,
            config.hidden_size,
            config.attention_size,
            config.init_scale,
        );
        let fb = config.forget_bias;
        let source_embedding = Matrix::uniform(config.source_vocab_size, d, s, &mut rng);
        let target_embedding = Matrix::uniform(config.target_vocab_size, d, s, &mut rng);
        let mut encoder_fwd = Vec::new();
        let mut encoder_bwd = Vec::new();
        for l in 0..config.layers {
            let input = if l == 0 { d } else { 2 * h };
            encoder_fwd.push(LstmParams::init(input, h, s, fb, &mut rng));
            encoder_bwd.push(LstmParams::init(input, h, s, fb, &mut rng));
        }
        let decoder = (0..config.layers)
            .map(|l| {
                let input = if l == 0 { d + 2 * h } else { h };
                LstmParams::init(input, h, s, fb, &mut rng)
            })
            .collect();
        let attn_w = Matrix::uniform(a, h, s, &mut rng);
        let attn_u = Matrix::uniform(a, 2 * h, s, &mut rng);
        let attn_v = Matrix::uniform(1, a, s, &mut rng);
        let out_w = Matrix::uniform(config.target_vocab_size, 3 * h, s, &mut rng);
        let out_b = Matrix::zeros(config.target_vocab_size, 1);
        Ok(Self {
            config,
            source_embedding,
            target_embedding,
            encoder_fwd,
            encoder_bwd,
            decoder,
            attn_w,
            attn_u,
            attn_v,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Tensors with stable names, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("source_embedding".to_owned(), &self.source_embedding),
            ("target_embedding".to_owned(), &self.target_embedding),
        ];
        for (prefix, stack) in [
            ("encoder_fwd", &self.encoder_fwd),
            ("encoder_bwd", &self.encoder_bwd),
            ("decoder", &self.decoder),
        ] {
            for (l, p) in stack.iter().enumerate() {
                out.push((format!("{prefix}.{l}.weights"), &p.weights));
                out.push((format!("{prefix}.{l}.bias"), &p.bias));
            }
        }
        out.push(("attention.w".to_owned(), &self.attn_w));
        out.push(("attention.u".to_owned(), &self.attn_u));
        out.push(("attention.v".to_owned(), &self.attn_v));
        out.push(("output.w".to_owned(), &self.out_w));
        out.push(("output.b".to_owned(), &self.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = vec![
            ("source_embedding".to_owned(), &mut self.source_embedding),
            ("target_embedding".to_owned(), &mut self.target_embedding),
        ];
        for (prefix, stack) in [
            ("encoder_fwd", &mut self.encoder_fwd),
            ("encoder_bwd", &mut self.encoder_bwd),
            ("decoder", &mut self.decoder),
        ] {
            for (l, p) in stack.iter_mut().enumerate() {
                out.push((format!("{prefix}.{l}.weights"), &mut p.weights));
                out.push((format!("{prefix}.{l}.bias"), &mut p.bias));
            }
        }
        out.push(("attention.w".to_owned(), &mut self.attn_w));
        out.push(("attention.u".to_owned(), &mut self.attn_u));
        out.push(("attention.v".to_owned(), &mut self.attn_v));
        out.push(("output.w".to_owned(), &mut self.out_w));
        out.push(("output.b".to_owned(), &mut self.out_b));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Copies pretrained vectors into the rows of `side` ("source" or
    /// "target") whose token has a vector. Returns the number of rows set.
    pub fn load_embeddings(
        &mut self,
        side: &str,
        vocab: &Vocabulary,
        vectors: &WordVectors,
    ) -> Result<usize> {
        if vectors.dim != self.config.embedding_dim {
            return Err(NmtError::Shape(format!(
                "embedding vectors have dimension {} but the model uses {}",
                vectors.dim, self.config.embedding_dim
            )));
        }
        let table = match side {
            "source" => &mut self.source_embedding,
            "target" => &mut self.target_embedding,
            other => return Err(NmtError::InvalidConfig(format!("unknown side `{other}`"))),
        };
        if table.rows() != vocab.len() {
            return Err(NmtError::Shape(format!(
                "{side} vocabulary has {} entries but the embedding table {}",
                vocab.len(),
                table.rows()
            )));
        }
        let lookup = vectors.lookup();
        let mut set = 0;
        for (id, token) in vocab.tokens().iter().enumerate() {
            if let Some(v) = lookup.get(token.as_str()) {
                table.row_mut(id).copy_from_slice(v);
                set += 1;
            }
        }
        Ok(set)
    }

    pub(crate) fn check_ids(ids: &[u32], size: usize) -> Result<()> {
        match ids.iter().find(|&&id| id as usize >= size) {
            Some(&id) => Err(NmtError::TokenOutOfRange { id, size }),
            None => Ok(()),
        }
    }

    pub(crate) fn encode_trace(&self, src: &[u32]) -> Result<EncoderTrace> {
        if src.is_empty() {
            return Err(NmtError::EmptySequence("source"));
        }
        Self::check_ids(src, self.config.source_vocab_size)?;
        let h = self.config.hidden_size;
        let q = src.len();
        let mut inputs: Vec<Vec<f64>> = src
            .iter()
            .map(|&id| self.source_embedding.row(id as usize).to_vec())
            .collect();
        let mut layers = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let mut outputs = vec![vec![0.0; 2 * h]; q];
            let mut fwd = Vec::with_capacity(q);
            let (mut hp, mut cp) = (vec![0.0; h], vec![0.0; h]);
            for n in 0..q {
                let (hn, cn, cache) = self.encoder_fwd[l].forward(&inputs[n], &hp, &cp);
                outputs[n][..h].copy_from_slice(&hn);
                fwd.push(cache);
                hp = hn;
                cp = cn;
            }
            let mut bwd: Vec<Option<LstmCache>> = (0..q).map(|_| None).collect();
            let (mut hp, mut cp) = (vec![0.0; h], vec![0.0; h]);
            for n in (0..q).rev() {
                let (hn, cn, cache) = self.encoder_bwd[l].forward(&inputs[n], &hp, &cp);
                outputs[n][h..].copy_from_slice(&hn);
                bwd[n] = Some(cache);
                hp = hn;
                cp = cn;
            }
            let layer_inputs = std::mem::replace(&mut inputs, outputs);
            layers.push(LayerTrace {
                inputs: layer_inputs,
                fwd,
                bwd: bwd.into_iter().map(|c| c.expect("filled")).collect(),
            });
        }
        Ok(EncoderTrace {
            layers,
            annotations: inputs,
        })
    }

    /// Top-layer annotations `[→e_n, ←e_n]`, one per source position.
    pub fn encode_bidirectional(&self, src: &[u32]) -> Result<Vec<Vec<f64>>> {
        Ok(self.encode_trace(src)?.annotations)
    }

    pub fn encode(&self, src: &[u32]) -> Result<EncodedSource> {
        EncodedSource::from_annotations(self, self.encode_bidirectional(src)?)
    }

    /// Unnormalized alignment scores `v·tanh(W_a·h_prev + U_a·e_m)`.
    pub fn attention_scores(&self, h_prev: &[f64], enc: &EncodedSource) -> Vec<f64> {
        self.attention_trace_scores(h_prev, enc).0
    }

    fn attention_trace_scores(&self, h_prev: &[f64], enc: &EncodedSource) -> (Vec<f64>, Vec<Vec<f64>>) {
        let wh = self.attn_w.matvec(h_prev);
        let v = self.attn_v.row(0);
        let mut scores = Vec::with_capacity(enc.len());
        let mut hidden = Vec::with_capacity(enc.len());
        for key in &enc.keys {
            let t: Vec<f64> = key.iter().zip(&wh).map(|(k, w)| (k + w).tanh()).collect();
            scores.push(dot(v, &t));
            hidden.push(t);
        }
        (scores, hidden)
    }

    pub(crate) fn attend_trace(&self, h_prev: &[f64], enc: &EncodedSource) -> AttentionTrace {
        let (mut weights, hidden) = self.attention_trace_scores(h_prev, enc);
        softmax_in_place(&mut weights);
        let context = weighted_sum(&weights, &enc.annotations);
        AttentionTrace {
            h_prev: h_prev.to_vec(),
            hidden,
            weights,
            context,
        }
    }

    /// Softmax of the alignment scores over source positions and the
    /// resulting context vector `Σ_m a_m·e_m`.
    pub fn attend(&self, h_prev: &[f64], enc: &EncodedSource) -> (Vec<f64>, Vec<f64>) {
        let t = self.attend_trace(h_prev, enc);
        (t.weights, t.context)
    }

    pub(crate) fn step_trace(
        &self,
        y_prev: u32,
        state: &DecoderState,
        enc: &EncodedSource,
    ) -> (StepTrace, DecoderState) {
        let d = self.config.embedding_dim;
        let attention = self.attend_trace(state.top(), enc);
        let mut x = Vec::with_capacity(d + attention.context.len());
        x.extend_from_slice(self.target_embedding.row(y_prev as usize));
        x.extend_from_slice(&attention.context);
        let mut next = DecoderState {
            h: Vec::with_capacity(self.config.layers),
            c: Vec::with_capacity(self.config.layers),
        };
        let mut caches = Vec::with_capacity(self.config.layers);
        for (l, cell) in self.decoder.iter().enumerate() {
            let (h, c, cache) = cell.forward(&x, &state.h[l], &state.c[l]);
            caches.push(cache);
            x = h.clone();
            next.h.push(h);
            next.c.push(c);
        }
        let mut out_in = x;
        out_in.extend_from_slice(&attention.context);
        (
            StepTrace {
                y_prev,
                attention,
                caches,
                out_in,
            },
            next,
        )
    }

    pub(crate) fn output_logits(&self, out_in: &[f64]) -> Vec<f64> {
        let mut logits = self.out_b.as_slice().to_vec();
        self.out_w.matvec_acc(out_in, &mut logits);
        logits
    }

    pub fn initial_state(&self) -> DecoderState {
        DecoderState::zeros(self.config.layers, self.config.hidden_size)
    }

    /// One decoding step from the previous token and states.
    pub fn decoder_step(
        &self,
        y_prev: u32,
        state: &DecoderState,
        enc: &EncodedSource,
    ) -> Result<DecoderOutput> {
        Self::check_ids(&[y_prev], self.config.target_vocab_size)?;
        if state.h.len() != self.config.layers || state.c.len() != self.config.layers {
            return Err(NmtError::Shape(format!(
                "decoder state has {} layers, model has {}",
                state.h.len(),
                self.config.layers
            )));
        }
        let (trace, next) = self.step_trace(y_prev, state, enc);
        let mut distribution = self.output_logits(&trace.out_in);
        softmax_in_place(&mut distribution);
        Ok(DecoderOutput {
            distribution,
            state: next,
            weights: trace.attention.weights,
        })
    }
}

pub(crate) fn weighted_sum(weights: &[f64], vectors: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vectors[0].len()];
    for (w, v) in weights.iter().zip(vectors) {
        crate::linalg::axpy(*w, v, &mut out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::GO_ID;

    fn zero_model(v: usize, layers: usize) -> Seq2SeqModel {
        let mut cfg = ModelConfig::new(v, v, 4, 5, layers);
        cfg.init_scale = 0.0;
        cfg.forget_bias = 0.0;
        Seq2SeqModel::new(cfg).unwrap()
    }

    fn random_model(v: usize, layers: usize, seed: u64) -> Seq2SeqModel {
        let mut cfg = ModelConfig::new(v, v + 3, 6, 5, layers);
        cfg.init_scale = 0.5;
        cfg.seed = seed;
        Seq2SeqModel::new(cfg).unwrap()
    }

    #[test]
    fn single_token_symmetric_encoder() {
        let mut m = random_model(10, 1, 3);
        m.encoder_bwd = m.encoder_fwd.clone();
        let e = m.encode_bidirectional(&[5]).unwrap();
        assert_eq!(e.len(), 1);
        assert_eq!(e[0][..5], e[0][5..]);
    }

    #[test]
    fn zero_model_gives_zero_annotations() {
        let m = zero_model(10, 2);
        let e = m.encode_bidirectional(&[4, 5, 6]).unwrap();
        assert!(e.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn annotation_shape() {
        for layers in 1..=3 {
            let m = random_model(12, layers, 1);
            for q in 1..6 {
                let src: Vec<u32> = (0..q).map(|i| 4 + i as u32).collect();
                let e = m.encode_bidirectional(&src).unwrap();
                assert_eq!(e.len(), q);
                assert!(e.iter().all(|a| a.len() == 10));
            }
        }
    }

    #[test]
    fn empty_and_out_of_range_sources_fail() {
        let m = random_model(8, 1, 1);
        assert!(matches!(m.encode(&[]), Err(NmtError::EmptySequence(_))));
        assert!(matches!(m.encode(&[8]), Err(NmtError::TokenOutOfRange { .. })));
    }

    #[test]
    fn equal_scores_give_uniform_weights() {
        let m = random_model(10, 1, 2);
        let enc = EncodedSource::from_annotations(&m, vec![vec![0.3; 10]; 4]).unwrap();
        let (w, ctx) = m.attend(&[0.1, 0.2, 0.3, 0.4, 0.5], &enc);
        for x in w {
            assert!((x - 0.25).abs() < 1e-15);
        }
        for c in ctx {
            assert!((c - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn peaked_weights_select_one_annotation() {
        let m = random_model(10, 1, 2);
        let ann: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64; 10]).collect();
        let w = [0.0, 1.0, 0.0];
        assert_eq!(weighted_sum(&w, &ann), ann[1]);
        let _ = m;
    }

    #[test]
    fn attention_weights_shift_invariant() {
        let m = random_model(10, 1, 4);
        let enc = m.encode(&[4, 5, 6, 7]).unwrap();
        let h = [0.3, -0.2, 0.1, 0.0, 0.5];
        let (w, _) = m.attend(&h, &enc);
        let mut shifted = m.attention_scores(&h, &enc);
        for s in &mut shifted {
            *s += 17.5;
        }
        softmax_in_place(&mut shifted);
        for (a, b) in w.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_model_step_is_uniform() {
        let m = zero_model(20, 2);
        let enc = m.encode(&[4, 5]).unwrap();
        let out = m.decoder_step(GO_ID, &m.initial_state(), &enc).unwrap();
        for p in &out.distribution {
            assert!((p - 1.0 / 20.0).abs() < 1e-15);
        }
    }

    #[test]
    fn step_distribution_and_weights_normalized() {
        for seed in 0..5 {
            let m = random_model(15, 2, seed);
            let enc = m.encode(&[4, 9, 11, 5, 6]).unwrap();
            let mut state = m.initial_state();
            let mut y = GO_ID;
            for _ in 0..4 {
                let out = m.decoder_step(y, &state, &enc).unwrap();
                assert!(out.distribution.iter().all(|&p| p >= 0.0));
                assert!((out.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert_eq!(out.weights.len(), 5);
                assert!(out.weights.iter().all(|&p| p >= 0.0));
                assert!((out.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                y = 4 + (y % 7);
                state = out.state;
            }
        }
    }

    #[test]
    fn decoder_step_checks_state_layers() {
        let m = random_model(10, 2, 1);
        let enc = m.encode(&[4]).unwrap();
        let bad = DecoderState::zeros(1, 5);
        assert!(m.decoder_step(GO_ID, &bad, &enc).is_err());
    }

    #[test]
    fn tensor_names_are_unique_and_cover_everything() {
        let m = random_model(10, 2, 1);
        let names: std::collections::BTreeSet<_> = m.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), m.tensors().len());
        assert_eq!(m.tensors().len(), 2 + 3 * 2 * 2 + 5);
        let z = m.zeros_like();
        assert!(z.tensors().iter().all(|(_, t)| t.as_slice().iter().all(|&v| v == 0.0)));
        assert_eq!(z.num_parameters(), m.num_parameters());
    }

    #[test]
    fn pretrained_vectors_fill_matching_rows() {
        use crate::corpus::Sentence;
        let s = Sentence::from_whitespace("alpha beta beta");
        let vocab = Vocabulary::build([&s], 10).unwrap();
        let mut cfg = ModelConfig::new(vocab.len(), 5, 3, 4, 1);
        cfg.seed = 9;
        let mut m = Seq2SeqModel::new(cfg).unwrap();
        let vectors = WordVectors {
            dim: 3,
            entries: vec![("beta".into(), vec![1.0, 2.0, 3.0]), ("zeta".into(), vec![0.0; 3])],
        };
        assert_eq!(m.load_embeddings("source", &vocab, &vectors).unwrap(), 1);
        let id = vocab.id_of("beta").unwrap() as usize;
        assert_eq!(m.source_embedding.row(id), &[1.0, 2.0, 3.0]);
        assert!(m.load_embeddings("target", &vocab, &vectors).is_err());
    }
}
