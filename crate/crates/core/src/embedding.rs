//! Skip-gram word vectors trained with a hierarchical softmax over a Huffman
//! coding tree.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{dot, log_sigmoid, sigmoid, Matrix};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("a Huffman tree needs at least 2 tokens, got {0}")]
    TooFewTokens(usize),
    #[error("token `{0}` has a zero count")]
    ZeroCount(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("invalid hyperparameter: {0}")]
    InvalidConfig(String),
    #[error("objective became non-finite ({value}) in epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, value: f64 },
    #[error("malformed vector file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EmbeddingError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Child {
    Leaf(u32),
    Internal(u32),
}

/// One step on a root-to-leaf path: internal node id and branch sign (±1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathStep {
    pub node: u32,
    pub sign: i8,
}

/// Binary coding tree with `n - 1` internal nodes over `n` leaves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuffmanTree {
    children: Vec<[Child; 2]>,
    paths: Vec<Vec<PathStep>>,
}

impl HuffmanTree {
    /// Builds a minimum expected code length tree over `(token, count)`
    /// entries; leaf `i` is entry `i`. Equal-weight merges prefer the
    /// subtree whose smallest contained token sorts first.
    pub fn build<S: AsRef<str>>(freq: &[(S, u64)]) -> Result<Self> {
        let n = freq.len();
        if n < 2 {
            return Err(EmbeddingError::TooFewTokens(n));
        }
        if let Some((t, _)) = freq.iter().find(|(_, c)| *c == 0) {
            return Err(EmbeddingError::ZeroCount(t.as_ref().to_owned()));
        }
        // (count, smallest token in subtree, node)
        let mut heap: BinaryHeap<Reverse<(u64, String, Child)>> = BinaryHeap::new();
        for (i, (t, c)) in freq.iter().enumerate() {
            heap.push(Reverse((*c, t.as_ref().to_owned(), Child::Leaf(i as u32))));
        }
        let mut children = Vec::with_capacity(n - 1);
        while heap.len() > 1 {
            let Reverse((c1, t1, a)) = heap.pop().unwrap();
            let Reverse((c2, t2, b)) = heap.pop().unwrap();
            let id = children.len() as u32;
            children.push([a, b]);
            heap.push(Reverse((c1 + c2, t1.min(t2), Child::Internal(id))));
        }
        let mut paths = vec![Vec::new(); n];
        let root = (children.len() - 1) as u32;
        let mut stack = vec![(root, Vec::<PathStep>::new())];
        while let Some((node, prefix)) = stack.pop() {
            for (k, child) in children[node as usize].iter().enumerate() {
                let mut path = prefix.clone();
                path.push(PathStep {
                    node,
                    sign: if k == 0 { 1 } else { -1 },
                });
                match *child {
                    Child::Leaf(leaf) => paths[leaf as usize] = path,
                    Child::Internal(next) => stack.push((next, path)),
                }
            }
        }
        Ok(Self { children, paths })
    }

    pub fn num_leaves(&self) -> usize {
        self.paths.len()
    }

    pub fn num_internal(&self) -> usize {
        self.children.len()
    }

    pub fn path(&self, leaf: u32) -> &[PathStep] {
        &self.paths[leaf as usize]
    }

    pub fn code_length(&self, leaf: u32) -> usize {
        self.paths[leaf as usize].len()
    }

    /// Follows branch signs from the root; `None` if the signs do not end
    /// exactly at a leaf.
    pub fn leaf_for_signs(&self, signs: &[i8]) -> Option<u32> {
        let mut node = (self.children.len() - 1) as u32;
        for (i, &s) in signs.iter().enumerate() {
            let k = if s > 0 { 0 } else { 1 };
            match self.children[node as usize][k] {
                Child::Leaf(l) => return (i + 1 == signs.len()).then_some(l),
                Child::Internal(next) => node = next,
            }
        }
        None
    }
}

/// Input vectors per token plus one output vector per internal tree node.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    tokens: Vec<String>,
    input: Matrix,
    nodes: Matrix,
    tree: HuffmanTree,
    window: usize,
}

impl EmbeddingModel {
    /// Input vectors uniform in `[-0.5/d, 0.5/d]`, node vectors zero.
    pub fn new(freq: &[(String, u64)], dim: usize, window: usize, seed: u64) -> Result<Self> {
        if dim == 0 || window == 0 {
            return Err(EmbeddingError::InvalidConfig("dimension and window must be ≥ 1".into()));
        }
        let tree = HuffmanTree::build(freq)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = Matrix::uniform(freq.len(), dim, 0.5 / dim as f64, &mut rng);
        let nodes = Matrix::zeros(tree.num_internal(), dim);
        Ok(Self {
            tokens: freq.iter().map(|(t, _)| t.clone()).collect(),
            input,
            nodes,
            tree,
            window,
        })
    }

    pub fn dim(&self) -> usize {
        self.input.cols()
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tree(&self) -> &HuffmanTree {
        &self.tree
    }

    pub fn vector(&self, id: u32) -> &[f64] {
        self.input.row(id as usize)
    }

    pub fn input_vectors(&self) -> &Matrix {
        &self.input
    }

    pub fn input_vectors_mut(&mut self) -> &mut Matrix {
        &mut self.input
    }

    pub fn node_vectors(&self) -> &Matrix {
        &self.nodes
    }

    pub fn node_vectors_mut(&mut self) -> &mut Matrix {
        &mut self.nodes
    }

    /// `ln P(target | center)` as a product of branch sigmoids along the
    /// target's tree path.
    pub fn hs_log_prob(&self, target: u32, center: u32) -> f64 {
        let u = self.input.row(center as usize);
        self.tree
            .path(target)
            .iter()
            .map(|s| log_sigmoid(s.sign as f64 * dot(self.nodes.row(s.node as usize), u)))
            .sum()
    }

    /// Sum of `hs_log_prob` over the pairs and its gradient.
    pub fn batch_objective_and_gradient(&self, pairs: &[(u32, u32)]) -> (f64, SparseGradient) {
        let mut grad = SparseGradient::default();
        let d = self.dim();
        let mut objective = 0.0;
        for &(center, target) in pairs {
            let u = self.input.row(center as usize);
            let mut du = vec![0.0; d];
            for step in self.tree.path(target) {
                let v = self.nodes.row(step.node as usize);
                let s = step.sign as f64;
                let x = s * dot(v, u);
                objective += log_sigmoid(x);
                // d/dx ln σ(x) = 1 - σ(x)
                let g = s * (1.0 - sigmoid(x));
                let dv = grad.nodes.entry(step.node).or_insert_with(|| vec![0.0; d]);
                for k in 0..d {
                    du[k] += g * v[k];
                    dv[k] += g * u[k];
                }
            }
            let acc = grad.input.entry(center).or_insert_with(|| vec![0.0; d]);
            for k in 0..d {
                acc[k] += du[k];
            }
        }
        (objective, grad)
    }

    /// `θ += step · gradient`
    pub fn apply(&mut self, grad: &SparseGradient, step: f64) {
        for (&row, g) in &grad.input {
            crate::linalg::axpy(step, g, self.input.row_mut(row as usize));
        }
        for (&row, g) in &grad.nodes {
            crate::linalg::axpy(step, g, self.nodes.row_mut(row as usize));
        }
    }

    /// Text format: header `|V| d`, then `token v1 … vd` per line.
    pub fn write_vectors<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.vocab_size(), self.dim())?;
        for (i, t) in self.tokens.iter().enumerate() {
            write!(w, "{t}")?;
            for v in self.input.row(i) {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Gradient rows touched by a batch, keyed by row id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGradient {
    pub input: BTreeMap<u32, Vec<f64>>,
    pub nodes: BTreeMap<u32, Vec<f64>>,
}

/// `(center, context)` for every offset in `[-k, 0) ∪ (0, k]` that stays
/// inside the sentence.
pub fn skipgram_pairs(ids: &[u32], window: usize) -> Vec<(u32, u32)> {
    let n = ids.len();
    let mut out = Vec::new();
    for i in 0..n {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(n.saturating_sub(1));
        for j in lo..=hi {
            if j != i {
                out.push((ids[i], ids[j]));
            }
        }
    }
    out
}

/// Counts tokens and maps sentences to indices into the returned
/// `(token, count)` list, which is sorted by descending count then token.
pub fn index_corpus<'a, I, S>(sentences: I) -> (Vec<(String, u64)>, Vec<Vec<u32>>)
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let sentences: Vec<&[S]> = sentences.into_iter().collect();
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in &sentences {
        for t in s.iter() {
            *counts.entry(t.as_ref()).or_insert(0) += 1;
        }
    }
    let mut freq: Vec<(String, u64)> = counts.into_iter().map(|(t, c)| (t.to_owned(), c)).collect();
    freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let index: HashMap<&str, u32> = freq
        .iter()
        .enumerate()
        .map(|(i, (t, _))| (t.as_str(), i as u32))
        .collect();
    let ids = sentences
        .iter()
        .map(|s| s.iter().map(|t| index[t.as_ref()]).collect())
        .collect();
    (freq, ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub step_size: f64,
    /// Center words per gradient step.
    pub batch_words: usize,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            window: 5,
            epochs: 5,
            step_size: 0.025,
            batch_words: 50,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedEmbedding {
    pub model: EmbeddingModel,
    /// Mean `ln P(context | center)` per pair, one entry per epoch.
    pub objective_trace: Vec<f64>,
}

/// Gradient ascent on the mean skip-gram log-likelihood. Each step takes the
/// summed gradient of the pairs generated by `batch_words` consecutive
/// center words. Sentence order is reshuffled every epoch from the seed.
pub fn train_skipgram(
    freq: &[(String, u64)],
    corpus: &[Vec<u32>],
    config: &SkipGramConfig,
) -> Result<TrainedEmbedding> {
    if corpus.iter().all(|s| s.is_empty()) {
        return Err(EmbeddingError::EmptyCorpus);
    }
    if config.batch_words == 0 || !(config.step_size > 0.0) {
        return Err(EmbeddingError::InvalidConfig(
            "batch_words must be ≥ 1 and step_size > 0".into(),
        ));
    }
    if let Some(bad) = corpus.iter().flatten().find(|&&id| id as usize >= freq.len()) {
        return Err(EmbeddingError::InvalidConfig(format!("token id {bad} outside vocabulary")));
    }
    let mut model = EmbeddingModel::new(freq, config.dim, config.window, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_obj = 0.0;
        let mut epoch_pairs = 0usize;
        let mut batch = Vec::new();
        let mut centers = 0;
        let mut batch_no = 0;
        let mut flush = |batch: &mut Vec<(u32, u32)>, model: &mut EmbeddingModel| -> Result<()> {
            if batch.is_empty() {
                return Ok(());
            }
            let (obj, grad) = model.batch_objective_and_gradient(batch);
            if !obj.is_finite() {
                return Err(EmbeddingError::NonFinite {
                    epoch,
                    batch: batch_no,
                    value: obj,
                });
            }
            epoch_obj += obj;
            epoch_pairs += batch.len();
            model.apply(&grad, config.step_size);
            batch.clear();
            batch_no += 1;
            Ok(())
        };
        for &si in &order {
            let sentence = &corpus[si];
            for (i, &center) in sentence.iter().enumerate() {
                let lo = i.saturating_sub(config.window);
                let hi = (i + config.window).min(sentence.len() - 1);
                for j in lo..=hi {
                    if j != i {
                        batch.push((center, sentence[j]));
                    }
                }
                centers += 1;
                if centers % config.batch_words == 0 {
                    flush(&mut batch, &mut model)?;
                }
            }
        }
        flush(&mut batch, &mut model)?;
        trace.push(if epoch_pairs == 0 { 0.0 } else { epoch_obj / epoch_pairs as f64 });
    }
    Ok(TrainedEmbedding {
        model,
        objective_trace: trace,
    })
}

/// Vectors read back from the text format.
#[derive(Debug, Clone, PartialEq)]
pub struct WordVectors {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f64>)>,
}

impl WordVectors {
    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| EmbeddingError::Format("missing header".into()))??;
        let mut parts = header.split_whitespace();
        let parse = |s: Option<&str>| -> Result<usize> {
            s.and_then(|s| s.parse().ok())
                .ok_or_else(|| EmbeddingError::Format(format!("bad header `{header}`")))
        };
        let count = parse(parts.next())?;
        let dim = parse(parts.next())?;
        let mut entries = Vec::with_capacity(count);
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let token = fields.next().unwrap().to_owned();
            let values: Vec<f64> = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| EmbeddingError::Format(format!("line {}: {e}", lineno + 2)))?;
            if values.len() != dim {
                return Err(EmbeddingError::Format(format!(
                    "line {}: expected {dim} values, found {}",
                    lineno + 2,
                    values.len()
                )));
            }
            entries.push((token, values));
        }
        if entries.len() != count {
            return Err(EmbeddingError::Format(format!(
                "header declares {count} vectors, found {}",
                entries.len()
            )));
        }
        Ok(Self { dim, entries })
    }

    pub fn lookup(&self) -> HashMap<&str, &[f64]> {
        self.entries
            .iter()
            .map(|(t, v)| (t.as_str(), v.as_slice()))
            .collect()
    }
}
