//! Semi-supervised morph segmentation.
//!
//! A morph lexicon is learned by minimizing a two-part description length
//!
//! ```text
//! L = -ln P(lexicon) - α·ln P(unlabeled | analyses) - β·ln P(annotated | analyses)
//! ```
//!
//! where the lexicon prior codes every morph string character by character
//! (plus an end marker) together with a log-binomial code for the count
//! distribution, and each morph token has probability `count / total`.
//! Words are segmented with a Viterbi search over split points.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sentence;

/// Joiner appended to non-final morphs of a word.
pub const JOINER: &str = "@@";

#[derive(Debug, Error)]
pub enum MorphError {
    #[error("morph `{0}` is not in the lexicon")]
    UnknownMorph(String),
    #[error("analysis {analysis:?} does not spell `{word}`")]
    BadAnalysis { word: String, analysis: Vec<String> },
    #[error("training lexicon is empty")]
    EmptyLexicon,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("annotation file line {line}: {message}")]
    AnnotationFormat { line: usize, message: String },
    #[error("malformed model file: {0}")]
    ModelFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MorphError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Character model
// ---------------------------------------------------------------------------

/// Character distribution used to code morph strings. `probs`, `end` and
/// `unknown` together sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharModel {
    probs: BTreeMap<char, f64>,
    end: f64,
    #[serde(default)]
    unknown: f64,
}

impl CharModel {
    /// Every listed character and the end marker share the mass equally.
    pub fn uniform(alphabet: &[char]) -> Self {
        let p = 1.0 / (alphabet.len() + 1) as f64;
        Self {
            probs: alphabet.iter().map(|&c| (c, p)).collect(),
            end: p,
            unknown: 0.0,
        }
    }

    /// Add-one estimate from word strings: one end marker per word and a
    /// reserved slot for characters never seen.
    pub fn estimate<'a, I: IntoIterator<Item = &'a str>>(words: I) -> Self {
        let mut counts: BTreeMap<char, u64> = BTreeMap::new();
        let mut ends = 0u64;
        for w in words {
            for c in w.chars() {
                *counts.entry(c).or_insert(0) += 1;
            }
            ends += 1;
        }
        let total = counts.values().sum::<u64>() + ends + counts.len() as u64 + 2;
        let total = total as f64;
        Self {
            probs: counts
                .into_iter()
                .map(|(c, n)| (c, (n + 1) as f64 / total))
                .collect(),
            end: (ends + 1) as f64 / total,
            unknown: 1.0 / total,
        }
    }

    pub fn prob(&self, c: char) -> f64 {
        match self.probs.get(&c) {
            Some(&p) => p,
            None if self.unknown > 0.0 => self.unknown,
            // no reserved mass: price like the rarest known symbol
            None => self.probs.values().copied().fold(self.end, f64::min),
        }
    }

    pub fn end_prob(&self) -> f64 {
        self.end
    }

    pub fn total_mass(&self) -> f64 {
        self.probs.values().sum::<f64>() + self.end + self.unknown
    }

    /// `-Σ ln p(ch) - ln p(end)`
    pub fn string_cost(&self, s: &str) -> f64 {
        -s.chars().map(|c| self.prob(c).ln()).sum::<f64>() - self.end.ln()
    }
}

fn ln_factorial(n: u64) -> f64 {
    const TABLE: usize = 4096;
    static LOGS: OnceLock<Vec<f64>> = OnceLock::new();
    let table = LOGS.get_or_init(|| {
        let mut v = Vec::with_capacity(TABLE);
        let mut acc = 0.0;
        v.push(0.0);
        for k in 1..TABLE {
            acc += (k as f64).ln();
            v.push(acc);
        }
        v
    });
    if (n as usize) < TABLE {
        return table[n as usize];
    }
    // Stirling series, error far below 1e-12 for n ≥ 4096
    let x = n as f64;
    x * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI * x).ln() + 1.0 / (12.0 * x)
        - 1.0 / (360.0 * x * x * x)
}

/// `ln C(n, k)`
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

/// Code length of the count distribution: `ln C(N-1, M-1)` for `N` tokens over
/// `M` types; zero for an empty lexicon.
fn count_code_length(tokens: u64, types: u64) -> f64 {
    if types == 0 || tokens == 0 {
        0.0
    } else {
        ln_binomial(tokens - 1, types - 1)
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MorphModel {
    morph_counts: BTreeMap<String, u64>,
    total_tokens: u64,
    alpha: f64,
    beta: f64,
    chars: CharModel,
}

/// A word's segmentation and its Viterbi cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub morphs: Vec<String>,
    pub cost: f64,
}

impl MorphModel {
    pub fn new(
        morph_counts: BTreeMap<String, u64>,
        alpha: f64,
        beta: f64,
        chars: CharModel,
    ) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(MorphError::InvalidParameter(format!("alpha must be > 0, got {alpha}")));
        }
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(MorphError::InvalidParameter(format!("beta must be ≥ 0, got {beta}")));
        }
        if let Some((m, _)) = morph_counts.iter().find(|(m, &c)| c == 0 || m.is_empty()) {
            return Err(MorphError::InvalidParameter(format!(
                "morph `{m}` must be non-empty with count ≥ 1"
            )));
        }
        if (chars.total_mass() - 1.0).abs() > 1e-9 {
            return Err(MorphError::InvalidParameter(format!(
                "character probabilities sum to {}",
                chars.total_mass()
            )));
        }
        let total_tokens = morph_counts.values().sum();
        Ok(Self {
            morph_counts,
            total_tokens,
            alpha,
            beta,
            chars,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn morph_counts(&self) -> &BTreeMap<String, u64> {
        &self.morph_counts
    }

    pub fn count(&self, morph: &str) -> u64 {
        self.morph_counts.get(morph).copied().unwrap_or(0)
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn num_morphs(&self) -> usize {
        self.morph_counts.len()
    }

    pub fn char_model(&self) -> &CharModel {
        &self.chars
    }

    /// `-ln P(t | φ)`, `None` for morphs outside the lexicon.
    pub fn morph_nll(&self, morph: &str) -> Option<f64> {
        match self.count(morph) {
            0 => None,
            c => Some((self.total_tokens as f64).ln() - (c as f64).ln()),
        }
    }

    /// Lexicon prior cost `-ln P(φ)`.
    pub fn lexicon_prior_cost(&self) -> f64 {
        let strings: f64 = self.morph_counts.keys().map(|m| self.chars.string_cost(m)).sum();
        strings + count_code_length(self.total_tokens, self.morph_counts.len() as u64)
    }

    /// Cost of one morph token during decoding: `α·(-ln P(t|φ))` for known
    /// morphs; unseen strings pay their character code length plus an
    /// add-one token cost `α·ln(N + 1)`.
    pub fn morph_cost(&self, morph: &str) -> f64 {
        match self.morph_nll(morph) {
            Some(nll) => self.alpha * nll,
            None => {
                self.chars.string_cost(morph) + self.alpha * ((self.total_tokens + 1) as f64).ln()
            }
        }
    }

    /// Minimum-cost segmentation of `word` by dynamic programming over split
    /// points. The morphs always concatenate back to `word`.
    pub fn viterbi_segment(&self, word: &str) -> Segmentation {
        let bounds: Vec<usize> = word
            .char_indices()
            .map(|(i, _)| i)
            .chain(std::iter::once(word.len()))
            .collect();
        let n = bounds.len() - 1;
        if n == 0 {
            return Segmentation {
                morphs: Vec::new(),
                cost: 0.0,
            };
        }
        let mut best = vec![f64::INFINITY; n + 1];
        let mut back = vec![0usize; n + 1];
        best[0] = 0.0;
        for end in 1..=n {
            for start in 0..end {
                let c = best[start] + self.morph_cost(&word[bounds[start]..bounds[end]]);
                if c < best[end] {
                    best[end] = c;
                    back[end] = start;
                }
            }
        }
        let mut morphs = Vec::new();
        let mut end = n;
        while end > 0 {
            let start = back[end];
            morphs.push(word[bounds[start]..bounds[end]].to_owned());
            end = start;
        }
        morphs.reverse();
        Segmentation {
            morphs,
            cost: best[n],
        }
    }

    /// Replaces each word by its morphs. With `marker`, non-final morphs
    /// carry a trailing `@@` joiner.
    pub fn segment_corpus(&self, sentences: &[Sentence], marker: bool) -> Vec<Sentence> {
        let mut cache: HashMap<&str, Vec<String>> = HashMap::new();
        sentences
            .iter()
            .map(|s| {
                let mut out = Vec::with_capacity(s.len());
                for w in s.tokens() {
                    let morphs = cache
                        .entry(w.as_str())
                        .or_insert_with(|| self.viterbi_segment(w).morphs);
                    let last = morphs.len() - 1;
                    for (i, m) in morphs.iter().enumerate() {
                        if marker && i < last {
                            out.push(format!("{m}{JOINER}"));
                        } else {
                            out.push(m.clone());
                        }
                    }
                }
                Sentence::new(out).expect("morphs of valid tokens are valid tokens")
            })
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ModelFile {
            alpha: self.alpha,
            beta: self.beta,
            morphs: self.morph_counts.clone(),
            char_model: Some(self.chars.clone()),
        })
        .expect("model serializes")
    }

    /// Reads `{alpha, beta, morphs, char_model?}`. Without a stored character
    /// model one is estimated from the morph strings.
    pub fn from_json(value: serde_json::Value) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_value(value).map_err(|e| MorphError::ModelFormat(e.to_string()))?;
        let chars = file
            .char_model
            .unwrap_or_else(|| CharModel::estimate(file.morphs.keys().map(String::as_str)));
        Self::new(file.morphs, file.alpha, file.beta, chars)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    alpha: f64,
    beta: f64,
    morphs: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    char_model: Option<CharModel>,
}

/// Reassembles words from `@@`-marked morphs.
pub fn join_morphs(s: &Sentence) -> Sentence {
    let mut out = Vec::new();
    let mut pending = String::new();
    for t in s.tokens() {
        match t.strip_suffix(JOINER) {
            Some(stem) if !stem.is_empty() => pending.push_str(stem),
            _ => {
                pending.push_str(t);
                out.push(std::mem::take(&mut pending));
            }
        }
    }
    if !pending.is_empty() {
        out.push(pending);
    }
    Sentence::new(out).expect("joined morphs are valid tokens")
}

// ---------------------------------------------------------------------------
// Cost of a full analysis
// ---------------------------------------------------------------------------

/// A word's current analysis and how often the word occurs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordAnalysis {
    pub count: u64,
    pub morphs: Vec<String>,
}

pub type Analyses = BTreeMap<String, WordAnalysis>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    /// `-ln P(φ)`
    pub prior: f64,
    /// `-ln P(C_W | y, φ)`, unweighted
    pub unlabeled_nll: f64,
    /// `-ln P(C_{W→A} | y, φ)`, unweighted
    pub annotated_nll: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.prior + self.alpha * self.unlabeled_nll + self.beta * self.annotated_nll
    }
}

/// Evaluates the weighted cost of the given analyses under `model`'s lexicon.
pub fn corpus_cost(
    model: &MorphModel,
    unlabeled: &Analyses,
    annotated: &Analyses,
    alpha: f64,
    beta: f64,
) -> Result<CostBreakdown> {
    let nll = |analyses: &Analyses| -> Result<f64> {
        let mut sum = 0.0;
        for a in analyses.values() {
            for m in &a.morphs {
                let nll = model
                    .morph_nll(m)
                    .ok_or_else(|| MorphError::UnknownMorph(m.clone()))?;
                sum += a.count as f64 * nll;
            }
        }
        Ok(sum)
    };
    Ok(CostBreakdown {
        prior: model.lexicon_prior_cost(),
        unlabeled_nll: nll(unlabeled)?,
        annotated_nll: nll(annotated)?,
        alpha,
        beta,
    })
}

// ---------------------------------------------------------------------------
// Annotations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    word: String,
    analyses: Vec<Vec<String>>,
}

impl Annotation {
    pub fn new(word: impl Into<String>, analyses: Vec<Vec<String>>) -> Result<Self> {
        let word = word.into();
        if word.is_empty() || analyses.is_empty() {
            return Err(MorphError::InvalidParameter(
                "annotation needs a word and at least one analysis".into(),
            ));
        }
        for a in &analyses {
            if a.is_empty() || a.iter().any(String::is_empty) || a.concat() != word {
                return Err(MorphError::BadAnalysis {
                    word,
                    analysis: a.clone(),
                });
            }
        }
        Ok(Self { word, analyses })
    }

    pub fn word(&self) -> &str {
        &self.word
    }

    pub fn analyses(&self) -> &[Vec<String>] {
        &self.analyses
    }
}

/// Parses `word<TAB>m1 m2 m3, a1 a2` lines. Blank lines and `#` comments are
/// skipped.
pub fn read_annotations<R: BufRead>(r: R) -> Result<Vec<Annotation>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| MorphError::AnnotationFormat { line: i + 1, message };
        let (word, rest) = line
            .split_once('\t')
            .ok_or_else(|| err("missing tab separator".into()))?;
        let analyses: Vec<Vec<String>> = rest
            .split(',')
            .map(|a| a.split_whitespace().map(str::to_owned).collect::<Vec<_>>())
            .filter(|a| !a.is_empty())
            .collect();
        out.push(Annotation::new(word.trim(), analyses).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MorphTrainConfig {
    pub alpha: f64,
    /// `None` scales β as unlabeled tokens / annotated tokens.
    pub beta: Option<f64>,
    pub seed: u64,
    pub max_epochs: usize,
    /// Stop once an epoch improves the cost by less than this fraction.
    pub tolerance: f64,
}

impl Default for MorphTrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: None,
            seed: 1,
            max_epochs: 50,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedMorphModel {
    pub model: MorphModel,
    pub unlabeled: Analyses,
    pub annotated: Analyses,
    /// Cost before training followed by the cost after each epoch.
    pub cost_trace: Vec<f64>,
}

/// Node of the split forest over unlabeled words: how many word tokens pass
/// through it and where it is split, if at all.
#[derive(Debug, Clone, Copy)]
struct SplitNode {
    count: u64,
    split: Option<usize>,
}

/// Incrementally maintained cost terms for a changing lexicon.
#[derive(Clone)]
struct CostState {
    alpha: f64,
    beta: f64,
    chars: CharModel,
    // morph -> (unlabeled count, annotated count)
    counts: HashMap<String, (u64, u64)>,
    tokens: u64,
    string_costs: f64,
    weighted_tokens: f64,
    weighted_log_counts: f64,
    // shared split forest of the freely segmented words
    nodes: HashMap<String, SplitNode>,
}

impl CostState {
    fn new(alpha: f64, beta: f64, chars: CharModel) -> Self {
        Self {
            alpha,
            beta,
            chars,
            counts: HashMap::new(),
            tokens: 0,
            string_costs: 0.0,
            weighted_tokens: 0.0,
            weighted_log_counts: 0.0,
            nodes: HashMap::new(),
        }
    }

    fn weight(&self, cu: u64, ca: u64) -> f64 {
        self.alpha * cu as f64 + self.beta * ca as f64
    }

    fn adjust(&mut self, morph: &str, du: i64, da: i64) {
        let (cu, ca) = self.counts.get(morph).copied().unwrap_or((0, 0));
        if cu + ca > 0 {
            self.weighted_log_counts -= self.weight(cu, ca) * ((cu + ca) as f64).ln();
        }
        let nu = (cu as i64 + du) as u64;
        let na = (ca as i64 + da) as u64;
        debug_assert!(cu as i64 + du >= 0 && ca as i64 + da >= 0);
        if nu + na > 0 {
            self.weighted_log_counts += self.weight(nu, na) * ((nu + na) as f64).ln();
        }
        self.weighted_tokens += self.alpha * du as f64 + self.beta * da as f64;
        self.tokens = (self.tokens as i64 + du + da) as u64;
        match (cu + ca > 0, nu + na > 0) {
            (false, true) => {
                self.string_costs += self.chars.string_cost(morph);
                self.counts.insert(morph.to_owned(), (nu, na));
            }
            (true, false) => {
                self.string_costs -= self.chars.string_cost(morph);
                self.counts.remove(morph);
            }
            (true, true) => {
                self.counts.insert(morph.to_owned(), (nu, na));
            }
            (false, false) => {}
        }
    }

    fn add_analysis(&mut self, morphs: &[String], count: u64, annotated: bool) {
        for m in morphs {
            if annotated {
                self.adjust(m, 0, count as i64);
            } else {
                self.adjust(m, count as i64, 0);
            }
        }
    }

    fn remove_analysis(&mut self, morphs: &[String], count: u64, annotated: bool) {
        for m in morphs {
            if annotated {
                self.adjust(m, 0, -(count as i64));
            } else {
                self.adjust(m, -(count as i64), 0);
            }
        }
    }

    fn cost(&self) -> f64 {
        let n = self.tokens;
        let log_n = if n > 0 { (n as f64).ln() } else { 0.0 };
        self.string_costs + count_code_length(n, self.counts.len() as u64)
            + self.weighted_tokens * log_n
            - self.weighted_log_counts
    }

    /// Rebuilds the running sums from the counts to shed rounding drift.
    fn recompute(&mut self) {
        let counts = std::mem::take(&mut self.counts);
        self.tokens = 0;
        self.string_costs = 0.0;
        self.weighted_tokens = 0.0;
        self.weighted_log_counts = 0.0;
        let mut keys: Vec<_> = counts.into_iter().collect();
        keys.sort();
        for (m, (cu, ca)) in keys {
            self.adjust(&m, cu as i64, ca as i64);
        }
    }

    /// Adds `delta` tokens to a forest node, passing them down to its
    /// children if it is split and into the lexicon if it is a leaf.
    fn modify_node(&mut self, segment: &str, delta: i64) {
        let node = self
            .nodes
            .entry(segment.to_owned())
            .or_insert(SplitNode { count: 0, split: None });
        node.count = (node.count as i64 + delta) as u64;
        let split = node.split;
        if node.count == 0 {
            self.nodes.remove(segment);
        }
        match split {
            Some(k) => {
                let (p, q) = segment.split_at(k);
                self.modify_node(p, delta);
                self.modify_node(q, delta);
            }
            None => self.adjust(segment, delta, 0),
        }
    }

    /// Leaves of the forest below `segment`, left to right.
    fn leaves(&self, segment: &str) -> Vec<String> {
        match self.nodes.get(segment).and_then(|n| n.split) {
            Some(k) => {
                let (p, q) = segment.split_at(k);
                let mut out = self.leaves(p);
                out.extend(self.leaves(q));
                out
            }
            None => vec![segment.to_owned()],
        }
    }

    /// Greedy recursive binary splitting of a forest node. All tokens passing
    /// through the node, from every word that contains it, move together.
    fn resplit(&mut self, segment: &str) {
        let count = match self.nodes.get(segment) {
            Some(n) => n.count,
            None => return,
        };
        let c = count as i64;
        self.modify_node(segment, -c);
        self.modify_node(segment, c);
        let mut best_cost = self.cost();
        self.modify_node(segment, -c);
        let mut best_split = None;
        for (k, _) in segment.char_indices().skip(1) {
            let (p, q) = segment.split_at(k);
            self.modify_node(p, c);
            self.modify_node(q, c);
            let cost = self.cost();
            self.modify_node(p, -c);
            self.modify_node(q, -c);
            if cost < best_cost {
                best_cost = cost;
                best_split = Some(k);
            }
        }
        match best_split {
            None => self.modify_node(segment, c),
            Some(k) => {
                let (p, q) = segment.split_at(k);
                self.nodes.insert(segment.to_owned(), SplitNode { count, split: Some(k) });
                self.modify_node(p, c);
                self.modify_node(q, c);
                self.resplit(p);
                self.resplit(q);
            }
        }
    }
}

/// Learns a morph lexicon by greedy recursive splitting over a split forest
/// shared by all unlabeled words. Each epoch visits the words in seeded
/// random order, re-splits each one from the top and keeps the result only
/// if the total cost does not rise;
/// annotated words then take whichever of their listed analyses is cheapest.
/// Words that are annotated follow their annotation in the unlabeled data
/// as well.
pub fn train_morph_model(
    lexicon: &BTreeMap<String, u64>,
    annotations: &[Annotation],
    config: &MorphTrainConfig,
) -> Result<TrainedMorphModel> {
    let lexicon: BTreeMap<&str, u64> = lexicon
        .iter()
        .filter(|(w, &c)| !w.is_empty() && c > 0)
        .map(|(w, &c)| (w.as_str(), c))
        .collect();
    if lexicon.is_empty() {
        return Err(MorphError::EmptyLexicon);
    }
    if !(config.alpha > 0.0) {
        return Err(MorphError::InvalidParameter(format!("alpha must be > 0, got {}", config.alpha)));
    }
    let unlabeled_tokens: u64 = lexicon.values().sum();
    let beta = match config.beta {
        Some(b) if b >= 0.0 => b,
        Some(b) => return Err(MorphError::InvalidParameter(format!("beta must be ≥ 0, got {b}"))),
        None if annotations.is_empty() => 0.0,
        None => unlabeled_tokens as f64 / annotations.len() as f64,
    };

    let chars = CharModel::estimate(
        lexicon
            .keys()
            .copied()
            .chain(annotations.iter().map(|a| a.word())),
    );
    let mut state = CostState::new(config.alpha, beta, chars.clone());

    let annotated_words: BTreeMap<&str, &Annotation> =
        annotations.iter().map(|a| (a.word(), a)).collect();
    // current choice per annotated word
    let mut choice: BTreeMap<&str, usize> = annotated_words.keys().map(|&w| (w, 0)).collect();

    let mut unlabeled: BTreeMap<&str, (u64, Vec<String>)> = BTreeMap::new();
    for (&w, &c) in &lexicon {
        let morphs = match annotated_words.get(w) {
            Some(a) => {
                state.add_analysis(&a.analyses()[0], c, false);
                a.analyses()[0].clone()
            }
            None => {
                state.modify_node(w, c as i64);
                vec![w.to_owned()]
            }
        };
        unlabeled.insert(w, (c, morphs));
    }
    for a in annotated_words.values() {
        state.add_analysis(&a.analyses()[0], 1, true);
    }

    let free_words: Vec<&str> = lexicon
        .keys()
        .copied()
        .filter(|w| !annotated_words.contains_key(w))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = vec![state.cost()];

    for _ in 0..config.max_epochs {
        let mut order = free_words.clone();
        order.shuffle(&mut rng);
        for w in order {
            let before = state.cost();
            let saved = state.clone();
            state.resplit(w);
            if state.cost() > before {
                state = saved;
            }
        }
        for w in &free_words {
            unlabeled.get_mut(w).unwrap().1 = state.leaves(w);
        }

        for (&w, a) in &annotated_words {
            let current = choice[w];
            let lex_count = lexicon.get(w).copied().unwrap_or(0);
            let mut best = (state.cost(), current);
            let cur_analysis = &a.analyses()[current];
            for (k, alt) in a.analyses().iter().enumerate() {
                if k == current {
                    continue;
                }
                state.remove_analysis(cur_analysis, 1, true);
                state.remove_analysis(cur_analysis, lex_count, false);
                state.add_analysis(alt, 1, true);
                state.add_analysis(alt, lex_count, false);
                let cost = state.cost();
                state.remove_analysis(alt, 1, true);
                state.remove_analysis(alt, lex_count, false);
                state.add_analysis(cur_analysis, 1, true);
                state.add_analysis(cur_analysis, lex_count, false);
                if cost < best.0 {
                    best = (cost, k);
                }
            }
            if best.1 != current {
                let alt = &a.analyses()[best.1];
                state.remove_analysis(cur_analysis, 1, true);
                state.remove_analysis(cur_analysis, lex_count, false);
                state.add_analysis(alt, 1, true);
                state.add_analysis(alt, lex_count, false);
                choice.insert(w, best.1);
                if let Some(entry) = unlabeled.get_mut(w) {
                    entry.1 = alt.clone();
                }
            }
        }

        state.recompute();
        let cost = state.cost();
        let prev = *trace.last().unwrap();
        trace.push(cost);
        if (prev - cost) <= config.tolerance * prev.abs() {
            break;
        }
    }

    let morph_counts: BTreeMap<String, u64> = state
        .counts
        .iter()
        .map(|(m, &(cu, ca))| (m.clone(), cu + ca))
        .collect();
    let model = MorphModel::new(morph_counts, config.alpha, beta, chars)?;
    let unlabeled = unlabeled
        .into_iter()
        .map(|(w, (count, morphs))| (w.to_owned(), WordAnalysis { count, morphs }))
        .collect();
    let annotated = annotated_words
        .iter()
        .map(|(&w, a)| {
            (
                w.to_owned(),
                WordAnalysis {
                    count: 1,
                    morphs: a.analyses()[choice[w]].clone(),
                },
            )
        })
        .collect();
    Ok(TrainedMorphModel {
        model,
        unlabeled,
        annotated,
        cost_trace: trace,
    })
}

/// Word-type counts over a tokenized corpus.
pub fn word_counts<'a, I: IntoIterator<Item = &'a Sentence>>(sentences: I) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for s in sentences {
        for t in s.tokens() {
            *counts.entry(t.clone()).or_insert(0) += 1;
        }
    }
    counts
}
