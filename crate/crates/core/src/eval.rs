//! Corpus BLEU and agreement statistics for human judgments.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sentence;
use crate::morphseg::join_morphs;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty hypothesis set")]
    EmptyCorpus,
    #[error("{hypotheses} hypotheses but {references} references")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("n-gram order must be at least 1")]
    InvalidOrder,
    #[error("chance agreement {0} leaves kappa undefined")]
    UndefinedKappa(f64),
    #[error("agreement {0} outside [0, 1]")]
    InvalidAgreement(f64),
    #[error("judgments mix tasks {0} and {1}")]
    MixedTasks(Task, Task),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("label `{label}` is not valid for task {task}")]
    InvalidLabel { task: Task, label: String },
    #[error("judgment file: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus(hypotheses: &[Sentence], references: &[Sentence]) -> Result<()> {
    if hypotheses.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if hypotheses.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            hypotheses: hypotheses.len(),
            references: references.len(),
        });
    }
    Ok(())
}

/// Clipped n-gram matches and total hypothesis n-grams, both summed over the
/// corpus.
pub fn modified_precision(hypotheses: &[Sentence], references: &[Sentence], n: usize) -> Result<(u64, u64)> {
    if n == 0 {
        return Err(EvalError::InvalidOrder);
    }
    check_corpus(hypotheses, references)?;
    let (mut matches, mut total) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        let ref_counts = ngram_counts(r.tokens(), n);
        for (gram, count) in ngram_counts(h.tokens(), n) {
            matches += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            total += count;
        }
    }
    Ok((matches, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lengths {
    pub hypothesis: usize,
    pub reference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Modified precision for n = 1..=max_n.
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    /// Cumulative score for n = 1..=max_n.
    pub bleu: Vec<f64>,
    pub lengths: Lengths,
}

impl BleuReport {
    /// Cumulative score at order `n` (1-based).
    pub fn bleu_n(&self, n: usize) -> f64 {
        self.bleu[n - 1]
    }
}

/// Cumulative BLEU with brevity penalty. A zero precision at some order
/// zeroes the score at that order and above. An empty hypothesis corpus
/// scores 0 everywhere.
pub fn bleu(hypotheses: &[Sentence], references: &[Sentence], max_n: usize) -> Result<BleuReport> {
    if max_n == 0 {
        return Err(EvalError::InvalidOrder);
    }
    check_corpus(hypotheses, references)?;
    let hyp_len: usize = hypotheses.iter().map(Sentence::len).sum();
    let ref_len: usize = references.iter().map(Sentence::len).sum();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let mut precisions = Vec::with_capacity(max_n);
    let mut scores = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 1..=max_n {
        let (m, t) = modified_precision(hypotheses, references, n)?;
        let p = if t == 0 { 0.0 } else { m as f64 / t as f64 };
        precisions.push(p);
        zero |= p == 0.0;
        if zero {
            scores.push(0.0);
        } else {
            log_sum += p.ln();
            scores.push(brevity_penalty * (log_sum / n as f64).exp());
        }
    }
    Ok(BleuReport {
        precisions,
        brevity_penalty,
        bleu: scores,
        lengths: Lengths {
            hypothesis: hyp_len,
            reference: ref_len,
        },
    })
}

/// Scores for a morph-level corpus: once on the morph stream and once on
/// the words obtained by joining `@@`-marked morphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MorphBleu {
    pub morph: BleuReport,
    pub word: BleuReport,
}

pub fn morph_and_word_bleu(hypotheses: &[Sentence], references: &[Sentence], max_n: usize) -> Result<MorphBleu> {
    let morph = bleu(hypotheses, references, max_n)?;
    let join = |c: &[Sentence]| c.iter().map(join_morphs).collect::<Vec<_>>();
    let word = bleu(&join(hypotheses), &join(references), max_n)?;
    Ok(MorphBleu { morph, word })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Adequacy,
    Fluency,
    Ranking,
}

impl Task {
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Task::Adequacy | Task::Fluency => &["1", "2", "3", "4", "5"],
            Task::Ranking => &["first", "second", "tie"],
        }
    }

    /// Fixed chance agreement: 0.2 for the 5-point scales and 0.33 for the
    /// three-way ranking, the two-decimal constants used when reporting.
    pub fn chance_agreement(self) -> f64 {
        match self {
            Task::Adequacy | Task::Fluency => 0.2,
            Task::Ranking => 0.33,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Adequacy => "adequacy",
            Task::Fluency => "fluency",
            Task::Ranking => "ranking",
        })
    }
}

impl FromStr for Task {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adequacy" => Ok(Task::Adequacy),
            "fluency" => Ok(Task::Fluency),
            "ranking" => Ok(Task::Ranking),
            other => Err(EvalError::UnknownTask(other.to_owned())),
        }
    }
}

/// The same annotator's two ratings of one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentRecord {
    pub item: String,
    pub task: Task,
    pub rating1: String,
    pub rating2: String,
}

impl JudgmentRecord {
    pub fn new(item: &str, task: Task, rating1: &str, rating2: &str) -> Result<Self> {
        for r in [rating1, rating2] {
            if !task.labels().contains(&r) {
                return Err(EvalError::InvalidLabel {
                    task,
                    label: r.to_owned(),
                });
            }
        }
        Ok(Self {
            item: item.to_owned(),
            task,
            rating1: rating1.to_owned(),
            rating2: rating2.to_owned(),
        })
    }
}

#[derive(Deserialize)]
struct CsvRow {
    item: String,
    task: String,
    rating1: String,
    rating2: String,
}

/// Reads `item,task,rating1,rating2` CSV with a header row.
pub fn read_judgments<R: Read>(r: R) -> Result<Vec<JudgmentRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let mut out = Vec::new();
    for row in reader.deserialize() {
        let row: CsvRow = row?;
        let task: Task = row.task.parse()?;
        let norm = |s: &str| if task == Task::Ranking { s.to_ascii_lowercase() } else { s.to_owned() };
        out.push(JudgmentRecord::new(&row.item, task, &norm(&row.rating1), &norm(&row.rating2))?);
    }
    Ok(out)
}

/// Observed agreement and the task's fixed chance agreement.
pub fn agreement_rates(records: &[JudgmentRecord]) -> Result<(f64, f64)> {
    let first = records.first().ok_or(EvalError::EmptyCorpus)?;
    if let Some(r) = records.iter().find(|r| r.task != first.task) {
        return Err(EvalError::MixedTasks(first.task, r.task));
    }
    let agree = records.iter().filter(|r| r.rating1 == r.rating2).count();
    Ok((agree as f64 / records.len() as f64, first.task.chance_agreement()))
}

/// `(P(A) − P(E)) / (1 − P(E))`
pub fn kappa(p_a: f64, p_e: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_a) {
        return Err(EvalError::InvalidAgreement(p_a));
    }
    if !(0.0..1.0).contains(&p_e) {
        return Err(EvalError::UndefinedKappa(p_e));
    }
    Ok((p_a - p_e) / (1.0 - p_e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KappaReport {
    pub p_a: f64,
    pub p_e: f64,
    pub kappa: f64,
}

pub fn kappa_report(records: &[JudgmentRecord]) -> Result<KappaReport> {
    let (p_a, p_e) = agreement_rates(records)?;
    Ok(KappaReport {
        p_a,
        p_e,
        kappa: kappa(p_a, p_e)?,
    })
}
