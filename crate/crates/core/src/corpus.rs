//! Corpus ingestion: normalization, tokenization, vocabularies and bucketing.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const GO_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<go>", "<eos>", "<unk>"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot decode input as {encoding}: invalid byte sequence at offset {offset}")]
    Decode { encoding: String, offset: usize },
    #[error("unknown encoding label `{0}`")]
    UnknownEncoding(String),
    #[error("invalid token `{0}`: tokens must be non-empty and free of whitespace and control characters")]
    InvalidToken(String),
    #[error("cannot build a vocabulary from empty input")]
    EmptyInput,
    #[error("vocabulary cap must be at least {NUM_SPECIALS}, got {0}")]
    CapTooSmall(usize),
    #[error("malformed vocabulary file: {0}")]
    VocabFormat(String),
    #[error("invalid bucket scheme: {0}")]
    InvalidBuckets(String),
    #[error("parallel corpus sides differ in length: {source_lines} source vs {target_lines} target lines")]
    Misaligned {
        source_lines: usize,
        target_lines: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// A tokenized sentence. Tokens are non-empty and contain no whitespace or
/// control characters.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Sentence {
    tokens: Vec<String>,
}

fn valid_token(t: &str) -> bool {
    !t.is_empty() && !t.chars().any(|c| c.is_whitespace() || c.is_control())
}

impl Sentence {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if let Some(bad) = tokens.iter().find(|t| !valid_token(t)) {
            return Err(CorpusError::InvalidToken(bad.clone()));
        }
        Ok(Self { tokens })
    }

    /// Splits already-tokenized text on whitespace.
    pub fn from_whitespace(line: &str) -> Self {
        Self {
            tokens: line
                .split_whitespace()
                .filter(|t| valid_token(t))
                .map(str::to_owned)
                .collect(),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }
}

impl TryFrom<Vec<String>> for Sentence {
    type Error = CorpusError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::new(tokens)
    }
}

impl From<Sentence> for Vec<String> {
    fn from(s: Sentence) -> Self {
        s.tokens
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Utf8,
    Utf16Le,
    Utf16Be,
    Latin1,
}

impl Encoding {
    pub fn from_label(label: &str) -> Result<Self> {
        let norm: String = label
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "utf8" => Ok(Self::Utf8),
            "utf16" | "utf16le" => Ok(Self::Utf16Le),
            "utf16be" => Ok(Self::Utf16Be),
            "latin1" | "iso88591" | "l1" => Ok(Self::Latin1),
            _ => Err(CorpusError::UnknownEncoding(label.to_owned())),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Utf8 => "utf-8",
            Self::Utf16Le => "utf-16le",
            Self::Utf16Be => "utf-16be",
            Self::Latin1 => "latin-1",
        }
    }
}

fn decode_with(raw: &[u8], enc: Encoding) -> Result<String> {
    let err = |offset| CorpusError::Decode {
        encoding: enc.name().to_owned(),
        offset,
    };
    match enc {
        Encoding::Utf8 => {
            let body = raw.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(raw);
            let skipped = raw.len() - body.len();
            std::str::from_utf8(body)
                .map(str::to_owned)
                .map_err(|e| err(skipped + e.valid_up_to()))
        }
        Encoding::Utf16Le | Encoding::Utf16Be => {
            let (bom, body) = match (enc, raw) {
                (Encoding::Utf16Le, [0xFF, 0xFE, rest @ ..]) => (2, rest),
                (Encoding::Utf16Be, [0xFE, 0xFF, rest @ ..]) => (2, rest),
                _ => (0, raw),
            };
            if body.len() % 2 != 0 {
                return Err(err(bom + body.len() - 1));
            }
            let units = body.chunks_exact(2).map(|b| match enc {
                Encoding::Utf16Le => u16::from_le_bytes([b[0], b[1]]),
                _ => u16::from_be_bytes([b[0], b[1]]),
            });
            let mut out = String::with_capacity(body.len() / 2);
            let mut offset = bom;
            for c in char::decode_utf16(units) {
                match c {
                    Ok(c) => {
                        out.push(c);
                        offset += c.len_utf16() * 2;
                    }
                    Err(_) => return Err(err(offset)),
                }
            }
            Ok(out)
        }
        Encoding::Latin1 => Ok(raw.iter().map(|&b| b as char).collect()),
    }
}

/// UTF-16 is recognized by a byte order mark or by zero bytes dominating one
/// byte parity (ASCII-range text).
fn sniff_utf16(raw: &[u8]) -> Option<Encoding> {
    match raw {
        [0xFF, 0xFE, ..] => return Some(Encoding::Utf16Le),
        [0xFE, 0xFF, ..] => return Some(Encoding::Utf16Be),
        _ => {}
    }
    if raw.len() >= 4 && raw.len().is_multiple_of(2) {
        let even_zeros = raw.iter().step_by(2).filter(|&&b| b == 0).count();
        let odd_zeros = raw.iter().skip(1).step_by(2).filter(|&&b| b == 0).count();
        let half = raw.len() / 2;
        if odd_zeros * 10 >= half * 3 && even_zeros * 10 < half {
            return Some(Encoding::Utf16Le);
        }
        if even_zeros * 10 >= half * 3 && odd_zeros * 10 < half {
            return Some(Encoding::Utf16Be);
        }
    }
    None
}

/// Decodes raw bytes: the declared label first, then UTF-8, then a
/// byte-frequency guess (UTF-16 by zero-byte parity, Latin-1 when no C1
/// control bytes occur). A declared label is binding.
pub fn decode_bytes(raw: &[u8], declared_encoding: Option<&str>) -> Result<String> {
    if let Some(label) = declared_encoding {
        return decode_with(raw, Encoding::from_label(label)?);
    }
    if let Some(enc) = sniff_utf16(raw) {
        if let Ok(s) = decode_with(raw, enc) {
            return Ok(s);
        }
    }
    let utf8_err = match decode_with(raw, Encoding::Utf8) {
        Ok(s) => return Ok(s),
        Err(e) => e,
    };
    if raw.iter().any(|&b| (0x80..0xA0).contains(&b)) {
        Err(utf8_err)
    } else {
        decode_with(raw, Encoding::Latin1)
    }
}

fn markup_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<[^<>]*>").unwrap())
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:[a-z][a-z0-9+.\-]*://|www\.)\S*").unwrap())
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{00A1}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}' | '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{0964}' | '\u{0965}' | '\u{3001}' | '\u{3002}'
        )
}

/// Tokenizes already-decoded text: drops markup tags, URLs and control
/// characters, then splits on whitespace with each punctuation character as
/// its own token.
pub fn tokenize(text: &str) -> Sentence {
    let no_tags = markup_re().replace_all(text, " ");
    let no_urls = url_re().replace_all(&no_tags, " ");
    let mut tokens = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, tokens: &mut Vec<String>| {
        if !current.is_empty() {
            tokens.push(std::mem::take(current));
        }
    };
    for c in no_urls.chars() {
        if c.is_whitespace() || c.is_control() {
            flush(&mut current, &mut tokens);
        } else if is_punctuation(c) {
            flush(&mut current, &mut tokens);
            tokens.push(c.to_string());
        } else if c == '\u{FEFF}' || c == '\u{200B}' {
            // zero-width characters carry nothing
        } else {
            current.push(c);
        }
    }
    flush(&mut current, &mut tokens);
    Sentence { tokens }
}

/// Decodes and tokenizes one raw line.
pub fn normalize_text(raw: &[u8], declared_encoding: Option<&str>) -> Result<Sentence> {
    Ok(tokenize(&decode_bytes(raw, declared_encoding)?))
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Bidirectional token/id map. Ids 0-3 are the reserved PAD, GO, EOS and UNK
/// tokens; the remaining ids are assigned in descending frequency order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    freq: Vec<u64>,
}

impl Vocabulary {
    fn from_ordered(entries: Vec<(String, u64)>) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut freq = vec![0; NUM_SPECIALS];
        for (t, f) in entries {
            tokens.push(t);
            freq.push(f);
        }
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, ids, freq }
    }

    /// Builds a vocabulary from token counts, keeping the `cap - 4` most
    /// frequent tokens (ties broken lexicographically).
    pub fn build<'a, I>(sentences: I, cap: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Sentence>,
    {
        if cap < NUM_SPECIALS {
            return Err(CorpusError::CapTooSmall(cap));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut any = false;
        for s in sentences {
            any = true;
            for t in &s.tokens {
                if !SPECIAL_TOKENS.contains(&t.as_str()) {
                    *counts.entry(t.as_str()).or_insert(0) += 1;
                }
            }
        }
        if !any {
            return Err(CorpusError::EmptyInput);
        }
        let mut entries: Vec<(&str, u64)> = counts.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        entries.truncate(cap - NUM_SPECIALS);
        Ok(Self::from_ordered(
            entries.into_iter().map(|(t, c)| (t.to_owned(), c)).collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Occurrence count of a regular token; 0 for the reserved tokens.
    pub fn freq(&self, id: u32) -> u64 {
        self.freq.get(id as usize).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `(token, count)` for the regular (non-reserved) entries in id order.
    pub fn regular_entries(&self) -> impl Iterator<Item = (&str, u64)> {
        self.tokens[NUM_SPECIALS..]
            .iter()
            .zip(&self.freq[NUM_SPECIALS..])
            .map(|(t, &f)| (t.as_str(), f))
    }

    pub fn encode(&self, s: &Sentence, append_eos: bool) -> Vec<u32> {
        let mut out: Vec<u32> = s
            .tokens
            .iter()
            .map(|t| self.id_of(t).unwrap_or(UNK_ID))
            .collect();
        if append_eos {
            out.push(EOS_ID);
        }
        out
    }

    /// Maps ids back to surface tokens, dropping PAD, GO and EOS.
    pub fn decode(&self, ids: &[u32]) -> Sentence {
        Sentence {
            tokens: ids
                .iter()
                .filter(|&&id| !matches!(id, PAD_ID | GO_ID | EOS_ID))
                .map(|&id| {
                    self.token_of(id)
                        .unwrap_or(SPECIAL_TOKENS[UNK_ID as usize])
                        .to_owned()
                })
                .collect(),
        }
    }

    /// SHA-256 over the newline-joined token list.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One token per line in id order, starting with the four reserved
    /// literals.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    /// Reads the line-per-token format. Frequencies are not stored in the
    /// file, so every regular token is given count 1; ids are already in
    /// frequency-rank order.
    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            lines.push(line.to_owned());
        }
        if lines.len() < NUM_SPECIALS {
            return Err(CorpusError::VocabFormat(format!(
                "expected at least {NUM_SPECIALS} lines, found {}",
                lines.len()
            )));
        }
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if lines[i] != *special {
                return Err(CorpusError::VocabFormat(format!(
                    "line {} must be `{special}`, found `{}`",
                    i + 1,
                    lines[i]
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        let mut entries = Vec::new();
        for (i, t) in lines.into_iter().enumerate().skip(NUM_SPECIALS) {
            if !valid_token(&t) || SPECIAL_TOKENS.contains(&t.as_str()) {
                return Err(CorpusError::VocabFormat(format!("line {}: invalid token `{t}`", i + 1)));
            }
            if !seen.insert(t.clone()) {
                return Err(CorpusError::VocabFormat(format!("line {}: duplicate token `{t}`", i + 1)));
            }
            entries.push((t, 1));
        }
        Ok(Self::from_ordered(entries))
    }
}

// ---------------------------------------------------------------------------
// Bucketing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketScheme {
    buckets: Vec<(usize, usize)>,
    morph_shift: usize,
}

impl Default for BucketScheme {
    fn default() -> Self {
        Self {
            buckets: vec![(5, 10), (10, 15), (15, 20), (20, 25), (30, 35), (50, 55)],
            morph_shift: 0,
        }
    }
}

/// Result of placing a pair into a bucket.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BucketAssignment {
    pub index: usize,
    pub source_len: usize,
    pub target_len: usize,
}

impl BucketScheme {
    pub fn new(buckets: Vec<(usize, usize)>, morph_shift: usize) -> Result<Self> {
        if buckets.is_empty() {
            return Err(CorpusError::InvalidBuckets("no buckets".into()));
        }
        if buckets.iter().any(|&(s, t)| s == 0 || t == 0) {
            return Err(CorpusError::InvalidBuckets("bucket sizes must be positive".into()));
        }
        for w in buckets.windows(2) {
            if !(w[0].0 < w[1].0 && w[0].1 < w[1].1) {
                return Err(CorpusError::InvalidBuckets(format!(
                    "buckets must strictly increase in both coordinates: {:?} then {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(Self {
            buckets,
            morph_shift,
        })
    }

    /// The same scheme with every target size raised by `shift` (for
    /// morph-level target corpora).
    pub fn with_morph_shift(mut self, shift: usize) -> Self {
        self.morph_shift = shift;
        self
    }

    pub fn morph_shift(&self) -> usize {
        self.morph_shift
    }

    /// Effective `(source_max, target_max)` sizes, shift applied.
    pub fn sizes(&self) -> Vec<(usize, usize)> {
        self.buckets
            .iter()
            .map(|&(s, t)| (s, t + self.morph_shift))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.buckets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    /// Smallest bucket that fits both lengths; `None` if the pair exceeds the
    /// last bucket. `tgt_len` includes the trailing EOS.
    pub fn assign(&self, src_len: usize, tgt_len: usize) -> Option<BucketAssignment> {
        self.sizes()
            .into_iter()
            .enumerate()
            .find(|&(_, (s, t))| s >= src_len && t >= tgt_len)
            .map(|(index, (s, t))| BucketAssignment {
                index,
                source_len: s,
                target_len: t,
            })
    }

    /// Pads a pair to its bucket: source at the front, target at the back.
    pub fn pad_pair(&self, src: &[u32], tgt: &[u32]) -> Option<(usize, Vec<u32>, Vec<u32>)> {
        let a = self.assign(src.len().max(1), tgt.len().max(1))?;
        let mut s = vec![PAD_ID; a.source_len - src.len()];
        s.extend_from_slice(src);
        let mut t = tgt.to_vec();
        t.resize(a.target_len, PAD_ID);
        Some((a.index, s, t))
    }
}

// ---------------------------------------------------------------------------
// Parallel corpora
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParallelCorpus {
    pairs: Vec<(Sentence, Sentence)>,
}

impl ParallelCorpus {
    /// Keeps only pairs where both sides are non-empty. Returns the corpus and
    /// the number of dropped pairs.
    pub fn from_pairs<I>(pairs: I) -> (Self, usize)
    where
        I: IntoIterator<Item = (Sentence, Sentence)>,
    {
        let mut dropped = 0;
        let pairs = pairs
            .into_iter()
            .filter(|(s, t)| {
                let keep = !s.is_empty() && !t.is_empty();
                if !keep {
                    dropped += 1;
                }
                keep
            })
            .collect();
        (Self { pairs }, dropped)
    }

    /// Reads two line-aligned, already-tokenized files.
    pub fn read<R1: BufRead, R2: BufRead>(source: R1, target: R2) -> Result<(Self, usize)> {
        let src: Vec<String> = source.lines().collect::<std::io::Result<_>>()?;
        let tgt: Vec<String> = target.lines().collect::<std::io::Result<_>>()?;
        if src.len() != tgt.len() {
            return Err(CorpusError::Misaligned {
                source_lines: src.len(),
                target_lines: tgt.len(),
            });
        }
        Ok(Self::from_pairs(
            src.iter()
                .zip(&tgt)
                .map(|(s, t)| (Sentence::from_whitespace(s), Sentence::from_whitespace(t))),
        ))
    }

    pub fn pairs(&self) -> &[(Sentence, Sentence)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|(s, _)| s)
    }

    pub fn targets(&self) -> impl Iterator<Item = &Sentence> {
        self.pairs.iter().map(|(_, t)| t)
    }
}

/// Ingest summary emitted as JSON.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub pairs_kept: usize,
    pub skipped_oversize: usize,
    pub skipped_empty: usize,
    pub source_unk_rate: f64,
    pub target_unk_rate: f64,
    pub morph_level_target: bool,
}

/// An encoded pair padded to its bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BucketedPair {
    pub bucket: usize,
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

/// Encodes and buckets a parallel corpus, recording what was dropped.
pub fn bucket_corpus(
    corpus: &ParallelCorpus,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    scheme: &BucketScheme,
) -> (Vec<BucketedPair>, IngestStats) {
    let mut stats = IngestStats {
        morph_level_target: scheme.morph_shift() > 0,
        ..Default::default()
    };
    let (mut src_tokens, mut src_unk, mut tgt_tokens, mut tgt_unk) = (0usize, 0usize, 0usize, 0usize);
    let mut out = Vec::new();
    for (s, t) in corpus.pairs() {
        let src = source_vocab.encode(s, false);
        let tgt = target_vocab.encode(t, true);
        match scheme.pad_pair(&src, &tgt) {
            Some((bucket, source, target)) => {
                src_tokens += src.len();
                src_unk += src.iter().filter(|&&i| i == UNK_ID).count();
                tgt_tokens += tgt.len() - 1;
                tgt_unk += tgt.iter().filter(|&&i| i == UNK_ID).count();
                out.push(BucketedPair {
                    bucket,
                    source,
                    target,
                });
            }
            None => stats.skipped_oversize += 1,
        }
    }
    stats.pairs_kept = out.len();
    let rate = |unk: usize, total: usize| if total == 0 { 0.0 } else { unk as f64 / total as f64 };
    stats.source_unk_rate = rate(src_unk, src_tokens);
    stats.target_unk_rate = rate(tgt_unk, tgt_tokens);
    (out, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sent(tokens: &[&str]) -> Sentence {
        Sentence::new(tokens.iter().map(|t| t.to_string()).collect()).unwrap()
    }

    fn toks(s: &Sentence) -> Vec<&str> {
        s.tokens().iter().map(String::as_str).collect()
    }

    #[test]
    fn strips_markup() {
        let s = normalize_text(b"Hello <b>world</b>.", None).unwrap();
        assert_eq!(toks(&s), ["Hello", "world", "."]);
    }

    #[test]
    fn strips_urls() {
        let s = normalize_text(b"visit http://x.io now", None).unwrap();
        assert_eq!(toks(&s), ["visit", "now"]);
        let s = normalize_text(b"see www.example.com/a?b=c today", None).unwrap();
        assert_eq!(toks(&s), ["see", "today"]);
    }

    #[test]
    fn clean_text_is_identity() {
        let s = normalize_text(b"a b c", None).unwrap();
        assert_eq!(toks(&s), ["a", "b", "c"]);
    }

    #[test]
    fn control_characters_split_tokens() {
        let s = normalize_text(b"a\x07b\tc\r\n", None).unwrap();
        assert_eq!(toks(&s), ["a", "b", "c"]);
    }

    #[test]
    fn tamil_text_survives() {
        let s = normalize_text("நான் வீட்டுக்கு போனேன்.".as_bytes(), None).unwrap();
        assert_eq!(toks(&s), ["நான்", "வீட்டுக்கு", "போனேன்", "."]);
    }

    #[test]
    fn declared_utf8_rejects_bad_bytes_with_offset() {
        let err = normalize_text(b"ab\xFFcd", Some("utf-8")).unwrap_err();
        match err {
            CorpusError::Decode { offset, .. } => assert_eq!(offset, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn undetectable_bytes_report_utf8_offset() {
        // 0x81 is a C1 control in Latin-1, so the heuristic refuses it.
        let err = normalize_text(b"abc\x81", None).unwrap_err();
        assert!(matches!(err, CorpusError::Decode { offset: 3, .. }));
    }

    #[test]
    fn detects_latin1_and_utf16() {
        let s = normalize_text(b"caf\xE9 ok", None).unwrap();
        assert_eq!(toks(&s), ["café", "ok"]);
        let utf16: Vec<u8> = "hi there".encode_utf16().flat_map(|u| u.to_le_bytes()).collect();
        let s = normalize_text(&utf16, None).unwrap();
        assert_eq!(toks(&s), ["hi", "there"]);
        let s = normalize_text(&utf16, Some("UTF-16LE")).unwrap();
        assert_eq!(toks(&s), ["hi", "there"]);
    }

    #[test]
    fn vocabulary_orders_by_frequency() {
        let v = Vocabulary::build(&[sent(&["a", "b", "a"])], 6).unwrap();
        assert_eq!(v.tokens(), ["<pad>", "<go>", "<eos>", "<unk>", "a", "b"]);
        assert_eq!(v.freq(4), 2);
        assert_eq!(v.freq(5), 1);
    }

    #[test]
    fn vocabulary_cap_excludes_rare_tokens() {
        let v = Vocabulary::build(&[sent(&["a", "b", "a"])], 5).unwrap();
        assert_eq!(v.id_of("b"), None);
        assert_eq!(v.encode(&sent(&["b"]), false), vec![UNK_ID]);
    }

    #[test]
    fn vocabulary_ties_break_lexicographically() {
        let v = Vocabulary::build(&[sent(&["y", "x", "y", "x"])], 6).unwrap();
        assert_eq!(v.id_of("x"), Some(4));
        assert_eq!(v.id_of("y"), Some(5));
    }

    #[test]
    fn vocabulary_errors() {
        assert!(matches!(Vocabulary::build(std::iter::empty::<&Sentence>(), 10), Err(CorpusError::EmptyInput)));
        assert!(matches!(
            Vocabulary::build(&[sent(&["a"])], 3),
            Err(CorpusError::CapTooSmall(3))
        ));
    }

    #[test]
    fn encode_examples() {
        let v = Vocabulary::build(&[sent(&["a", "b", "a"])], 6).unwrap();
        assert_eq!(v.encode(&sent(&["a", "b"]), true), vec![4, 5, EOS_ID]);
        assert_eq!(v.encode(&sent(&["a", "zzz"]), true), vec![4, UNK_ID, EOS_ID]);
        assert_eq!(v.encode(&Sentence::default(), true), vec![EOS_ID]);
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = Vocabulary::build(&[sent(&["b", "a", "a", "c"])], 10).unwrap();
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("<pad>\n<go>\n<eos>\n<unk>\na\n"));
        let back = Vocabulary::read_from(&buf[..]).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.content_hash(), v.content_hash());
    }

    #[test]
    fn vocabulary_file_rejects_missing_specials() {
        let err = Vocabulary::read_from(&b"a\nb\nc\nd\n"[..]).unwrap_err();
        assert!(matches!(err, CorpusError::VocabFormat(_)));
    }

    #[test]
    fn default_bucket_examples() {
        let scheme = BucketScheme::default();
        let a = scheme.assign(7, 9).unwrap();
        assert_eq!((a.index, a.source_len, a.target_len), (1, 10, 15));
        assert_eq!(scheme.assign(5, 10).unwrap().index, 0);
        assert!(scheme.assign(60, 10).is_none());
    }

    #[test]
    fn padding_sides() {
        let scheme = BucketScheme::default();
        let (b, s, t) = scheme.pad_pair(&[7, 8], &[9, EOS_ID]).unwrap();
        assert_eq!(b, 0);
        assert_eq!(s, vec![0, 0, 0, 7, 8]);
        assert_eq!(t.len(), 10);
        assert_eq!(&t[..2], &[9, EOS_ID]);
        assert!(t[2..].iter().all(|&x| x == PAD_ID));
    }

    #[test]
    fn morph_shift_raises_only_targets() {
        let base = BucketScheme::default();
        let shifted = base.clone().with_morph_shift(5);
        for (a, b) in base.sizes().iter().zip(shifted.sizes()) {
            assert_eq!(a.0, b.0);
            assert_eq!(a.1 + 5, b.1);
        }
    }

    #[test]
    fn bucket_scheme_validation() {
        assert!(BucketScheme::new(vec![(5, 10), (5, 15)], 0).is_err());
        assert!(BucketScheme::new(vec![], 0).is_err());
        assert!(BucketScheme::new(vec![(3, 4), (6, 8)], 2).is_ok());
    }

    #[test]
    fn ingest_stats_count_oversize_and_unk() {
        let corpus = ParallelCorpus::from_pairs(vec![
            (sent(&["a", "b"]), sent(&["x", "q"])),
            (sent(&["a"; 60]), sent(&["x"])),
        ])
        .0;
        let sv = Vocabulary::build(corpus.sources(), 100).unwrap();
        let tv = Vocabulary::build(&[sent(&["x"])], 100).unwrap();
        let (pairs, stats) = bucket_corpus(&corpus, &sv, &tv, &BucketScheme::default());
        assert_eq!(pairs.len(), 1);
        assert_eq!(stats.pairs_kept, 1);
        assert_eq!(stats.skipped_oversize, 1);
        assert_eq!(stats.source_unk_rate, 0.0);
        assert_eq!(stats.target_unk_rate, 0.5);
        let json = serde_json::to_value(&stats).unwrap();
        assert_eq!(json["skipped_oversize"], 1);
    }

    #[test]
    fn misaligned_files_are_rejected() {
        let err = ParallelCorpus::read(&b"a\nb\n"[..], &b"x\n"[..]).unwrap_err();
        assert!(matches!(err, CorpusError::Misaligned { .. }));
    }

    fn token_strategy() -> impl Strategy<Value = String> {
        prop::sample::select(vec!["a", "b", "c", "dd", "ee", "ஒன்று", "x1", "!"]).prop_map(String::from)
    }

    proptest! {
        #[test]
        fn decode_of_encode_restores_with_unk(
            train in prop::collection::vec(prop::collection::vec(token_strategy(), 1..6), 1..5),
            probe in prop::collection::vec(token_strategy(), 0..8),
            cap in 4usize..9,
        ) {
            let sents: Vec<Sentence> = train.into_iter().map(|t| Sentence::new(t).unwrap()).collect();
            let v = Vocabulary::build(&sents, cap).unwrap();
            let probe = Sentence::new(probe).unwrap();
            let back = v.decode(&v.encode(&probe, true));
            prop_assert_eq!(back.len(), probe.len());
            for (orig, got) in probe.tokens().iter().zip(back.tokens()) {
                if v.id_of(orig).is_some() {
                    prop_assert_eq!(orig, got);
                } else {
                    prop_assert_eq!(got.as_str(), "<unk>");
                }
            }
            let again = Vocabulary::build(&sents, cap).unwrap();
            prop_assert_eq!(v, again);
        }

        #[test]
        fn accepted_pairs_pad_to_bucket_sizes(src_len in 1usize..60, tgt_len in 1usize..60) {
            let scheme = BucketScheme::default();
            let src: Vec<u32> = (0..src_len as u32).map(|i| i + 4).collect();
            let tgt: Vec<u32> = (0..tgt_len as u32).map(|i| i + 4).collect();
            if let Some((b, s, t)) = scheme.pad_pair(&src, &tgt) {
                let (smax, tmax) = scheme.sizes()[b];
                prop_assert_eq!(s.len(), smax);
                prop_assert_eq!(t.len(), tmax);
                prop_assert_eq!(&s[smax - src_len..], &src[..]);
                prop_assert_eq!(&t[..tgt_len], &tgt[..]);
            } else {
                prop_assert!(src_len > 50 || tgt_len > 55);
            }
        }

        #[test]
        fn normalized_tokens_are_valid(text in "\\PC{0,40}") {
            let s = tokenize(&text);
            for t in s.tokens() {
                prop_assert!(valid_token(t));
            }
        }
    }
}
