//! One function per pipeline stage.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::json;

use morphnmt_core::corpus::{bucket_corpus, normalize_text, ParallelCorpus, Sentence, Vocabulary};
use morphnmt_core::embedding::{index_corpus, train_skipgram, SkipGramConfig, WordVectors};
use morphnmt_core::eval::{bleu, kappa_report, morph_and_word_bleu, read_judgments};
use morphnmt_core::export::{export_attention, AttentionExport, ExportFormat};
use morphnmt_core::morphseg::{read_annotations, train_morph_model, word_counts, MorphModel, MorphTrainConfig};
use morphnmt_core::nmt::{
    perplexity, train, translate, AttentionMatrix, Checkpoint, EpochLog, Example, ModelConfig, Seq2SeqModel,
};

use crate::artifact::{
    open, read_lines, require, require_set, write_atomic, write_json, write_sidecar, write_text_lines,
};
use crate::config::PipelineConfig;
use crate::Stage;

pub fn run(stage: Stage, cfg: &PipelineConfig) -> Result<()> {
    let meta = json!({
        "tool": "morphnmt",
        "version": env!("CARGO_PKG_VERSION"),
        "stage": stage.name(),
        "config": cfg.to_json(),
    });
    match stage {
        Stage::Clean => clean(cfg, &meta),
        Stage::Vocab => vocab(cfg, &meta),
        Stage::Embed => embed(cfg, &meta),
        Stage::Segment => segment(cfg, &meta),
        Stage::Train => train_model(cfg, &meta),
        Stage::Translate => translate_input(cfg, &meta),
        Stage::ScoreBleu => score_bleu(cfg, &meta),
        Stage::ScoreKappa => score_kappa(cfg, &meta),
        Stage::ExportAttention => export(cfg, &meta),
    }
}

fn with(meta: &serde_json::Value, key: &str, value: serde_json::Value) -> serde_json::Value {
    let mut m = meta.clone();
    m[key] = value;
    m
}

fn read_sentences(path: &Path) -> Result<Vec<Sentence>> {
    Ok(read_lines(path)?.iter().map(|l| Sentence::from_whitespace(l)).collect())
}

/// Splits raw bytes into lines (LF or CRLF) and normalizes each.
fn normalize_file(path: &Path, encoding: Option<&str>) -> Result<Vec<Sentence>> {
    let raw = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut body = raw.as_slice();
    if body.last() == Some(&b'\n') {
        body = &body[..body.len() - 1];
    }
    if body.is_empty() {
        return Ok(Vec::new());
    }
    body.split(|&b| b == b'\n')
        .enumerate()
        .map(|(i, line)| {
            let line = line.strip_suffix(b"\r").unwrap_or(line);
            normalize_text(line, encoding).with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

fn read_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::read_from(open(path)?).with_context(|| format!("parsing {}", path.display()))
}

fn clean(cfg: &PipelineConfig, meta: &serde_json::Value) -> Result<()> {
    let p = &cfg.paths;
    let src_path = require_set(p.raw_source.as_ref(), "raw source corpus", "paths.raw_source", "clean")?;
    let tgt_path = require_set(p.raw_target.as_ref(), "raw target corpus", "paths.raw_target", "clean")?;
    let enc = cfg.corpus.encoding.as_deref();
    let src = normalize_file(src_path, enc)?;
    let tgt = normalize_file(tgt_path, enc)?;
    if src.len() != tgt.len() {
        bail!(
            "{} has {} lines but {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        );
    }
    let read = src.len();
    let (corpus, skipped_empty) = ParallelCorpus::from_pairs(src.into_iter().zip(tgt));
    let stats = json!({"pairs_read": read, "pairs_kept": corpus.len(), "skipped_empty": skipped_empty});
    let meta = with(meta, "stats", stats);
    write_text_lines(&p.source, corpus.sources(), &meta)?;
    write_text_lines(&p.target, corpus.targets(), &meta)?;
    eprintln!("clean: kept {} of {read} pairs", corpus.len());
    Ok(())
}

fn training_target(cfg: &PipelineConfig) -> Result<&Path> {
    let p = &cfg.paths;
    if cfg.corpus.use_morphs {
        require(&p.segmented_target, "segmented target corpus", "paths.segmented_target", "segment")
    } else {
        require(&p.target, "cleaned target corpus", "paths.target", "clean")
    }
}

fn vocab(cfg: &PipelineConfig, meta: &serde_json::Value) -> Result<()> {
    let p = &cfg.paths;
    let src = read_sentences(require(&p.source, "cleaned source corpus", "paths.source", "clean")?)?;
    let tgt = read_sentences(training_target(cfg)?)?;
    for (sentences, cap, path, side) in [
        (&src, cfg.corpus.source_vocab_size, &p.source_vocab, "source"),
        (&tgt, cfg.corpus.target_vocab_size, &p.target_vocab, "target"),
    ] {
        let v = Vocabulary::build(sentences.iter(), cap).with_context(|| format!("{side} vocabulary"))?;
        write_atomic(path, |w| Ok(v.write_to(w)?))?;
        write_sidecar(path, &with(meta, "vocabulary", json!({"side": side, "size": v.len(), "hash": v.content_hash()})))?;
        eprintln!("vocab: {side} {} entries", v.len());
    }
    Ok(())
}

fn embed(cfg: &PipelineConfig, meta: &serde_json::Value) -> Result<()> {
    let p = &cfg.paths;
    let src = read_sentences(require(&p.source, "cleaned source corpus", "paths.source", "clean")?)?;
    let tgt = read_sentences(training_target(cfg)?)?;
    let e = &cfg.embedding;
    let sg = SkipGramConfig {
        dim: e.dim,
        window: e.window,
        epochs: e.epochs,
        step_size: e.step_size,
        batch_words: e.batch_words,
        seed: cfg.training.seed,
    };
    for (sentences, path, side) in [(&src, &p.source_embeddings, "source"), (&tgt, &p.target_embeddings, "target")] {
        let (freq, ids) = index_corpus(sentences.iter().map(|s| s.tokens()));
        let trained = train_skipgram(&freq, &ids, &sg).with_context(|| format!("{side} embeddings"))?;
        write_atomic(path, |w| Ok(trained.model.write_vectors(w)?))?;
        let info = json!({"side": side, "tokens": freq.len(), "objective_trace": trained.objective_trace});
        write_sidecar(path, &with(meta, "embedding", info))?;
        eprintln!(
            "embed: {side} {} vectors, final mean log-likelihood {:.4}",
            freq.len(),
            trained.objective_trace.last().copied().unwrap_or(0.0)
        );
    }
    Ok(())
}

fn segment(cfg: &PipelineConfig, meta: &serde_json::Value) -> Result<()> {
    let p = &cfg.paths;
    let s = &cfg.segmentation;
    let tgt = read_sentences(require(&p.target, "cleaned target corpus", "paths.target", "clean")?)?;
    let annotations = match &s.annotations {
        Some(path) => {
            let path = require(path, "annotation file", "segmentation.annotations", "segment")?;
            read_annotations(open(path)?).with_context(|| format!("parsing {}", path.display()))?
        }
        None => Vec::new(),
    };
    let mc = MorphTrainConfig {
        alpha: s.alpha,
        beta: s.beta,
        seed: cfg.training.seed,
        max_epochs: s.max_epochs,
        ..MorphTrainConfig::default()
    };
    let trained = train_morph_model(&word_counts(&tgt), &annotations, &mc)?;
    let mut model_json = trained.model.to_json();
    model_json["metadata"] = with(meta, "cost_trace", json!(trained.cost_trace));
    write_json(&p.morph_model, &model_json)?;
    let segmented = trained.model.segment_corpus(&tgt, s.marker);
    let words: usize = tgt.iter().map(Sentence::len).sum();
    let morphs: usize = segmented.iter().map(Sentence::len).sum();
    let stats = json!({
        "word_types": word_counts(&tgt).len(),
        "morph_types": trained.model.num_morphs(),
        "word_tokens": words,
        "morph_tokens": morphs,
    });
    write_text_lines(&p.segmented_target, &segmented, &with(meta, "stats", stats))?;
    eprintln!(
        "segment: {} word types -> {} morphs",
        word_counts(&tgt).len(),
        trained.model.num_morphs()
    );
    Ok(())
}

fn load_morph_model(cfg: &PipelineConfig) -> Result<MorphModel> {
    let path = require(&cfg.paths.morph_model, "morph model", "paths.morph_model", "segment")?;
    let value: serde_json::Value =
        serde_json::from_reader(open(path)?).with_context(|| format!("parsing {}", path.display()))?;
    Ok(MorphModel::from_json(value)?)
}

fn examples_of(
    corpus: &ParallelCorpus,
    sv: &Vocabulary,
    tv: &Vocabulary,
    cfg: &PipelineConfig,
) -> Result<(Vec<Example>, morphnmt_core::corpus::IngestStats)> {
    let (pairs, stats) = bucket_corpus(corpus, sv, tv, &cfg.corpus.bucket_scheme()?);
    Ok((pairs.into_iter().map(Example::from).collect(), stats))
}

fn train_model(cfg: &PipelineConfig, meta: &serde_json::Value) -> Result<()> {
    let p = &cfg.paths;
    let src_path = require(&p.source, "cleaned source corpus", "paths.source", "clean")?;
    let tgt_path = training_target(cfg)?;
    let sv = read_vocab(require(&p.source_vocab, "source vocabulary", "paths.source_vocab", "vocab")?)?;
    let tv = read_vocab(require(&p.target_vocab, "target vocabulary", "paths.target_vocab", "vocab")?)?;
    let (corpus, _) = ParallelCorpus::read(open(src_path)?, open(tgt_path)?)?;
    let (examples, ingest) = examples_of(&corpus, &sv, &tv, cfg)?;
    if examples.is_empty() {
        bail!("no training pair fits the bucket scheme");
    }
    write_json(&p.ingest_stats, &with(meta, "ingest", serde_json::to_value(&ingest)?))?;

    let dev = match (&p.dev_source, &p.dev_target) {
        (Some(ds), Some(dt)) => {
            let ds = require(ds, "dev source", "paths.dev_source", "clean")?;
            let dt = require(dt, "dev target", "paths.dev_target", "clean")?;
            let src = read_sentences(ds)?;
            let mut tgt = read_sentences(dt)?;
            if cfg.corpus.use_morphs {
                tgt = load_morph_model(cfg)?.segment_corpus(&tgt, cfg.segmentation.marker);
            }
            if src.len() != tgt.len() {
                bail!("dev source has {} lines but dev target has {}", src.len(), tgt.len());
            }
            let (dev_corpus, _) = ParallelCorpus::from_pairs(src.into_iter().zip(tgt));
            Some(examples_of(&dev_corpus, &sv, &tv, cfg)?.0)
        }
        (None, None) => None,
        _ => bail!("paths.dev_source and paths.dev_target must be set together"),
    };

    let m = &cfg.model;
    let mut mc = ModelConfig::new(sv.len(), tv.len(), m.embedding_dim, m.hidden, m.layers);
    mc.init_scale = m.init_scale;
    mc.forget_bias = m.forget_bias;
    mc.seed = cfg.training.seed;
    let mut model = Seq2SeqModel::new(mc)?;
    let mut loaded = BTreeMap::new();
    for (on, path, vocab, side, key) in [
        (cfg.embedding.init_source, &p.source_embeddings, &sv, "source", "paths.source_embeddings"),
        (cfg.embedding.init_target, &p.target_embeddings, &tv, "target", "paths.target_embeddings"),
    ] {
        if !on {
            continue;
        }
        let path = require(path, "embedding file", key, "embed")?;
        let vectors = WordVectors::read_from(open(path)?).with_context(|| format!("parsing {}", path.display()))?;
        if vectors.dim != m.embedding_dim {
            bail!(
                "{} holds {}-dimensional vectors but model.embedding_dim is {}",
                path.display(),
                vectors.dim,
                m.embedding_dim
            );
        }
        loaded.insert(side, model.load_embeddings(side, vocab, &vectors)?);
    }

    let tc = cfg.training.train_config();
    let mut log_lines = Vec::new();
    let report = train(&mut model, &examples, dev.as_deref(), &tc, |e: &EpochLog| {
        eprintln!(
            "train: epoch {} lr {} train_ppl {:.4}{}",
            e.epoch,
            e.lr,
            e.train_ppl,
            e.dev_ppl.map(|d| format!(" dev_ppl {d:.4}")).unwrap_or_default()
        );
        log_lines.push(serde_json::to_string(e).expect("epoch log serializes"));
    })?;
    write_atomic(&p.train_log, |w| {
        for l in &log_lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })?;
    write_sidecar(&p.train_log, meta)?;

    let summary = json!({
        "examples": examples.len(),
        "parameters": model.num_parameters(),
        "epochs_run": report.epochs.len(),
        "updates": report.state.step,
        "final_learning_rate": report.state.learning_rate,
        "final_train_ppl": perplexity(&model, &examples)?,
        "embeddings_loaded": loaded,
        "ingest": ingest,
    });
    let ckpt = Checkpoint::from_model(&model, &sv, &tv, with(meta, "training", summary));
    write_atomic(&p.checkpoint, |w| Ok(ckpt.write_to(w)?))?;
    eprintln!("train: wrote {}", p.checkpoint.display());
    Ok(())
}

fn translate_input(cfg: &PipelineConfig, meta: &serde_json::Value) -> Result<()> {
    let p = &cfg.paths;
    let input = require_set(p.input.as_ref(), "input text", "paths.input", "clean")?;
    let sv = read_vocab(require(&p.source_vocab, "source vocabulary", "paths.source_vocab", "vocab")?)?;
    let tv = read_vocab(require(&p.target_vocab, "target vocabulary", "paths.target_vocab", "vocab")?)?;
    let ckpt_path = require(&p.checkpoint, "checkpoint", "paths.checkpoint", "train")?;
    let ckpt = Checkpoint::read_from(open(ckpt_path)?)?;
    ckpt.check_vocabularies(&sv, &tv)?;
    let model = ckpt.to_model()?;

    let mut lines = Vec::new();
    let mut attention = Vec::new();
    for s in normalize_file(input, cfg.corpus.encoding.as_deref())? {
        if s.is_empty() {
            lines.push(String::new());
            attention.push(AttentionExport::new(&AttentionMatrix::new(0, 0, vec![])?, &[], &[])?);
            continue;
        }
        let ids = sv.encode(&s, false);
        let t = translate(&model, &ids, cfg.decode.max_len, cfg.decode.beam)?;
        let out = tv.decode(&t.tokens);
        let src_tokens: Vec<String> = sv.decode(&ids).into_tokens();
        attention.push(AttentionExport::new(&t.attention, &src_tokens, out.tokens())?);
        lines.push(out.to_string());
    }
    write_text_lines(&p.translations, &lines, meta)?;
    let doc = json!({"metadata": meta, "sentences": attention});
    write_json(&p.attention, &doc)?;
    eprintln!("translate: {} sentences -> {}", lines.len(), p.translations.display());
    Ok(())
}

fn score_bleu(cfg: &PipelineConfig, meta: &serde_json::Value) -> Result<()> {
    let p = &cfg.paths;
    let hyp = read_sentences(require(&p.translations, "translations", "paths.translations", "translate")?)?;
    let refs = read_sentences(require_set(p.references.as_ref(), "reference translations", "paths.references", "clean")?)?;
    let n = cfg.eval.max_n;
    let mut report = if cfg.eval.morph_level {
        // references are word-level text; split them the way the target side was
        if !cfg.segmentation.marker {
            bail!("morph-level scoring needs segmentation.marker = true to rejoin words");
        }
        let refs = load_morph_model(cfg)?.segment_corpus(&refs, true);
        let r = morph_and_word_bleu(&hyp, &refs, n)?;
        eprintln!("score-bleu: morph BLEU-{n} {:.4}, word BLEU-{n} {:.4}", r.morph.bleu_n(n), r.word.bleu_n(n));
        serde_json::to_value(r)?
    } else {
        let r = bleu(&hyp, &refs, n)?;
        eprintln!("score-bleu: BLEU-{n} {:.4}", r.bleu_n(n));
        serde_json::to_value(r)?
    };
    report["metadata"] = meta.clone();
    write_json(&p.bleu_report, &report)
}

fn score_kappa(cfg: &PipelineConfig, meta: &serde_json::Value) -> Result<()> {
    let p = &cfg.paths;
    let path = require_set(p.judgments.as_ref(), "judgment file", "paths.judgments", "score-kappa")?;
    let records = read_judgments(open(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let mut by_task: BTreeMap<String, Vec<_>> = BTreeMap::new();
    for r in records {
        by_task.entry(r.task.to_string()).or_default().push(r);
    }
    if by_task.is_empty() {
        bail!("{} holds no judgments", path.display());
    }
    let mut tasks = serde_json::Map::new();
    for (task, records) in &by_task {
        let k = kappa_report(records)?;
        eprintln!("score-kappa: {task} p_a {:.3} p_e {:.2} kappa {:.3}", k.p_a, k.p_e, k.kappa);
        let mut v = serde_json::to_value(k)?;
        v["items"] = json!(records.len());
        tasks.insert(task.clone(), v);
    }
    write_json(&p.kappa_report, &json!({"tasks": tasks, "metadata": meta}))
}

fn export(cfg: &PipelineConfig, meta: &serde_json::Value) -> Result<()> {
    let p = &cfg.paths;
    let path = require(&p.attention, "attention matrices", "paths.attention", "translate")?;
    let doc: serde_json::Value =
        serde_json::from_reader(open(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let sentences: Vec<AttentionExport> = serde_json::from_value(doc["sentences"].clone())
        .with_context(|| format!("{} has no valid `sentences` array", path.display()))?;
    let format: ExportFormat = cfg.export.format.parse()?;
    let ext = match format {
        ExportFormat::Json => "json",
        ExportFormat::Pgm => "pgm",
    };
    let selected: Vec<usize> = match cfg.export.sentence {
        Some(i) if i < sentences.len() => vec![i],
        Some(i) => bail!("export.sentence = {i} but {} holds {} sentences", path.display(), sentences.len()),
        None => (0..sentences.len()).collect(),
    };
    let mut files = Vec::new();
    for i in selected {
        let s = &sentences[i];
        if s.rows == 0 || s.cols == 0 {
            continue;
        }
        let matrix = s.matrix()?;
        let name = format!("sentence-{i:04}.{ext}");
        let sentence_meta = with(meta, "sentence", json!(i));
        write_atomic(&p.heatmaps.join(&name), |w| {
            Ok(export_attention(w, &matrix, &s.source_tokens, &s.target_tokens, format, sentence_meta)?)
        })?;
        files.push(json!({"file": name, "sentence": i, "rows": s.rows, "cols": s.cols}));
    }
    write_json(&p.heatmaps.join("index.json"), &json!({"files": files, "metadata": meta}))?;
    eprintln!("export-attention: {} heatmaps in {}", files.len(), p.heatmaps.display());
    Ok(())
}
