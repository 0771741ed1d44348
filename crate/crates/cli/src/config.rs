//! Pipeline configuration: an INI-style `key = value` file with sections,
//! layered as built-in defaults, then the file, then `--section.key value`
//! overrides, then `MORPHNMT_SEED`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use morphnmt_core::corpus::BucketScheme;
use morphnmt_core::nmt::{SoftmaxMode, TrainConfig};
use serde::Serialize;

pub const SEED_ENV: &str = "MORPHNMT_SEED";

/// Every recognised key with its default. An empty default means unset.
const DEFAULTS: &[(&str, &str, &str)] = &[
    ("paths", "raw_source", ""),
    ("paths", "raw_target", ""),
    ("paths", "source", "work/clean.src"),
    ("paths", "target", "work/clean.tgt"),
    ("paths", "segmented_target", "work/segmented.tgt"),
    ("paths", "source_vocab", "work/vocab.src"),
    ("paths", "target_vocab", "work/vocab.tgt"),
    ("paths", "source_embeddings", "work/embeddings.src.vec"),
    ("paths", "target_embeddings", "work/embeddings.tgt.vec"),
    ("paths", "morph_model", "work/morph.json"),
    ("paths", "checkpoint", "work/model.json"),
    ("paths", "train_log", "work/train.jsonl"),
    ("paths", "ingest_stats", "work/ingest.json"),
    ("paths", "dev_source", ""),
    ("paths", "dev_target", ""),
    ("paths", "input", ""),
    ("paths", "translations", "work/translations.txt"),
    ("paths", "attention", "work/attention.json"),
    ("paths", "heatmaps", "work/heatmaps"),
    ("paths", "references", ""),
    ("paths", "judgments", ""),
    ("paths", "bleu_report", "work/bleu.json"),
    ("paths", "kappa_report", "work/kappa.json"),
    ("corpus", "encoding", ""),
    ("corpus", "source_vocab_size", "60000"),
    ("corpus", "target_vocab_size", "150000"),
    ("corpus", "buckets", "5:10,10:15,15:20,20:25,30:35,50:55"),
    ("corpus", "morph_shift", "5"),
    ("corpus", "use_morphs", "false"),
    ("embedding", "dim", "100"),
    ("embedding", "window", "5"),
    ("embedding", "epochs", "5"),
    ("embedding", "step_size", "0.025"),
    ("embedding", "batch_words", "50"),
    ("embedding", "init_source", "false"),
    ("embedding", "init_target", "false"),
    ("segmentation", "alpha", "1.0"),
    ("segmentation", "beta", ""),
    ("segmentation", "annotations", ""),
    ("segmentation", "marker", "true"),
    ("segmentation", "max_epochs", "50"),
    ("model", "layers", "4"),
    ("model", "hidden", "500"),
    ("model", "embedding_dim", "100"),
    ("model", "init_scale", "0.08"),
    ("model", "forget_bias", "1.0"),
    ("training", "batch_size", "16"),
    ("training", "epochs", "10"),
    ("training", "learning_rate", "1.0"),
    ("training", "decay_factor", "0.5"),
    ("training", "decay_threshold", "0.01"),
    ("training", "decay_epochs", ""),
    ("training", "clip_norm", "5.0"),
    ("training", "softmax", "sampled"),
    ("training", "samples", "512"),
    ("training", "seed", "1"),
    ("training", "target_perplexity", ""),
    ("decode", "beam", "1"),
    ("decode", "max_len", "100"),
    ("export", "format", "pgm"),
    ("export", "sentence", ""),
    ("eval", "max_n", "4"),
    ("eval", "morph_level", ""),
];

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Serialize)]
pub struct Paths {
    pub raw_source: Option<PathBuf>,
    pub raw_target: Option<PathBuf>,
    pub source: PathBuf,
    pub target: PathBuf,
    pub segmented_target: PathBuf,
    pub source_vocab: PathBuf,
    pub target_vocab: PathBuf,
    pub source_embeddings: PathBuf,
    pub target_embeddings: PathBuf,
    pub morph_model: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub ingest_stats: PathBuf,
    pub dev_source: Option<PathBuf>,
    pub dev_target: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub translations: PathBuf,
    pub attention: PathBuf,
    pub heatmaps: PathBuf,
    pub references: Option<PathBuf>,
    pub judgments: Option<PathBuf>,
    pub bleu_report: PathBuf,
    pub kappa_report: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorpusSettings {
    pub encoding: Option<String>,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub buckets: Vec<(usize, usize)>,
    pub morph_shift: usize,
    pub use_morphs: bool,
}

impl CorpusSettings {
    /// The configured buckets, shifted on the target side when training on
    /// morphs.
    pub fn bucket_scheme(&self) -> Result<BucketScheme> {
        let shift = if self.use_morphs { self.morph_shift } else { 0 };
        BucketScheme::new(self.buckets.clone(), shift).map_err(|e| ConfigError(format!("corpus.buckets: {e}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EmbeddingSettings {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub batch_words: usize,
    pub init_source: bool,
    pub init_target: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentationSettings {
    pub alpha: f64,
    pub beta: Option<f64>,
    pub annotations: Option<PathBuf>,
    pub marker: bool,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelSettings {
    pub layers: usize,
    pub hidden: usize,
    pub embedding_dim: usize,
    pub init_scale: f64,
    pub forget_bias: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingSettings {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_threshold: f64,
    pub decay_epochs: Vec<usize>,
    pub clip_norm: f64,
    pub softmax: String,
    pub samples: usize,
    pub seed: u64,
    pub target_perplexity: Option<f64>,
}

impl TrainingSettings {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            decay_factor: self.decay_factor,
            decay_threshold: self.decay_threshold,
            decay_epochs: self.decay_epochs.clone(),
            clip_norm: self.clip_norm,
            softmax: if self.softmax == "full" {
                SoftmaxMode::Full
            } else {
                SoftmaxMode::Sampled(self.samples)
            },
            seed: self.seed,
            target_perplexity: self.target_perplexity,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DecodeSettings {
    pub beam: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportSettings {
    pub format: String,
    pub sentence: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSettings {
    pub max_n: usize,
    /// Defaults to `corpus.use_morphs`.
    pub morph_level: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub corpus: CorpusSettings,
    pub embedding: EmbeddingSettings,
    pub segmentation: SegmentationSettings,
    pub model: ModelSettings,
    pub training: TrainingSettings,
    pub decode: DecodeSettings,
    pub export: ExportSettings,
    pub eval: EvalSettings,
}

/// Raw layered values, `section -> key -> (value, base directory for paths)`.
#[derive(Debug, Clone)]
pub struct RawConfig {
    values: BTreeMap<(String, String), (String, PathBuf)>,
}

impl RawConfig {
    pub fn defaults(base: &Path) -> Self {
        let values = DEFAULTS
            .iter()
            .map(|&(s, k, v)| ((s.to_owned(), k.to_owned()), (v.to_owned(), base.to_owned())))
            .collect();
        Self { values }
    }

    fn set(&mut self, section: &str, key: &str, value: &str, base: &Path) -> Result<()> {
        match self.values.get_mut(&(section.to_owned(), key.to_owned())) {
            Some(slot) => {
                *slot = (value.trim().to_owned(), base.to_owned());
                Ok(())
            }
            None => Err(ConfigError(format!("unknown config key `{section}.{key}`"))),
        }
    }

    /// Merges a config file; relative paths in it resolve against the file's
    /// directory.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let ini = Ini::load_from_file(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, value) in props.iter() {
                if section.is_empty() {
                    return Err(ConfigError(format!("key `{key}` in {} is outside any section", path.display())));
                }
                self.set(section, key, value, &base)?;
            }
        }
        Ok(())
    }

    /// Applies `--section.key value` (or `--section.key=value`) pairs.
    /// Relative paths given here resolve against the working directory.
    pub fn merge_overrides(&mut self, args: &[String], cwd: &Path) -> Result<()> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let flag = arg
                .strip_prefix("--")
                .ok_or_else(|| ConfigError(format!("expected --section.key, got `{arg}`")))?;
            let (name, value) = match flag.split_once('=') {
                Some((n, v)) => (n, v.to_owned()),
                None => (
                    flag,
                    it.next()
                        .ok_or_else(|| ConfigError(format!("override `{arg}` has no value")))?
                        .clone(),
                ),
            };
            let (section, key) = name
                .split_once('.')
                .ok_or_else(|| ConfigError(format!("override `--{name}` must be --section.key")))?;
            self.set(section, key, &value, cwd)?;
        }
        Ok(())
    }

    pub fn merge_seed_env(&mut self, value: Option<String>) -> Result<()> {
        if let Some(v) = value {
            v.trim()
                .parse::<u64>()
                .map_err(|_| ConfigError(format!("{SEED_ENV} must be a non-negative integer, got `{v}`")))?;
            self.set("training", "seed", &v, Path::new(""))?;
        }
        Ok(())
    }

    fn raw(&self, section: &str, key: &str) -> &(String, PathBuf) {
        &self.values[&(section.to_owned(), key.to_owned())]
    }

    fn parse<T: FromStr>(&self, section: &str, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = &self.raw(section, key).0;
        v.parse()
            .map_err(|e| ConfigError(format!("{section}.{key} = `{v}`: {e}")))
    }

    fn optional<T: FromStr>(&self, section: &str, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.raw(section, key).0.is_empty() {
            Ok(None)
        } else {
            self.parse(section, key).map(Some)
        }
    }

    fn path(&self, section: &str, key: &str) -> Result<PathBuf> {
        self.optional_path(section, key)?
            .ok_or_else(|| ConfigError(format!("{section}.{key} must not be empty")))
    }

    fn optional_path(&self, section: &str, key: &str) -> Result<Option<PathBuf>> {
        let (v, base) = self.raw(section, key);
        Ok((!v.is_empty()).then(|| base.join(v)))
    }

    fn list<T: FromStr>(&self, section: &str, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let v = &self.raw(section, key).0;
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| ConfigError(format!("{section}.{key}: `{s}`: {e}")))
            })
            .collect()
    }

    pub fn resolve(&self) -> Result<PipelineConfig> {
        let p = |k: &str| self.path("paths", k);
        let op = |k: &str| self.optional_path("paths", k);
        let paths = Paths {
            raw_source: op("raw_source")?,
            raw_target: op("raw_target")?,
            source: p("source")?,
            target: p("target")?,
            segmented_target: p("segmented_target")?,
            source_vocab: p("source_vocab")?,
            target_vocab: p("target_vocab")?,
            source_embeddings: p("source_embeddings")?,
            target_embeddings: p("target_embeddings")?,
            morph_model: p("morph_model")?,
            checkpoint: p("checkpoint")?,
            train_log: p("train_log")?,
            ingest_stats: p("ingest_stats")?,
            dev_source: op("dev_source")?,
            dev_target: op("dev_target")?,
            input: op("input")?,
            translations: p("translations")?,
            attention: p("attention")?,
            heatmaps: p("heatmaps")?,
            references: op("references")?,
            judgments: op("judgments")?,
            bleu_report: p("bleu_report")?,
            kappa_report: p("kappa_report")?,
        };
        let buckets = self
            .list::<String>("corpus", "buckets")?
            .iter()
            .map(|b| {
                let (s, t) = b
                    .split_once(':')
                    .ok_or_else(|| ConfigError(format!("corpus.buckets: `{b}` is not source:target")))?;
                let n = |x: &str| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|e| ConfigError(format!("corpus.buckets: `{b}`: {e}")))
                };
                Ok((n(s)?, n(t)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let use_morphs = self.parse("corpus", "use_morphs")?;
        let cfg = PipelineConfig {
            paths,
            corpus: CorpusSettings {
                encoding: self.optional("corpus", "encoding")?,
                source_vocab_size: self.parse("corpus", "source_vocab_size")?,
                target_vocab_size: self.parse("corpus", "target_vocab_size")?,
                buckets,
                morph_shift: self.parse("corpus", "morph_shift")?,
                use_morphs,
            },
            embedding: EmbeddingSettings {
                dim: self.parse("embedding", "dim")?,
                window: self.parse("embedding", "window")?,
                epochs: self.parse("embedding", "epochs")?,
                step_size: self.parse("embedding", "step_size")?,
                batch_words: self.parse("embedding", "batch_words")?,
                init_source: self.parse("embedding", "init_source")?,
                init_target: self.parse("embedding", "init_target")?,
            },
            segmentation: SegmentationSettings {
                alpha: self.parse("segmentation", "alpha")?,
                beta: self.optional("segmentation", "beta")?,
                annotations: self.optional_path("segmentation", "annotations")?,
                marker: self.parse("segmentation", "marker")?,
                max_epochs: self.parse("segmentation", "max_epochs")?,
            },
            model: ModelSettings {
                layers: self.parse("model", "layers")?,
                hidden: self.parse("model", "hidden")?,
                embedding_dim: self.parse("model", "embedding_dim")?,
                init_scale: self.parse("model", "init_scale")?,
                forget_bias: self.parse("model", "forget_bias")?,
            },
            training: TrainingSettings {
                batch_size: self.parse("training", "batch_size")?,
                epochs: self.parse("training", "epochs")?,
                learning_rate: self.parse("training", "learning_rate")?,
                decay_factor: self.parse("training", "decay_factor")?,
                decay_threshold: self.parse("training", "decay_threshold")?,
                decay_epochs: self.list("training", "decay_epochs")?,
                clip_norm: self.parse("training", "clip_norm")?,
                softmax: self.parse::<String>("training", "softmax")?.to_ascii_lowercase(),
                samples: self.parse("training", "samples")?,
                seed: self.parse("training", "seed")?,
                target_perplexity: self.optional("training", "target_perplexity")?,
            },
            decode: DecodeSettings {
                beam: self.parse("decode", "beam")?,
                max_len: self.parse("decode", "max_len")?,
            },
            export: ExportSettings {
                format: self.parse::<String>("export", "format")?.to_ascii_lowercase(),
                sentence: self.optional("export", "sentence")?,
            },
            eval: EvalSettings {
                max_n: self.parse("eval", "max_n")?,
                morph_level: self.optional("eval", "morph_level")?.unwrap_or(use_morphs),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl PipelineConfig {
    /// Defaults, then `file`, then overrides, then the seed variable. Default
    /// paths sit next to the config file.
    pub fn load(file: Option<&Path>, overrides: &[String], seed_env: Option<String>) -> Result<Self> {
        let cwd = std::env::current_dir().map_err(|e| ConfigError(e.to_string()))?;
        let base = match file.and_then(Path::parent) {
            Some(dir) => cwd.join(dir),
            None => cwd.clone(),
        };
        let mut raw = RawConfig::defaults(&base);
        if let Some(f) = file {
            raw.merge_file(f)?;
        }
        raw.merge_overrides(overrides, &cwd)?;
        raw.merge_seed_env(seed_env)?;
        raw.resolve()
    }

    fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ConfigError(msg));
        let c = &self.corpus;
        if c.source_vocab_size < 5 || c.target_vocab_size < 5 {
            return fail("corpus vocabulary sizes must be at least 5".into());
        }
        c.bucket_scheme()?;
        let e = &self.embedding;
        if e.dim == 0 || e.window == 0 || e.batch_words == 0 || !(e.step_size > 0.0) {
            return fail("embedding dim, window and batch_words must be ≥ 1 and step_size > 0".into());
        }
        let s = &self.segmentation;
        if !(s.alpha > 0.0) || s.beta.is_some_and(|b| !(b >= 0.0)) {
            return fail("segmentation.alpha must be > 0 and segmentation.beta ≥ 0".into());
        }
        let m = &self.model;
        if m.layers == 0 || m.hidden == 0 || m.embedding_dim == 0 || !(m.init_scale > 0.0) {
            return fail("model layers, hidden, embedding_dim and init_scale must be positive".into());
        }
        let t = &self.training;
        if t.batch_size == 0 || t.epochs == 0 {
            return fail("training.batch_size and training.epochs must be ≥ 1".into());
        }
        if !(t.learning_rate > 0.0) || !(t.clip_norm > 0.0) {
            return fail("training.learning_rate and training.clip_norm must be > 0".into());
        }
        if !(t.decay_factor > 0.0 && t.decay_factor <= 1.0) || !(t.decay_threshold >= 0.0) {
            return fail("training.decay_factor must lie in (0, 1] and decay_threshold ≥ 0".into());
        }
        match t.softmax.as_str() {
            "full" => {}
            "sampled" if t.samples >= 1 => {}
            "sampled" => return fail("training.samples must be ≥ 1".into()),
            other => return fail(format!("training.softmax must be full or sampled, got `{other}`")),
        }
        if t.target_perplexity.is_some_and(|p| !(p >= 1.0)) {
            return fail("training.target_perplexity must be ≥ 1".into());
        }
        if self.decode.beam == 0 || self.decode.max_len == 0 {
            return fail("decode.beam and decode.max_len must be ≥ 1".into());
        }
        if !matches!(self.export.format.as_str(), "json" | "pgm") {
            return fail(format!("export.format must be json or pgm, got `{}`", self.export.format));
        }
        if !(1..=9).contains(&self.eval.max_n) {
            return fail("eval.max_n must lie in 1..=9".into());
        }
        Ok(())
    }

    /// The effective configuration as echoed into artifact metadata.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw() -> RawConfig {
        RawConfig::defaults(Path::new("/base"))
    }

    #[test]
    fn defaults_resolve() {
        let cfg = raw().resolve().unwrap();
        assert_eq!(cfg.training.learning_rate, 1.0);
        assert_eq!(cfg.training.train_config().softmax, SoftmaxMode::Sampled(512));
        assert_eq!(cfg.corpus.buckets.len(), 6);
        assert_eq!(cfg.paths.checkpoint, Path::new("/base/work/model.json"));
        assert!(cfg.paths.input.is_none());
    }

    #[test]
    fn overrides_win_and_unknown_keys_fail() {
        let mut r = raw();
        let args: Vec<String> = ["--training.epochs", "3", "--model.hidden=7", "--paths.checkpoint", "m.json"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        r.merge_overrides(&args, Path::new("/cwd")).unwrap();
        let cfg = r.resolve().unwrap();
        assert_eq!((cfg.training.epochs, cfg.model.hidden), (3, 7));
        assert_eq!(cfg.paths.checkpoint, Path::new("/cwd/m.json"));
        assert!(raw().merge_overrides(&["--training.nope".into(), "1".into()], Path::new("/")).is_err());
        assert!(raw().merge_overrides(&["--training.epochs".into()], Path::new("/")).is_err());
    }

    #[test]
    fn seed_variable_overrides_everything() {
        let mut r = raw();
        r.merge_overrides(&["--training.seed".into(), "5".into()], Path::new("/")).unwrap();
        r.merge_seed_env(Some("42".into())).unwrap();
        assert_eq!(r.resolve().unwrap().training.seed, 42);
        assert!(raw().merge_seed_env(Some("-1".into())).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        for (k, v) in [
            ("training.decay_factor", "1.5"),
            ("training.softmax", "hierarchical"),
            ("corpus.buckets", "5:10,4:20"),
            ("model.layers", "0"),
            ("training.epochs", "ten"),
        ] {
            let mut r = raw();
            r.merge_overrides(&[format!("--{k}"), v.into()], Path::new("/")).unwrap();
            assert!(r.resolve().is_err(), "{k} = {v}");
        }
    }

    #[test]
    fn morph_flag_switches_target_and_shift() {
        let mut r = raw();
        r.merge_overrides(&["--corpus.use_morphs".into(), "true".into()], Path::new("/b")).unwrap();
        let cfg = r.resolve().unwrap();
        assert_eq!(cfg.paths.segmented_target, Path::new("/base/work/segmented.tgt"));
        assert_eq!(cfg.corpus.bucket_scheme().unwrap().sizes()[0], (5, 15));
        assert!(cfg.eval.morph_level);
    }
}
