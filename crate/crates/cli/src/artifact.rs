//! Reading prerequisites and writing artifacts atomically.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tempfile::NamedTempFile;

/// A stage input that does not exist yet. Maps to exit status 2.
#[derive(Debug, thiserror::Error)]
#[error("missing {what}: {} (run `morphnmt {producer}` first or set {key})", path.display())]
pub struct MissingArtifact {
    pub what: &'static str,
    pub key: &'static str,
    pub producer: &'static str,
    pub path: PathBuf,
}

/// Fails with [`MissingArtifact`] unless `path` is a file.
pub fn require<'a>(path: &'a Path, what: &'static str, key: &'static str, producer: &'static str) -> Result<&'a Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(MissingArtifact {
            what,
            key,
            producer,
            path: path.to_owned(),
        }
        .into())
    }
}

/// Like [`require`] for keys without a default.
pub fn require_set<'a>(
    path: Option<&'a PathBuf>,
    what: &'static str,
    key: &'static str,
    producer: &'static str,
) -> Result<&'a Path> {
    match path {
        Some(p) => require(p, what, key, producer),
        None => Err(MissingArtifact {
            what,
            key,
            producer,
            path: PathBuf::from("<unset>"),
        }
        .into()),
    }
}

pub fn open(path: &Path) -> Result<BufReader<fs::File>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufReader::new(f))
}

pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    open(path)?
        .lines()
        .collect::<std::io::Result<_>>()
        .with_context(|| format!("reading {}", path.display()))
}

/// Writes through a temporary file in the destination directory, renamed
/// into place only once `body` succeeds.
pub fn write_atomic<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut dyn Write) -> Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w).with_context(|| format!("writing {}", path.display()))?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

/// `<path>.meta.json` next to a text artifact.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

pub fn write_sidecar(path: &Path, metadata: &serde_json::Value) -> Result<()> {
    write_json(&sidecar_path(path), metadata)
}

pub fn write_text_lines<I, S>(path: &Path, lines: I, metadata: &serde_json::Value) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: std::fmt::Display,
{
    write_atomic(path, |w| {
        for l in lines {
            writeln!(w, "{l}")?;
        }
        Ok(())
    })?;
    write_sidecar(path, metadata)
}
