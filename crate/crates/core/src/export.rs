//! Attention heatmaps as JSON or binary PGM (rows are target tokens, columns
//! source tokens, darker means more weight).

use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nmt::AttentionMatrix;

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("attention matrix is {rows}x{cols} but there are {targets} target and {sources} source tokens")]
    Dimensions {
        rows: usize,
        cols: usize,
        targets: usize,
        sources: usize,
    },
    #[error("unknown export format `{0}` (expected json or pgm)")]
    UnknownFormat(String),
    #[error("malformed attention file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ExportError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Pgm,
}

impl FromStr for ExportFormat {
    type Err = ExportError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "pgm" => Ok(Self::Pgm),
            other => Err(ExportError::UnknownFormat(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub source_tokens: Vec<String>,
    pub target_tokens: Vec<String>,
    pub rows: usize,
    pub cols: usize,
    /// row-major
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

impl AttentionExport {
    pub fn new(matrix: &AttentionMatrix, source_tokens: &[String], target_tokens: &[String]) -> Result<Self> {
        check_dims(matrix, source_tokens.len(), target_tokens.len())?;
        Ok(Self {
            source_tokens: source_tokens.to_vec(),
            target_tokens: target_tokens.to_vec(),
            rows: matrix.rows(),
            cols: matrix.cols(),
            weights: matrix.weights().to_vec(),
            metadata: serde_json::Value::Null,
        })
    }

    pub fn matrix(&self) -> Result<AttentionMatrix> {
        let m = AttentionMatrix::new(self.rows, self.cols, self.weights.clone())
            .map_err(|e| ExportError::Malformed(e.to_string()))?;
        check_dims(&m, self.source_tokens.len(), self.target_tokens.len())?;
        Ok(m)
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let e: Self = serde_json::from_reader(r)?;
        e.matrix()?;
        Ok(e)
    }
}

fn check_dims(m: &AttentionMatrix, sources: usize, targets: usize) -> Result<()> {
    if m.rows() != targets || m.cols() != sources {
        return Err(ExportError::Dimensions {
            rows: m.rows(),
            cols: m.cols(),
            targets,
            sources,
        });
    }
    Ok(())
}

/// Grey level `round(255·(1 − w))`, so weight 1 is black.
pub fn pixel(weight: f64) -> u8 {
    (255.0 * (1.0 - weight.clamp(0.0, 1.0))).round() as u8
}

/// Binary greyscale image: width = source length, height = target length.
pub fn write_pgm<W: Write>(mut w: W, matrix: &AttentionMatrix) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", matrix.cols(), matrix.rows())?;
    let bytes: Vec<u8> = matrix.weights().iter().map(|&x| pixel(x)).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Parses a binary PGM into `(width, height, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ExportError::Malformed("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(ExportError::Malformed("expected a P5 image with maxval 255".into()));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| ExportError::Malformed(e.to_string()));
    let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = bytes.get(pos + 1..).unwrap_or(&[]).to_vec();
    if data.len() != width * height {
        return Err(ExportError::Malformed(format!(
            "{width}x{height} image with {} pixel bytes",
            data.len()
        )));
    }
    Ok((width, height, data))
}

/// Writes `matrix` in the chosen format after checking it against the token
/// lists.
pub fn export_attention<W: Write>(
    w: W,
    matrix: &AttentionMatrix,
    source_tokens: &[String],
    target_tokens: &[String],
    format: ExportFormat,
    metadata: serde_json::Value,
) -> Result<()> {
    check_dims(matrix, source_tokens.len(), target_tokens.len())?;
    match format {
        ExportFormat::Json => {
            let mut e = AttentionExport::new(matrix, source_tokens, target_tokens)?;
            e.metadata = metadata;
            e.write_json(w)
        }
        ExportFormat::Pgm => write_pgm(w, matrix),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(n: usize, p: &str) -> Vec<String> {
        (0..n).map(|i| format!("{p}{i}")).collect()
    }

    fn pgm(m: &AttentionMatrix) -> (usize, usize, Vec<u8>) {
        let mut buf = Vec::new();
        export_attention(&mut buf, m, &toks(m.cols(), "s"), &toks(m.rows(), "t"), ExportFormat::Pgm, serde_json::Value::Null)
            .unwrap();
        read_pgm(&buf).unwrap()
    }

    #[test]
    fn full_weight_is_black() {
        let m = AttentionMatrix::new(1, 1, vec![1.0]).unwrap();
        assert_eq!(pgm(&m), (1, 1, vec![0]));
    }

    #[test]
    fn uniform_two_by_two_is_mid_grey() {
        let m = AttentionMatrix::new(2, 2, vec![0.5; 4]).unwrap();
        assert_eq!(pgm(&m), (2, 2, vec![128; 4]));
    }

    #[test]
    fn image_is_source_wide_and_target_tall() {
        let m = AttentionMatrix::new(3, 5, vec![0.2; 15]).unwrap();
        let (w, h, px) = pgm(&m);
        assert_eq!((w, h, px.len()), (5, 3, 15));
        assert_eq!(pixel(0.0), 255);
    }

    #[test]
    fn json_round_trip() {
        let weights = vec![0.1234567890123, 0.8765432109877, 1.0 / 3.0, 2.0 / 3.0];
        let m = AttentionMatrix::new(2, 2, weights).unwrap();
        let mut buf = Vec::new();
        export_attention(&mut buf, &m, &toks(2, "s"), &toks(2, "t"), ExportFormat::Json, serde_json::json!({"k": 1}))
            .unwrap();
        let back = AttentionExport::read_json(buf.as_slice()).unwrap();
        let m2 = back.matrix().unwrap();
        for (a, b) in m.weights().iter().zip(m2.weights()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(back.target_tokens, toks(2, "t"));
        assert_eq!(back.metadata["k"], 1);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = AttentionMatrix::new(2, 3, vec![0.0; 6]).unwrap();
        let mut buf = Vec::new();
        let err = export_attention(&mut buf, &m, &toks(2, "s"), &toks(3, "t"), ExportFormat::Pgm, serde_json::Value::Null);
        assert!(matches!(err, Err(ExportError::Dimensions { .. })));
        assert!(buf.is_empty());
        assert!("png".parse::<ExportFormat>().is_err());
    }
}
