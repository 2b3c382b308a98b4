//! Plain-text exchange format for unit sequences.
//!
//! One frame per line, `n_codebooks` space-separated decimal codes.
//! `#`-prefixed metadata lines carry `codebook_sizes` and `frame_rate_hz`:
//!
//! ```text
//! # codebook_sizes: 8 8
//! # frame_rate_hz: 50
//! 3 5
//! 7 1
//! ```
//!
//! This is the ingestion path for units extracted by external codecs; a
//! directory of such files packs into one container.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::units::CodecUnitSequence;

/// Caller-supplied metadata for import. Fields left `None` must be present
/// as `#` metadata lines in the file; fields given here win over the file's
/// metadata lines.
#[derive(Debug, Clone, Default)]
pub struct ImportSchema {
    pub codebook_sizes: Option<Vec<u32>>,
    pub frame_rate_hz: Option<u32>,
}

/// Parses one utterance from text. `name` feeds error messages and is the
/// utterance id the caller should pack under.
pub fn import_sequence_text(
    text: &str,
    schema: &ImportSchema,
    name: &str,
) -> Result<CodecUnitSequence> {
    let mut file_sizes: Option<Vec<u32>> = None;
    let mut file_rate: Option<u32> = None;
    let mut rows: Vec<Vec<u32>> = Vec::new();
    let parse_err = |line: usize, detail: String| Error::Parse {
        file: name.to_string(),
        line,
        detail,
    };

    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(meta) = line.strip_prefix('#') {
            let meta = meta.trim();
            if let Some(v) = meta.strip_prefix("codebook_sizes:") {
                let sizes: std::result::Result<Vec<u32>, _> =
                    v.split_whitespace().map(|s| s.parse()).collect();
                file_sizes = Some(sizes.map_err(|e| {
                    parse_err(ln + 1, format!("bad codebook_sizes: {e}"))
                })?);
            } else if let Some(v) = meta.strip_prefix("frame_rate_hz:") {
                file_rate = Some(v.trim().parse().map_err(|e| {
                    parse_err(ln + 1, format!("bad frame_rate_hz: {e}"))
                })?);
            }
            // Other comments are ignored.
            continue;
        }
        let row: std::result::Result<Vec<u32>, _> =
            line.split_whitespace().map(|s| s.parse()).collect();
        rows.push(row.map_err(|e| parse_err(ln + 1, format!("bad code: {e}")))?);
    }

    let codebook_sizes = schema
        .codebook_sizes
        .clone()
        .or(file_sizes)
        .ok_or_else(|| parse_err(0, "codebook_sizes given neither in schema nor file".into()))?;
    let frame_rate_hz = schema
        .frame_rate_hz
        .or(file_rate)
        .ok_or_else(|| parse_err(0, "frame_rate_hz given neither in schema nor file".into()))?;

    if rows.is_empty() {
        return Err(parse_err(0, "no frames".into()));
    }
    let n_cb = codebook_sizes.len();
    for (t, row) in rows.iter().enumerate() {
        if row.len() != n_cb {
            return Err(Error::RaggedRow {
                utterance: name.to_string(),
                frame: t,
                expected: n_cb,
                got: row.len(),
            });
        }
    }
    let flat: Vec<u32> = rows.into_iter().flatten().collect();
    let t_len = flat.len() / n_cb;
    let codes = Array2::from_shape_vec((t_len, n_cb), flat)
        .expect("row-validated shape");
    CodecUnitSequence::new(codes, frame_rate_hz, codebook_sizes, name)
}

/// Imports one file (single utterance, id = file stem) or a directory of
/// files (sorted by name). Returns `(id, sequence)` pairs ready to pack.
pub fn import_external_units<P: AsRef<Path>>(
    path: P,
    schema: &ImportSchema,
) -> Result<Vec<(String, CodecUnitSequence)>> {
    let path = path.as_ref();
    let mut files: Vec<std::path::PathBuf> = if path.is_dir() {
        let mut v: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::EmptyDataset);
    }
    files.sort();
    files
        .into_iter()
        .map(|file| {
            let id = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "utt".to_string());
            let text = std::fs::read_to_string(&file)?;
            Ok((id.clone(), import_sequence_text(&text, schema, &id)?))
        })
        .collect()
}

/// Renders a sequence in the text exchange format, metadata lines included.
pub fn export_sequence(seq: &CodecUnitSequence) -> String {
    let sizes: Vec<String> = seq.codebook_sizes.iter().map(|k| k.to_string()).collect();
    let mut out = format!(
        "# codebook_sizes: {}\n# frame_rate_hz: {}\n",
        sizes.join(" "),
        seq.frame_rate_hz
    );
    for row in seq.codes.outer_iter() {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}
