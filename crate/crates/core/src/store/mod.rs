//! Packed on-disk container for codec-unit corpora.
//!
//! Single file, little-endian: magic `C2V1`, one version byte, a
//! length-prefixed UTF-8 manifest in the key-value form documented on
//! [`DatasetManifest`], then the payload. Codes are bit-packed at
//! `ceil(log2 K_i)` bits per code, codebook-major within a frame, frames in
//! order, and each utterance is padded to a byte boundary so utterances are
//! independently seekable. The container is immutable once written.

mod bitpack;
mod report;
mod text_io;

pub use bitpack::{BitReader, BitWriter};
pub use report::{storage_report, StorageReport};
pub use text_io::{export_sequence, import_external_units, ImportSchema};

use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::units::CodecUnitSequence;
use ndarray::Array2;

pub const MAGIC: &[u8; 4] = b"C2V1";
pub const FORMAT_VERSION: u8 = 1;

/// Corpus-level metadata embedded in the container header.
///
/// Text form, one entry per line:
///
/// ```text
/// format = c2v-dataset
/// n_codebooks = 12
/// frame_rate_hz = 50
/// codebook_sizes = 1024 1024 ...
/// payload_bytes = 1500
/// utterance <id> <frames>
/// ```
///
/// Utterance ids may not contain whitespace; payload order matches the
/// `utterance` line order.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub utterance_ids: Vec<String>,
    pub frame_counts: Vec<usize>,
    pub frame_rate_hz: u32,
    pub codebook_sizes: Vec<u32>,
    pub version: u8,
    pub payload_bytes: u64,
}

impl DatasetManifest {
    pub fn n_codebooks(&self) -> usize {
        self.codebook_sizes.len()
    }

    pub fn n_utterances(&self) -> usize {
        self.utterance_ids.len()
    }

    pub fn total_frames(&self) -> u64 {
        self.frame_counts.iter().map(|&t| t as u64).sum()
    }

    pub fn bits_per_frame(&self) -> u64 {
        CodecUnitSequence::bits_per_frame(&self.codebook_sizes)
    }

    /// Byte length of one utterance's packed codes (byte-aligned).
    pub fn utterance_bytes(&self, frames: usize) -> u64 {
        (frames as u64 * self.bits_per_frame() + 7) / 8
    }

    /// Byte offset of each utterance within the payload.
    pub fn payload_offsets(&self) -> Vec<u64> {
        let mut offsets = Vec::with_capacity(self.frame_counts.len());
        let mut off = 0u64;
        for &t in &self.frame_counts {
            offsets.push(off);
            off += self.utterance_bytes(t);
        }
        offsets
    }

    pub fn index_of(&self, utterance_id: &str) -> Result<usize> {
        self.utterance_ids
            .iter()
            .position(|id| id == utterance_id)
            .ok_or_else(|| Error::UnknownUtterance(utterance_id.to_string()))
    }

    fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("format = c2v-dataset\n");
        s.push_str(&format!("n_codebooks = {}\n", self.n_codebooks()));
        s.push_str(&format!("frame_rate_hz = {}\n", self.frame_rate_hz));
        let sizes: Vec<String> = self.codebook_sizes.iter().map(|k| k.to_string()).collect();
        s.push_str(&format!("codebook_sizes = {}\n", sizes.join(" ")));
        s.push_str(&format!("payload_bytes = {}\n", self.payload_bytes));
        for (id, t) in self.utterance_ids.iter().zip(&self.frame_counts) {
            s.push_str(&format!("utterance {id} {t}\n"));
        }
        s
    }

    fn from_text(text: &str, version: u8) -> Result<Self> {
        let mut frame_rate_hz = None;
        let mut codebook_sizes: Option<Vec<u32>> = None;
        let mut n_codebooks = None;
        let mut payload_bytes = None;
        let mut ids = Vec::new();
        let mut frames = Vec::new();
        let bad = |line: usize, detail: &str| Error::Parse {
            file: "<manifest>".into(),
            line,
            detail: detail.into(),
        };
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("utterance ") {
                let mut parts = rest.split_whitespace();
                let id = parts
                    .next()
                    .ok_or_else(|| bad(ln + 1, "missing utterance id"))?;
                let t: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(ln + 1, "missing/invalid frame count"))?;
                ids.push(id.to_string());
                frames.push(t);
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(ln + 1, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "format" => {
                    if value != "c2v-dataset" {
                        return Err(bad(ln + 1, &format!("unknown format {value:?}")));
                    }
                }
                "n_codebooks" => n_codebooks = value.parse::<usize>().ok(),
                "frame_rate_hz" => frame_rate_hz = value.parse::<u32>().ok(),
                "payload_bytes" => payload_bytes = value.parse::<u64>().ok(),
                "codebook_sizes" => {
                    let sizes: std::result::Result<Vec<u32>, _> =
                        value.split_whitespace().map(|v| v.parse()).collect();
                    codebook_sizes = sizes.ok();
                }
                _ => return Err(bad(ln + 1, &format!("unknown key {key:?}"))),
            }
        }
        let codebook_sizes =
            codebook_sizes.ok_or_else(|| bad(0, "missing codebook_sizes"))?;
        let manifest = Self {
            utterance_ids: ids,
            frame_counts: frames,
            frame_rate_hz: frame_rate_hz.ok_or_else(|| bad(0, "missing frame_rate_hz"))?,
            codebook_sizes,
            version,
            payload_bytes: payload_bytes.ok_or_else(|| bad(0, "missing payload_bytes"))?,
        };
        if let Some(n) = n_codebooks {
            if n != manifest.n_codebooks() {
                return Err(Error::BadHeader(format!(
                    "n_codebooks {n} disagrees with {} codebook sizes",
                    manifest.n_codebooks()
                )));
            }
        }
        let expected: u64 = manifest
            .frame_counts
            .iter()
            .map(|&t| manifest.utterance_bytes(t))
            .sum();
        if expected != manifest.payload_bytes {
            return Err(Error::BadHeader(format!(
                "payload_bytes {} disagrees with per-utterance sum {expected}",
                manifest.payload_bytes
            )));
        }
        Ok(manifest)
    }

    /// Serialized header: magic, version, length-prefixed manifest text.
    pub fn header_bytes(&self) -> Vec<u8> {
        let text = self.to_text();
        let mut out = Vec::with_capacity(9 + text.len());
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out
    }
}

/// Validates that every sequence agrees with the first on corpus metadata.
fn check_homogeneous(sequences: &[(String, CodecUnitSequence)]) -> Result<()> {
    let (_, first) = &sequences[0];
    for (id, seq) in sequences.iter().skip(1) {
        if seq.codebook_sizes != first.codebook_sizes {
            return Err(Error::HeterogeneousMetadata {
                utterance: id.clone(),
                detail: format!(
                    "codebook_sizes {:?} vs {:?}",
                    seq.codebook_sizes, first.codebook_sizes
                ),
            });
        }
        if seq.frame_rate_hz != first.frame_rate_hz {
            return Err(Error::HeterogeneousMetadata {
                utterance: id.clone(),
                detail: format!(
                    "frame_rate_hz {} vs {}",
                    seq.frame_rate_hz, first.frame_rate_hz
                ),
            });
        }
    }
    Ok(())
}

/// Packs a corpus into a container file and returns its manifest.
pub fn pack_dataset<P: AsRef<Path>>(
    sequences: &[(String, CodecUnitSequence)],
    out_path: P,
) -> Result<DatasetManifest> {
    if sequences.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (id, seq) in sequences {
        if id.is_empty() || id.chars().any(|c| c.is_whitespace()) {
            return Err(Error::InvalidConfig(format!(
                "utterance id {id:?} must be non-empty and whitespace-free"
            )));
        }
        seq.check_ranges(id)?;
    }
    check_homogeneous(sequences)?;

    let bits: Vec<u32> = sequences[0]
        .1
        .codebook_sizes
        .iter()
        .map(|&k| CodecUnitSequence::bits_for(k))
        .collect();
    let mut payload = Vec::new();
    for (_, seq) in sequences {
        let mut w = BitWriter::new();
        for row in seq.codes.outer_iter() {
            for (i, &code) in row.iter().enumerate() {
                w.push(code, bits[i]);
            }
        }
        payload.extend_from_slice(&w.finish());
    }

    let manifest = DatasetManifest {
        utterance_ids: sequences.iter().map(|(id, _)| id.clone()).collect(),
        frame_counts: sequences.iter().map(|(_, s)| s.frames()).collect(),
        frame_rate_hz: sequences[0].1.frame_rate_hz,
        codebook_sizes: sequences[0].1.codebook_sizes.clone(),
        version: FORMAT_VERSION,
        payload_bytes: payload.len() as u64,
    };

    let mut file = File::create(out_path)?;
    file.write_all(&manifest.header_bytes())?;
    file.write_all(&payload)?;
    file.flush()?;
    Ok(manifest)
}

fn decode_utterance(
    manifest: &DatasetManifest,
    bytes: &[u8],
    frames: usize,
) -> Result<CodecUnitSequence> {
    let n_cb = manifest.n_codebooks();
    let bits: Vec<u32> = manifest
        .codebook_sizes
        .iter()
        .map(|&k| CodecUnitSequence::bits_for(k))
        .collect();
    let mut reader = BitReader::new(bytes);
    let mut codes = Array2::<u32>::zeros((frames, n_cb));
    for t in 0..frames {
        for i in 0..n_cb {
            codes[[t, i]] = reader
                .read(bits[i])
                .ok_or_else(|| Error::BadHeader("payload truncated".into()))?;
        }
    }
    CodecUnitSequence::new(
        codes,
        manifest.frame_rate_hz,
        manifest.codebook_sizes.clone(),
        "<decoded>",
    )
}

/// Reads just the header; returns the manifest and the payload's byte offset
/// in the file.
pub fn read_manifest<P: AsRef<Path>>(path: P) -> Result<(DatasetManifest, u64)> {
    let mut file = File::open(path)?;
    read_manifest_from(&mut file)
}

fn read_manifest_from<R: Read>(reader: &mut R) -> Result<(DatasetManifest, u64)> {
    let mut magic = [0u8; 4];
    reader.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadHeader(format!(
            "bad magic {:?} (expected {:?})",
            magic, MAGIC
        )));
    }
    let mut version = [0u8; 1];
    reader.read_exact(&mut version)?;
    if version[0] != FORMAT_VERSION {
        return Err(Error::BadHeader(format!(
            "unsupported version {} (expected {FORMAT_VERSION})",
            version[0]
        )));
    }
    let mut len = [0u8; 4];
    reader.read_exact(&mut len)?;
    let text_len = u32::from_le_bytes(len) as usize;
    let mut text = vec![0u8; text_len];
    reader.read_exact(&mut text)?;
    let text = String::from_utf8(text)
        .map_err(|_| Error::BadHeader("manifest is not UTF-8".into()))?;
    let manifest = DatasetManifest::from_text(&text, version[0])?;
    Ok((manifest, (4 + 1 + 4 + text_len) as u64))
}

/// Reads a single utterance by seeking into the container file. Opens the
/// file on every call; the streaming path the loader benchmark compares
/// against in-RAM access.
pub fn read_utterance_streaming<P: AsRef<Path>>(
    path: P,
    manifest: &DatasetManifest,
    payload_offset: u64,
    utterance_id: &str,
) -> Result<CodecUnitSequence> {
    let idx = manifest.index_of(utterance_id)?;
    let frames = manifest.frame_counts[idx];
    let offset = manifest.payload_offsets()[idx];
    let nbytes = manifest.utterance_bytes(frames) as usize;
    let mut file = File::open(path)?;
    file.seek(SeekFrom::Start(payload_offset + offset))?;
    let mut buf = vec![0u8; nbytes];
    file.read_exact(&mut buf)?;
    decode_utterance(manifest, &buf, frames)
}

/// A container loaded fully into memory. Immutable; concurrent readers are
/// safe.
#[derive(Debug, Clone)]
pub struct PackedDataset {
    manifest: DatasetManifest,
    payload: Vec<u8>,
    offsets: Vec<u64>,
}

impl PackedDataset {
    /// Loads the whole container into RAM in one read.
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut cursor = std::io::Cursor::new(&bytes[..]);
        let (manifest, payload_offset) = read_manifest_from(&mut cursor)?;
        let payload = bytes[payload_offset as usize..].to_vec();
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(Error::BadHeader(format!(
                "payload is {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        let offsets = manifest.payload_offsets();
        Ok(Self {
            manifest,
            payload,
            offsets,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn unpack_index(&self, idx: usize) -> Result<CodecUnitSequence> {
        let frames = self.manifest.frame_counts[idx];
        let start = self.offsets[idx] as usize;
        let end = start + self.manifest.utterance_bytes(frames) as usize;
        decode_utterance(&self.manifest, &self.payload[start..end], frames)
    }

    /// Returns the exact codes written by `pack_dataset` for this utterance.
    pub fn unpack_sequence(&self, utterance_id: &str) -> Result<CodecUnitSequence> {
        self.unpack_index(self.manifest.index_of(utterance_id)?)
    }

    /// Decodes every utterance in manifest order.
    pub fn unpack_all(&self) -> Result<Vec<(String, CodecUnitSequence)>> {
        (0..self.manifest.n_utterances())
            .map(|i| {
                Ok((
                    self.manifest.utterance_ids[i].clone(),
                    self.unpack_index(i)?,
                ))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Purpose};
    use ndarray::array;
    use rand::Rng;

    fn seq(codes: Array2<u32>, sizes: Vec<u32>) -> CodecUnitSequence {
        CodecUnitSequence::new(codes, 50, sizes, "test").unwrap()
    }

    fn random_corpus(seed: u64, n_utts: usize, sizes: &[u32]) -> Vec<(String, CodecUnitSequence)> {
        let mut rng = stream_rng(seed, Purpose::CorpusUtterance, 0);
        (0..n_utts)
            .map(|u| {
                let t = rng.random_range(1..40);
                let codes = Array2::from_shape_fn((t, sizes.len()), |(_, i)| {
                    rng.random_range(0..sizes[i])
                });
                (format!("utt{u}"), seq(codes, sizes.to_vec()))
            })
            .collect()
    }

    #[test]
    fn roundtrip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.c2v");
        let corpus = random_corpus(11, 7, &[8, 1024, 3]);
        pack_dataset(&corpus, &path).unwrap();
        let ds = PackedDataset::load(&path).unwrap();
        for (id, original) in &corpus {
            let got = ds.unpack_sequence(id).unwrap();
            assert_eq!(got.codes, original.codes, "utterance {id}");
            assert_eq!(got.codebook_sizes, original.codebook_sizes);
            assert_eq!(got.frame_rate_hz, original.frame_rate_hz);
        }
    }

    #[test]
    fn payload_size_is_exact_arithmetic() {
        // 1 utterance, T=100, N_cb=12, all sizes 1024 -> 100*12*10 bits = 1500 bytes.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.c2v");
        let sizes = vec![1024u32; 12];
        let codes = Array2::<u32>::from_elem((100, 12), 1023);
        let manifest = pack_dataset(&[("u0".into(), seq(codes, sizes))], &path).unwrap();
        assert_eq!(manifest.payload_bytes, 1500);
        let file_len = std::fs::metadata(&path).unwrap().len();
        assert_eq!(
            file_len,
            manifest.header_bytes().len() as u64 + manifest.payload_bytes
        );
    }

    #[test]
    fn unknown_id_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.c2v");
        let corpus = random_corpus(3, 2, &[16]);
        pack_dataset(&corpus, &path).unwrap();
        let ds = PackedDataset::load(&path).unwrap();
        match ds.unpack_sequence("nope") {
            Err(Error::UnknownUtterance(id)) => assert_eq!(id, "nope"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn heterogeneous_metadata_names_offender() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.c2v");
        let a = seq(array![[1u32, 2]], vec![4, 4]);
        let b = CodecUnitSequence::new(array![[1u32, 2]], 50, vec![4, 8], "b").unwrap();
        match pack_dataset(&[("a".into(), a), ("b".into(), b)], &path) {
            Err(Error::HeterogeneousMetadata { utterance, .. }) => assert_eq!(utterance, "b"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.c2v");
        let corpus = random_corpus(5, 2, &[16]);
        pack_dataset(&corpus, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            PackedDataset::load(&path),
            Err(Error::BadHeader(_))
        ));
    }

    #[test]
    fn streaming_read_equals_in_ram() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.c2v");
        let corpus = random_corpus(21, 9, &[8, 8, 200]);
        pack_dataset(&corpus, &path).unwrap();
        let ds = PackedDataset::load(&path).unwrap();
        let (manifest, payload_offset) = read_manifest(&path).unwrap();
        for (id, _) in &corpus {
            let in_ram = ds.unpack_sequence(id).unwrap();
            let streamed =
                read_utterance_streaming(&path, &manifest, payload_offset, id).unwrap();
            assert_eq!(in_ram.codes, streamed.codes);
        }
    }

    #[test]
    fn smaller_codebooks_never_increase_size() {
        // Ratio monotonicity: fewer codebooks / smaller sizes, fixed T.
        let t = 37;
        let mk = |sizes: &[u32]| {
            let codes = Array2::<u32>::zeros((t, sizes.len()));
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.c2v");
            let m = pack_dataset(&[("u".into(), seq(codes, sizes.to_vec()))], &path).unwrap();
            m.payload_bytes
        };
        assert!(mk(&[512, 512]) <= mk(&[1024, 1024]));
        assert!(mk(&[1024]) <= mk(&[1024, 1024]));
        assert!(mk(&[2, 2, 2]) <= mk(&[4, 4, 4]));
    }
}
