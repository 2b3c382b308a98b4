//! Offline pseudo-labeling: fit k-means on encoder latents from a sampled
//! utterance subset, assign every frame of the dataset, and persist the
//! labels to a bit-packed target store keyed by utterance id.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Purpose};
use crate::store::{BitReader, BitWriter, PackedDataset};
use crate::units::CodecUnitSequence;

use super::kmeans::{assign_clusters, kmeans_fit};

pub const TARGETS_MAGIC: &[u8; 4] = b"C2T1";
pub const TARGETS_VERSION: u8 = 1;

/// Where a label file came from: enough to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetProvenance {
    pub strategy: String,
    pub checkpoint_hash: String,
    pub layer: usize,
    pub k: usize,
    pub seed: u64,
    pub sample_fraction: f64,
}

/// Per-utterance label runs plus provenance; one stream, vocabulary `vocab`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetStore {
    pub provenance: TargetProvenance,
    pub vocab: usize,
    pub labels: Vec<(String, Vec<u32>)>,
}

impl TargetStore {
    pub fn get(&self, utterance_id: &str) -> Result<&[u32]> {
        self.labels
            .iter()
            .find(|(id, _)| id == utterance_id)
            .map(|(_, l)| l.as_slice())
            .ok_or_else(|| Error::UnknownUtterance(utterance_id.to_string()))
    }

    fn bits_per_label(&self) -> u32 {
        crate::units::CodecUnitSequence::bits_for(self.vocab.max(1) as u32)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let bits = self.bits_per_label();
        let mut payload = Vec::new();
        for (_, labels) in &self.labels {
            let mut w = BitWriter::new();
            for &l in labels {
                w.push(l, bits);
            }
            payload.extend_from_slice(&w.finish());
        }
        let mut header = String::new();
        header.push_str("format = c2v-targets\n");
        header.push_str(&format!("strategy = {}\n", self.provenance.strategy));
        header.push_str(&format!(
            "checkpoint_hash = {}\n",
            self.provenance.checkpoint_hash
        ));
        header.push_str(&format!("layer = {}\n", self.provenance.layer));
        header.push_str(&format!("k = {}\n", self.provenance.k));
        header.push_str(&format!("seed = {}\n", self.provenance.seed));
        header.push_str(&format!(
            "sample_fraction = {}\n",
            self.provenance.sample_fraction
        ));
        header.push_str(&format!("vocab = {}\n", self.vocab));
        header.push_str(&format!("payload_bytes = {}\n", payload.len()));
        for (id, labels) in &self.labels {
            header.push_str(&format!("utterance {id} {}\n", labels.len()));
        }
        let mut f = File::create(path)?;
        f.write_all(TARGETS_MAGIC)?;
        f.write_all(&[TARGETS_VERSION])?;
        f.write_all(&(header.len() as u32).to_le_bytes())?;
        f.write_all(header.as_bytes())?;
        f.write_all(&payload)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut f = File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != TARGETS_MAGIC {
            return Err(Error::BadHeader("not a target store".into()));
        }
        let mut version = [0u8; 1];
        f.read_exact(&mut version)?;
        if version[0] != TARGETS_VERSION {
            return Err(Error::BadHeader(format!(
                "unsupported target store version {}",
                version[0]
            )));
        }
        let mut len = [0u8; 4];
        f.read_exact(&mut len)?;
        let mut text = vec![0u8; u32::from_le_bytes(len) as usize];
        f.read_exact(&mut text)?;
        let text = String::from_utf8(text)
            .map_err(|_| Error::BadHeader("header is not UTF-8".into()))?;

        let mut strategy = String::new();
        let mut checkpoint_hash = String::new();
        let mut layer = 0usize;
        let mut k = 0usize;
        let mut seed = 0u64;
        let mut sample_fraction = 0.0f64;
        let mut vocab = 0usize;
        let mut payload_bytes = None::<usize>;
        let mut runs: Vec<(String, usize)> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("utterance ") {
                let mut parts = rest.split_whitespace();
                let id = parts
                    .next()
                    .ok_or_else(|| Error::BadHeader("missing utterance id".into()))?;
                let frames: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::BadHeader("bad frame count".into()))?;
                runs.push((id.to_string(), frames));
                continue;
            }
            if let Some((key, value)) = line.split_once('=') {
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "format" => {
                        if value != "c2v-targets" {
                            return Err(Error::BadHeader(format!("unknown format {value:?}")));
                        }
                    }
                    "strategy" => strategy = value.to_string(),
                    "checkpoint_hash" => checkpoint_hash = value.to_string(),
                    "layer" => layer = value.parse().unwrap_or(0),
                    "k" => k = value.parse().unwrap_or(0),
                    "seed" => seed = value.parse().unwrap_or(0),
                    "sample_fraction" => sample_fraction = value.parse().unwrap_or(0.0),
                    "vocab" => vocab = value.parse().unwrap_or(0),
                    "payload_bytes" => payload_bytes = value.parse().ok(),
                    other => {
                        return Err(Error::BadHeader(format!("unknown key {other:?}")));
                    }
                }
            }
        }
        if vocab == 0 {
            return Err(Error::BadHeader("missing vocab".into()));
        }
        let mut payload = Vec::new();
        f.read_to_end(&mut payload)?;
        if let Some(expected) = payload_bytes {
            if payload.len() != expected {
                return Err(Error::BadHeader(format!(
                    "payload is {} bytes, header says {expected}",
                    payload.len()
                )));
            }
        }
        let bits = crate::units::CodecUnitSequence::bits_for(vocab as u32);
        let mut labels = Vec::with_capacity(runs.len());
        let mut offset = 0usize;
        for (id, frames) in runs {
            let nbytes = ((frames as u64 * bits as u64 + 7) / 8) as usize;
            let mut reader = BitReader::new(&payload[offset..offset + nbytes]);
            let mut run = Vec::with_capacity(frames);
            for _ in 0..frames {
                run.push(
                    reader
                        .read(bits)
                        .ok_or_else(|| Error::BadHeader("label payload truncated".into()))?,
                );
            }
            labels.push((id, run));
            offset += nbytes;
        }
        Ok(Self {
            provenance: TargetProvenance {
                strategy,
                checkpoint_hash,
                layer,
                k,
                seed,
                sample_fraction,
            },
            vocab,
            labels,
        })
    }
}

/// Latents of one utterance at `layer` under unmasked, full-codebook input.
fn utterance_latents(
    state: &EncoderState<f32>,
    units: &CodecUnitSequence,
    layer: usize,
) -> Result<Array2<f32>> {
    let z = state.embed_units(units, state.config.n_codebooks())?;
    let (outputs, _) = state.forward(&z)?;
    Ok(outputs.layer(layer).clone())
}

/// Fits k-means on latents of a sampled utterance subset, then labels every
/// frame of the dataset. Deterministic given `seed`; feature extraction is
/// parallel per utterance against the read-only state.
pub fn relabel_dataset(
    state: &EncoderState<f32>,
    checkpoint_hash: &str,
    dataset: &PackedDataset,
    layer: usize,
    k: usize,
    sample_fraction: f64,
    seed: u64,
) -> Result<TargetStore> {
    if layer > state.config.n_layers {
        return Err(Error::InvalidConfig(format!(
            "layer {layer} outside 0..={}",
            state.config.n_layers
        )));
    }
    if !(0.0..=1.0).contains(&sample_fraction) || sample_fraction == 0.0 {
        return Err(Error::InvalidConfig(format!(
            "sample_fraction {sample_fraction} outside (0, 1]"
        )));
    }
    let manifest = dataset.manifest();
    let n = manifest.n_utterances();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }

    let sequences: Vec<(String, CodecUnitSequence)> = dataset.unpack_all()?;
    let latents: Vec<Array2<f32>> = sequences
        .par_iter()
        .map(|(_, units)| utterance_latents(state, units, layer))
        .collect::<Result<Vec<_>>>()?;

    // Sampled utterance subset for the fit.
    let n_sample = ((n as f64 * sample_fraction).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, Purpose::RelabelSample, 0);
    use rand::Rng;
    for i in 0..n {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    let mut sample_rows = Vec::new();
    for &u in order[..n_sample].iter() {
        sample_rows.push(latents[u].view());
    }
    let fit_points = ndarray::concatenate(ndarray::Axis(0), &sample_rows)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    if fit_points.nrows() < k {
        return Err(Error::TooFewPoints {
            k,
            n: fit_points.nrows(),
        });
    }
    let model = kmeans_fit(fit_points.view(), k, 100, seed)?;

    let labels: Vec<(String, Vec<u32>)> = sequences
        .iter()
        .zip(&latents)
        .map(|((id, _), lat)| Ok((id.clone(), assign_clusters(&model, lat.view())?)))
        .collect::<Result<Vec<_>>>()?;

    Ok(TargetStore {
        provenance: TargetProvenance {
            strategy: "offline_kmeans".to_string(),
            checkpoint_hash: checkpoint_hash.to_string(),
            layer,
            k,
            seed,
            sample_fraction,
        },
        vocab: k,
        labels,
    })
}
