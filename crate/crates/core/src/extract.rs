//! Unit extraction stage: synthesize a labeled corpus, train the residual
//! quantizer on it, encode every utterance, and write the packed dataset
//! plus the labels sidecar and codec file.

use std::path::{Path, PathBuf};

use ndarray::Axis;

use crate::config::FlatConfig;
use crate::error::Result;
use crate::rvq::ToyCodec;
use crate::store::{pack_dataset, DatasetManifest};
use crate::synth::{synthesize_corpus, CorpusConfig, CorpusLabels};
use crate::units::CodecUnitSequence;

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractConfig {
    pub corpus: CorpusConfig,
    pub codec_stages: usize,
    pub codec_k: usize,
    pub rvq_iters: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            codec_stages: 4,
            codec_k: 32,
            rvq_iters: 50,
        }
    }
}

impl ExtractConfig {
    pub fn to_flat(&self) -> FlatConfig {
        let mut flat = FlatConfig::new();
        flat.set("n_utterances", self.corpus.n_utterances);
        flat.set("frames_min", self.corpus.frames_min);
        flat.set("frames_max", self.corpus.frames_max);
        flat.set("feature_dim", self.corpus.feature_dim);
        flat.set("phonemes", self.corpus.n_phonemes);
        flat.set("speakers", self.corpus.n_speakers);
        flat.set("noise_level", self.corpus.noise_level);
        flat.set("frame_rate_hz", self.corpus.frame_rate_hz);
        flat.set("codec_stages", self.codec_stages);
        flat.set("codec_k", self.codec_k);
        flat.set("rvq_iters", self.rvq_iters);
        flat
    }

    pub fn from_flat(flat: &FlatConfig) -> Result<Self> {
        const KNOWN: &[&str] = &[
            "n_utterances",
            "frames_min",
            "frames_max",
            "feature_dim",
            "phonemes",
            "speakers",
            "noise_level",
            "frame_rate_hz",
            "codec_stages",
            "codec_k",
            "rvq_iters",
        ];
        for key in flat.keys() {
            if !KNOWN.contains(&key) {
                return Err(crate::error::Error::InvalidConfig(format!(
                    "unknown extract config key {key:?}"
                )));
            }
        }
        let base = Self::default();
        Ok(Self {
            corpus: CorpusConfig {
                n_utterances: flat.parse_or("n_utterances", base.corpus.n_utterances)?,
                frames_min: flat.parse_or("frames_min", base.corpus.frames_min)?,
                frames_max: flat.parse_or("frames_max", base.corpus.frames_max)?,
                feature_dim: flat.parse_or("feature_dim", base.corpus.feature_dim)?,
                n_phonemes: flat.parse_or("phonemes", base.corpus.n_phonemes)?,
                n_speakers: flat.parse_or("speakers", base.corpus.n_speakers)?,
                noise_level: flat.parse_or("noise_level", base.corpus.noise_level)?,
                frame_rate_hz: flat.parse_or("frame_rate_hz", base.corpus.frame_rate_hz)?,
            },
            codec_stages: flat.parse_or("codec_stages", base.codec_stages)?,
            codec_k: flat.parse_or("codec_k", base.codec_k)?,
            rvq_iters: flat.parse_or("rvq_iters", base.rvq_iters)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExtractOutputs {
    pub dataset_path: PathBuf,
    pub labels_path: PathBuf,
    pub codec_path: PathBuf,
    pub manifest: DatasetManifest,
}

/// Runs the extraction stage into `out_dir`, producing `dataset.c2v`,
/// `labels.txt`, and `codec.c2c`. Deterministic given `seed`.
pub fn extract_corpus(config: &ExtractConfig, seed: u64, out_dir: &Path) -> Result<ExtractOutputs> {
    let corpus = synthesize_corpus(&config.corpus, seed)?;
    let views: Vec<_> = corpus.features.iter().map(|f| f.view()).collect();
    let all_frames = ndarray::concatenate(Axis(0), &views).expect("uniform feature dims");
    let codec = ToyCodec::train(
        all_frames.view(),
        config.codec_stages,
        config.codec_k,
        config.rvq_iters,
        seed,
    )?;

    let sequences: Vec<(String, CodecUnitSequence)> = corpus
        .utterance_ids
        .iter()
        .zip(&corpus.features)
        .map(|(id, feats)| {
            Ok((
                id.clone(),
                codec.encode(feats.view(), config.corpus.frame_rate_hz)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    std::fs::create_dir_all(out_dir)?;
    let dataset_path = out_dir.join("dataset.c2v");
    let labels_path = out_dir.join("labels.txt");
    let codec_path = out_dir.join("codec.c2c");
    let manifest = pack_dataset(&sequences, &dataset_path)?;
    CorpusLabels::from_corpus(&corpus).save(&labels_path)?;
    codec.save(&codec_path)?;
    Ok(ExtractOutputs {
        dataset_path,
        labels_path,
        codec_path,
        manifest,
    })
}
