//! Synthetic labeled corpus: a stand-in for real speech so the whole
//! pipeline and its probes run self-contained.
//!
//! Each frame feature is `phoneme prototype + speaker offset + noise`, with
//! phoneme segments of random 4-20 frame duration. Labels (per-frame phoneme,
//! per-utterance speaker) feed the probe tasks.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Purpose};

/// Offsets separate speakers less than prototypes separate phonemes, so the
/// frame task stays the dominant structure.
const SPEAKER_OFFSET_SCALE: f64 = 0.5;

const SEGMENT_FRAMES_MIN: usize = 4;
const SEGMENT_FRAMES_MAX: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_utterances: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub feature_dim: usize,
    pub n_phonemes: usize,
    pub n_speakers: usize,
    pub noise_level: f64,
    pub frame_rate_hz: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_utterances: 64,
            frames_min: 80,
            frames_max: 120,
            feature_dim: 12,
            n_phonemes: 10,
            n_speakers: 4,
            noise_level: 0.5,
            frame_rate_hz: 50,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_phonemes < 2 {
            return Err(Error::InvalidConfig("need at least 2 phonemes".into()));
        }
        if self.n_speakers < 1 {
            return Err(Error::InvalidConfig("need at least 1 speaker".into()));
        }
        if self.feature_dim < 4 {
            return Err(Error::InvalidConfig("feature_dim must be at least 4".into()));
        }
        if self.n_utterances == 0 {
            return Err(Error::InvalidConfig("need at least 1 utterance".into()));
        }
        if self.frames_min < 1 || self.frames_max < self.frames_min {
            return Err(Error::InvalidConfig(
                "frame range must satisfy 1 <= min <= max".into(),
            ));
        }
        if self.noise_level < 0.0 {
            return Err(Error::InvalidConfig("noise_level must be >= 0".into()));
        }
        if self.frame_rate_hz == 0 {
            return Err(Error::InvalidConfig("frame_rate_hz must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub utterance_ids: Vec<String>,
    /// Per-utterance T x D frame features.
    pub features: Vec<Array2<f32>>,
    /// Per-utterance, per-frame phoneme ids in `[0, n_phonemes)`.
    pub phoneme_labels: Vec<Vec<u32>>,
    /// Per-utterance speaker ids in `[0, n_speakers)`.
    pub speaker_labels: Vec<u32>,
    pub config: CorpusConfig,
    pub seed: u64,
}

pub fn synthesize_corpus(config: &CorpusConfig, seed: u64) -> Result<SyntheticCorpus> {
    config.validate()?;
    let d = config.feature_dim;

    let mut proto_rng = stream_rng(seed, Purpose::CorpusPrototypes, 0);
    let phoneme_protos = Array2::<f64>::from_shape_fn((config.n_phonemes, d), |_| {
        StandardNormal.sample(&mut proto_rng)
    });
    let speaker_offsets = Array2::<f64>::from_shape_fn((config.n_speakers, d), |_| {
        let g: f64 = StandardNormal.sample(&mut proto_rng);
        g * SPEAKER_OFFSET_SCALE
    });

    let mut utterance_ids = Vec::with_capacity(config.n_utterances);
    let mut features = Vec::with_capacity(config.n_utterances);
    let mut phoneme_labels = Vec::with_capacity(config.n_utterances);
    let mut speaker_labels = Vec::with_capacity(config.n_utterances);

    for u in 0..config.n_utterances {
        let mut rng = stream_rng(seed, Purpose::CorpusUtterance, u as u64);
        let speaker = rng.random_range(0..config.n_speakers) as u32;
        let t_len = rng.random_range(config.frames_min..=config.frames_max);

        let mut phonemes = Vec::with_capacity(t_len);
        while phonemes.len() < t_len {
            let ph = rng.random_range(0..config.n_phonemes) as u32;
            let dur = rng.random_range(SEGMENT_FRAMES_MIN..=SEGMENT_FRAMES_MAX);
            for _ in 0..dur.min(t_len - phonemes.len()) {
                phonemes.push(ph);
            }
        }

        let mut feats = Array2::<f32>::zeros((t_len, d));
        for (t, &ph) in phonemes.iter().enumerate() {
            for j in 0..d {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let v = phoneme_protos[[ph as usize, j]]
                    + speaker_offsets[[speaker as usize, j]]
                    + config.noise_level * noise;
                feats[[t, j]] = v as f32;
            }
        }

        utterance_ids.push(format!("utt{u:05}"));
        features.push(feats);
        phoneme_labels.push(phonemes);
        speaker_labels.push(speaker);
    }

    Ok(SyntheticCorpus {
        utterance_ids,
        features,
        phoneme_labels,
        speaker_labels,
        config: config.clone(),
        seed,
    })
}

/// Probe-task labels loaded from (or written to) the sidecar file.
///
/// Text form, one line per utterance: `<id> <speaker> <phoneme ids...>`,
/// `#` lines are comments.
#[derive(Debug, Clone, Default)]
pub struct CorpusLabels {
    pub speakers: HashMap<String, u32>,
    pub phonemes: HashMap<String, Vec<u32>>,
}

impl CorpusLabels {
    pub fn from_corpus(corpus: &SyntheticCorpus) -> Self {
        let mut speakers = HashMap::new();
        let mut phonemes = HashMap::new();
        for (i, id) in corpus.utterance_ids.iter().enumerate() {
            speakers.insert(id.clone(), corpus.speaker_labels[i]);
            phonemes.insert(id.clone(), corpus.phoneme_labels[i].clone());
        }
        Self { speakers, phonemes }
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut ids: Vec<&String> = self.speakers.keys().collect();
        ids.sort();
        let mut out = String::from("# labels: <utterance id> <speaker id> <per-frame phoneme ids>\n");
        for id in ids {
            write!(out, "{id} {}", self.speakers[id]).unwrap();
            for ph in &self.phonemes[id] {
                write!(out, " {ph}").unwrap();
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = path.as_ref().display().to_string();
        let text = std::fs::read_to_string(path)?;
        let mut labels = Self::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let bad = |detail: &str| Error::Parse {
                file: file.clone(),
                line: ln + 1,
                detail: detail.into(),
            };
            let id = parts.next().ok_or_else(|| bad("missing id"))?.to_string();
            let speaker: u32 = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad("missing/invalid speaker id"))?;
            let phonemes: std::result::Result<Vec<u32>, _> =
                parts.map(|v| v.parse()).collect();
            let phonemes = phonemes.map_err(|e| bad(&format!("bad phoneme id: {e}")))?;
            if phonemes.is_empty() {
                return Err(bad("no phoneme labels"));
            }
            labels.speakers.insert(id.clone(), speaker);
            labels.phonemes.insert(id, phonemes);
        }
        Ok(labels)
    }
}
