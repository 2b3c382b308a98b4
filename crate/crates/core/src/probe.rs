//! Frozen-encoder evaluation on the synthetic tasks.
//!
//! A probe combines the encoder's layer outputs with softmax-normalized
//! weights and feeds a linear head; only the weights and head train, by
//! full-batch gradient steps on cross-entropy. Tasks: per-frame phoneme
//! classification, and per-utterance speaker classification over
//! mean-pooled features.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::encoder::{EncoderState, LayerOutputs};
use crate::error::{Error, Result};
use crate::units::CodecUnitSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeTask {
    FramePhoneme,
    UtteranceSpeaker,
}

impl ProbeTask {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProbeTask::FramePhoneme => "phoneme",
            ProbeTask::UtteranceSpeaker => "speaker",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "phoneme" => Ok(ProbeTask::FramePhoneme),
            "speaker" => Ok(ProbeTask::UtteranceSpeaker),
            other => Err(Error::InvalidConfig(format!("unknown probe task {other:?}"))),
        }
    }
}

/// Labels for one probe run, aligned with the feature list.
#[derive(Debug, Clone)]
pub enum ProbeLabels {
    /// Per utterance, per frame.
    Frame(Vec<Vec<u32>>),
    /// Per utterance.
    Utterance(Vec<u32>),
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub task: ProbeTask,
    /// Layer indices the probe may weight (0 = embeddings).
    pub layers: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn new(task: ProbeTask, n_layers: usize) -> Self {
        Self {
            task,
            layers: (0..=n_layers).collect(),
            epochs: 150,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeModel {
    pub task: ProbeTask,
    pub layers: Vec<usize>,
    /// Raw layer-weight logits; softmax keeps the weights a probability
    /// vector at every step.
    pub alpha_raw: Array1<f64>,
    /// classes x d_model linear head.
    pub head: Array2<f64>,
}

impl ProbeModel {
    pub fn alpha(&self) -> Vec<f64> {
        softmax(&self.alpha_raw)
    }
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub majority_baseline: f64,
    pub alpha: Vec<f64>,
    pub examples: usize,
}

/// Layer outputs for every utterance under unmasked, full-codebook input.
/// Deterministic; the encoder is read-only throughout.
pub fn extract_features(
    state: &EncoderState<f32>,
    sequences: &[CodecUnitSequence],
) -> Result<Vec<LayerOutputs<f32>>> {
    sequences
        .par_iter()
        .map(|units| {
            let z = state.embed_units(units, state.config.n_codebooks())?;
            let (outputs, _) = state.forward(&z)?;
            Ok(outputs)
        })
        .collect()
}

fn softmax(x: &Array1<f64>) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / total).collect()
}

/// One example: the per-layer feature rows entering the weighted sum.
struct Example {
    /// One d-vector per probed layer.
    layer_feats: Vec<Array1<f64>>,
    label: usize,
}

fn collect_examples(
    features: &[LayerOutputs<f32>],
    labels: &ProbeLabels,
    config: &ProbeConfig,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    match (config.task, labels) {
        (ProbeTask::FramePhoneme, ProbeLabels::Frame(per_utt)) => {
            if per_utt.len() != features.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} label sets vs {} utterances",
                    per_utt.len(),
                    features.len()
                )));
            }
            for (outputs, frame_labels) in features.iter().zip(per_utt) {
                let t_len = outputs.layer(0).nrows();
                if frame_labels.len() != t_len {
                    return Err(Error::ShapeMismatch(format!(
                        "{} labels vs {} frames",
                        frame_labels.len(),
                        t_len
                    )));
                }
                for (t, &label) in frame_labels.iter().enumerate() {
                    let layer_feats = config
                        .layers
                        .iter()
                        .map(|&l| outputs.layer(l).row(t).mapv(|v| v as f64))
                        .collect();
                    out.push(Example {
                        layer_feats,
                        label: label as usize,
                    });
                }
            }
        }
        (ProbeTask::UtteranceSpeaker, ProbeLabels::Utterance(speakers)) => {
            if speakers.len() != features.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels vs {} utterances",
                    speakers.len(),
                    features.len()
                )));
            }
            for (outputs, &label) in features.iter().zip(speakers) {
                let layer_feats = config
                    .layers
                    .iter()
                    .map(|&l| {
                        crate::encoder::mean_pool(outputs.layer(l)).mapv(|v| v as f64)
                    })
                    .collect();
                out.push(Example {
                    layer_feats,
                    label: label as usize,
                });
            }
        }
        _ => {
            return Err(Error::InvalidConfig(
                "probe task and label kind disagree".into(),
            ))
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

/// Trains layer weights and linear head jointly by cross-entropy;
/// the encoder never changes. Deterministic under the config seed.
pub fn train_probe(
    features: &[LayerOutputs<f32>],
    labels: &ProbeLabels,
    n_classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeModel> {
    let examples = collect_examples(features, labels, config)?;
    for ex in &examples {
        if ex.label >= n_classes {
            return Err(Error::InvalidConfig(format!(
                "label {} outside 0..{n_classes}",
                ex.label
            )));
        }
    }
    let d = examples[0].layer_feats[0].len();
    let n_layers = config.layers.len();
    let n = examples.len() as f64;

    let mut alpha_raw = Array1::<f64>::zeros(n_layers);
    let mut head = Array2::<f64>::zeros((n_classes, d));
    // Adam accumulators for the two parameter blocks.
    let mut m_a = Array1::<f64>::zeros(n_layers);
    let mut v_a = Array1::<f64>::zeros(n_layers);
    let mut m_h = Array2::<f64>::zeros((n_classes, d));
    let mut v_h = Array2::<f64>::zeros((n_classes, d));
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    for epoch in 1..=config.epochs.max(1) {
        let alpha = softmax(&alpha_raw);
        let mut d_head = Array2::<f64>::zeros((n_classes, d));
        let mut d_alpha = vec![0.0f64; n_layers];
        for ex in &examples {
            let mut x = Array1::<f64>::zeros(d);
            for (w, feat) in alpha.iter().zip(&ex.layer_feats) {
                x.scaled_add(*w, feat);
            }
            let logits: Array1<f64> = head.dot(&x);
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            // dlogit = (p - onehot) / n
            let mut dlogit = Array1::<f64>::zeros(n_classes);
            for (ci, &e) in exps.iter().enumerate() {
                dlogit[ci] = e / total / n;
            }
            dlogit[ex.label] -= 1.0 / n;
            for (ci, &dl) in dlogit.iter().enumerate() {
                if dl != 0.0 {
                    d_head.row_mut(ci).scaled_add(dl, &x);
                }
            }
            let dx: Array1<f64> = head.t().dot(&dlogit);
            for (li, feat) in ex.layer_feats.iter().enumerate() {
                d_alpha[li] += dx.dot(feat);
            }
        }
        // Through the softmax parameterization of alpha.
        let inner: f64 = alpha.iter().zip(&d_alpha).map(|(a, g)| a * g).sum();
        let d_alpha_raw =
            Array1::from_iter(alpha.iter().zip(&d_alpha).map(|(a, g)| a * (g - inner)));

        let t = epoch as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        ndarray::Zip::from(&mut alpha_raw)
            .and(&mut m_a)
            .and(&mut v_a)
            .and(&d_alpha_raw)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= config.lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        ndarray::Zip::from(&mut head)
            .and(&mut m_h)
            .and(&mut v_h)
            .and(&d_head)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= config.lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
    }

    Ok(ProbeModel {
        task: config.task,
        layers: config.layers.clone(),
        alpha_raw,
        head,
    })
}

/// Deterministic metrics on a feature/label set, majority-class baseline
/// included.
pub fn evaluate_probe(
    model: &ProbeModel,
    features: &[LayerOutputs<f32>],
    labels: &ProbeLabels,
) -> Result<ProbeReport> {
    let config = ProbeConfig {
        task: model.task,
        layers: model.layers.clone(),
        epochs: 0,
        lr: 0.0,
        seed: 0,
    };
    let examples = collect_examples(features, labels, &config)?;
    let n_classes = model.head.nrows();
    let alpha = model.alpha();
    let mut correct = 0usize;
    let mut per_class_correct = vec![0usize; n_classes];
    let mut per_class_total = vec![0usize; n_classes];
    for ex in &examples {
        let mut x = Array1::<f64>::zeros(model.head.ncols());
        for (w, feat) in alpha.iter().zip(&ex.layer_feats) {
            x.scaled_add(*w, feat);
        }
        let logits: Array1<f64> = model.head.dot(&x);
        let pred = logits
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            })
            .0;
        per_class_total[ex.label] += 1;
        if pred == ex.label {
            correct += 1;
            per_class_correct[ex.label] += 1;
        }
    }
    let majority = per_class_total.iter().copied().max().unwrap_or(0) as f64
        / examples.len() as f64;
    Ok(ProbeReport {
        accuracy: correct as f64 / examples.len() as f64,
        per_class_accuracy: per_class_correct
            .iter()
            .zip(&per_class_total)
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect(),
        majority_baseline: majority,
        alpha,
        examples: examples.len(),
    })
}

/// Deterministic utterance split: shuffle indices under the seed, put the
/// first `train_fraction` in the train side.
pub fn split_utterances(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::Rng;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = crate::rng::stream_rng(seed, crate::rng::Purpose::ProbeSplit, 0);
    for i in 0..n {
        let j = rng.random_range(i..n);
        order.swap(i, j);
    }
    let cut = ((n as f64 * train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let train = order[..cut].to_vec();
    let test = order[cut..].to_vec();
    (train, test)
}
