//! Parameter containers for the discrete-input transformer encoder.
//!
//! Every parameter is a 2-D tensor (vectors are 1 x d) so optimizer, EMA,
//! serialization, and finite-difference sweeps can walk one flat, stably
//! ordered list of named tensors.

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::num::{c, Real};
use crate::rng::{stream_rng, Purpose};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub codebook_sizes: Vec<u32>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_width: usize,
    pub max_positions: usize,
    /// Softmax temperature in the prediction heads.
    pub temperature: f64,
    /// Probability that a training sequence keeps only a random codebook
    /// prefix.
    pub quantizer_dropout_prob: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn n_codebooks(&self) -> usize {
        self.codebook_sizes.len()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_sizes.is_empty() {
            return Err(Error::InvalidConfig("need at least one codebook".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.quantizer_dropout_prob) {
            return Err(Error::InvalidConfig(
                "quantizer_dropout_prob outside [0, 1]".into(),
            ));
        }
        if self.max_positions == 0 {
            return Err(Error::InvalidConfig("max_positions must be >= 1".into()));
        }
        if self.ffn_width == 0 && self.n_layers > 0 {
            return Err(Error::InvalidConfig("ffn_width must be >= 1".into()));
        }
        Ok(())
    }

    /// Paper-scale architecture: 12 layers, 768-wide.
    pub fn paper_scale(codebook_sizes: Vec<u32>, seed: u64) -> Self {
        Self {
            codebook_sizes,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            ffn_width: 3072,
            max_positions: 4096,
            temperature: 0.1,
            quantizer_dropout_prob: 0.25,
            seed,
        }
    }

    /// Desk-scale architecture: 2 layers, 64-wide.
    pub fn desk_scale(codebook_sizes: Vec<u32>, seed: u64) -> Self {
        Self {
            codebook_sizes,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            ffn_width: 128,
            max_positions: 2048,
            temperature: 0.1,
            quantizer_dropout_prob: 0.25,
            seed,
        }
    }
}

/// Class counts for the active prediction heads, one entry per head.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HeadSpec {
    pub class_counts: Vec<usize>,
}

impl HeadSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn n_heads(&self) -> usize {
        self.class_counts.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub wq: Array2<F>,
    pub bq: Array2<F>,
    pub wk: Array2<F>,
    pub bk: Array2<F>,
    pub wv: Array2<F>,
    pub bv: Array2<F>,
    pub wo: Array2<F>,
    pub bo: Array2<F>,
    pub ln1_g: Array2<F>,
    pub ln1_b: Array2<F>,
    pub ln2_g: Array2<F>,
    pub ln2_b: Array2<F>,
    pub w1: Array2<F>,
    pub b1: Array2<F>,
    pub w2: Array2<F>,
    pub b2: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    /// One K_i x d embedding table per codebook.
    pub embeddings: Vec<Array2<F>>,
    /// 1 x d learnable mask embedding.
    pub mask_embedding: Array2<F>,
    /// max_positions x d learned absolute position table.
    pub positions: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    /// One C_j x d projection per active prediction head.
    pub heads: Vec<Array2<F>>,
}

fn gaussian<F: Real>(rows: usize, cols: usize, std: f64, rng: &mut impl rand::Rng) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| {
        let g: f64 = StandardNormal.sample(rng);
        c::<F>(g * std)
    })
}

impl<F: Real> EncoderParams<F> {
    /// Deterministic initialization from the config seed: Gaussian(0, 0.02)
    /// weights, zero biases, unit LayerNorm gains.
    pub fn init(config: &EncoderConfig, head_spec: &HeadSpec) -> Self {
        let d = config.d_model;
        let mut rng = stream_rng(config.seed, Purpose::ParamInit, 0);
        let embeddings = config
            .codebook_sizes
            .iter()
            .map(|&k| gaussian(k as usize, d, INIT_STD, &mut rng))
            .collect();
        let mask_embedding = gaussian(1, d, INIT_STD, &mut rng);
        let positions = gaussian(config.max_positions, d, INIT_STD, &mut rng);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                wq: gaussian(d, d, INIT_STD, &mut rng),
                bq: Array2::zeros((1, d)),
                wk: gaussian(d, d, INIT_STD, &mut rng),
                bk: Array2::zeros((1, d)),
                wv: gaussian(d, d, INIT_STD, &mut rng),
                bv: Array2::zeros((1, d)),
                wo: gaussian(d, d, INIT_STD, &mut rng),
                bo: Array2::zeros((1, d)),
                ln1_g: Array2::ones((1, d)),
                ln1_b: Array2::zeros((1, d)),
                ln2_g: Array2::ones((1, d)),
                ln2_b: Array2::zeros((1, d)),
                w1: gaussian(config.ffn_width, d, INIT_STD, &mut rng),
                b1: Array2::zeros((1, config.ffn_width)),
                w2: gaussian(d, config.ffn_width, INIT_STD, &mut rng),
                b2: Array2::zeros((1, d)),
            })
            .collect();
        let heads = head_spec
            .class_counts
            .iter()
            .map(|&classes| gaussian(classes, d, INIT_STD, &mut rng))
            .collect();
        Self {
            embeddings,
            mask_embedding,
            positions,
            layers,
            heads,
        }
    }

    /// Same-shaped parameter set filled with zeros; the gradient container.
    pub fn zeros_like(&self) -> Self {
        let zero = |a: &Array2<F>| Array2::<F>::zeros(a.raw_dim());
        Self {
            embeddings: self.embeddings.iter().map(zero).collect(),
            mask_embedding: zero(&self.mask_embedding),
            positions: zero(&self.positions),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: zero(&l.wq),
                    bq: zero(&l.bq),
                    wk: zero(&l.wk),
                    bk: zero(&l.bk),
                    wv: zero(&l.wv),
                    bv: zero(&l.bv),
                    wo: zero(&l.wo),
                    bo: zero(&l.bo),
                    ln1_g: zero(&l.ln1_g),
                    ln1_b: zero(&l.ln1_b),
                    ln2_g: zero(&l.ln2_g),
                    ln2_b: zero(&l.ln2_b),
                    w1: zero(&l.w1),
                    b1: zero(&l.b1),
                    w2: zero(&l.w2),
                    b2: zero(&l.b2),
                })
                .collect(),
            heads: self.heads.iter().map(zero).collect(),
        }
    }

    /// Named tensors in a stable order shared by `tensors_mut`.
    pub fn tensors(&self) -> Vec<(String, &Array2<F>)> {
        let mut out = Vec::new();
        for (i, e) in self.embeddings.iter().enumerate() {
            out.push((format!("embed.{i}"), e));
        }
        out.push(("mask".to_string(), &self.mask_embedding));
        out.push(("pos".to_string(), &self.positions));
        for (l, layer) in self.layers.iter().enumerate() {
            let fields: [(&str, &Array2<F>); 16] = [
                ("wq", &layer.wq),
                ("bq", &layer.bq),
                ("wk", &layer.wk),
                ("bk", &layer.bk),
                ("wv", &layer.wv),
                ("bv", &layer.bv),
                ("wo", &layer.wo),
                ("bo", &layer.bo),
                ("ln1_g", &layer.ln1_g),
                ("ln1_b", &layer.ln1_b),
                ("ln2_g", &layer.ln2_g),
                ("ln2_b", &layer.ln2_b),
                ("w1", &layer.w1),
                ("b1", &layer.b1),
                ("w2", &layer.w2),
                ("b2", &layer.b2),
            ];
            for (name, tensor) in fields {
                out.push((format!("layer.{l}.{name}"), tensor));
            }
        }
        for (j, h) in self.heads.iter().enumerate() {
            out.push((format!("head.{j}"), h));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Array2<F>)> {
        let mut out: Vec<(String, &mut Array2<F>)> = Vec::new();
        for (i, e) in self.embeddings.iter_mut().enumerate() {
            out.push((format!("embed.{i}"), e));
        }
        out.push(("mask".to_string(), &mut self.mask_embedding));
        out.push(("pos".to_string(), &mut self.positions));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let fields: [(&str, &mut Array2<F>); 16] = [
                ("wq", &mut layer.wq),
                ("bq", &mut layer.bq),
                ("wk", &mut layer.wk),
                ("bk", &mut layer.bk),
                ("wv", &mut layer.wv),
                ("bv", &mut layer.bv),
                ("wo", &mut layer.wo),
                ("bo", &mut layer.bo),
                ("ln1_g", &mut layer.ln1_g),
                ("ln1_b", &mut layer.ln1_b),
                ("ln2_g", &mut layer.ln2_g),
                ("ln2_b", &mut layer.ln2_b),
                ("w1", &mut layer.w1),
                ("b1", &mut layer.b1),
                ("w2", &mut layer.w2),
                ("b2", &mut layer.b2),
            ];
            for (name, tensor) in fields {
                out.push((format!("layer.{l}.{name}"), tensor));
            }
        }
        for (j, h) in self.heads.iter_mut().enumerate() {
            out.push((format!("head.{j}"), h));
        }
        out
    }

    /// self += other, tensor by tensor.
    pub fn add_assign(&mut self, other: &Self) {
        let mut mine = self.tensors_mut();
        let theirs = other.tensors();
        assert_eq!(mine.len(), theirs.len(), "parameter sets differ in shape");
        for ((_, a), (_, b)) in mine.iter_mut().zip(theirs.iter()) {
            **a += *b;
        }
    }

    /// self *= scalar on every tensor.
    pub fn scale(&mut self, factor: F) {
        for (_, t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    /// Global L2 norm across all tensors.
    pub fn global_norm(&self) -> F {
        let total: F = self
            .tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|&v| v * v).sum::<F>())
            .sum();
        total.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Converts every tensor element (f32 checkpoints <-> f64 fixtures).
    pub fn map_precision<G: Real>(&self) -> EncoderParams<G> {
        let conv = |a: &Array2<F>| a.mapv(|v| c::<G>(v.to_f64().unwrap()));
        EncoderParams {
            embeddings: self.embeddings.iter().map(conv).collect(),
            mask_embedding: conv(&self.mask_embedding),
            positions: conv(&self.positions),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: conv(&l.wq),
                    bq: conv(&l.bq),
                    wk: conv(&l.wk),
                    bk: conv(&l.bk),
                    wv: conv(&l.wv),
                    bv: conv(&l.bv),
                    wo: conv(&l.wo),
                    bo: conv(&l.bo),
                    ln1_g: conv(&l.ln1_g),
                    ln1_b: conv(&l.ln1_b),
                    ln2_g: conv(&l.ln2_g),
                    ln2_b: conv(&l.ln2_b),
                    w1: conv(&l.w1),
                    b1: conv(&l.b1),
                    w2: conv(&l.w2),
                    b2: conv(&l.b2),
                })
                .collect(),
            heads: self.heads.iter().map(conv).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> EncoderConfig {
        EncoderConfig {
            codebook_sizes: vec![8, 8],
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            ffn_width: 32,
            max_positions: 64,
            temperature: 0.1,
            quantizer_dropout_prob: 0.0,
            seed: 5,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let spec = HeadSpec {
            class_counts: vec![8, 8],
        };
        let a = EncoderParams::<f32>::init(&config(), &spec);
        let b = EncoderParams::<f32>::init(&config(), &spec);
        for ((na, ta), (nb, tb)) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta, tb, "tensor {na}");
        }
    }

    #[test]
    fn tensor_listing_is_stable_and_complete() {
        let spec = HeadSpec {
            class_counts: vec![4],
        };
        let params = EncoderParams::<f32>::init(&config(), &spec);
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "embed.0");
        assert_eq!(names[2], "mask");
        assert_eq!(names[3], "pos");
        assert!(names.contains(&"layer.1.w2".to_string()));
        assert_eq!(names.last().unwrap(), "head.0");
        // 2 embeddings + mask + pos + 2 layers x 16 + 1 head
        assert_eq!(names.len(), 2 + 2 + 32 + 1);
        let mut p2 = params.clone();
        let mut_names: Vec<String> = p2.tensors_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, mut_names);
    }

    #[test]
    fn validate_rejects_bad_configs() {
        let mut bad = config();
        bad.d_model = 15;
        assert!(bad.validate().is_err());
        let mut bad = config();
        bad.temperature = 0.0;
        assert!(bad.validate().is_err());
        assert!(config().validate().is_ok());
    }

    #[test]
    fn invariant_presets_expressible() {
        let paper = EncoderConfig::paper_scale(vec![1024; 12], 0);
        assert_eq!((paper.n_layers, paper.d_model), (12, 768));
        paper.validate().unwrap();
        let desk = EncoderConfig::desk_scale(vec![64; 4], 0);
        assert_eq!((desk.n_layers, desk.d_model), (2, 64));
        desk.validate().unwrap();
    }
}
