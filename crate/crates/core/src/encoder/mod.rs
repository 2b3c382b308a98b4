//! Discrete-input transformer encoder with temperature-softmax prediction
//! heads.
//!
//! The front end looks up one embedding table per codebook and sums them
//! (optionally truncated to a random prefix by quantizer dropout), masks
//! selected frames with a learnable embedding, adds learned absolute
//! positions, and runs a pre-norm transformer stack. All gradients are
//! computed by hand and exercised against central finite differences.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod layers;
mod params;

pub use adam::{AdamConfig, AdamState};
pub use params::{EncoderConfig, EncoderParams, HeadSpec, LayerParams};

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::masking::{apply_mask, MaskSpec};
use crate::num::{c, Real};
use crate::rng::{stream_rng, Purpose};
use crate::units::CodecUnitSequence;

use layers::{layer_backward, layer_forward, LayerCache};

/// Hidden representations for layers `0..=n_layers`; layer 0 is the
/// post-embedding sequence the stack consumed.
#[derive(Debug, Clone)]
pub struct LayerOutputs<F> {
    pub layers: Vec<Array2<F>>,
}

impl<F: Real> LayerOutputs<F> {
    pub fn n_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn layer(&self, l: usize) -> &Array2<F> {
        &self.layers[l]
    }

    pub fn final_output(&self) -> &Array2<F> {
        self.layers.last().expect("at least layer 0")
    }
}

/// Forward activations retained for the backward pass (and for attention
/// inspection).
pub struct ForwardCache<F> {
    pub layer_caches: Vec<LayerCache<F>>,
}

impl<F> ForwardCache<F> {
    /// Attention probabilities of `layer` (1-based), one T x T matrix per head.
    pub fn attention(&self, layer: usize) -> &[Array2<F>] {
        &self.layer_caches[layer - 1].attn
    }
}

/// Encoder parameters plus optimizer state; the unit of checkpointing.
#[derive(Debug, Clone)]
pub struct EncoderState<F> {
    pub config: EncoderConfig,
    pub head_spec: HeadSpec,
    pub params: EncoderParams<F>,
    pub opt: AdamState<F>,
}

/// One training sequence with its mask, dropout draw, and per-head targets.
pub struct SequenceExample<'a> {
    pub units: &'a CodecUnitSequence,
    pub mask: &'a MaskSpec,
    /// Keep-prefix length from quantizer dropout; `n_codebooks` when no
    /// dropout was drawn.
    pub n_active_codebooks: usize,
    /// One label stream per head, each of length T.
    pub targets: Vec<&'a [u32]>,
}

/// Bookkeeping from one loss evaluation.
#[derive(Debug, Clone, Default)]
pub struct LossStats {
    pub masked_frames: usize,
    /// (head, masked frame) pairs the loss averaged over.
    pub pairs: usize,
    pub correct_per_head: Vec<usize>,
    pub counted_per_head: Vec<usize>,
}

impl LossStats {
    pub fn accuracy_per_head(&self) -> Vec<f64> {
        self.correct_per_head
            .iter()
            .zip(&self.counted_per_head)
            .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect()
    }

    pub fn mean_accuracy(&self) -> f64 {
        let accs = self.accuracy_per_head();
        if accs.is_empty() {
            0.0
        } else {
            accs.iter().sum::<f64>() / accs.len() as f64
        }
    }
}

/// Draws the keep-prefix length: with probability `1 - q_p` all codebooks
/// stay; otherwise the prefix length is uniform on `1..=n_codebooks`, so the
/// base stage is never dropped.
pub fn sample_quantizer_dropout<R: Rng>(q_p: f64, n_codebooks: usize, rng: &mut R) -> usize {
    debug_assert!((0.0..=1.0).contains(&q_p));
    if n_codebooks <= 1 {
        return n_codebooks;
    }
    if rng.random::<f64>() < q_p {
        rng.random_range(1..=n_codebooks)
    } else {
        n_codebooks
    }
}

/// Softmax over head logits at temperature `temperature`, max-subtracted for
/// stability. Entries are positive and sum to 1.
pub fn predict_distribution<F: Real>(
    hidden: ArrayView1<F>,
    head: &Array2<F>,
    temperature: f64,
) -> Array1<F> {
    let inv_tau = c::<F>(1.0 / temperature);
    let mut logits: Array1<F> = head.dot(&hidden);
    logits.mapv_inplace(|v| v * inv_tau);
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    logits.mapv_inplace(|v| {
        let e = (v - max).exp();
        e
    });
    for &v in logits.iter() {
        total = total + v;
    }
    let inv = total.recip();
    logits.mapv_inplace(|v| v * inv);
    logits
}

/// Embedding lookup-and-sum over the first `n_active` codebooks:
/// `Z[t] = sum_i E_i[codes[t][i]]`. Free function so teacher parameter
/// copies can drive it too.
pub fn embed_units_with<F: Real>(
    params: &EncoderParams<F>,
    config: &EncoderConfig,
    units: &CodecUnitSequence,
    n_active: usize,
) -> Result<Array2<F>> {
    let n_cb = config.n_codebooks();
    if units.n_codebooks() != n_cb {
        return Err(Error::ShapeMismatch(format!(
            "{} code columns vs {} embedding tables",
            units.n_codebooks(),
            n_cb
        )));
    }
    if n_active == 0 || n_active > n_cb {
        return Err(Error::InvalidConfig(format!(
            "active codebook prefix {n_active} outside 1..={n_cb}"
        )));
    }
    let d = config.d_model;
    let mut z = Array2::<F>::zeros((units.frames(), d));
    for (t, row) in units.codes.outer_iter().enumerate() {
        let mut out = z.row_mut(t);
        for (i, &code) in row.iter().take(n_active).enumerate() {
            let table = &params.embeddings[i];
            if code as usize >= table.nrows() {
                return Err(Error::CodeOutOfRange {
                    utterance: "<embed>".into(),
                    frame: t,
                    codebook: i,
                    code,
                    size: table.nrows() as u32,
                });
            }
            out += &table.row(code as usize);
        }
    }
    Ok(z)
}

/// Pre-norm stack over a post-embedding sequence. `outputs.layers[0]` is the
/// input itself; positions are added at stack entry, inside layer 1's
/// computation.
pub fn forward_stack<F: Real>(
    params: &EncoderParams<F>,
    config: &EncoderConfig,
    z: &Array2<F>,
) -> Result<(LayerOutputs<F>, ForwardCache<F>)> {
    let t_len = z.nrows();
    if z.ncols() != config.d_model {
        return Err(Error::ShapeMismatch(format!(
            "input dim {} vs d_model {}",
            z.ncols(),
            config.d_model
        )));
    }
    if t_len > config.max_positions {
        return Err(Error::InvalidConfig(format!(
            "sequence of {t_len} frames exceeds max_positions {}",
            config.max_positions
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteActivation { layer: 0 });
    }
    let mut outputs = vec![z.clone()];
    let mut caches = Vec::with_capacity(config.n_layers);
    if config.n_layers > 0 {
        let mut x = z + &params.positions.slice(ndarray::s![..t_len, ..]);
        for (l, layer) in params.layers.iter().enumerate() {
            let (next, cache) = layer_forward(&x, layer, config.n_heads);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: l + 1 });
            }
            caches.push(cache);
            outputs.push(next.clone());
            x = next;
        }
    }
    Ok((
        LayerOutputs { layers: outputs },
        ForwardCache {
            layer_caches: caches,
        },
    ))
}

impl<F: Real> EncoderState<F> {
    pub fn init(config: EncoderConfig, head_spec: HeadSpec) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(&config, &head_spec);
        let opt = AdamState::zeros_for(&params);
        Ok(Self {
            config,
            head_spec,
            params,
            opt,
        })
    }

    /// Embedding lookup-and-sum over the first `n_active` codebooks.
    pub fn embed_units(&self, units: &CodecUnitSequence, n_active: usize) -> Result<Array2<F>> {
        embed_units_with(&self.params, &self.config, units, n_active)
    }

    /// Copies codec codewords into the embedding tables. When the codec
    /// dimension equals `d_model` the copy is exact; otherwise the codewords
    /// pass through a fixed Gaussian projection derived from
    /// `projection_seed`.
    pub fn init_embeddings_from_codec(
        &mut self,
        stages: &[Array2<f32>],
        projection_seed: u64,
    ) -> Result<()> {
        let n_cb = self.config.n_codebooks();
        if stages.len() != n_cb {
            return Err(Error::ShapeMismatch(format!(
                "{} codec stages vs {} codebooks",
                stages.len(),
                n_cb
            )));
        }
        for (i, stage) in stages.iter().enumerate() {
            if stage.nrows() != self.config.codebook_sizes[i] as usize {
                return Err(Error::ShapeMismatch(format!(
                    "stage {i} has {} codewords vs codebook size {}",
                    stage.nrows(),
                    self.config.codebook_sizes[i]
                )));
            }
        }
        let d = self.config.d_model;
        let cdim = stages[0].ncols();
        let projection: Option<Array2<F>> = if cdim == d {
            None
        } else {
            let mut rng = stream_rng(projection_seed, Purpose::CodecProjection, 0);
            let scale = 1.0 / (cdim as f64).sqrt();
            Some(Array2::from_shape_fn((d, cdim), |_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                c::<F>(g * scale)
            }))
        };
        for (i, stage) in stages.iter().enumerate() {
            let stage_f: Array2<F> = stage.mapv(|v| c::<F>(v as f64));
            let table = match &projection {
                None => stage_f,
                Some(m) => stage_f.dot(&m.t()),
            };
            self.params.embeddings[i] = table;
        }
        Ok(())
    }

    /// Runs the stack on a post-embedding sequence.
    pub fn forward(&self, z: &Array2<F>) -> Result<(LayerOutputs<F>, ForwardCache<F>)> {
        forward_stack(&self.params, &self.config, z)
    }

    /// Masked-prediction loss over a batch, without gradients. Shares the
    /// head-loss computation with the gradient path.
    pub fn masked_loss(&self, examples: &[SequenceExample]) -> Result<(f64, LossStats)> {
        self.loss_impl(examples, None)
    }

    /// Masked-prediction loss and gradients for every parameter, the mask
    /// embedding and embedding tables included. The loss is the mean of
    /// `-log p(target)` over all (head, masked frame) pairs in the batch;
    /// a batch with no masked frames yields zero loss and zero gradients.
    pub fn compute_loss_and_grads(
        &self,
        examples: &[SequenceExample],
    ) -> Result<(f64, EncoderParams<F>, LossStats)> {
        let mut grads = self.params.zeros_like();
        let (loss, stats) = self.loss_impl(examples, Some(&mut grads))?;
        Ok((loss, grads, stats))
    }

    fn validate_examples(&self, examples: &[SequenceExample]) -> Result<usize> {
        let n_heads = self.head_spec.n_heads();
        let mut pairs = 0usize;
        for ex in examples {
            if ex.targets.len() != n_heads {
                return Err(Error::ShapeMismatch(format!(
                    "{} target streams vs {n_heads} heads",
                    ex.targets.len()
                )));
            }
            if ex.mask.t_len != ex.units.frames() {
                return Err(Error::ShapeMismatch(format!(
                    "mask over {} frames vs {} unit frames",
                    ex.mask.t_len,
                    ex.units.frames()
                )));
            }
            for (j, stream) in ex.targets.iter().enumerate() {
                if stream.len() != ex.units.frames() {
                    return Err(Error::ShapeMismatch(format!(
                        "head {j}: {} targets vs {} frames",
                        stream.len(),
                        ex.units.frames()
                    )));
                }
                let classes = self.head_spec.class_counts[j] as u32;
                if let Some(&bad) = stream.iter().find(|&&t| t >= classes) {
                    return Err(Error::InvalidConfig(format!(
                        "head {j}: target {bad} outside 0..{classes}"
                    )));
                }
            }
            pairs += ex.mask.n_masked() * n_heads;
        }
        Ok(pairs)
    }

    fn loss_impl(
        &self,
        examples: &[SequenceExample],
        mut grads: Option<&mut EncoderParams<F>>,
    ) -> Result<(f64, LossStats)> {
        let n_heads = self.head_spec.n_heads();
        let pairs = self.validate_examples(examples)?;
        let mut stats = LossStats {
            masked_frames: examples.iter().map(|e| e.mask.n_masked()).sum(),
            pairs,
            correct_per_head: vec![0; n_heads],
            counted_per_head: vec![0; n_heads],
        };
        if pairs == 0 {
            return Ok((0.0, stats));
        }
        let coef = c::<F>(1.0 / pairs as f64);
        let inv_tau = c::<F>(1.0 / self.config.temperature);
        let mask_row = self.params.mask_embedding.row(0).to_owned();
        let mut loss_sum = F::zero();

        for ex in examples {
            let z = self.embed_units(ex.units, ex.n_active_codebooks)?;
            let z_tilde = apply_mask(&z, ex.mask, &mask_row)?;
            let (outputs, cache) = self.forward(&z_tilde)?;
            let h_final = outputs.final_output();
            let t_len = h_final.nrows();
            let mut d_final = Array2::<F>::zeros((t_len, self.config.d_model));

            for (j, head) in self.params.heads.iter().enumerate() {
                let targets = ex.targets[j];
                for &t in &ex.mask.masked {
                    let h_t = h_final.row(t);
                    let mut logits: Array1<F> = head.dot(&h_t);
                    logits.mapv_inplace(|v| v * inv_tau);
                    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
                    let mut total = F::zero();
                    let mut probs = logits.clone();
                    probs.mapv_inplace(|v| (v - max).exp());
                    for &v in probs.iter() {
                        total = total + v;
                    }
                    let inv_total = total.recip();
                    probs.mapv_inplace(|v| v * inv_total);

                    let target = targets[t] as usize;
                    // -log p = log(sum exp) - logit_target (shifted by max).
                    loss_sum = loss_sum + total.ln() - (logits[target] - max);

                    let argmax = logits
                        .iter()
                        .enumerate()
                        .fold((0usize, F::neg_infinity()), |(bi, bv), (i, &v)| {
                            if v > bv {
                                (i, v)
                            } else {
                                (bi, bv)
                            }
                        })
                        .0;
                    if argmax == target {
                        stats.correct_per_head[j] += 1;
                    }
                    stats.counted_per_head[j] += 1;

                    if let Some(g) = grads.as_deref_mut() {
                        let mut dlogit = probs;
                        dlogit[target] = dlogit[target] - F::one();
                        dlogit.mapv_inplace(|v| v * coef * inv_tau);
                        // dW_j += dlogit (outer) h_t ; dh += W^T dlogit
                        let gw = &mut g.heads[j];
                        for (ci, &dl) in dlogit.iter().enumerate() {
                            if dl != F::zero() {
                                let mut grow = gw.row_mut(ci);
                                grow.iter_mut()
                                    .zip(h_t.iter())
                                    .for_each(|(acc, &hv)| *acc = *acc + dl * hv);
                            }
                        }
                        let dh = head.t().dot(&dlogit);
                        let mut drow = d_final.row_mut(t);
                        drow += &dh;
                    }
                }
            }

            if let Some(g) = grads.as_deref_mut() {
                let mut dx = d_final;
                for l in (0..self.config.n_layers).rev() {
                    let (dx_in, layer_grads) = layer_backward(
                        &dx,
                        &cache.layer_caches[l],
                        &self.params.layers[l],
                        self.config.n_heads,
                    );
                    accumulate_layer(&mut g.layers[l], &layer_grads.params);
                    dx = dx_in;
                }
                if self.config.n_layers > 0 {
                    let mut pos_slice = g.positions.slice_mut(ndarray::s![..t_len, ..]);
                    pos_slice += &dx;
                }
                // Unwind masking: masked rows feed the mask embedding, the
                // rest feed the active embedding tables.
                for t in 0..t_len {
                    let drow = dx.row(t);
                    if ex.mask.is_masked(t) {
                        let mut m = g.mask_embedding.row_mut(0);
                        m += &drow;
                    } else {
                        for i in 0..ex.n_active_codebooks {
                            let code = ex.units.codes[[t, i]] as usize;
                            let mut erow = g.embeddings[i].row_mut(code);
                            erow += &drow;
                        }
                    }
                }
            }
        }

        let loss = (loss_sum * coef).to_f64().unwrap();
        Ok((loss, stats))
    }
}

fn accumulate_layer<F: Real>(acc: &mut LayerParams<F>, add: &LayerParams<F>) {
    acc.wq += &add.wq;
    acc.bq += &add.bq;
    acc.wk += &add.wk;
    acc.bk += &add.bk;
    acc.wv += &add.wv;
    acc.bv += &add.bv;
    acc.wo += &add.wo;
    acc.bo += &add.bo;
    acc.ln1_g += &add.ln1_g;
    acc.ln1_b += &add.ln1_b;
    acc.ln2_g += &add.ln2_g;
    acc.ln2_b += &add.ln2_b;
    acc.w1 += &add.w1;
    acc.b1 += &add.b1;
    acc.w2 += &add.w2;
    acc.b2 += &add.b2;
}

/// Mean-pooled rows, used by utterance-level probes.
pub fn mean_pool<F: Real>(x: &Array2<F>) -> Array1<F> {
    let inv = c::<F>(1.0 / x.nrows() as f64);
    x.sum_axis(Axis(0)) * inv
}

#[cfg(test)]
mod tests;
