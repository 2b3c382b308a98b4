//! Adam with decoupled weight decay, HuBERT-lineage defaults.

use ndarray::Array2;

use crate::num::{c, Real};

use super::params::EncoderParams;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// First/second-moment accumulators, aligned with
/// `EncoderParams::tensors()` order.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
}

impl<F: Real> AdamState<F> {
    pub fn zeros_for(params: &EncoderParams<F>) -> Self {
        let zeros: Vec<Array2<F>> = params
            .tensors()
            .iter()
            .map(|(_, t)| Array2::zeros(t.raw_dim()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with bias correction. Weight decay is decoupled
    /// (applied to the parameter, not the gradient).
    pub fn apply(
        &mut self,
        params: &mut EncoderParams<F>,
        grads: &EncoderParams<F>,
        lr: f64,
        config: &AdamConfig,
    ) {
        self.step += 1;
        let b1 = c::<F>(config.beta1);
        let b2 = c::<F>(config.beta2);
        let one = F::one();
        let eps = c::<F>(config.eps);
        let lr_f = c::<F>(lr);
        let wd = c::<F>(config.weight_decay * lr);
        let bc1 = c::<F>(1.0 - config.beta1.powi(self.step as i32));
        let bc2 = c::<F>(1.0 - config.beta2.powi(self.step as i32));

        let mut tensors = params.tensors_mut();
        let gtensors = grads.tensors();
        assert_eq!(tensors.len(), self.m.len(), "optimizer/params misaligned");
        for (idx, ((_, p), (_, g))) in tensors.iter_mut().zip(gtensors.iter()).enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut **p)
                .and(&mut *m)
                .and(&mut *v)
                .and(*g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr_f * mhat / (vhat.sqrt() + eps) - wd * *p;
                });
        }
    }
}

/// Scales `grads` in place so the global L2 norm does not exceed
/// `max_norm`; returns the pre-clip norm. `max_norm <= 0` disables clipping.
pub fn clip_global_norm<F: Real>(grads: &mut EncoderParams<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().to_f64().unwrap();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(c::<F>(max_norm / norm));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::params::{EncoderConfig, HeadSpec};

    fn small_params() -> EncoderParams<f64> {
        let config = EncoderConfig {
            codebook_sizes: vec![4],
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_width: 16,
            max_positions: 16,
            temperature: 0.1,
            quantizer_dropout_prob: 0.0,
            seed: 3,
        };
        EncoderParams::init(&config, &HeadSpec { class_counts: vec![4] })
    }

    #[test]
    fn zero_lr_zero_decay_leaves_params_unchanged() {
        let mut params = small_params();
        let before = params.clone();
        let grads = {
            let mut g = params.zeros_like();
            g.mask_embedding.fill(1.0);
            g
        };
        let mut adam = AdamState::zeros_for(&params);
        let config = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam.apply(&mut params, &grads, 0.0, &config);
        for ((_, a), (_, b)) in params.tensors().iter().zip(before.tensors().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn descends_against_gradient() {
        let mut params = small_params();
        let before = params.mask_embedding.clone();
        let grads = {
            let mut g = params.zeros_like();
            g.mask_embedding.fill(1.0);
            g
        };
        let mut adam = AdamState::zeros_for(&params);
        let config = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam.apply(&mut params, &grads, 0.01, &config);
        for (a, b) in params.mask_embedding.iter().zip(before.iter()) {
            assert!(a < b);
        }
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let params = small_params();
        let mut g = params.zeros_like();
        g.mask_embedding.fill(3.0);
        let norm = g.global_norm();
        let mut clipped = g.clone();
        let pre = clip_global_norm(&mut clipped, norm * 0.5);
        assert!((pre - norm).abs() < 1e-12);
        assert!((clipped.global_norm() - norm * 0.5).abs() < 1e-9);
        let mut untouched = g.clone();
        clip_global_norm(&mut untouched, norm * 2.0);
        assert_eq!(untouched.mask_embedding, g.mask_embedding);
        let mut disabled = g.clone();
        clip_global_norm(&mut disabled, 0.0);
        assert_eq!(disabled.mask_embedding, g.mask_embedding);
    }
}
