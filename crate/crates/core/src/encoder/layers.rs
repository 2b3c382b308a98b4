//! Transformer building blocks with hand-written backward passes.
//!
//! Pre-norm layer: `x_mid = x + Attn(LN1(x))`, `x_out = x_mid + FFN(LN2(x_mid))`
//! with GELU in the feed-forward. Forward caches exactly what each backward
//! needs; gradients are exact (the finite-difference suite holds them to
//! 1e-4 relative error in f64).

use ndarray::{s, Array1, Array2, Axis};

use crate::num::{c, Real};

use super::params::LayerParams;

const LN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

pub struct LnCache<F> {
    /// Normalized rows (x - mean) / std.
    pub xhat: Array2<F>,
    /// Per-row 1 / std.
    pub inv_std: Array1<F>,
}

pub fn layer_norm<F: Real>(x: &Array2<F>, gain: &Array2<F>, bias: &Array2<F>) -> (Array2<F>, LnCache<F>) {
    let (t_len, d) = x.dim();
    let inv_d = c::<F>(1.0) / c::<F>(d as f64);
    let eps = c::<F>(LN_EPS);
    let mut xhat = Array2::<F>::zeros((t_len, d));
    let mut inv_std = Array1::<F>::zeros(t_len);
    for (t, row) in x.outer_iter().enumerate() {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row
            .iter()
            .map(|&v| {
                let dmu = v - mean;
                dmu * dmu
            })
            .sum::<F>()
            * inv_d;
        let istd = (var + eps).sqrt().recip();
        inv_std[t] = istd;
        for (j, &v) in row.iter().enumerate() {
            xhat[[t, j]] = (v - mean) * istd;
        }
    }
    let mut y = xhat.clone();
    for mut row in y.outer_iter_mut() {
        row.iter_mut()
            .zip(gain.row(0).iter())
            .zip(bias.row(0).iter())
            .for_each(|((v, &g), &b)| *v = *v * g + b);
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns (dx, dgain, dbias).
pub fn layer_norm_backward<F: Real>(
    dy: &Array2<F>,
    cache: &LnCache<F>,
    gain: &Array2<F>,
) -> (Array2<F>, Array2<F>, Array2<F>) {
    let (t_len, d) = dy.dim();
    let inv_d = c::<F>(1.0) / c::<F>(d as f64);
    let mut dx = Array2::<F>::zeros((t_len, d));
    let mut dgain = Array2::<F>::zeros((1, d));
    let mut dbias = Array2::<F>::zeros((1, d));
    for t in 0..t_len {
        let dy_row = dy.row(t);
        let xhat_row = cache.xhat.row(t);
        // Accumulate parameter grads.
        for j in 0..d {
            dgain[[0, j]] = dgain[[0, j]] + dy_row[j] * xhat_row[j];
            dbias[[0, j]] = dbias[[0, j]] + dy_row[j];
        }
        // dxhat = dy * gain; dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
        let mut mean_dxhat = F::zero();
        let mut mean_dxhat_xhat = F::zero();
        for j in 0..d {
            let dxh = dy_row[j] * gain[[0, j]];
            mean_dxhat = mean_dxhat + dxh;
            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat_row[j];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let istd = cache.inv_std[t];
        for j in 0..d {
            let dxh = dy_row[j] * gain[[0, j]];
            dx[[t, j]] = istd * (dxh - mean_dxhat - xhat_row[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)
// ---------------------------------------------------------------------------

fn gelu_consts<F: Real>() -> (F, F) {
    (c::<F>((2.0 / std::f64::consts::PI).sqrt()), c::<F>(0.044715))
}

pub fn gelu<F: Real>(x: F) -> F {
    let (k, a) = gelu_consts::<F>();
    let half = c::<F>(0.5);
    let u = k * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let (k, a) = gelu_consts::<F>();
    let half = c::<F>(0.5);
    let three = c::<F>(3.0);
    let u = k * (x + a * x * x * x);
    let th = u.tanh();
    let sech2 = F::one() - th * th;
    half * (F::one() + th) + half * x * sech2 * k * (F::one() + three * a * x * x)
}

// ---------------------------------------------------------------------------
// Linear y = x W^T + b, W: (out, in), b: (1, out)
// ---------------------------------------------------------------------------

fn linear<F: Real>(x: &Array2<F>, w: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let mut y = x.dot(&w.t());
    for mut row in y.outer_iter_mut() {
        row += &b.row(0);
    }
    y
}

/// Returns dx and accumulates dW, db.
fn linear_backward<F: Real>(
    dy: &Array2<F>,
    x: &Array2<F>,
    w: &Array2<F>,
    dw: &mut Array2<F>,
    db: &mut Array2<F>,
) -> Array2<F> {
    *dw += &dy.t().dot(x);
    let col_sum = dy.sum_axis(Axis(0));
    let mut db_row = db.row_mut(0);
    db_row += &col_sum;
    dy.dot(w)
}

// ---------------------------------------------------------------------------
// Row-wise softmax
// ---------------------------------------------------------------------------

pub fn softmax_rows<F: Real>(x: &mut Array2<F>) {
    for mut row in x.outer_iter_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut total = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        let inv = total.recip();
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
}

// ---------------------------------------------------------------------------
// One encoder layer
// ---------------------------------------------------------------------------

pub struct LayerCache<F> {
    pub x_in: Array2<F>,
    pub ln1: LnCache<F>,
    pub a: Array2<F>,
    pub q: Array2<F>,
    pub k: Array2<F>,
    pub v: Array2<F>,
    /// Per-head T x T attention probabilities.
    pub attn: Vec<Array2<F>>,
    pub ctx: Array2<F>,
    pub x_mid: Array2<F>,
    pub ln2: LnCache<F>,
    pub b_norm: Array2<F>,
    pub ffn_pre: Array2<F>,
    pub ffn_act: Array2<F>,
}

pub struct LayerGrads<F> {
    pub params: LayerParams<F>,
}

pub fn layer_forward<F: Real>(
    x: &Array2<F>,
    p: &LayerParams<F>,
    n_heads: usize,
) -> (Array2<F>, LayerCache<F>) {
    let (t_len, d) = x.dim();
    let dh = d / n_heads;
    let scale = c::<F>(1.0 / (dh as f64).sqrt());

    let (a, ln1) = layer_norm(x, &p.ln1_g, &p.ln1_b);
    let q = linear(&a, &p.wq, &p.bq);
    let k = linear(&a, &p.wk, &p.bk);
    let v = linear(&a, &p.wv, &p.bv);

    let mut ctx = Array2::<F>::zeros((t_len, d));
    let mut attn = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores.mapv_inplace(|s| s * scale);
        softmax_rows(&mut scores);
        let ctx_h = scores.dot(&vh);
        ctx.slice_mut(cols).assign(&ctx_h);
        attn.push(scores);
    }

    let o = linear(&ctx, &p.wo, &p.bo);
    let x_mid = x + &o;

    let (b_norm, ln2) = layer_norm(&x_mid, &p.ln2_g, &p.ln2_b);
    let ffn_pre = linear(&b_norm, &p.w1, &p.b1);
    let ffn_act = ffn_pre.mapv(gelu);
    let f2 = linear(&ffn_act, &p.w2, &p.b2);
    let x_out = &x_mid + &f2;

    (
        x_out,
        LayerCache {
            x_in: x.clone(),
            ln1,
            a,
            q,
            k,
            v,
            attn,
            ctx,
            x_mid,
            ln2,
            b_norm,
            ffn_pre,
            ffn_act,
        },
    )
}

/// Backward through one layer: returns dx_in and this layer's parameter
/// gradients.
pub fn layer_backward<F: Real>(
    dx_out: &Array2<F>,
    cache: &LayerCache<F>,
    p: &LayerParams<F>,
    n_heads: usize,
) -> (Array2<F>, LayerGrads<F>) {
    let (t_len, d) = dx_out.dim();
    let dh = d / n_heads;
    let scale = c::<F>(1.0 / (dh as f64).sqrt());
    let mut g = LayerGrads {
        params: zero_layer_grads(p),
    };

    // x_out = x_mid + f2
    let df2 = dx_out;
    let du = linear_backward(df2, &cache.ffn_act, &p.w2, &mut g.params.w2, &mut g.params.b2);
    let mut df1 = du;
    df1.zip_mut_with(&cache.ffn_pre, |dv, &pre| *dv = *dv * gelu_grad(pre));
    let db_norm = linear_backward(&df1, &cache.b_norm, &p.w1, &mut g.params.w1, &mut g.params.b1);
    let (dx_from_ln2, dg2, db2n) = layer_norm_backward(&db_norm, &cache.ln2, &p.ln2_g);
    g.params.ln2_g += &dg2;
    g.params.ln2_b += &db2n;
    let dx_mid = dx_out + &dx_from_ln2;

    // x_mid = x_in + o
    let do_ = &dx_mid;
    let dctx = linear_backward(do_, &cache.ctx, &p.wo, &mut g.params.wo, &mut g.params.bo);

    let mut dq = Array2::<F>::zeros((t_len, d));
    let mut dk = Array2::<F>::zeros((t_len, d));
    let mut dv = Array2::<F>::zeros((t_len, d));
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let probs = &cache.attn[h];
        let vh = cache.v.slice(cols);
        let dctx_h = dctx.slice(cols);

        let dprobs = dctx_h.dot(&vh.t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));

        // Softmax backward per row.
        let mut dscores = Array2::<F>::zeros((t_len, t_len));
        for t in 0..t_len {
            let prow = probs.row(t);
            let dprow = dprobs.row(t);
            let dot: F = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
            for j in 0..t_len {
                dscores[[t, j]] = prow[j] * (dprow[j] - dot);
            }
        }
        dscores.mapv_inplace(|v| v * scale);

        let qh = cache.q.slice(cols);
        let kh = cache.k.slice(cols);
        dq.slice_mut(cols).assign(&dscores.dot(&kh));
        dk.slice_mut(cols).assign(&dscores.t().dot(&qh));
    }

    let mut da = linear_backward(&dq, &cache.a, &p.wq, &mut g.params.wq, &mut g.params.bq);
    da += &linear_backward(&dk, &cache.a, &p.wk, &mut g.params.wk, &mut g.params.bk);
    da += &linear_backward(&dv, &cache.a, &p.wv, &mut g.params.wv, &mut g.params.bv);

    let (dx_from_ln1, dg1, db1n) = layer_norm_backward(&da, &cache.ln1, &p.ln1_g);
    g.params.ln1_g += &dg1;
    g.params.ln1_b += &db1n;

    let dx_in = &dx_mid + &dx_from_ln1;
    (dx_in, g)
}

fn zero_layer_grads<F: Real>(p: &LayerParams<F>) -> LayerParams<F> {
    let zero = |a: &Array2<F>| Array2::<F>::zeros(a.raw_dim());
    LayerParams {
        wq: zero(&p.wq),
        bq: zero(&p.bq),
        wk: zero(&p.wk),
        bk: zero(&p.bk),
        wv: zero(&p.wv),
        bv: zero(&p.bv),
        wo: zero(&p.wo),
        bo: zero(&p.bo),
        ln1_g: zero(&p.ln1_g),
        ln1_b: zero(&p.ln1_b),
        ln2_g: zero(&p.ln2_g),
        ln2_b: zero(&p.ln2_b),
        w1: zero(&p.w1),
        b1: zero(&p.b1),
        w2: zero(&p.w2),
        b2: zero(&p.b2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = array![[1.0f64, 2.0, 3.0, 4.0], [-2.0, 0.0, 2.0, 8.0]];
        let gain = Array2::<f64>::ones((1, 4));
        let bias = Array2::<f64>::zeros((1, 4));
        let (y, _) = layer_norm(&x, &gain, &bias);
        for row in y.outer_iter() {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.3, 2.5] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = array![[1.0f64, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        softmax_rows(&mut x);
        for row in x.outer_iter() {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn attention_probabilities_are_normalized() {
        use crate::encoder::params::{EncoderConfig, EncoderParams, HeadSpec};
        let config = EncoderConfig {
            codebook_sizes: vec![4],
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_width: 16,
            max_positions: 32,
            temperature: 0.1,
            quantizer_dropout_prob: 0.0,
            seed: 1,
        };
        let params = EncoderParams::<f64>::init(&config, &HeadSpec::none());
        let x = Array2::<f64>::from_shape_fn((5, 8), |(t, j)| ((t * 7 + j) as f64).sin());
        let (_, cache) = layer_forward(&x, &params.layers[0], 2);
        for probs in &cache.attn {
            for row in probs.outer_iter() {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
}
