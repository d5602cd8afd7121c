//! Forward pass and hand-derived backward pass of the encoder.

use rayon::prelude::*;

use super::data::Example;
use super::{
    classifier_bias_index, classifier_index, layer_index, Geometry, LayerParam, POS_EMBED,
    TOKEN_EMBED,
};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::ste::fake_quantize_activations;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Fake-quantize the inputs of the six compressible linears to this many
    /// bits (per-sequence max-abs scale, straight-through gradient).
    pub activation_bits: Option<u32>,
}

struct LayerCache<T> {
    x_q: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Vec<Matrix<T>>,
    attn_q: Matrix<T>,
    norm1: NormCache<T>,
    x1_q: Matrix<T>,
    h1: Matrix<T>,
    g_q: Matrix<T>,
    norm2: NormCache<T>,
}

struct NormCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<f64>,
}

struct Trace<T> {
    ids: Vec<usize>,
    layers: Vec<LayerCache<T>>,
    out: Matrix<T>,
    logits: Vec<T>,
}

fn linear<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let mut y = x.matmul_t(w).expect("linear shapes");
    let bias = b.as_slice();
    for r in 0..y.rows() {
        for (v, &bb) in y.row_mut(r).iter_mut().zip(bias) {
            *v += bb;
        }
    }
    y
}

fn maybe_quant<T: Scalar>(x: &Matrix<T>, opts: &ForwardOptions) -> Matrix<T> {
    match opts.activation_bits {
        Some(b) => fake_quantize_activations(x, b),
        None => x.clone(),
    }
}

fn layer_norm<T: Scalar>(
    x: &Matrix<T>,
    gamma: &Matrix<T>,
    beta: &Matrix<T>,
) -> (Matrix<T>, NormCache<T>) {
    let (n, d) = x.shape();
    let mut y = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        for c in 0..d {
            let h = (row[c].as_f64() - mean) * is;
            xhat.set(r, c, T::from_f64_lossy(h));
            y.set(
                r,
                c,
                T::from_f64_lossy(h * gamma.as_slice()[c].as_f64() + beta.as_slice()[c].as_f64()),
            );
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Returns `dx`, accumulating the gain and shift gradients into `grads`.
fn layer_norm_backward<T: Scalar>(
    dy: &Matrix<T>,
    cache: &NormCache<T>,
    gamma: &Matrix<T>,
    grads: &mut [Matrix<T>],
    (gi, bi): (usize, usize),
) -> Matrix<T> {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    for r in 0..n {
        let mut dxhat = vec![0.0f64; d];
        let (mut mean_dxhat, mut mean_dxhat_xhat) = (0.0, 0.0);
        for c in 0..d {
            let g = dy.get(r, c).as_f64();
            let xh = cache.xhat.get(r, c).as_f64();
            grads[gi].as_mut_slice()[c] += T::from_f64_lossy(g * xh);
            grads[bi].as_mut_slice()[c] += T::from_f64_lossy(g);
            dxhat[c] = g * gamma.as_slice()[c].as_f64();
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh;
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for c in 0..d {
            let xh = cache.xhat.get(r, c).as_f64();
            dx.set(
                r,
                c,
                T::from_f64_lossy(
                    cache.inv_std[r] * (dxhat[c] - mean_dxhat - xh * mean_dxhat_xhat),
                ),
            );
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn softmax_row(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn head_cols<T: Scalar>(x: &Matrix<T>, h: usize, dh: usize) -> Matrix<T> {
    Matrix::from_fn(x.rows(), dh, |r, c| x.get(r, h * dh + c))
}

fn run<T: Scalar>(
    g: &Geometry,
    params: &[Matrix<T>],
    tokens: &[usize],
    opts: &ForwardOptions,
) -> Trace<T> {
    let d = g.model_dim;
    let n = g.positions();
    assert_eq!(tokens.len(), g.seq_len, "sequence length");
    let mut ids = Vec::with_capacity(n);
    ids.push(g.cls_token());
    ids.extend(tokens.iter().map(|&t| {
        assert!(t < g.vocab, "token {t} outside vocabulary {}", g.vocab);
        t
    }));
    let tok = &params[TOKEN_EMBED];
    let pos = &params[POS_EMBED];
    let mut x = Matrix::from_fn(n, d, |r, c| tok.get(ids[r], c) + pos.get(r, c));

    let dh = g.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(g.layers);
    for l in 0..g.layers {
        let p = |lp: LayerParam| &params[layer_index(l, lp)];
        let x_q = maybe_quant(&x, opts);
        let q = linear(&x_q, p(LayerParam::Query), p(LayerParam::QueryBias));
        let k = linear(&x_q, p(LayerParam::Key), p(LayerParam::KeyBias));
        let v = linear(&x_q, p(LayerParam::Value), p(LayerParam::ValueBias));

        let mut attn = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(g.heads);
        for h in 0..g.heads {
            let (qh, kh, vh) = (
                head_cols(&q, h, dh),
                head_cols(&k, h, dh),
                head_cols(&v, h, dh),
            );
            let scores = qh.matmul_t(&kh).expect("score shapes");
            let mut pm = Matrix::zeros(n, n);
            for r in 0..n {
                let mut row: Vec<f64> = scores.row(r).iter().map(|s| s.as_f64() * scale).collect();
                softmax_row(&mut row);
                for (dst, v) in pm.row_mut(r).iter_mut().zip(row) {
                    *dst = T::from_f64_lossy(v);
                }
            }
            let oh = pm.matmul(&vh).expect("attention shapes");
            for r in 0..n {
                attn.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(oh.row(r));
            }
            probs.push(pm);
        }
        let attn_q = maybe_quant(&attn, opts);
        let a = linear(
            &attn_q,
            p(LayerParam::AttnOutput),
            p(LayerParam::AttnOutputBias),
        );
        let r1 = x.add(&a).expect("residual");
        let (x1, norm1) = layer_norm(
            &r1,
            p(LayerParam::AttnNormGamma),
            p(LayerParam::AttnNormBeta),
        );

        let x1_q = maybe_quant(&x1, opts);
        let h1 = linear(&x1_q, p(LayerParam::Ffn1), p(LayerParam::Ffn1Bias));
        let gact = h1.map(|v| T::from_f64_lossy(gelu(v.as_f64())));
        let g_q = maybe_quant(&gact, opts);
        let f = linear(&g_q, p(LayerParam::Ffn2), p(LayerParam::Ffn2Bias));
        let r2 = x1.add(&f).expect("residual");
        let (x2, norm2) = layer_norm(&r2, p(LayerParam::FfnNormGamma), p(LayerParam::FfnNormBeta));

        layers.push(LayerCache {
            x_q,
            q,
            k,
            v,
            probs,
            attn_q,
            norm1,
            x1_q,
            h1,
            g_q,
            norm2,
        });
        x = x2;
    }
    let cls = Matrix::from_parts(1, d, x.row(0).to_vec());
    let logits = linear(
        &cls,
        &params[classifier_index()],
        &params[classifier_bias_index()],
    )
    .into_vec();
    Trace {
        ids,
        layers,
        out: x,
        logits,
    }
}

/// Logits of one token sequence under explicit parameters.
pub fn logits_for<T: Scalar>(
    g: &Geometry,
    params: &[Matrix<T>],
    tokens: &[usize],
    opts: &ForwardOptions,
) -> Vec<T> {
    run(g, params, tokens, opts).logits
}

/// Logits for a batch (`batch.len() × classes`).
pub fn forward<T: Scalar>(
    g: &Geometry,
    params: &[Matrix<T>],
    batch: &[Vec<usize>],
    opts: &ForwardOptions,
) -> Matrix<T> {
    let rows: Vec<Vec<T>> = batch
        .par_iter()
        .map(|t| logits_for(g, params, t, opts))
        .collect();
    Matrix::from_parts(batch.len(), g.classes, rows.concat())
}

/// Cross-entropy of one example and `dloss/dlogits`, in `f64`.
pub(crate) fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = logits.to_vec();
    softmax_row(&mut p);
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    p[label] -= 1.0;
    (loss, p)
}

fn add_bias_grad<T: Scalar>(db: &mut Matrix<T>, dy: &Matrix<T>) {
    for r in 0..dy.rows() {
        for (b, &v) in db.as_mut_slice().iter_mut().zip(dy.row(r)) {
            *b += v;
        }
    }
}

/// Back-propagates one example, adding `weight * dloss` into `grads`.
fn backward<T: Scalar>(
    g: &Geometry,
    params: &[Matrix<T>],
    trace: &Trace<T>,
    dlogits: &[f64],
    grads: &mut [Matrix<T>],
) {
    let d = g.model_dim;
    let n = g.positions();
    let dl = Matrix::from_parts(
        1,
        g.classes,
        dlogits.iter().map(|&v| T::from_f64_lossy(v)).collect(),
    );
    let cls = Matrix::from_parts(1, d, trace.out.row(0).to_vec());
    grads[classifier_index()]
        .add_assign(&dl.t_matmul(&cls).expect("head grad"))
        .expect("shape");
    add_bias_grad(&mut grads[classifier_bias_index()], &dl);
    let mut dx = Matrix::zeros(n, d);
    let dcls = dl
        .matmul(&params[classifier_index()])
        .expect("head backprop");
    dx.row_mut(0).copy_from_slice(dcls.row(0));

    let dh = g.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for l in (0..g.layers).rev() {
        let c = &trace.layers[l];
        let idx = |lp: LayerParam| layer_index(l, lp);
        let norm = (idx(LayerParam::FfnNormGamma), idx(LayerParam::FfnNormBeta));
        let dr2 = layer_norm_backward(&dx, &c.norm2, &params[norm.0], grads, norm);

        // FFN
        grads[idx(LayerParam::Ffn2)]
            .add_assign(&dr2.t_matmul(&c.g_q).expect("ffn2 grad"))
            .expect("shape");
        add_bias_grad(&mut grads[idx(LayerParam::Ffn2Bias)], &dr2);
        let dgact = dr2
            .matmul(&params[idx(LayerParam::Ffn2)])
            .expect("ffn2 backprop");
        let mut dh1 = dgact;
        for (v, h) in dh1.as_mut_slice().iter_mut().zip(c.h1.as_slice()) {
            *v = T::from_f64_lossy(v.as_f64() * gelu_grad(h.as_f64()));
        }
        grads[idx(LayerParam::Ffn1)]
            .add_assign(&dh1.t_matmul(&c.x1_q).expect("ffn1 grad"))
            .expect("shape");
        add_bias_grad(&mut grads[idx(LayerParam::Ffn1Bias)], &dh1);
        let mut dx1 = dh1
            .matmul(&params[idx(LayerParam::Ffn1)])
            .expect("ffn1 backprop");
        dx1.add_assign(&dr2).expect("residual");

        let norm = (
            idx(LayerParam::AttnNormGamma),
            idx(LayerParam::AttnNormBeta),
        );
        let dr1 = layer_norm_backward(&dx1, &c.norm1, &params[norm.0], grads, norm);

        // Attention
        grads[idx(LayerParam::AttnOutput)]
            .add_assign(&dr1.t_matmul(&c.attn_q).expect("wo grad"))
            .expect("shape");
        add_bias_grad(&mut grads[idx(LayerParam::AttnOutputBias)], &dr1);
        let dattn = dr1
            .matmul(&params[idx(LayerParam::AttnOutput)])
            .expect("wo backprop");
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for h in 0..g.heads {
            let (qh, kh, vh) = (
                head_cols(&c.q, h, dh),
                head_cols(&c.k, h, dh),
                head_cols(&c.v, h, dh),
            );
            let doh = head_cols(&dattn, h, dh);
            let pm = &c.probs[h];
            let dp = doh.matmul_t(&vh).expect("dP");
            let dvh = pm.t_matmul(&doh).expect("dV");
            let mut ds = Matrix::<T>::zeros(n, n);
            for r in 0..n {
                let dot: f64 = (0..n)
                    .map(|j| dp.get(r, j).as_f64() * pm.get(r, j).as_f64())
                    .sum();
                for j in 0..n {
                    let v = pm.get(r, j).as_f64() * (dp.get(r, j).as_f64() - dot) * scale;
                    ds.set(r, j, T::from_f64_lossy(v));
                }
            }
            let dqh = ds.matmul(&kh).expect("dQ");
            let dkh = ds.t_matmul(&qh).expect("dK");
            for r in 0..n {
                dq.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(dqh.row(r));
                dk.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(dkh.row(r));
                dv.row_mut(r)[h * dh..(h + 1) * dh].copy_from_slice(dvh.row(r));
            }
        }
        let mut dxin = dr1;
        for (dy, w, b) in [
            (&dq, LayerParam::Query, LayerParam::QueryBias),
            (&dk, LayerParam::Key, LayerParam::KeyBias),
            (&dv, LayerParam::Value, LayerParam::ValueBias),
        ] {
            grads[idx(w)]
                .add_assign(&dy.t_matmul(&c.x_q).expect("qkv grad"))
                .expect("shape");
            add_bias_grad(&mut grads[idx(b)], dy);
            dxin.add_assign(&dy.matmul(&params[idx(w)]).expect("qkv backprop"))
                .expect("shape");
        }
        dx = dxin;
    }

    for (r, &id) in trace.ids.iter().enumerate() {
        for (cidx, &v) in dx.row(r).iter().enumerate() {
            let t = grads[TOKEN_EMBED].get(id, cidx);
            grads[TOKEN_EMBED].set(id, cidx, t + v);
            let p = grads[POS_EMBED].get(r, cidx);
            grads[POS_EMBED].set(r, cidx, p + v);
        }
    }
}

fn zero_grads<T: Scalar>(params: &[Matrix<T>]) -> Vec<Matrix<T>> {
    params
        .iter()
        .map(|p| Matrix::zeros(p.rows(), p.cols()))
        .collect()
}

/// Mean softmax cross-entropy over `batch` and its gradient for every
/// parameter. Examples are processed in parallel and reduced in batch order,
/// so the result does not depend on the thread count.
pub fn loss_and_grads<T: Scalar>(
    g: &Geometry,
    params: &[Matrix<T>],
    batch: &[&Example],
    opts: &ForwardOptions,
) -> (f64, Vec<Matrix<T>>) {
    assert!(!batch.is_empty(), "empty batch");
    let inv = 1.0 / batch.len() as f64;
    let per_example: Vec<(f64, Vec<Matrix<T>>)> = batch
        .par_iter()
        .map(|ex| {
            let trace = run(g, params, &ex.tokens, opts);
            let logits: Vec<f64> = trace.logits.iter().map(|v| v.as_f64()).collect();
            let (loss, mut dl) = cross_entropy(&logits, ex.label);
            dl.iter_mut().for_each(|v| *v *= inv);
            let mut grads = zero_grads(params);
            backward(g, params, &trace, &dl, &mut grads);
            (loss, grads)
        })
        .collect();
    let mut total = 0.0;
    let mut grads = zero_grads(params);
    for (loss, gs) in per_example {
        total += loss;
        for (acc, gi) in grads.iter_mut().zip(&gs) {
            acc.add_assign(gi).expect("grad shapes");
        }
    }
    (total * inv, grads)
}
