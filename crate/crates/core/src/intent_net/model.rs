//! Forward pass, reverse-mode gradients and the BCE objective.
//!
//! Activations for a batch are stacked as `(bs·sw) × channels` matrices so every
//! dense map is one matmul; attention, pooling and normalization stay per sample
//! (or per row), which keeps samples independent of each other.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{Linear, ModelConfig, ModelParams, Norm};
use super::tensor::{gemm, sigmoid, softmax_in_place, Mat};
use super::NetError;
use crate::features::WindowBatch;

pub const PROB_CLAMP: f64 = 1e-7;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks drawn from a generator seeded with `dropout_seed`.
    Train { dropout_seed: u64 },
}

/// Deliberate gradient corruption, used as a negative control for the gradient
/// checker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradFault {
    ScaleFfn(f64),
}

/// Sinusoidal positional encoding, `sw × d_model`.
pub fn positional_encoding(sw: usize, d_model: usize) -> Result<Mat, NetError> {
    if d_model % 2 != 0 {
        return Err(NetError::Config(format!(
            "positional encoding needs an even d_model, got {d_model}"
        )));
    }
    let mut pe = Mat::zeros(sw, d_model);
    for pos in 0..sw {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            pe.data[pos * d_model + 2 * i] = angle.sin();
            pe.data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

struct NormCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: NormCache,
    a: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<f64>,
    o: Mat,
    mask_attn: Option<Vec<f64>>,
    ln2: NormCache,
    c: Mat,
    u: Mat,
    r: Mat,
    mask_ffn: Option<Vec<f64>>,
}

/// Everything the backward pass needs, plus the outputs.
pub struct Trace {
    pub bs: usize,
    pub sw: usize,
    input: Mat,
    cols: Vec<Mat>,
    /// Post-ReLU concatenated conv output, `(bs·sw) × channels`.
    h: Mat,
    s: Mat,
    z_pre: Mat,
    z: Mat,
    gate: Mat,
    layers: Vec<LayerCache>,
    cat: Mat,
    h1_pre: Mat,
    hd: Mat,
    mask_head: Option<Vec<f64>>,
    pub logits: Vec<f64>,
    pub y_hat: Vec<f64>,
}

impl Trace {
    /// Attention probabilities of one encoder layer, laid out `[sample][head][query][key]`.
    pub fn attention(&self, layer: usize) -> &[f64] {
        &self.layers[layer].probs
    }

    /// Channel-attention gates, `bs × channels`.
    pub fn gates(&self) -> &Mat {
        &self.gate
    }

    /// Mean-pooled conv output before gating, `bs × channels`.
    pub fn pooled_conv(&self) -> &Mat {
        &self.s
    }

    /// Hash of every ReLU on/off decision and probability clamp in the pass.
    /// Two passes with the same pattern lie on the same smooth piece of the loss.
    pub fn activation_pattern(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut feed = |bit: bool| {
            h ^= bit as u64 + 1;
            h = h.wrapping_mul(0x100000001b3);
        };
        self.h.data.iter().for_each(|v| feed(*v > 0.0));
        self.z_pre.data.iter().for_each(|v| feed(*v > 0.0));
        for l in &self.layers {
            l.u.data.iter().for_each(|v| feed(*v > 0.0));
        }
        self.h1_pre.data.iter().for_each(|v| feed(*v > 0.0));
        for y in &self.y_hat {
            feed(*y <= PROB_CLAMP || *y >= 1.0 - PROB_CLAMP);
        }
        h
    }
}

fn linear_forward(x: &Mat, l: &Linear) -> Mat {
    debug_assert_eq!(x.cols, l.n_in);
    let mut out = Mat::zeros(x.rows, l.n_out);
    if !l.b.is_empty() {
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&l.b);
        }
    }
    gemm(x.rows, l.n_in, l.n_out, &x.data, false, &l.w, false, 1.0, &mut out.data);
    out
}

/// Accumulates weight gradients into `g`; returns `dy·Wᵀ` when requested.
fn linear_backward(x: &Mat, l: &Linear, dy: &Mat, g: &mut Linear, need_dx: bool) -> Option<Mat> {
    gemm(l.n_in, x.rows, l.n_out, &x.data, true, &dy.data, false, 1.0, &mut g.w);
    for r in 0..dy.rows {
        for (gb, d) in g.b.iter_mut().zip(dy.row(r)) {
            *gb += d;
        }
    }
    need_dx.then(|| {
        let mut dx = Mat::zeros(dy.rows, l.n_in);
        gemm(dy.rows, l.n_out, l.n_in, &dy.data, false, &l.w, true, 0.0, &mut dx.data);
        dx
    })
}

fn layer_norm_forward(x: &Mat, n: &Norm) -> (Mat, NormCache) {
    let d = x.cols;
    let mut xhat = Mat::zeros(x.rows, d);
    let mut out = Mat::zeros(x.rows, d);
    let mut rstd = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for j in 0..d {
            xh[j] = (row[j] - mean) * rs;
        }
        let o = &mut out.data[r * d..(r + 1) * d];
        for j in 0..d {
            o[j] = xhat.data[r * d + j] * n.gain[j] + n.bias[j];
        }
    }
    (out, NormCache { xhat, rstd })
}

fn layer_norm_backward(dy: &Mat, cache: &NormCache, n: &Norm, g: &mut Norm) -> Mat {
    let d = dy.cols;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..d {
            g.gain[j] += dyr[j] * xh[j];
            g.bias[j] += dyr[j];
            dxhat[j] = dyr[j] * n.gain[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for j in 0..d {
            out[j] = rs * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

fn dropout(x: &mut Mat, p: f64, rng: &mut Option<ChaCha8Rng>) -> Option<Vec<f64>> {
    let rng = rng.as_mut()?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.data.len())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    x.data.iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
    Some(mask)
}

fn apply_mask(d: &mut Mat, mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        d.data.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
    }
}

fn check(m: &Mat, layer: &str) -> Result<(), NetError> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(NetError::NonFinite(layer.to_string()))
    }
}

/// Mean over the time axis of a stacked `(bs·sw) × c` matrix.
fn time_mean(x: &Mat, bs: usize, sw: usize) -> Mat {
    let c = x.cols;
    let mut out = Mat::zeros(bs, c);
    for b in 0..bs {
        let o = &mut out.data[b * c..(b + 1) * c];
        for t in 0..sw {
            for (ov, xv) in o.iter_mut().zip(x.row(b * sw + t)) {
                *ov += xv;
            }
        }
        o.iter_mut().for_each(|v| *v /= sw as f64);
    }
    out
}

fn im2col(input: &Mat, bs: usize, sw: usize, k: usize) -> Mat {
    let f = input.cols;
    let pad = (k - 1) / 2;
    let mut cols = Mat::zeros(bs * sw, k * f);
    for b in 0..bs {
        for t in 0..sw {
            let row = cols.row_mut(b * sw + t);
            for kk in 0..k {
                let src = t as isize + kk as isize - pad as isize;
                if src < 0 || src >= sw as isize {
                    continue;
                }
                row[kk * f..(kk + 1) * f].copy_from_slice(input.row(b * sw + src as usize));
            }
        }
    }
    cols
}

/// Run the network on a batch. Returns the trace holding activations and the
/// per-sample probabilities `y_hat`.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &WindowBatch,
    mode: Mode,
) -> Result<Trace, NetError> {
    config.validate()?;
    let (bs, sw, nf) = (batch.bs, batch.sw, config.num_features);
    if bs == 0 || sw == 0 {
        return Err(NetError::Shape("empty batch".into()));
    }
    if batch.values.len() != bs * sw * nf {
        return Err(NetError::Shape(format!(
            "batch holds {} values, expected {bs}×{sw}×{nf}",
            batch.values.len()
        )));
    }
    if !params.matches(config) {
        return Err(NetError::Shape("parameters do not match model config".into()));
    }
    let mut rng = match mode {
        Mode::Eval => None,
        Mode::Train { dropout_seed } => Some(ChaCha8Rng::seed_from_u64(dropout_seed)),
    };
    let p_drop = config.dropout;
    let input = Mat::from_vec(bs * sw, nf, batch.values.clone());
    check(&input, "input")?;

    // Conv branch: three same-padded scales, ReLU, channel concat.
    let c_per = config.conv_channels_per_scale;
    let c_all = config.conv_channels();
    let mut h = Mat::zeros(bs * sw, c_all);
    let mut cols = Vec::with_capacity(3);
    for (si, &k) in config.kernel_scales.iter().enumerate() {
        let col = im2col(&input, bs, sw, k);
        let y = linear_forward(&col, &params.conv[si]);
        for r in 0..bs * sw {
            let dst = &mut h.data[r * c_all + si * c_per..r * c_all + (si + 1) * c_per];
            for (d, v) in dst.iter_mut().zip(y.row(r)) {
                *d = v.max(0.0);
            }
        }
        cols.push(col);
    }
    check(&h, "conv")?;

    // Squeeze-excitation gate on the pooled channels.
    let s = time_mean(&h, bs, sw);
    let z_pre = linear_forward(&s, &params.se_reduce);
    let mut z = z_pre.clone();
    z.data.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut gate = linear_forward(&z, &params.se_expand);
    if config.channel_attention {
        gate.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    } else {
        gate.data.iter_mut().for_each(|v| *v = 1.0);
    }
    check(&gate, "channel_attention")?;

    // Transformer branch.
    let d = config.d_model;
    let mut x = linear_forward(&input, &params.in_proj);
    let pe = positional_encoding(sw, d)?;
    for b in 0..bs {
        for t in 0..sw {
            for (xv, pv) in x.row_mut(b * sw + t).iter_mut().zip(pe.row(t)) {
                *xv += pv;
            }
        }
    }
    let n_heads = config.n_heads;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(config.n_layers);
    for (li, lp) in params.layers.iter().enumerate() {
        let (a, ln1) = layer_norm_forward(&x, &lp.ln1);
        let q = linear_forward(&a, &lp.q);
        let k = linear_forward(&a, &lp.k);
        let v = linear_forward(&a, &lp.v);
        let mut probs = vec![0.0; bs * n_heads * sw * sw];
        let mut o = Mat::zeros(bs * sw, d);
        for b in 0..bs {
            for hh in 0..n_heads {
                let off = hh * dh;
                let pbase = (b * n_heads + hh) * sw * sw;
                for i in 0..sw {
                    let qi = &q.row(b * sw + i)[off..off + dh];
                    let prow = &mut probs[pbase + i * sw..pbase + (i + 1) * sw];
                    for (j, pv) in prow.iter_mut().enumerate() {
                        let kj = &k.row(b * sw + j)[off..off + dh];
                        *pv = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    softmax_in_place(prow);
                    let orow = &mut o.data[(b * sw + i) * d + off..(b * sw + i) * d + off + dh];
                    for (j, pv) in prow.iter().enumerate() {
                        let vj = &v.data[(b * sw + j) * d + off..(b * sw + j) * d + off + dh];
                        for (ov, vv) in orow.iter_mut().zip(vj) {
                            *ov += pv * vv;
                        }
                    }
                }
            }
        }
        let mut attn = linear_forward(&o, &lp.o);
        let mask_attn = dropout(&mut attn, p_drop, &mut rng);
        x.data.iter_mut().zip(&attn.data).for_each(|(xv, av)| *xv += av);
        let (c, ln2) = layer_norm_forward(&x, &lp.ln2);
        let u = linear_forward(&c, &lp.ffn1);
        let mut r = u.clone();
        r.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut f = linear_forward(&r, &lp.ffn2);
        let mask_ffn = dropout(&mut f, p_drop, &mut rng);
        x.data.iter_mut().zip(&f.data).for_each(|(xv, fv)| *xv += fv);
        check(&x, &format!("encoder layer {li}"))?;
        layers.push(LayerCache {
            ln1,
            a,
            q,
            k,
            v,
            probs,
            o,
            mask_attn,
            ln2,
            c,
            u,
            r,
            mask_ffn,
        });
    }
    let x_trans = time_mean(&x, bs, sw);

    // Fusion head.
    let mut cat = Mat::zeros(bs, config.head_in());
    for b in 0..bs {
        let row = cat.row_mut(b);
        for ch in 0..c_all {
            row[ch] = s.at(b, ch) * gate.at(b, ch);
        }
        row[c_all..].copy_from_slice(x_trans.row(b));
    }
    let h1_pre = linear_forward(&cat, &params.head_hidden);
    let mut hd = h1_pre.clone();
    hd.data.iter_mut().for_each(|v| *v = v.max(0.0));
    let mask_head = dropout(&mut hd, p_drop, &mut rng);
    let out = linear_forward(&hd, &params.head_out);
    check(&out, "head")?;
    let logits = out.data;
    let y_hat: Vec<f64> = logits.iter().map(|l| sigmoid(*l)).collect();

    Ok(Trace {
        bs,
        sw,
        input,
        cols,
        h,
        s,
        z_pre,
        z,
        gate,
        layers,
        cat,
        h1_pre,
        hd,
        mask_head,
        logits,
        y_hat,
    })
}

/// Probabilities for a batch in eval mode.
pub fn predict_proba(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &WindowBatch,
) -> Result<Vec<f64>, NetError> {
    Ok(forward(params, config, batch, Mode::Eval)?.y_hat)
}

/// Mean binary cross-entropy over clamped probabilities.
pub fn bce_loss(y_hat: &[f64], labels: &[f64]) -> f64 {
    let n = y_hat.len() as f64;
    y_hat
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Reverse pass from per-sample logit gradients.
pub fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    trace: &Trace,
    dlogits: &[f64],
    fault: Option<GradFault>,
) -> ModelParams {
    let mut g = ModelParams::zeros_like(config);
    let (bs, sw) = (trace.bs, trace.sw);
    let c_all = config.conv_channels();
    let c_per = config.conv_channels_per_scale;
    let d = config.d_model;

    // Head.
    let dout = Mat::from_vec(bs, 1, dlogits.to_vec());
    let mut dhd = linear_backward(&trace.hd, &params.head_out, &dout, &mut g.head_out, true)
        .expect("dx requested");
    apply_mask(&mut dhd, &trace.mask_head);
    for (dv, pre) in dhd.data.iter_mut().zip(&trace.h1_pre.data) {
        if *pre <= 0.0 {
            *dv = 0.0;
        }
    }
    let dcat = linear_backward(&trace.cat, &params.head_hidden, &dhd, &mut g.head_hidden, true)
        .expect("dx requested");

    // Transformer branch: mean-pool backward.
    let mut dx = Mat::zeros(bs * sw, d);
    for b in 0..bs {
        let src = &dcat.row(b)[c_all..];
        for t in 0..sw {
            for (dv, s) in dx.row_mut(b * sw + t).iter_mut().zip(src) {
                *dv = s / sw as f64;
            }
        }
    }
    let n_heads = config.n_heads;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    for (li, lp) in params.layers.iter().enumerate().rev() {
        let cache = &trace.layers[li];
        let gl = &mut g.layers[li];

        // FFN residual.
        let mut df = dx.clone();
        apply_mask(&mut df, &cache.mask_ffn);
        let mut dr = linear_backward(&cache.r, &lp.ffn2, &df, &mut gl.ffn2, true).expect("dx");
        for (dv, uv) in dr.data.iter_mut().zip(&cache.u.data) {
            if *uv <= 0.0 {
                *dv = 0.0;
            }
        }
        let dc = linear_backward(&cache.c, &lp.ffn1, &dr, &mut gl.ffn1, true).expect("dx");
        let dln2 = layer_norm_backward(&dc, &cache.ln2, &lp.ln2, &mut gl.ln2);
        dx.data.iter_mut().zip(&dln2.data).for_each(|(a, b)| *a += b);

        // Attention residual.
        let mut dattn = dx.clone();
        apply_mask(&mut dattn, &cache.mask_attn);
        let d_o = linear_backward(&cache.o, &lp.o, &dattn, &mut gl.o, true).expect("dx");
        let mut dq = Mat::zeros(bs * sw, d);
        let mut dk = Mat::zeros(bs * sw, d);
        let mut dv = Mat::zeros(bs * sw, d);
        let mut dp = vec![0.0; sw];
        for b in 0..bs {
            for hh in 0..n_heads {
                let off = hh * dh;
                let pbase = (b * n_heads + hh) * sw * sw;
                for i in 0..sw {
                    let prow = &cache.probs[pbase + i * sw..pbase + (i + 1) * sw];
                    let doi = &d_o.row(b * sw + i)[off..off + dh];
                    for j in 0..sw {
                        let vj = &cache.v.row(b * sw + j)[off..off + dh];
                        dp[j] = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                        let dvj = &mut dv.data[(b * sw + j) * d + off..(b * sw + j) * d + off + dh];
                        for (acc, o) in dvj.iter_mut().zip(doi) {
                            *acc += prow[j] * o;
                        }
                    }
                    let dot: f64 = prow.iter().zip(&dp).map(|(p, g)| p * g).sum();
                    let qi = &cache.q.data[(b * sw + i) * d + off..(b * sw + i) * d + off + dh];
                    for j in 0..sw {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &cache.k.data[(b * sw + j) * d + off..(b * sw + j) * d + off + dh];
                        let dqi = &mut dq.data[(b * sw + i) * d + off..(b * sw + i) * d + off + dh];
                        for (acc, kv) in dqi.iter_mut().zip(kj) {
                            *acc += ds * kv;
                        }
                        let dkj = &mut dk.data[(b * sw + j) * d + off..(b * sw + j) * d + off + dh];
                        for (acc, qv) in dkj.iter_mut().zip(qi) {
                            *acc += ds * qv;
                        }
                    }
                }
            }
        }
        let mut da = linear_backward(&cache.a, &lp.q, &dq, &mut gl.q, true).expect("dx");
        for (dy, lin, gl_lin) in [(&dk, &lp.k, &mut gl.k), (&dv, &lp.v, &mut gl.v)] {
            let part = linear_backward(&cache.a, lin, dy, gl_lin, true).expect("dx");
            da.data.iter_mut().zip(&part.data).for_each(|(a, b)| *a += b);
        }
        let dln1 = layer_norm_backward(&da, &cache.ln1, &lp.ln1, &mut gl.ln1);
        dx.data.iter_mut().zip(&dln1.data).for_each(|(a, b)| *a += b);
    }
    linear_backward(&trace.input, &params.in_proj, &dx, &mut g.in_proj, false);

    // Conv branch: X_conv = s ⊙ gate.
    let mut dxc = Mat::zeros(bs, c_all);
    for b in 0..bs {
        dxc.row_mut(b).copy_from_slice(&dcat.row(b)[..c_all]);
    }
    let mut ds = Mat::zeros(bs, c_all);
    for i in 0..bs * c_all {
        ds.data[i] = dxc.data[i] * trace.gate.data[i];
    }
    if config.channel_attention {
        let mut dgate_pre = Mat::zeros(bs, c_all);
        for i in 0..bs * c_all {
            let gv = trace.gate.data[i];
            dgate_pre.data[i] = dxc.data[i] * trace.s.data[i] * gv * (1.0 - gv);
        }
        let mut dz = linear_backward(&trace.z, &params.se_expand, &dgate_pre, &mut g.se_expand, true)
            .expect("dx");
        for (dv, pre) in dz.data.iter_mut().zip(&trace.z_pre.data) {
            if *pre <= 0.0 {
                *dv = 0.0;
            }
        }
        let ds2 = linear_backward(&trace.s, &params.se_reduce, &dz, &mut g.se_reduce, true)
            .expect("dx");
        ds.data.iter_mut().zip(&ds2.data).for_each(|(a, b)| *a += b);
    }
    for (si, col) in trace.cols.iter().enumerate() {
        let mut dy = Mat::zeros(bs * sw, c_per);
        for b in 0..bs {
            for t in 0..sw {
                let r = b * sw + t;
                let hrow = &trace.h.row(r)[si * c_per..(si + 1) * c_per];
                let dsrow = &ds.row(b)[si * c_per..(si + 1) * c_per];
                for ((dst, hv), dsv) in dy.row_mut(r).iter_mut().zip(hrow).zip(dsrow) {
                    if *hv > 0.0 {
                        *dst = dsv / sw as f64;
                    }
                }
            }
        }
        linear_backward(col, &params.conv[si], &dy, &mut g.conv[si], false);
    }

    if let Some(GradFault::ScaleFfn(f)) = fault {
        for l in &mut g.layers {
            for lin in [&mut l.ffn1, &mut l.ffn2] {
                lin.w.iter_mut().chain(lin.b.iter_mut()).for_each(|v| *v *= f);
            }
        }
    }
    g
}

/// Logit gradient of the mean clamped BCE. Zero where the probability sits on the
/// clamp.
pub fn bce_logit_grad(y_hat: &[f64], labels: &[f64]) -> Vec<f64> {
    let n = y_hat.len() as f64;
    y_hat
        .iter()
        .zip(labels)
        .map(|(p, y)| {
            if *p <= PROB_CLAMP || *p >= 1.0 - PROB_CLAMP {
                0.0
            } else {
                (p - y) / n
            }
        })
        .collect()
}

/// Mean BCE loss and its gradient with respect to every parameter.
pub fn loss_and_grads(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &WindowBatch,
    labels: &[f64],
    mode: Mode,
) -> Result<(f64, ModelParams), NetError> {
    let (loss, grads, _) = loss_and_grads_with(params, config, batch, labels, mode, None)?;
    Ok((loss, grads))
}

/// Loss, gradients and the forward-pass probabilities.
pub(crate) fn loss_and_grads_with(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &WindowBatch,
    labels: &[f64],
    mode: Mode,
    fault: Option<GradFault>,
) -> Result<(f64, ModelParams, Vec<f64>), NetError> {
    if labels.len() != batch.bs {
        return Err(NetError::Shape(format!(
            "{} labels for a batch of {}",
            labels.len(),
            batch.bs
        )));
    }
    if labels.iter().any(|y| *y != 0.0 && *y != 1.0) {
        return Err(NetError::Shape("labels must be 0 or 1".into()));
    }
    let trace = forward(params, config, batch, mode)?;
    let loss = bce_loss(&trace.y_hat, labels);
    let dlogits = bce_logit_grad(&trace.y_hat, labels);
    let grads = backward(params, config, &trace, &dlogits, fault);
    Ok((loss, grads, trace.y_hat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::WindowBatch;
    use rand::Rng;

    fn random_batch(bs: usize, sw: usize, seed: u64) -> WindowBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..bs * sw * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        WindowBatch::from_values(bs, sw, values, None).unwrap()
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(30, 48).unwrap();
        for j in 0..48 {
            assert_eq!(pe.at(0, j), if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe.at(1, 0) - 0.841471).abs() < 1e-6);
        assert!(pe.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(4, 7).is_err());
    }

    #[test]
    fn zero_input_with_zero_head_gives_half() {
        let cfg = ModelConfig::default();
        let mut p = ModelParams::init(&cfg).unwrap();
        p.head_out.w.iter_mut().for_each(|w| *w = 0.0);
        let batch = WindowBatch::from_values(2, 30, vec![0.0; 2 * 30 * 3], None).unwrap();
        let y = predict_proba(&p, &cfg, &batch).unwrap();
        assert_eq!(y, vec![0.5, 0.5]);
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg).unwrap();
        let batch = random_batch(3, 20, 1);
        let y = predict_proba(&p, &cfg, &batch).unwrap();
        let sample = |i: usize| batch.values[i * 60..(i + 1) * 60].to_vec();
        let permuted: Vec<f64> = [2, 0, 1].iter().flat_map(|&i| sample(i)).collect();
        let pb = WindowBatch::from_values(3, 20, permuted, None).unwrap();
        let yp = predict_proba(&p, &cfg, &pb).unwrap();
        assert_eq!(yp, vec![y[2], y[0], y[1]]);
    }

    #[test]
    fn eval_is_bitwise_deterministic() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg).unwrap();
        let batch = random_batch(4, 30, 9);
        let a = predict_proba(&p, &cfg, &batch).unwrap();
        let b = predict_proba(&p, &cfg, &batch).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg).unwrap();
        let batch = random_batch(2, 30, 3);
        let tr = forward(&p, &cfg, &batch, Mode::Eval).unwrap();
        for l in 0..cfg.n_layers {
            for row in tr.attention(l).chunks(30) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|v| *v >= 0.0));
            }
        }
        assert!(tr.gates().data.iter().all(|g| *g > 0.0 && *g < 1.0));
    }

    #[test]
    fn unit_gates_reduce_to_mean_pooled_conv() {
        let cfg = ModelConfig {
            channel_attention: false,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(&cfg).unwrap();
        let batch = random_batch(2, 30, 5);
        let tr = forward(&p, &cfg, &batch, Mode::Eval).unwrap();
        assert!(tr.gates().data.iter().all(|g| *g == 1.0));
        for b in 0..2 {
            for c in 0..48 {
                assert_eq!(tr.cat.at(b, c), tr.pooled_conv().at(b, c));
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg).unwrap();
        let batch = WindowBatch {
            bs: 2,
            sw: 30,
            values: vec![0.0; 10],
            labels: None,
        };
        assert!(matches!(predict_proba(&p, &cfg, &batch), Err(NetError::Shape(_))));
    }

    #[test]
    fn non_finite_input_names_the_layer() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg).unwrap();
        let mut batch = random_batch(1, 30, 2);
        batch.values[4] = f64::NAN;
        match predict_proba(&p, &cfg, &batch) {
            Err(NetError::NonFinite(layer)) => assert_eq!(layer, "input"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn half_probability_positive_label_costs_ln2() {
        assert!((bce_loss(&[0.5], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        let l1 = bce_loss(&[0.3, 0.8], &[0.0, 1.0]);
        let l2 = bce_loss(&[0.3, 0.8, 0.3, 0.8], &[0.0, 1.0, 0.0, 1.0]);
        assert!((l1 - l2).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_have_tiny_loss_and_no_gradient() {
        let l = bce_loss(&[1.0, 0.0], &[1.0, 0.0]);
        assert!(l < 1e-6 && l > 0.0);
        assert_eq!(bce_logit_grad(&[1.0, 0.0], &[1.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn duplicated_batch_keeps_mean_loss() {
        let cfg = ModelConfig::default();
        let p = ModelParams::init(&cfg).unwrap();
        let b = random_batch(2, 30, 11);
        let mut doubled = b.values.clone();
        doubled.extend_from_slice(&b.values);
        let bb = WindowBatch::from_values(4, 30, doubled, None).unwrap();
        let (l1, g1) = loss_and_grads(&p, &cfg, &b, &[1.0, 0.0], Mode::Eval).unwrap();
        let (l2, g2) = loss_and_grads(&p, &cfg, &bb, &[1.0, 0.0, 1.0, 0.0], Mode::Eval).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
