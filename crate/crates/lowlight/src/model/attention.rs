//! SNR-aware windowed multi-head self-attention.
//!
//! Per window, logits are `Q K^T / sqrt(d)` plus three additive biases:
//! a learnable relative-position term, a visibility term blocking pairs made
//! adjacent only by the cyclic shift, and the SNR term
//! `delta * (1 - s)(1 - s)^T` that suppresses message passing between
//! low-SNR positions. `delta` is -1e9, so after softmax a masked pair's
//! weight underflows to zero; a mask of all ones contributes exactly zero
//! bias and reproduces the unmasked layer bitwise.
//!
//! The SNR mask enters as a single channel per position. Stacking it across
//! feature channels, as one might with a per-channel map, would only scale
//! the rank-one bias term by the channel count, which is irrelevant next to
//! `delta`; the single-channel form is used throughout.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::windowing::{
    merge_map, partition_map, partition_mask, shift_visibility_bias, WindowGeometry,
};
use crate::tensor::{Scalar, Tensor};

/// Additive logit penalty for masked pairs.
pub const MASK_PENALTY: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Parameters of one attention layer: projections, relative-position bias
/// table, the two norms and the MLP.
#[derive(Clone, Debug)]
pub struct AttentionParams<T> {
    /// `[c, c]` query/key/value projections, shared across windows.
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    /// `[c, c]` output projection after head concatenation.
    pub wo: Tensor<T>,
    /// `[(2m-1)^2, heads]` relative-position bias table.
    pub rel_bias: Tensor<T>,
    pub heads: usize,
    pub window: usize,
    pub norm1: LayerNormParams<T>,
    pub norm2: LayerNormParams<T>,
    /// MLP `c -> r*c -> c`.
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if t.shape() != [c, c] {
                return Err(Error::Argument(format!(
                    "{name} must be [{c}, {c}], got {:?}",
                    t.shape()
                )));
            }
        }
        if self.heads == 0 || c % self.heads != 0 {
            return Err(Error::Argument(format!(
                "channel count {c} not divisible by head count {}",
                self.heads
            )));
        }
        let side = 2 * self.window - 1;
        if self.rel_bias.shape() != [side * side, self.heads] {
            return Err(Error::Argument(format!(
                "relative bias table must be [{}, {}], got {:?}",
                side * side,
                self.heads,
                self.rel_bias.shape()
            )));
        }
        Ok(())
    }
}

/// Graph handles for one layer's parameters.
#[derive(Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub rel_bias: Var,
    pub norm1_gamma: Var,
    pub norm1_beta: Var,
    pub norm2_gamma: Var,
    pub norm2_beta: Var,
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
    pub heads: usize,
    pub window: usize,
}

/// `delta * (1 - s_p)(1 - s_q)` for every window, `[nw, pp, pp]`.
pub(crate) fn snr_bias(mask_windows: &Tensor<f64>, delta: f64) -> Tensor<f64> {
    let (nw, pp) = (mask_windows.shape()[0], mask_windows.shape()[1]);
    let mut out = vec![0.0; nw * pp * pp];
    for z in 0..nw {
        let s = &mask_windows.data()[z * pp..(z + 1) * pp];
        for p in 0..pp {
            let ap = 1.0 - s[p];
            if ap == 0.0 {
                continue;
            }
            for q in 0..pp {
                out[(z * pp + p) * pp + q] = delta * ap * (1.0 - s[q]);
            }
        }
    }
    Tensor::new(vec![nw, pp, pp], out)
}

fn head_split_map(nw: usize, pp: usize, c: usize, heads: usize) -> Arc<Vec<usize>> {
    let d = c / heads;
    let mut idx = Vec::with_capacity(nw * pp * c);
    for z in 0..nw {
        for hd in 0..heads {
            for p in 0..pp {
                let base = (z * pp + p) * c + hd * d;
                idx.extend(base..base + d);
            }
        }
    }
    Arc::new(idx)
}

fn head_transpose_map(nw: usize, pp: usize, c: usize, heads: usize) -> Arc<Vec<usize>> {
    let d = c / heads;
    let mut idx = Vec::with_capacity(nw * pp * c);
    for z in 0..nw {
        for hd in 0..heads {
            for j in 0..d {
                for p in 0..pp {
                    idx.push((z * pp + p) * c + hd * d + j);
                }
            }
        }
    }
    Arc::new(idx)
}

fn head_merge_map(nw: usize, pp: usize, c: usize, heads: usize) -> Arc<Vec<usize>> {
    let d = c / heads;
    let mut idx = Vec::with_capacity(nw * pp * c);
    for z in 0..nw {
        for p in 0..pp {
            for hd in 0..heads {
                let base = ((z * heads + hd) * pp + p) * d;
                idx.extend(base..base + d);
            }
        }
    }
    Arc::new(idx)
}

fn relative_bias_map(window: usize, heads: usize, nw: usize) -> Arc<Vec<usize>> {
    let m = window;
    let pp = m * m;
    let side = 2 * m - 1;
    let mut per_head = vec![0usize; pp * pp];
    for p in 0..pp {
        let (py, px) = (p / m, p % m);
        for q in 0..pp {
            let (qy, qx) = (q / m, q % m);
            let dy = py + m - 1 - qy;
            let dx = px + m - 1 - qx;
            per_head[p * pp + q] = dy * side + dx;
        }
    }
    let mut idx = Vec::with_capacity(nw * heads * pp * pp);
    for _z in 0..nw {
        for hd in 0..heads {
            idx.extend(per_head.iter().map(|&row| row * heads + hd));
        }
    }
    Arc::new(idx)
}

/// Multi-head attention over all windows at once.
///
/// `x` is `[nw, pp, c]`; `extra_bias`, when present, is a per-window
/// `[nw, pp, pp]` additive logit bias (SNR mask plus shift visibility),
/// shared across heads. Returns the projected output `[nw, pp, c]` and the
/// post-softmax weights `[nw * heads, pp, pp]`.
pub fn window_attention_graph<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    vars: &AttentionVars,
    extra_bias: Option<&Tensor<f64>>,
) -> (Var, Var) {
    let shape = g.shape(x);
    let (nw, pp, c) = (shape[0], shape[1], shape[2]);
    let heads = vars.heads;
    let d = c / heads;

    let flat = g.reshape(x, vec![nw * pp, c]);
    let q = g.matmul(flat, vars.wq);
    let k = g.matmul(flat, vars.wk);
    let v = g.matmul(flat, vars.wv);

    let split = head_split_map(nw, pp, c, heads);
    let qh = g.gather(q, split.clone(), vec![nw * heads, pp, d]);
    let kt = g.gather(k, head_transpose_map(nw, pp, c, heads), vec![nw * heads, d, pp]);
    let vh = g.gather(v, split, vec![nw * heads, pp, d]);

    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let mut logits = g.mul_const(g.batch_matmul(qh, kt), scale);

    let rel = g.gather(
        vars.rel_bias,
        relative_bias_map(vars.window, heads, nw),
        vec![nw * heads, pp, pp],
    );
    logits = g.add(logits, rel);

    if let Some(bias) = extra_bias {
        debug_assert_eq!(bias.shape(), &[nw, pp, pp]);
        let mut data = Vec::with_capacity(nw * heads * pp * pp);
        for z in 0..nw {
            let w = &bias.data()[z * pp * pp..(z + 1) * pp * pp];
            for _hd in 0..heads {
                data.extend(w.iter().map(|&v| T::from_f64(v)));
            }
        }
        let b = g.constant(Tensor::new(vec![nw * heads, pp, pp], data));
        logits = g.add(logits, b);
    }

    let attn = g.softmax_last(logits);
    let ctx = g.batch_matmul(attn, vh);
    let merged = g.gather(ctx, head_merge_map(nw, pp, c, heads), vec![nw * pp, c]);
    let out = g.reshape(g.matmul(merged, vars.wo), vec![nw, pp, c]);
    (out, attn)
}

pub fn bind_attention<T: Scalar>(
    binder: &mut crate::model::Binder<'_, T>,
    prefix: &str,
    p: &AttentionParams<T>,
) -> AttentionVars {
    AttentionVars {
        wq: binder.bind(&format!("{prefix}.attn.wq"), &p.wq),
        wk: binder.bind(&format!("{prefix}.attn.wk"), &p.wk),
        wv: binder.bind(&format!("{prefix}.attn.wv"), &p.wv),
        wo: binder.bind(&format!("{prefix}.attn.wo"), &p.wo),
        rel_bias: binder.bind(&format!("{prefix}.attn.rel_bias"), &p.rel_bias),
        norm1_gamma: binder.bind(&format!("{prefix}.norm1.gamma"), &p.norm1.gamma),
        norm1_beta: binder.bind(&format!("{prefix}.norm1.beta"), &p.norm1.beta),
        norm2_gamma: binder.bind(&format!("{prefix}.norm2.gamma"), &p.norm2.gamma),
        norm2_beta: binder.bind(&format!("{prefix}.norm2.beta"), &p.norm2.beta),
        fc1_weight: binder.bind(&format!("{prefix}.mlp.fc1.weight"), &p.fc1_weight),
        fc1_bias: binder.bind(&format!("{prefix}.mlp.fc1.bias"), &p.fc1_bias),
        fc2_weight: binder.bind(&format!("{prefix}.mlp.fc2.weight"), &p.fc2_weight),
        fc2_bias: binder.bind(&format!("{prefix}.mlp.fc2.bias"), &p.fc2_bias),
        heads: p.heads,
        window: p.window,
    }
}

/// One full layer: pre-norm attention with residual, then pre-norm MLP with
/// residual. `f` is `[h, w, c]`; `mask`, when SNR guidance is on, is the
/// `[h, w]` binary map partitioned alongside the features (padding counts
/// as unmasked). Shifted calls add the cyclic-shift visibility bias.
pub fn attention_layer_graph<T: Scalar>(
    g: &Graph<T>,
    f: Var,
    mask: Option<&Tensor<f64>>,
    vars: &AttentionVars,
    shift: usize,
) -> Var {
    let shape = g.shape(f);
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let geom = WindowGeometry::new(h, w, vars.window, shift);

    let mut bias = mask.map(|m| snr_bias(&partition_mask(m, &geom), MASK_PENALTY));
    if let Some(vis) = shift_visibility_bias(&geom, MASK_PENALTY) {
        bias = Some(match bias {
            Some(b) => {
                let data = b
                    .data()
                    .iter()
                    .zip(vis.data())
                    .map(|(&a, &v)| a + v)
                    .collect();
                Tensor::new(vis.shape().to_vec(), data)
            }
            None => vis,
        });
    }

    let normed = g.layer_norm(
        g.reshape(f, vec![h * w, c]),
        vars.norm1_gamma,
        vars.norm1_beta,
        T::from_f64(1e-5),
    );
    let (pmap, pshape) = partition_map(&geom, c);
    let windows = g.gather(normed, pmap, pshape);
    let (attn_out, _) = window_attention_graph(g, windows, vars, bias.as_ref());
    let (mmap, mshape) = merge_map(&geom, c);
    let merged = g.gather(attn_out, mmap, mshape);
    let f = g.add(f, merged);

    let normed = g.layer_norm(
        g.reshape(f, vec![h * w, c]),
        vars.norm2_gamma,
        vars.norm2_beta,
        T::from_f64(1e-5),
    );
    let hidden = g.shape(vars.fc1_bias)[0];
    let b1 = g.gather(
        vars.fc1_bias,
        Arc::new((0..h * w * hidden).map(|i| i % hidden).collect()),
        vec![h * w, hidden],
    );
    let a = g.gelu(g.add(g.matmul(normed, vars.fc1_weight), b1));
    let b2 = g.gather(
        vars.fc2_bias,
        Arc::new((0..h * w * c).map(|i| i % c).collect()),
        vec![h * w, c],
    );
    let mlp = g.add(g.matmul(a, vars.fc2_weight), b2);
    g.add(f, g.reshape(mlp, vec![h, w, c]))
}

fn validate_binary(s: &Tensor<f64>) -> Result<()> {
    if s.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Argument(
            "SNR mask must be binary (0 or 1)".to_string(),
        ));
    }
    Ok(())
}

/// Single-window SNR-masked attention: `x` is `[m*m, c]`, `s` the binary
/// per-position mask, `shift_mask` an additive `[m*m, m*m]` logit bias.
/// Returns the attended features.
pub fn snr_attention<T: Scalar>(
    x: &Tensor<T>,
    s: &Tensor<f64>,
    params: &AttentionParams<T>,
    shift_mask: &Tensor<f64>,
) -> Result<Tensor<T>> {
    snr_attention_with_weights(x, s, params, shift_mask).map(|(out, _)| out)
}

/// As [`snr_attention`] but also returns the `[heads, m*m, m*m]`
/// post-softmax attention weights.
pub fn snr_attention_with_weights<T: Scalar>(
    x: &Tensor<T>,
    s: &Tensor<f64>,
    params: &AttentionParams<T>,
    shift_mask: &Tensor<f64>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    params.validate()?;
    validate_binary(s)?;
    let pp = params.window * params.window;
    if x.shape() != [pp, params.channels()] {
        return Err(Error::Argument(format!(
            "expected features [{pp}, {}], got {:?}",
            params.channels(),
            x.shape()
        )));
    }
    if s.shape() != [pp] {
        return Err(Error::Argument(format!(
            "expected mask [{pp}], got {:?}",
            s.shape()
        )));
    }
    if shift_mask.shape() != [pp, pp] {
        return Err(Error::Argument(format!(
            "expected shift mask [{pp}, {pp}], got {:?}",
            shift_mask.shape()
        )));
    }

    let g: Graph<T> = Graph::new();
    let mut binder = crate::model::Binder::constants(&g);
    let vars = bind_attention(&mut binder, "layer", params);
    let xv = g.constant(x.clone().reshaped(vec![1, pp, params.channels()]));

    let mask_windows = s.clone().reshaped(vec![1, pp]);
    let mut bias = snr_bias(&mask_windows, MASK_PENALTY);
    for (b, &m) in bias.data_mut().iter_mut().zip(shift_mask.data()) {
        *b += m;
    }
    let (out, weights) = window_attention_graph(&g, xv, &vars, Some(&bias));
    Ok((
        g.value(out).reshaped(vec![pp, params.channels()]),
        g.value(weights)
            .reshaped(vec![params.heads, pp, pp]),
    ))
}
