//! Shared test fixtures and oracles.
//!
//! The dense attention layer here is written as straight loops over every
//! query/key pair, independent of the library's windowing and graph code,
//! so it can serve as a brute-force reference.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lowlight::image::{save_image, RgbImage};
use lowlight::model::attention::AttentionParams;
use lowlight::model::{ArchConfig, ModelParams};
use lowlight::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
}

pub fn random_image(h: usize, w: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> RgbImage {
    RgbImage::new(
        h,
        w,
        (0..h * w * 3).map(|_| rng.gen_range(lo..hi)).collect(),
    )
}

pub fn random_mask(h: usize, w: usize, ones_fraction: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::new(
        vec![h, w],
        (0..h * w)
            .map(|_| if rng.gen_bool(ones_fraction) { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Micro network used by the gradient suites.
pub fn micro_arch() -> ArchConfig {
    ArchConfig {
        channels: 4,
        res_blocks: 1,
        blocks: 1,
        layers_per_block: 1,
        window: 2,
        heads: 2,
        mlp_ratio: 2,
    }
}

/// Attention layer parameters with every tensor randomized (including the
/// normally-neutral norm parameters) so gradient paths are all exercised.
pub fn random_attention_params(
    c: usize,
    heads: usize,
    window: usize,
    mlp_ratio: usize,
    rng: &mut ChaCha8Rng,
) -> AttentionParams<f64> {
    let side = 2 * window - 1;
    let hidden = c * mlp_ratio;
    AttentionParams {
        wq: random_tensor(&[c, c], 0.4, rng),
        wk: random_tensor(&[c, c], 0.4, rng),
        wv: random_tensor(&[c, c], 0.4, rng),
        wo: random_tensor(&[c, c], 0.4, rng),
        rel_bias: random_tensor(&[side * side, heads], 0.3, rng),
        heads,
        window,
        norm1: lowlight::model::attention::LayerNormParams {
            gamma: random_tensor(&[c], 0.5, rng).map(|v| 1.0 + v),
            beta: random_tensor(&[c], 0.2, rng),
        },
        norm2: lowlight::model::attention::LayerNormParams {
            gamma: random_tensor(&[c], 0.5, rng).map(|v| 1.0 + v),
            beta: random_tensor(&[c], 0.2, rng),
        },
        fc1_weight: random_tensor(&[c, hidden], 0.4, rng),
        fc1_bias: random_tensor(&[hidden], 0.2, rng),
        fc2_weight: random_tensor(&[hidden, c], 0.4, rng),
        fc2_bias: random_tensor(&[c], 0.2, rng),
    }
}

/// Randomize every parameter of a freshly initialized model (biases and
/// norms included) for gradient probing.
pub fn randomized_model(arch: ArchConfig, seed: u64) -> ModelParams<f64> {
    let mut params = ModelParams::<f64>::init(arch, seed).unwrap();
    let mut r = rng(seed ^ 0xabcd);
    for (_, t) in params.named_mut() {
        for v in t.data_mut() {
            *v = r.gen_range(-0.4..0.4);
        }
    }
    params
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub struct ProbeReport {
    pub probed: usize,
    pub max_rel_err: f64,
}

/// Probe `probes` random parameter coordinates with central differences and
/// compare against `analytic` (in `ModelParams::named` order).
pub fn probe_param_grads(
    base: &ModelParams<f64>,
    analytic: &[(String, Tensor<f64>)],
    eval: &dyn Fn(&ModelParams<f64>) -> f64,
    probes: usize,
    seed: u64,
    tol: f64,
) -> ProbeReport {
    let mut r = rng(seed);
    let sizes: Vec<usize> = base.named().iter().map(|(_, t)| t.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut max_rel = 0.0_f64;
    let h = 1e-5;
    for _ in 0..probes {
        let mut flat = r.gen_range(0..total);
        let mut tensor_idx = 0;
        while flat >= sizes[tensor_idx] {
            flat -= sizes[tensor_idx];
            tensor_idx += 1;
        }
        let eval_at = |delta: f64| {
            let mut p = base.clone();
            p.named_mut()[tensor_idx].1.data_mut()[flat] += delta;
            eval(&p)
        };
        let fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        let an = analytic[tensor_idx].1.data()[flat];
        let e = rel_err(an, fd);
        assert!(
            e < tol,
            "param {} coord {flat}: analytic {an} vs fd {fd} (rel err {e})",
            analytic[tensor_idx].0
        );
        max_rel = max_rel.max(e);
    }
    ProbeReport {
        probed: probes,
        max_rel_err: max_rel,
    }
}

// ---------------------------------------------------------------------------
// dense attention oracle (independent of the library implementation)
// ---------------------------------------------------------------------------

fn gelu_ref(x: f64) -> f64 {
    let k = 0.7978845608028654_f64;
    let u = k * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn layer_norm_ref(row: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let c = row.len() as f64;
    let mu = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c;
    let sd = (var + 1e-5).sqrt();
    row.iter()
        .enumerate()
        .map(|(i, &v)| (v - mu) / sd * gamma[i] + beta[i])
        .collect()
}

fn softmax_ref(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Brute-force SNR-aware attention layer on `[h, w, c]`, explicit loops over
/// all query/key pairs, replicate padding, cyclic roll, region visibility
/// rule and the two-layer MLP. Mirrors the layer contract, not the code.
pub fn dense_attention_layer(
    f: &Tensor<f64>,
    mask: Option<&Tensor<f64>>,
    params: &AttentionParams<f64>,
    shift: usize,
) -> Tensor<f64> {
    let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let m = params.window;
    let heads = params.heads;
    let d = c / heads;
    let hp = h.div_ceil(m) * m;
    let wp = w.div_ceil(m) * m;
    let delta = -1e9;

    // layer norm 1
    let mut normed = vec![0.0; h * w * c];
    for px in 0..h * w {
        let row = &f.data()[px * c..(px + 1) * c];
        normed[px * c..(px + 1) * c].copy_from_slice(&layer_norm_ref(
            row,
            params.norm1.gamma.data(),
            params.norm1.beta.data(),
        ));
    }

    // padded + rolled canvas of normed features and mask
    let canvas = |y: usize, x: usize| -> (usize, usize) {
        // rolled coordinate (y, x) reads padded cell ((y+shift)%hp, (x+shift)%wp)
        let py = (y + shift) % hp;
        let px = (x + shift) % wp;
        (py, px)
    };
    let feature_at = |y: usize, x: usize, ch: usize| -> f64 {
        let (py, px) = canvas(y, x);
        let sy = py.min(h - 1);
        let sx = px.min(w - 1);
        normed[(sy * w + sx) * c + ch]
    };
    let mask_at = |y: usize, x: usize| -> f64 {
        let (py, px) = canvas(y, x);
        if py >= h || px >= w {
            1.0
        } else {
            mask.map_or(1.0, |mk| mk.data()[py * w + px])
        }
    };
    let region = |coord: usize, size: usize| -> usize {
        if size > m && coord < size - m {
            0
        } else if coord < size - shift {
            1
        } else {
            2
        }
    };

    let mut attended = vec![0.0; hp * wp * c];
    let pp = m * m;
    let side = 2 * m - 1;
    for wy in 0..hp / m {
        for wx in 0..wp / m {
            // gather window
            let mut xw = vec![0.0; pp * c];
            let mut sw = vec![0.0; pp];
            let mut ids = vec![0usize; pp];
            for p in 0..pp {
                let y = wy * m + p / m;
                let x = wx * m + p % m;
                for ch in 0..c {
                    xw[p * c + ch] = feature_at(y, x, ch);
                }
                sw[p] = mask_at(y, x);
                ids[p] = region(y, hp) * 3 + region(x, wp);
            }
            // projections
            let project = |wmat: &Tensor<f64>| -> Vec<f64> {
                let mut out = vec![0.0; pp * c];
                for p in 0..pp {
                    for j in 0..c {
                        let mut acc = 0.0;
                        for k in 0..c {
                            acc += xw[p * c + k] * wmat.data()[k * c + j];
                        }
                        out[p * c + j] = acc;
                    }
                }
                out
            };
            let q = project(&params.wq);
            let k = project(&params.wk);
            let v = project(&params.wv);

            let mut ctx = vec![0.0; pp * c];
            for hd in 0..heads {
                for p in 0..pp {
                    let mut logits = vec![0.0; pp];
                    for qq in 0..pp {
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += q[p * c + hd * d + j] * k[qq * c + hd * d + j];
                        }
                        let (py, px) = (p / m, p % m);
                        let (qy, qx) = (qq / m, qq % m);
                        let rel = (py + m - 1 - qy) * side + (px + m - 1 - qx);
                        let mut l = dot / (d as f64).sqrt()
                            + params.rel_bias.data()[rel * heads + hd];
                        if mask.is_some() {
                            l += delta * (1.0 - sw[p]) * (1.0 - sw[qq]);
                        }
                        if shift > 0 && ids[p] != ids[qq] {
                            l += delta;
                        }
                        logits[qq] = l;
                    }
                    softmax_ref(&mut logits);
                    for j in 0..d {
                        let mut acc = 0.0;
                        for qq in 0..pp {
                            acc += logits[qq] * v[qq * c + hd * d + j];
                        }
                        ctx[p * c + hd * d + j] = acc;
                    }
                }
            }
            // output projection, write into the rolled canvas
            for p in 0..pp {
                let y = wy * m + p / m;
                let x = wx * m + p % m;
                for j in 0..c {
                    let mut acc = 0.0;
                    for kk in 0..c {
                        acc += ctx[p * c + kk] * params.wo.data()[kk * c + j];
                    }
                    attended[(y * wp + x) * c + j] = acc;
                }
            }
        }
    }

    // un-roll, crop, add residual
    let mut f1 = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let ry = (y + hp - shift) % hp;
            let rx = (x + wp - shift) % wp;
            for ch in 0..c {
                f1[(y * w + x) * c + ch] =
                    f.data()[(y * w + x) * c + ch] + attended[(ry * wp + rx) * c + ch];
            }
        }
    }

    // MLP with residual
    let hidden = params.fc1_bias.numel();
    let mut out = vec![0.0; h * w * c];
    for px in 0..h * w {
        let z = layer_norm_ref(
            &f1[px * c..(px + 1) * c],
            params.norm2.gamma.data(),
            params.norm2.beta.data(),
        );
        let mut a = vec![0.0; hidden];
        for j in 0..hidden {
            let mut acc = params.fc1_bias.data()[j];
            for k in 0..c {
                acc += z[k] * params.fc1_weight.data()[k * hidden + j];
            }
            a[j] = gelu_ref(acc);
        }
        for j in 0..c {
            let mut acc = params.fc2_bias.data()[j];
            for k in 0..hidden {
                acc += a[k] * params.fc2_weight.data()[k * c + j];
            }
            out[px * c + j] = f1[px * c + j] + acc;
        }
    }
    Tensor::new(vec![h, w, c], out)
}

// ---------------------------------------------------------------------------
// dataset fixture
// ---------------------------------------------------------------------------

/// Write a LOL-v1 style tree of synthetic images. Training images are dark
/// (mean luma around `0.1`), eval pairs are a dark low and a bright high.
pub fn write_lol_v1_fixture(
    root: &Path,
    train_count: usize,
    eval_count: usize,
    train_size: (usize, usize),
    eval_size: (usize, usize),
    seed: u64,
) -> Vec<PathBuf> {
    let mut r = rng(seed);
    let mut written = Vec::new();
    for (dir, count, size, lo, hi) in [
        ("our485/low", train_count, train_size, 0.01, 0.25),
        ("our485/high", train_count, train_size, 0.5, 0.95),
        ("eval15/low", eval_count, eval_size, 0.01, 0.25),
        ("eval15/high", eval_count, eval_size, 0.5, 0.95),
    ] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).unwrap();
        for i in 0..count {
            let img = random_image(size.0, size.1, lo, hi, &mut r);
            let path = d.join(format!("{i:03}.png"));
            save_image(&img, &path).unwrap();
            written.push(path);
        }
    }
    written
}
