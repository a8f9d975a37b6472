//! Unsupervised training loop.
//!
//! Each step draws a batch of random crops from the low-light training
//! images, computes per-crop SNR guidance, runs the network forward, applies
//! the Retinex objective and takes one Adam step on the averaged gradients.
//! Normal-light images are never listed or opened.
//!
//! Determinism: the RNG for step `k` is derived from `(seed, k)` alone, so a
//! run resumed from a step-`k` checkpoint replays exactly the same batches
//! as an uninterrupted run logging one CSV row per step.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::dataset::{index_lol, random_crop, DatasetVersion, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::image::{load_image, RgbImage};
use crate::loss::{total_loss_graph, LossBreakdown, LossWeights};
use crate::model::{forward_graph, ArchConfig, ModelParams, SnrGuidance, SnrSettings};
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Everything a training run needs. Serializes to the same flat key=value
/// form used by config files and checkpoint snapshots.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub data_root: PathBuf,
    pub dataset: DatasetVersion,
    pub out_dir: PathBuf,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub crop: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub arch: ArchConfig,
    pub snr: SnrSettings,
    pub checkpoint_every: usize,
    /// Continue from this checkpoint instead of a fresh initialization.
    pub resume: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(data_root: PathBuf, dataset: DatasetVersion, out_dir: PathBuf) -> Self {
        Self {
            data_root,
            dataset,
            out_dir,
            iterations: 2000,
            batch_size: 4,
            learning_rate: 1e-3,
            crop: 128,
            seed: 0,
            weights: LossWeights::default(),
            arch: ArchConfig::default(),
            snr: SnrSettings::default(),
            checkpoint_every: 500,
            resume: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.crop == 0 {
            return Err(Error::Config("crop size must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("ckpt_every must be at least 1".into()));
        }
        if self.snr.kernel % 2 == 0 || self.snr.kernel == 0 {
            return Err(Error::Config(format!(
                "snr_kernel must be odd and positive, got {}",
                self.snr.kernel
            )));
        }
        if !(0.0 < self.snr.threshold && self.snr.threshold < 1.0) {
            return Err(Error::Config(format!(
                "snr_threshold must lie in (0,1), got {}",
                self.snr.threshold
            )));
        }
        if self.snr.eps <= 0.0 {
            return Err(Error::Config(format!(
                "snr_eps must be positive, got {}",
                self.snr.eps
            )));
        }
        self.weights
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.arch.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("data_dir".into(), self.data_root.display().to_string());
        m.insert("dataset".into(), self.dataset.name().to_string());
        m.insert("out_dir".into(), self.out_dir.display().to_string());
        m.insert("iters".into(), self.iterations.to_string());
        m.insert("batch_size".into(), self.batch_size.to_string());
        m.insert("lr".into(), self.learning_rate.to_string());
        m.insert("crop".into(), self.crop.to_string());
        m.insert("seed".into(), self.seed.to_string());
        m.insert("lambda1".into(), self.weights.lambda1.to_string());
        m.insert("lambda2".into(), self.weights.lambda2.to_string());
        m.insert("lambda3".into(), self.weights.lambda3.to_string());
        m.insert("lambda4".into(), self.weights.lambda4.to_string());
        m.insert("channels".into(), self.arch.channels.to_string());
        m.insert("res_blocks".into(), self.arch.res_blocks.to_string());
        m.insert("blocks".into(), self.arch.blocks.to_string());
        m.insert("layers".into(), self.arch.layers_per_block.to_string());
        m.insert("window".into(), self.arch.window.to_string());
        m.insert("heads".into(), self.arch.heads.to_string());
        m.insert("mlp_ratio".into(), self.arch.mlp_ratio.to_string());
        m.insert("snr_kernel".into(), self.snr.kernel.to_string());
        m.insert("snr_eps".into(), self.snr.eps.to_string());
        m.insert("snr_threshold".into(), self.snr.threshold.to_string());
        m.insert("snr_enabled".into(), self.snr.enabled.to_string());
        m.insert("ckpt_every".into(), self.checkpoint_every.to_string());
        m
    }

    /// Build from a flat map; `data_dir`, `dataset` and `out_dir` are
    /// required, everything else falls back to defaults. Unknown keys are
    /// configuration errors.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        const KNOWN: &[&str] = &[
            "data_dir",
            "dataset",
            "out_dir",
            "iters",
            "batch_size",
            "lr",
            "crop",
            "seed",
            "lambda1",
            "lambda2",
            "lambda3",
            "lambda4",
            "channels",
            "res_blocks",
            "blocks",
            "layers",
            "window",
            "heads",
            "mlp_ratio",
            "snr_kernel",
            "snr_eps",
            "snr_threshold",
            "snr_enabled",
            "ckpt_every",
            "iteration", // present in checkpoint snapshots
        ];
        for key in map.keys() {
            if !KNOWN.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown configuration key `{key}`")));
            }
        }
        let required = |key: &str| -> Result<&String> {
            map.get(key)
                .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
        };
        let mut cfg = TrainConfig::new(
            PathBuf::from(required("data_dir")?),
            DatasetVersion::parse(required("dataset")?)
                .map_err(|e| Error::Config(e.to_string()))?,
            PathBuf::from(required("out_dir")?),
        );
        fn set<T: std::str::FromStr>(
            map: &BTreeMap<String, String>,
            key: &str,
            slot: &mut T,
        ) -> Result<()> {
            if let Some(raw) = map.get(key) {
                *slot = raw
                    .parse()
                    .map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`")))?;
            }
            Ok(())
        }
        set(map, "iters", &mut cfg.iterations)?;
        set(map, "batch_size", &mut cfg.batch_size)?;
        set(map, "lr", &mut cfg.learning_rate)?;
        set(map, "crop", &mut cfg.crop)?;
        set(map, "seed", &mut cfg.seed)?;
        set(map, "lambda1", &mut cfg.weights.lambda1)?;
        set(map, "lambda2", &mut cfg.weights.lambda2)?;
        set(map, "lambda3", &mut cfg.weights.lambda3)?;
        set(map, "lambda4", &mut cfg.weights.lambda4)?;
        set(map, "channels", &mut cfg.arch.channels)?;
        set(map, "res_blocks", &mut cfg.arch.res_blocks)?;
        set(map, "blocks", &mut cfg.arch.blocks)?;
        set(map, "layers", &mut cfg.arch.layers_per_block)?;
        set(map, "window", &mut cfg.arch.window)?;
        set(map, "heads", &mut cfg.arch.heads)?;
        set(map, "mlp_ratio", &mut cfg.arch.mlp_ratio)?;
        set(map, "snr_kernel", &mut cfg.snr.kernel)?;
        set(map, "snr_eps", &mut cfg.snr.eps)?;
        set(map, "snr_threshold", &mut cfg.snr.threshold)?;
        set(map, "snr_enabled", &mut cfg.snr.enabled)?;
        set(map, "ckpt_every", &mut cfg.checkpoint_every)?;
        Ok(cfg)
    }
}

/// First and second moment estimates, aligned with the canonical parameter
/// order.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        let shapes: Vec<Vec<usize>> = params
            .named()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }
}

/// One Adam update with bias correction. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Argument("adam step count starts at 1".into()));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Argument(format!(
            "adam_step length mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one = T::one();
    let corr1 = T::from_f64(1.0 - beta1.powi(t as i32));
    let corr2 = T::from_f64(1.0 - beta2.powi(t as i32));
    let lr = T::from_f64(lr);
    let eps = T::from_f64(eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(Error::Argument(format!(
                "adam_step shape mismatch: param {:?} vs grad {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for ((pv, &gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut()))
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / corr1;
            let v_hat = *vv / corr2;
            *pv = *pv - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Loss of one image without gradients.
pub fn loss_forward<T: Scalar>(
    img: &RgbImage,
    params: &ModelParams<T>,
    guidance: &SnrGuidance,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let g: Graph<T> = Graph::new();
    let built = forward_graph(&g, img, params, guidance, false);
    let lv = total_loss_graph(&g, img, built.reflectance, built.illumination, weights);
    Ok(lv.breakdown(&g))
}

/// Per-parameter gradients in canonical `(name, grad)` order.
pub type NamedGrads<T> = Vec<(String, Tensor<T>)>;

/// Loss of one image plus gradients for every parameter.
pub fn loss_and_grads<T: Scalar>(
    img: &RgbImage,
    params: &ModelParams<T>,
    guidance: &SnrGuidance,
    weights: &LossWeights,
) -> Result<(LossBreakdown, NamedGrads<T>)> {
    let g: Graph<T> = Graph::new();
    let built = forward_graph(&g, img, params, guidance, true);
    let lv = total_loss_graph(&g, img, built.reflectance, built.illumination, weights);
    let mut grads = g.backward(lv.total);
    let out = built
        .params
        .iter()
        .map(|(name, var)| {
            let t = grads
                .take(*var)
                .unwrap_or_else(|| Tensor::zeros(g.shape(*var)));
            (name.clone(), t)
        })
        .collect();
    Ok((lv.breakdown(&g), out))
}

fn average_breakdowns(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    LossBreakdown {
        recon: items.iter().map(|b| b.recon).sum::<f64>() / n,
        reflect_hist: items.iter().map(|b| b.reflect_hist).sum::<f64>() / n,
        illum_smooth: items.iter().map(|b| b.illum_smooth).sum::<f64>() / n,
        reflect_tv: items.iter().map(|b| b.reflect_tv).sum::<f64>() / n,
        total: items.iter().map(|b| b.total).sum::<f64>() / n,
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&(step as u64).to_le_bytes());
    s[16] = 0x5a;
    ChaCha8Rng::from_seed(s)
}

const CSV_HEADER: &str = "step,recon,reflect_hist,illum_smooth,reflect_tv,total";

fn csv_row(step: usize, b: &LossBreakdown) -> String {
    format!(
        "{step},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
        b.recon, b.reflect_hist, b.illum_smooth, b.reflect_tv, b.total
    )
}

/// Assemble a checkpoint from the current training state.
pub fn make_checkpoint(
    config: &TrainConfig,
    params: &ModelParams<f32>,
    opt: &AdamState<f32>,
    iteration: usize,
) -> Checkpoint {
    let mut cfg = config.to_map();
    cfg.insert("iteration".into(), iteration.to_string());
    let mut tensors: Vec<(String, Tensor<f32>)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    for (i, (name, _)) in params.named().iter().enumerate() {
        tensors.push((format!("opt.m.{name}"), opt.m[i].clone()));
        tensors.push((format!("opt.v.{name}"), opt.v[i].clone()));
    }
    Checkpoint {
        config: cfg,
        tensors,
    }
}

/// Reconstruct the model, SNR settings and optimizer state stored in a
/// checkpoint.
pub fn model_from_checkpoint(
    ckpt: &Checkpoint,
) -> Result<(ModelParams<f32>, SnrSettings, AdamState<f32>)> {
    let cfg = TrainConfig::from_map(&ckpt.config)?;
    let model_tensors: Vec<(String, Tensor<f32>)> = ckpt
        .tensors
        .iter()
        .filter(|(n, _)| !n.starts_with("opt."))
        .cloned()
        .collect();
    let params = ModelParams::from_tensors(cfg.arch, &model_tensors)?;
    let mut opt = AdamState::zeros_like(&params);
    for (i, (name, slot)) in params.named().iter().enumerate() {
        let m = ckpt
            .get(&format!("opt.m.{name}"))
            .ok_or_else(|| Error::Integrity(format!("checkpoint lacks opt.m.{name}")))?;
        let v = ckpt
            .get(&format!("opt.v.{name}"))
            .ok_or_else(|| Error::Integrity(format!("checkpoint lacks opt.v.{name}")))?;
        if m.shape() != slot.shape() || v.shape() != slot.shape() {
            return Err(Error::Integrity(format!(
                "optimizer moments for `{name}` have the wrong shape"
            )));
        }
        opt.m[i] = m.clone();
        opt.v[i] = v.clone();
    }
    Ok((params, cfg.snr, opt))
}

/// Run (or resume) unsupervised training and return the final checkpoint.
///
/// Writes `loss.csv` plus periodic and final checkpoints under the config's
/// output directory.
pub fn train(config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let index = index_lol(&config.data_root, Split::Train, config.dataset)?;
    if index.is_empty() {
        return Err(Error::Config(format!(
            "no training images found under {}",
            config.data_root.display()
        )));
    }

    std::fs::create_dir_all(&config.out_dir)
        .map_err(|e| Error::io(&config.out_dir, e))?;

    let (mut params, mut opt, start) = match &config.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let stored = TrainConfig::from_map(&ckpt.config)?;
            if stored.arch != config.arch {
                return Err(Error::Integrity(format!(
                    "checkpoint architecture {:?} differs from requested {:?}",
                    stored.arch, config.arch
                )));
            }
            let (params, _, opt) = model_from_checkpoint(&ckpt)?;
            let start = ckpt.iteration()?;
            (params, opt, start)
        }
        None => {
            let params = ModelParams::<f32>::init(config.arch, config.seed)?;
            let opt = AdamState::zeros_like(&params);
            (params, opt, 0)
        }
    };
    if start >= config.iterations {
        return Err(Error::Config(format!(
            "checkpoint is already at step {start}, nothing to do before {}",
            config.iterations
        )));
    }

    let csv_path = config.out_dir.join("loss.csv");
    let mut csv = if start > 0 && csv_path.exists() {
        std::fs::OpenOptions::new()
            .append(true)
            .open(&csv_path)
            .map_err(|e| Error::io(&csv_path, e))?
    } else {
        let mut f = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        writeln!(f, "{CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
        f
    };

    for step in start..config.iterations {
        let mut rng = step_rng(config.seed, step);
        let mut crops = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let pick = rng.gen_range(0..index.len());
            let img = load_image(&index.low[pick])?;
            crops.push(random_crop(&img, config.crop, &mut rng)?);
        }

        let results: Vec<(LossBreakdown, NamedGrads<f32>)> = crops
            .par_iter()
            .map(|crop| {
                let guidance = config.snr.guidance(crop)?;
                loss_and_grads::<f32>(crop, &params, &guidance, &config.weights)
            })
            .collect::<Result<Vec<_>>>()?;

        let breakdown = average_breakdowns(
            &results.iter().map(|(b, _)| *b).collect::<Vec<_>>(),
        );
        for (component, value) in breakdown.components() {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: step + 1,
                    component,
                });
            }
        }

        // average gradients in canonical order
        let scale = 1.0 / config.batch_size as f32;
        let mut avg: Vec<Tensor<f32>> = results[0]
            .1
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        for (_, grads) in &results {
            for (slot, (_, g)) in avg.iter_mut().zip(grads) {
                for (d, &s) in slot.data_mut().iter_mut().zip(g.data()) {
                    *d += s * scale;
                }
            }
        }

        let mut named = params.named_mut();
        debug_assert!(named
            .iter()
            .map(|(n, _)| n.as_str())
            .eq(results[0].1.iter().map(|(n, _)| n.as_str())));
        let mut slots: Vec<&mut Tensor<f32>> =
            named.iter_mut().map(|(_, t)| &mut **t).collect();
        adam_step(
            &mut slots,
            &avg,
            &mut opt,
            config.learning_rate,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
            step + 1,
        )?;
        drop(named);

        writeln!(csv, "{}", csv_row(step + 1, &breakdown)).map_err(|e| Error::io(&csv_path, e))?;
        if (step + 1) % 10 == 0 || step + 1 == config.iterations || step == start {
            println!(
                "step {:>6}/{} total {:.6} recon {:.6}",
                step + 1,
                config.iterations,
                breakdown.total,
                breakdown.recon
            );
        }

        if (step + 1) % config.checkpoint_every == 0 && step + 1 != config.iterations {
            let ckpt = make_checkpoint(config, &params, &opt, step + 1);
            ckpt.save(&config.out_dir.join(format!("checkpoint_{:06}.ckpt", step + 1)))?;
        }
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;

    let ckpt = make_checkpoint(config, &params, &opt, config.iterations);
    ckpt.save(&config.out_dir.join("checkpoint_final.ckpt"))?;
    Ok(ckpt)
}
