//! The dual-branch enhancement network.
//!
//! A convolutional shallow branch and an attention-based deep branch run at
//! full resolution over the same input; an SNR map gates both the deep
//! branch's attention (binary mask) and the per-pixel fusion of the two
//! feature maps (continuous map). The head decodes the fused features into
//! reflectance and illumination; reflectance is the enhanced image.

pub mod attention;
pub mod conv;
pub mod fusion;
pub mod shallow;
pub mod swin;
pub mod windowing;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::RgbImage;
use crate::snr::{compute_snr_map, SnrMap};
use crate::tensor::{Scalar, Tensor};

use attention::{AttentionParams, LayerNormParams};
use conv::ConvParams;
use fusion::{bind_head, fuse_graph, head_graph, DecompositionOutput, HeadParams};
use shallow::{bind_shallow, shallow_extract_graph, ResidualBlockParams, ShallowParams};
use swin::{bind_deep, deep_extract_graph, BlockParams, DeepParams};

/// Network dimensions. Everything is configurable; the defaults are sized
/// for CPU experimentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    /// Feature width of both branches.
    pub channels: usize,
    /// Residual conv blocks in the shallow branch.
    pub res_blocks: usize,
    /// Residual attention blocks in the deep branch.
    pub blocks: usize,
    /// Attention layers per block.
    pub layers_per_block: usize,
    /// Window side for attention.
    pub window: usize,
    /// Attention heads.
    pub heads: usize,
    /// MLP expansion ratio.
    pub mlp_ratio: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: 48,
            res_blocks: 3,
            blocks: 2,
            layers_per_block: 2,
            window: 8,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Argument(format!(
                "channels ({}) must be a positive multiple of heads ({})",
                self.channels, self.heads
            )));
        }
        if self.blocks == 0 || self.layers_per_block == 0 {
            return Err(Error::Argument(
                "need at least one attention block and one layer per block".to_string(),
            ));
        }
        if self.window == 0 || self.mlp_ratio == 0 {
            return Err(Error::Argument(
                "window and mlp_ratio must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Every learnable tensor of the network.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub arch: ArchConfig,
    pub shallow: ShallowParams<T>,
    pub deep: DeepParams<T>,
    pub head: HeadParams<T>,
}

fn init_conv<T: Scalar>(rng: &mut ChaCha8Rng, cout: usize, cin: usize) -> ConvParams<T> {
    let bound = (1.0 / (9 * cin) as f64).sqrt();
    let weight = Tensor::from_f64_slice(
        vec![cout, cin, 3, 3],
        &(0..cout * cin * 9)
            .map(|_| rng.gen_range(-bound..bound))
            .collect::<Vec<_>>(),
    );
    ConvParams {
        weight,
        bias: Tensor::zeros(vec![cout]),
    }
}

fn init_linear<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<T> {
    let bound = (1.0 / rows as f64).sqrt();
    Tensor::from_f64_slice(
        vec![rows, cols],
        &(0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect::<Vec<_>>(),
    )
}

fn init_layer<T: Scalar>(rng: &mut ChaCha8Rng, arch: &ArchConfig) -> AttentionParams<T> {
    let c = arch.channels;
    let hidden = c * arch.mlp_ratio;
    let side = 2 * arch.window - 1;
    AttentionParams {
        wq: init_linear(rng, c, c),
        wk: init_linear(rng, c, c),
        wv: init_linear(rng, c, c),
        wo: init_linear(rng, c, c),
        rel_bias: Tensor::from_f64_slice(
            vec![side * side, arch.heads],
            &(0..side * side * arch.heads)
                .map(|_| rng.gen_range(-0.02..0.02))
                .collect::<Vec<_>>(),
        ),
        heads: arch.heads,
        window: arch.window,
        norm1: LayerNormParams {
            gamma: Tensor::filled(vec![c], T::one()),
            beta: Tensor::zeros(vec![c]),
        },
        norm2: LayerNormParams {
            gamma: Tensor::filled(vec![c], T::one()),
            beta: Tensor::zeros(vec![c]),
        },
        fc1_weight: init_linear(rng, c, hidden),
        fc1_bias: Tensor::zeros(vec![hidden]),
        fc2_weight: init_linear(rng, hidden, c),
        fc2_bias: Tensor::zeros(vec![c]),
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic initialization from a seed.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let c = arch.channels;
        let shallow = ShallowParams {
            embed: init_conv(&mut rng, c, 3),
            blocks: (0..arch.res_blocks)
                .map(|_| ResidualBlockParams {
                    conv1: init_conv(&mut rng, c, c),
                    conv2: init_conv(&mut rng, c, c),
                })
                .collect(),
        };
        let deep = DeepParams {
            embed: init_conv(&mut rng, c, 3),
            blocks: (0..arch.blocks)
                .map(|_| BlockParams {
                    layers: (0..arch.layers_per_block)
                        .map(|_| init_layer(&mut rng, &arch))
                        .collect(),
                    conv: init_conv(&mut rng, c, c),
                })
                .collect(),
        };
        let head = HeadParams {
            fuse: init_conv(&mut rng, 3, c),
            out: init_conv(&mut rng, 4, 3),
        };
        Ok(Self {
            arch,
            shallow,
            deep,
            head,
        })
    }

    /// Canonical `(name, tensor)` listing; the checkpoint format and the
    /// optimizer state both follow this order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.push(("shallow.embed.weight".into(), &self.shallow.embed.weight));
        out.push(("shallow.embed.bias".into(), &self.shallow.embed.bias));
        for (i, b) in self.shallow.blocks.iter().enumerate() {
            out.push((format!("shallow.res{i}.conv1.weight"), &b.conv1.weight));
            out.push((format!("shallow.res{i}.conv1.bias"), &b.conv1.bias));
            out.push((format!("shallow.res{i}.conv2.weight"), &b.conv2.weight));
            out.push((format!("shallow.res{i}.conv2.bias"), &b.conv2.bias));
        }
        out.push(("deep.embed.weight".into(), &self.deep.embed.weight));
        out.push(("deep.embed.bias".into(), &self.deep.embed.bias));
        for (i, b) in self.deep.blocks.iter().enumerate() {
            for (j, l) in b.layers.iter().enumerate() {
                let p = format!("deep.block{i}.layer{j}");
                out.push((format!("{p}.attn.wq"), &l.wq));
                out.push((format!("{p}.attn.wk"), &l.wk));
                out.push((format!("{p}.attn.wv"), &l.wv));
                out.push((format!("{p}.attn.wo"), &l.wo));
                out.push((format!("{p}.attn.rel_bias"), &l.rel_bias));
                out.push((format!("{p}.norm1.gamma"), &l.norm1.gamma));
                out.push((format!("{p}.norm1.beta"), &l.norm1.beta));
                out.push((format!("{p}.norm2.gamma"), &l.norm2.gamma));
                out.push((format!("{p}.norm2.beta"), &l.norm2.beta));
                out.push((format!("{p}.mlp.fc1.weight"), &l.fc1_weight));
                out.push((format!("{p}.mlp.fc1.bias"), &l.fc1_bias));
                out.push((format!("{p}.mlp.fc2.weight"), &l.fc2_weight));
                out.push((format!("{p}.mlp.fc2.bias"), &l.fc2_bias));
            }
            out.push((format!("deep.block{i}.conv.weight"), &b.conv.weight));
            out.push((format!("deep.block{i}.conv.bias"), &b.conv.bias));
        }
        out.push(("head.fuse.weight".into(), &self.head.fuse.weight));
        out.push(("head.fuse.bias".into(), &self.head.fuse.bias));
        out.push(("head.out.weight".into(), &self.head.out.weight));
        out.push(("head.out.bias".into(), &self.head.out.bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.push(("shallow.embed.weight".into(), &mut self.shallow.embed.weight));
        out.push(("shallow.embed.bias".into(), &mut self.shallow.embed.bias));
        for (i, b) in self.shallow.blocks.iter_mut().enumerate() {
            out.push((format!("shallow.res{i}.conv1.weight"), &mut b.conv1.weight));
            out.push((format!("shallow.res{i}.conv1.bias"), &mut b.conv1.bias));
            out.push((format!("shallow.res{i}.conv2.weight"), &mut b.conv2.weight));
            out.push((format!("shallow.res{i}.conv2.bias"), &mut b.conv2.bias));
        }
        out.push(("deep.embed.weight".into(), &mut self.deep.embed.weight));
        out.push(("deep.embed.bias".into(), &mut self.deep.embed.bias));
        for (i, b) in self.deep.blocks.iter_mut().enumerate() {
            for (j, l) in b.layers.iter_mut().enumerate() {
                let p = format!("deep.block{i}.layer{j}");
                out.push((format!("{p}.attn.wq"), &mut l.wq));
                out.push((format!("{p}.attn.wk"), &mut l.wk));
                out.push((format!("{p}.attn.wv"), &mut l.wv));
                out.push((format!("{p}.attn.wo"), &mut l.wo));
                out.push((format!("{p}.attn.rel_bias"), &mut l.rel_bias));
                out.push((format!("{p}.norm1.gamma"), &mut l.norm1.gamma));
                out.push((format!("{p}.norm1.beta"), &mut l.norm1.beta));
                out.push((format!("{p}.norm2.gamma"), &mut l.norm2.gamma));
                out.push((format!("{p}.norm2.beta"), &mut l.norm2.beta));
                out.push((format!("{p}.mlp.fc1.weight"), &mut l.fc1_weight));
                out.push((format!("{p}.mlp.fc1.bias"), &mut l.fc1_bias));
                out.push((format!("{p}.mlp.fc2.weight"), &mut l.fc2_weight));
                out.push((format!("{p}.mlp.fc2.bias"), &mut l.fc2_bias));
            }
            out.push((format!("deep.block{i}.conv.weight"), &mut b.conv.weight));
            out.push((format!("deep.block{i}.conv.bias"), &mut b.conv.bias));
        }
        out.push(("head.fuse.weight".into(), &mut self.head.fuse.weight));
        out.push(("head.fuse.bias".into(), &mut self.head.fuse.bias));
        out.push(("head.out.weight".into(), &mut self.head.out.weight));
        out.push(("head.out.bias".into(), &mut self.head.out.bias));
        out
    }

    /// Rebuild parameters from `(name, tensor)` pairs, e.g. a checkpoint.
    /// Missing or extra names, or shape mismatches, are integrity errors.
    pub fn from_tensors(
        arch: ArchConfig,
        tensors: &[(String, Tensor<T>)],
    ) -> Result<Self> {
        let mut params = Self::init(arch, 0)?;
        let mut provided: std::collections::BTreeMap<&str, &Tensor<T>> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut missing = Vec::new();
        for (name, slot) in params.named_mut() {
            match provided.remove(name.as_str()) {
                Some(t) => {
                    if t.shape() != slot.shape() {
                        return Err(Error::Integrity(format!(
                            "tensor `{name}` has shape {:?}, architecture expects {:?}",
                            t.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = t.clone();
                }
                None => missing.push(name),
            }
        }
        let extra: Vec<&str> = provided.keys().copied().collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Integrity(format!(
                "tensor names do not match architecture: missing {:?}, extra {:?}",
                missing, extra
            )));
        }
        Ok(params)
    }
}

/// Per-image guidance derived from the SNR prior (or the ablation switch).
#[derive(Clone, Debug)]
pub struct SnrGuidance {
    /// Binary mask gating attention; `None` disables the bias term (which a
    /// mask of all ones also does, exactly).
    pub mask: Option<Tensor<f64>>,
    /// Continuous map steering fusion.
    pub fusion: Tensor<f64>,
}

impl SnrGuidance {
    pub fn from_map(snr: &SnrMap) -> Self {
        Self {
            mask: Some(snr.mask.clone()),
            fusion: snr.continuous.clone(),
        }
    }

    /// Ablation arm: attention unmasked, fusion fixed at an even 0.5 blend.
    pub fn disabled(height: usize, width: usize) -> Self {
        Self {
            mask: None,
            fusion: Tensor::filled(vec![height, width], 0.5),
        }
    }
}

/// SNR pipeline settings carried by training configs and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnrSettings {
    pub kernel: usize,
    pub eps: f64,
    pub threshold: f64,
    pub enabled: bool,
}

impl Default for SnrSettings {
    fn default() -> Self {
        Self {
            kernel: 5,
            eps: 1e-6,
            threshold: 0.5,
            enabled: true,
        }
    }
}

impl SnrSettings {
    pub fn guidance(&self, img: &RgbImage) -> Result<SnrGuidance> {
        if self.enabled {
            Ok(SnrGuidance::from_map(&compute_snr_map(
                img,
                self.kernel,
                self.eps,
                self.threshold,
            )?))
        } else {
            Ok(SnrGuidance::disabled(img.height(), img.width()))
        }
    }
}

/// Registers parameter tensors on a graph, remembering `(name, var)` pairs
/// in bind order so gradients can be read back per parameter.
pub struct Binder<'g, T: Scalar> {
    g: &'g Graph<T>,
    trainable: bool,
    entries: Vec<(String, Var)>,
}

impl<'g, T: Scalar> Binder<'g, T> {
    pub fn trainable(g: &'g Graph<T>) -> Self {
        Self {
            g,
            trainable: true,
            entries: Vec::new(),
        }
    }

    pub fn constants(g: &'g Graph<T>) -> Self {
        Self {
            g,
            trainable: false,
            entries: Vec::new(),
        }
    }

    pub fn bind(&mut self, name: &str, t: &Tensor<T>) -> Var {
        let v = if self.trainable {
            self.g.leaf(t.clone())
        } else {
            self.g.constant(t.clone())
        };
        self.entries.push((name.to_string(), v));
        v
    }

    pub fn into_entries(self) -> Vec<(String, Var)> {
        self.entries
    }
}

/// Graph handles produced by [`forward_graph`].
pub struct BuiltForward {
    pub reflectance: Var,
    pub illumination: Var,
    /// `(name, var)` for every bound parameter, in canonical order.
    pub params: Vec<(String, Var)>,
}

pub fn forward_graph<T: Scalar>(
    g: &Graph<T>,
    img: &RgbImage,
    params: &ModelParams<T>,
    guidance: &SnrGuidance,
    trainable: bool,
) -> BuiltForward {
    let mut binder = if trainable {
        Binder::trainable(g)
    } else {
        Binder::constants(g)
    };
    let sh = bind_shallow(&mut binder, &params.shallow);
    let dp = bind_deep(&mut binder, &params.deep);
    let hd = bind_head(&mut binder, &params.head);
    let iv = g.constant(img.to_tensor());
    let f_s = shallow_extract_graph(g, iv, &sh);
    let f_d = deep_extract_graph(g, iv, guidance.mask.as_ref(), &dp);
    let fused = fuse_graph(g, f_s, f_d, &guidance.fusion);
    let (r, i) = head_graph(g, fused, iv, &hd);
    BuiltForward {
        reflectance: r,
        illumination: i,
        params: binder.into_entries(),
    }
}

fn validate_guidance(img: &RgbImage, guidance: &SnrGuidance) -> Result<()> {
    let want = [img.height(), img.width()];
    if guidance.fusion.shape() != want {
        return Err(Error::Argument(format!(
            "fusion map {:?} does not match image {:?}",
            guidance.fusion.shape(),
            want
        )));
    }
    if guidance.fusion.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Argument(
            "continuous SNR map must lie in [0,1]".to_string(),
        ));
    }
    if let Some(m) = &guidance.mask {
        if m.shape() != want {
            return Err(Error::Argument(format!(
                "attention mask {:?} does not match image {:?}",
                m.shape(),
                want
            )));
        }
    }
    Ok(())
}

/// Full decomposition of one image with a precomputed SNR map.
pub fn forward<T: Scalar>(
    img: &RgbImage,
    params: &ModelParams<T>,
    snr: &SnrMap,
) -> Result<DecompositionOutput> {
    let guidance = SnrGuidance::from_map(snr);
    forward_with_guidance(img, params, &guidance)
}

pub fn forward_with_guidance<T: Scalar>(
    img: &RgbImage,
    params: &ModelParams<T>,
    guidance: &SnrGuidance,
) -> Result<DecompositionOutput> {
    validate_guidance(img, guidance)?;
    let g: Graph<T> = Graph::new();
    let built = forward_graph(&g, img, params, guidance, false);
    let r = g.value(built.reflectance);
    let i = g.value(built.illumination);
    Ok(DecompositionOutput {
        reflectance: RgbImage::new(
            img.height(),
            img.width(),
            r.data().iter().map(|&v| v.to_f64()).collect(),
        ),
        illumination: crate::image::GrayImage::new(
            img.height(),
            img.width(),
            i.data().iter().map(|&v| v.to_f64()).collect(),
        ),
    })
}

/// Enhance one image: compute the SNR prior per `settings`, run the network
/// and return the reflectance.
pub fn enhance<T: Scalar>(
    img: &RgbImage,
    params: &ModelParams<T>,
    settings: &SnrSettings,
) -> Result<RgbImage> {
    let guidance = settings.guidance(img)?;
    Ok(forward_with_guidance(img, params, &guidance)?.reflectance)
}
