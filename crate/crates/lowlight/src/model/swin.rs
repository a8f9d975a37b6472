//! Deep branch: residual blocks of SNR-aware windowed attention layers.
//!
//! Each block chains `n` attention layers (alternating unshifted and
//! shifted window grids, starting unshifted), applies a 3x3 conv, and adds
//! the block input. The branch output is the embedding features plus the
//! last block's output.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::RgbImage;
use crate::model::attention::{attention_layer_graph, bind_attention, AttentionParams, AttentionVars};
use crate::model::conv::{conv3x3_graph, ConvParams};
use crate::model::Binder;
use crate::tensor::{Scalar, Tensor};

/// One residual attention block: `n` layers plus a conv.
#[derive(Clone, Debug)]
pub struct BlockParams<T> {
    pub layers: Vec<AttentionParams<T>>,
    pub conv: ConvParams<T>,
}

/// The whole deep branch.
#[derive(Clone, Debug)]
pub struct DeepParams<T> {
    pub embed: ConvParams<T>,
    pub blocks: Vec<BlockParams<T>>,
}

pub struct BlockVars {
    layers: Vec<AttentionVars>,
    conv_w: Var,
    conv_b: Var,
}

pub struct DeepVars {
    embed_w: Var,
    embed_b: Var,
    blocks: Vec<BlockVars>,
}

pub fn bind_block<T: Scalar>(
    binder: &mut Binder<'_, T>,
    prefix: &str,
    b: &BlockParams<T>,
) -> BlockVars {
    BlockVars {
        layers: b
            .layers
            .iter()
            .enumerate()
            .map(|(j, l)| bind_attention(binder, &format!("{prefix}.layer{j}"), l))
            .collect(),
        conv_w: binder.bind(&format!("{prefix}.conv.weight"), &b.conv.weight),
        conv_b: binder.bind(&format!("{prefix}.conv.bias"), &b.conv.bias),
    }
}

pub fn bind_deep<T: Scalar>(binder: &mut Binder<'_, T>, p: &DeepParams<T>) -> DeepVars {
    DeepVars {
        embed_w: binder.bind("deep.embed.weight", &p.embed.weight),
        embed_b: binder.bind("deep.embed.bias", &p.embed.bias),
        blocks: p
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| bind_block(binder, &format!("deep.block{i}"), b))
            .collect(),
    }
}

/// Shift for the `j`-th layer in a block: alternate starting unshifted.
fn layer_shift(j: usize, window: usize) -> usize {
    if j % 2 == 1 {
        window / 2
    } else {
        0
    }
}

pub fn block_graph<T: Scalar>(
    g: &Graph<T>,
    f: Var,
    mask: Option<&Tensor<f64>>,
    vars: &BlockVars,
) -> Var {
    let mut x = f;
    for (j, layer) in vars.layers.iter().enumerate() {
        x = attention_layer_graph(g, x, mask, layer, layer_shift(j, layer.window));
    }
    let x = conv3x3_graph(g, x, vars.conv_w, vars.conv_b);
    g.add(x, f)
}

pub fn deep_extract_graph<T: Scalar>(
    g: &Graph<T>,
    img: Var,
    mask: Option<&Tensor<f64>>,
    vars: &DeepVars,
) -> Var {
    let f0 = conv3x3_graph(g, img, vars.embed_w, vars.embed_b);
    let mut f = f0;
    for block in &vars.blocks {
        f = block_graph(g, f, mask, block);
    }
    g.add(f0, f)
}

fn validate_mask<T: Scalar>(mask: Option<&Tensor<f64>>, h: usize, w: usize) -> Result<()> {
    if let Some(m) = mask {
        if m.shape() != [h, w] {
            return Err(Error::Argument(format!(
                "mask shape {:?} does not match features {h}x{w}",
                m.shape()
            )));
        }
        if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Argument("SNR mask must be binary".to_string()));
        }
    }
    let _ = T::zero();
    Ok(())
}

/// One attention layer on a plain `[h, w, c]` tensor. `mask = None` runs the
/// layer without SNR guidance (no bias term at all).
pub fn attention_layer<T: Scalar>(
    f: &Tensor<T>,
    mask: Option<&Tensor<f64>>,
    params: &AttentionParams<T>,
    shift: usize,
) -> Result<Tensor<T>> {
    params.validate()?;
    let (h, w) = (f.shape()[0], f.shape()[1]);
    validate_mask::<T>(mask, h, w)?;
    let g: Graph<T> = Graph::new();
    let mut binder = Binder::constants(&g);
    let vars = bind_attention(&mut binder, "layer", params);
    let fv = g.constant(f.clone());
    Ok(g.value(attention_layer_graph(&g, fv, mask, &vars, shift)))
}

/// One residual attention block on a plain tensor.
pub fn residual_attention_block<T: Scalar>(
    f: &Tensor<T>,
    mask: Option<&Tensor<f64>>,
    params: &BlockParams<T>,
) -> Result<Tensor<T>> {
    if params.layers.is_empty() {
        return Err(Error::Argument(
            "a residual attention block needs at least one layer".to_string(),
        ));
    }
    for l in &params.layers {
        l.validate()?;
    }
    let (h, w) = (f.shape()[0], f.shape()[1]);
    validate_mask::<T>(mask, h, w)?;
    let g: Graph<T> = Graph::new();
    let mut binder = Binder::constants(&g);
    let vars = BlockVars {
        layers: params
            .layers
            .iter()
            .enumerate()
            .map(|(j, l)| bind_attention(&mut binder, &format!("layer{j}"), l))
            .collect(),
        conv_w: binder.bind("conv.weight", &params.conv.weight),
        conv_b: binder.bind("conv.bias", &params.conv.bias),
    };
    let fv = g.constant(f.clone());
    Ok(g.value(block_graph(&g, fv, mask, &vars)))
}

/// Full deep branch on a plain image.
pub fn deep_extract<T: Scalar>(
    img: &RgbImage,
    mask: Option<&Tensor<f64>>,
    params: &DeepParams<T>,
) -> Result<Tensor<T>> {
    validate_mask::<T>(mask, img.height(), img.width())?;
    let g: Graph<T> = Graph::new();
    let mut binder = Binder::constants(&g);
    let vars = bind_deep(&mut binder, params);
    let iv = g.constant(img.to_tensor());
    Ok(g.value(deep_extract_graph(&g, iv, mask, &vars)))
}
