//! Shallow branch: a plain convolutional residual stack capturing local
//! structure. An embedding conv lifts RGB to `c` channels, then each block
//! applies `x + conv(relu(conv(x)))` at full resolution.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::RgbImage;
use crate::model::conv::{conv3x3_graph, ConvParams};
use crate::model::Binder;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct ResidualBlockParams<T> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
}

#[derive(Clone, Debug)]
pub struct ShallowParams<T> {
    pub embed: ConvParams<T>,
    pub blocks: Vec<ResidualBlockParams<T>>,
}

pub struct ResidualBlockVars {
    conv1_w: Var,
    conv1_b: Var,
    conv2_w: Var,
    conv2_b: Var,
}

pub struct ShallowVars {
    embed_w: Var,
    embed_b: Var,
    blocks: Vec<ResidualBlockVars>,
}

pub fn bind_shallow<T: Scalar>(
    binder: &mut Binder<'_, T>,
    p: &ShallowParams<T>,
) -> ShallowVars {
    ShallowVars {
        embed_w: binder.bind("shallow.embed.weight", &p.embed.weight),
        embed_b: binder.bind("shallow.embed.bias", &p.embed.bias),
        blocks: p
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| ResidualBlockVars {
                conv1_w: binder.bind(&format!("shallow.res{i}.conv1.weight"), &b.conv1.weight),
                conv1_b: binder.bind(&format!("shallow.res{i}.conv1.bias"), &b.conv1.bias),
                conv2_w: binder.bind(&format!("shallow.res{i}.conv2.weight"), &b.conv2.weight),
                conv2_b: binder.bind(&format!("shallow.res{i}.conv2.bias"), &b.conv2.bias),
            })
            .collect(),
    }
}

pub fn residual_block_graph<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    vars: &ResidualBlockVars,
) -> Var {
    let a = g.relu(conv3x3_graph(g, x, vars.conv1_w, vars.conv1_b));
    let b = conv3x3_graph(g, a, vars.conv2_w, vars.conv2_b);
    g.add(x, b)
}

pub fn shallow_extract_graph<T: Scalar>(
    g: &Graph<T>,
    img: Var,
    vars: &ShallowVars,
) -> Var {
    let mut f = conv3x3_graph(g, img, vars.embed_w, vars.embed_b);
    for block in &vars.blocks {
        f = residual_block_graph(g, f, block);
    }
    f
}

/// `x + conv(relu(conv(x)))` on a plain `[h, w, c]` tensor.
pub fn residual_block<T: Scalar>(
    x: &Tensor<T>,
    params: &ResidualBlockParams<T>,
) -> Result<Tensor<T>> {
    let c = x.shape().get(2).copied().unwrap_or(0);
    if params.conv1.in_channels() != c || params.conv2.out_channels() != c {
        return Err(Error::Argument(format!(
            "residual block channel mismatch: input {c}, conv1 in {}, conv2 out {}",
            params.conv1.in_channels(),
            params.conv2.out_channels()
        )));
    }
    let g: Graph<T> = Graph::new();
    let mut binder = Binder::constants(&g);
    let vars = ResidualBlockVars {
        conv1_w: binder.bind("conv1.weight", &params.conv1.weight),
        conv1_b: binder.bind("conv1.bias", &params.conv1.bias),
        conv2_w: binder.bind("conv2.weight", &params.conv2.weight),
        conv2_b: binder.bind("conv2.bias", &params.conv2.bias),
    };
    let xv = g.constant(x.clone());
    Ok(g.value(residual_block_graph(&g, xv, &vars)))
}

/// Full shallow branch on a plain image: embedding conv plus the residual
/// stack, `[h, w, c]` out.
pub fn shallow_extract<T: Scalar>(img: &RgbImage, params: &ShallowParams<T>) -> Result<Tensor<T>> {
    if params.embed.in_channels() != 3 {
        return Err(Error::Argument(format!(
            "embedding conv must take 3 channels, takes {}",
            params.embed.in_channels()
        )));
    }
    let g: Graph<T> = Graph::new();
    let mut binder = Binder::constants(&g);
    let vars = bind_shallow(&mut binder, params);
    let iv = g.constant(img.to_tensor());
    Ok(g.value(shallow_extract_graph(&g, iv, &vars)))
}
