//! 3x3 convolution with replicate padding, shared by both branches.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Scalar, Tensor};

/// Weights `[cout, cin, 3, 3]` and bias `[cout]` of one convolution.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn zeros(cout: usize, cin: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![cout, cin, 3, 3]),
            bias: Tensor::zeros(vec![cout]),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Gather indices implementing one-pixel replicate padding of `[h, w, c]`.
fn pad_map(h: usize, w: usize, c: usize) -> (Arc<Vec<usize>>, Vec<usize>) {
    let mut idx = Vec::with_capacity((h + 2) * (w + 2) * c);
    for y in 0..h + 2 {
        let sy = y.saturating_sub(1).min(h - 1);
        for x in 0..w + 2 {
            let sx = x.saturating_sub(1).min(w - 1);
            let base = (sy * w + sx) * c;
            idx.extend(base..base + c);
        }
    }
    (Arc::new(idx), vec![h + 2, w + 2, c])
}

/// Stride-1, replicate-padded 3x3 convolution inside the graph; spatial
/// dimensions are preserved.
pub fn conv3x3_graph<T: Scalar>(g: &Graph<T>, x: Var, weight: Var, bias: Var) -> Var {
    let shape = g.shape(x);
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let (idx, pshape) = pad_map(h, w, c);
    let padded = g.gather(x, idx, pshape);
    g.conv3x3_valid(padded, weight, bias)
}

/// Stride-1, replicate-padded 3x3 convolution on a plain tensor.
pub fn conv3x3<T: Scalar>(x: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    if x.shape().len() != 3 {
        return Err(Error::Argument(format!(
            "conv3x3 expects [h, w, c], got {:?}",
            x.shape()
        )));
    }
    if x.shape()[2] != params.in_channels() {
        return Err(Error::Argument(format!(
            "conv3x3 channel mismatch: input has {}, weights expect {}",
            x.shape()[2],
            params.in_channels()
        )));
    }
    let g: Graph<T> = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(params.weight.clone());
    let bv = g.constant(params.bias.clone());
    Ok(g.value(conv3x3_graph(&g, xv, wv, bv)))
}
