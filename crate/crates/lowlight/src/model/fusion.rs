//! SNR-guided fusion of the two branches and the decomposition head.
//!
//! Fusion is a per-pixel convex combination `F_s * s + F_d * (1 - s)` with
//! the continuous SNR map broadcast over channels: high-SNR pixels lean on
//! local (shallow) features, low-SNR pixels on non-local (deep) ones. The
//! head turns the fused map into 3 residual channels, adds the input image,
//! and expands to 4 output channels squashed by a sigmoid: 3 reflectance
//! channels and 1 illumination channel.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{GrayImage, RgbImage};
use crate::model::conv::{conv3x3_graph, ConvParams};
use crate::model::Binder;
use crate::tensor::{Scalar, Tensor};

/// Head convolutions: fused features to 3 residual channels, then 3 to 4.
#[derive(Clone, Debug)]
pub struct HeadParams<T> {
    pub fuse: ConvParams<T>,
    pub out: ConvParams<T>,
}

pub struct HeadVars {
    fuse_w: Var,
    fuse_b: Var,
    out_w: Var,
    out_b: Var,
}

pub fn bind_head<T: Scalar>(binder: &mut Binder<'_, T>, p: &HeadParams<T>) -> HeadVars {
    HeadVars {
        fuse_w: binder.bind("head.fuse.weight", &p.fuse.weight),
        fuse_b: binder.bind("head.fuse.bias", &p.fuse.bias),
        out_w: binder.bind("head.out.weight", &p.out.weight),
        out_b: binder.bind("head.out.bias", &p.out.bias),
    }
}

/// Reflectance (the enhanced image) and illumination, both in `(0, 1)`.
#[derive(Clone, Debug)]
pub struct DecompositionOutput {
    pub reflectance: RgbImage,
    pub illumination: GrayImage,
}

pub fn fuse_graph<T: Scalar>(g: &Graph<T>, f_s: Var, f_d: Var, s: &Tensor<f64>) -> Var {
    let shape = g.shape(f_s);
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut sdata = Vec::with_capacity(h * w * c);
    let mut odata = Vec::with_capacity(h * w * c);
    for &v in s.data() {
        for _ in 0..c {
            sdata.push(T::from_f64(v));
            odata.push(T::from_f64(1.0 - v));
        }
    }
    let sv = g.constant(Tensor::new(shape.clone(), sdata));
    let ov = g.constant(Tensor::new(shape, odata));
    g.add(g.mul(f_s, sv), g.mul(f_d, ov))
}

/// Per-pixel interpolation `f_s * s + f_d * (1 - s)` on plain tensors.
pub fn fuse<T: Scalar>(f_s: &Tensor<T>, f_d: &Tensor<T>, s: &Tensor<f64>) -> Result<Tensor<T>> {
    if f_s.shape() != f_d.shape() {
        return Err(Error::Argument(format!(
            "fusion inputs differ: {:?} vs {:?}",
            f_s.shape(),
            f_d.shape()
        )));
    }
    if f_s.shape().len() != 3 || s.shape() != &f_s.shape()[..2] {
        return Err(Error::Argument(format!(
            "SNR map {:?} does not match features {:?}",
            s.shape(),
            f_s.shape()
        )));
    }
    if s.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Argument(
            "continuous SNR map must lie in [0,1]".to_string(),
        ));
    }
    let g: Graph<T> = Graph::new();
    let a = g.constant(f_s.clone());
    let b = g.constant(f_d.clone());
    Ok(g.value(fuse_graph(&g, a, b, s)))
}

/// Head builder: returns sigmoid-squashed reflectance `[h, w, 3]` and
/// illumination `[h, w]` vars.
pub fn head_graph<T: Scalar>(
    g: &Graph<T>,
    fused: Var,
    img: Var,
    vars: &HeadVars,
) -> (Var, Var) {
    let residual = conv3x3_graph(g, fused, vars.fuse_w, vars.fuse_b);
    let carried = g.add(residual, img);
    let out = conv3x3_graph(g, carried, vars.out_w, vars.out_b);
    let squashed = g.sigmoid(out);
    let shape = g.shape(squashed);
    let (h, w) = (shape[0], shape[1]);
    let mut ridx = Vec::with_capacity(h * w * 3);
    let mut iidx = Vec::with_capacity(h * w);
    for px in 0..h * w {
        ridx.extend(px * 4..px * 4 + 3);
        iidx.push(px * 4 + 3);
    }
    let r = g.gather(squashed, Arc::new(ridx), vec![h, w, 3]);
    let i = g.gather(squashed, Arc::new(iidx), vec![h, w]);
    (r, i)
}

/// Decomposition head on plain tensors.
pub fn head<T: Scalar>(
    fused: &Tensor<T>,
    img: &RgbImage,
    params: &HeadParams<T>,
) -> Result<DecompositionOutput> {
    if fused.shape().len() != 3
        || fused.shape()[0] != img.height()
        || fused.shape()[1] != img.width()
    {
        return Err(Error::Argument(format!(
            "fused features {:?} do not match image {}x{}",
            fused.shape(),
            img.height(),
            img.width()
        )));
    }
    if params.fuse.in_channels() != fused.shape()[2]
        || params.fuse.out_channels() != 3
        || params.out.in_channels() != 3
        || params.out.out_channels() != 4
    {
        return Err(Error::Argument(
            "head convolutions must map c -> 3 -> 4 channels".to_string(),
        ));
    }
    let g: Graph<T> = Graph::new();
    let mut binder = Binder::constants(&g);
    let vars = bind_head(&mut binder, params);
    let fv = g.constant(fused.clone());
    let iv = g.constant(img.to_tensor());
    let (r, i) = head_graph(&g, fv, iv, &vars);
    Ok(DecompositionOutput {
        reflectance: RgbImage::new(
            img.height(),
            img.width(),
            g.value(r).data().iter().map(|&v| v.to_f64()).collect(),
        ),
        illumination: GrayImage::new(
            img.height(),
            img.width(),
            g.value(i).data().iter().map(|&v| v.to_f64()).collect(),
        ),
    })
}
