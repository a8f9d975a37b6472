//! Unsupervised Retinex objective.
//!
//! For an observed low-light image `s` and a predicted decomposition
//! `(r, i)` the loss is
//!
//! ```text
//! 0.5 * mean (s - r.i)^2                              reconstruction
//! + l1 * mean |max_c r - histeq(max_c s)|             reflectance brightness
//! + l2 * mean |grad i| . exp(-l3 * mean_c |grad r|)   structure-aware smoothness
//! + l4 * mean (|dx r| + |dy r|)                       reflectance TV
//! ```
//!
//! All reductions are means, so the weights are resolution independent.
//! Gradients are forward differences with a replicate boundary (zero along
//! the last row/column). Histogram equalization only ever touches the
//! observed image, which is constant, so the objective stays differentiable
//! in `r` and `i` almost everywhere; `max_c` routes its subgradient to the
//! first maximizing channel.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::{GrayImage, RgbImage};
use crate::model::fusion::DecompositionOutput;
use crate::tensor::{Scalar, Tensor};

/// Weights of the objective. `lambda3` lives inside the illumination
/// exponential; the others scale whole terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: 10.0,
            lambda4: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!(
                    "{name} must be a nonnegative finite number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar value of each term. `total` is exactly
/// `recon + l1*reflect_hist + l2*illum_smooth + l4*reflect_tv`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub reflect_hist: f64,
    pub illum_smooth: f64,
    pub reflect_tv: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|(_, v)| v.is_finite())
    }

    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("recon", self.recon),
            ("reflect_hist", self.reflect_hist),
            ("illum_smooth", self.illum_smooth),
            ("reflect_tv", self.reflect_tv),
            ("total", self.total),
        ]
    }
}

/// Forward differences along x and y with replicate boundary.
///
/// Works on `[h, w]` and `[h, w, c]` tensors; the last column/row of the
/// respective output is zero.
pub fn grad_xy<T: Scalar>(t: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let g: Graph<T> = Graph::new();
    let v = g.constant(t.clone());
    let (dx, dy) = grad_xy_graph(&g, v);
    (g.value(dx), g.value(dy))
}

fn shift_maps(shape: &[usize]) -> (Arc<Vec<usize>>, Arc<Vec<usize>>) {
    let (h, w) = (shape[0], shape[1]);
    let c = if shape.len() == 3 { shape[2] } else { 1 };
    let mut xidx = Vec::with_capacity(h * w * c);
    let mut yidx = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let xs = (x + 1).min(w - 1);
            let ys = (y + 1).min(h - 1);
            for ch in 0..c {
                xidx.push((y * w + xs) * c + ch);
                yidx.push((ys * w + x) * c + ch);
            }
        }
    }
    (Arc::new(xidx), Arc::new(yidx))
}

pub(crate) fn grad_xy_graph<T: Scalar>(g: &Graph<T>, t: Var) -> (Var, Var) {
    let shape = g.shape(t);
    assert!(
        shape.len() == 2 || shape.len() == 3,
        "grad_xy expects [h,w] or [h,w,c]"
    );
    let (xmap, ymap) = shift_maps(&shape);
    let dx = g.sub(g.gather(t, xmap, shape.clone()), t);
    let dy = g.sub(g.gather(t, ymap, shape), t);
    (dx, dy)
}

/// Elementwise maximum over the three channels.
pub fn max_channel(img: &RgbImage) -> GrayImage {
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| p[0].max(p[1]).max(p[2]))
        .collect();
    GrayImage::new(img.height(), img.width(), data)
}

/// Histogram equalization over 256 bins.
///
/// Maps `v` to `(cdf(v) - cdf_min) / (n - cdf_min)`; a constant image (where
/// that denominator vanishes) is returned unchanged.
pub fn hist_equalize(gray: &GrayImage) -> GrayImage {
    let n = gray.data().len();
    let mut hist = [0usize; 256];
    let bin = |v: f64| -> usize { (v * 255.0).round().clamp(0.0, 255.0) as usize };
    for &v in gray.data() {
        hist[bin(v)] += 1;
    }
    let mut cdf = [0usize; 256];
    let mut acc = 0;
    for (c, &h) in cdf.iter_mut().zip(&hist) {
        acc += h;
        *c = acc;
    }
    let cdf_min = *cdf.iter().find(|&&c| c > 0).unwrap_or(&0);
    if cdf_min == n {
        return gray.clone();
    }
    let denom = (n - cdf_min) as f64;
    let data = gray
        .data()
        .iter()
        .map(|&v| (cdf[bin(v)] - cdf_min) as f64 / denom)
        .collect();
    GrayImage::new(gray.height(), gray.width(), data)
}

/// Graph handles for every term of the objective.
pub struct LossVars {
    pub recon: Var,
    pub reflect_hist: Var,
    pub illum_smooth: Var,
    pub reflect_tv: Var,
    pub total: Var,
}

/// Build the full objective over graph nodes `r` (`[h, w, 3]`) and `i`
/// (`[h, w]`) against the constant observed image.
pub fn total_loss_graph<T: Scalar>(
    g: &Graph<T>,
    observed: &RgbImage,
    r: Var,
    i: Var,
    w: &LossWeights,
) -> LossVars {
    let (h, wd) = (observed.height(), observed.width());
    assert_eq!(g.shape(r), vec![h, wd, 3], "reflectance shape");
    assert_eq!(g.shape(i), vec![h, wd], "illumination shape");

    let s = g.constant(observed.to_tensor());

    // reconstruction: 0.5 * mean (s - r.i)^2, i broadcast over channels
    let ib = g.gather(
        i,
        Arc::new((0..h * wd * 3).map(|k| k / 3).collect()),
        vec![h, wd, 3],
    );
    let diff = g.sub(s, g.mul(r, ib));
    let recon = g.mul_const(g.mean_all(g.mul(diff, diff)), T::from_f64(0.5));

    // reflectance brightness: mean |max_c r - histeq(max_c s)|
    let target = hist_equalize(&max_channel(observed));
    let tv_target = g.constant(target.to_tensor());
    let max_r = g.max_last(r);
    let reflect_hist = g.mean_all(g.abs(g.sub(max_r, tv_target)));

    // gradients of r and i
    let (dxr, dyr) = grad_xy_graph(g, r);
    let (dxi, dyi) = grad_xy_graph(g, i);
    let adxr = g.abs(dxr);
    let adyr = g.abs(dyr);

    // reflectance TV: mean (|dx r| + |dy r|)
    let reflect_tv = g.mean_all(g.add(adxr, adyr));

    // structure-aware illumination smoothness, averaged over both directions
    let third = T::from_f64(1.0 / 3.0);
    let neg_l3 = T::from_f64(-w.lambda3);
    let wx = g.exp(g.mul_const(g.mul_const(g.sum_axis(adxr, 2), third), neg_l3));
    let wy = g.exp(g.mul_const(g.mul_const(g.sum_axis(adyr, 2), third), neg_l3));
    let tx = g.mean_all(g.mul(g.abs(dxi), wx));
    let ty = g.mean_all(g.mul(g.abs(dyi), wy));
    let illum_smooth = g.mul_const(g.add(tx, ty), T::from_f64(0.5));

    let total = g.add(
        g.add(recon, g.mul_const(reflect_hist, T::from_f64(w.lambda1))),
        g.add(
            g.mul_const(illum_smooth, T::from_f64(w.lambda2)),
            g.mul_const(reflect_tv, T::from_f64(w.lambda4)),
        ),
    );

    LossVars {
        recon,
        reflect_hist,
        illum_smooth,
        reflect_tv,
        total,
    }
}

impl LossVars {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        LossBreakdown {
            recon: g.scalar_value(self.recon).to_f64(),
            reflect_hist: g.scalar_value(self.reflect_hist).to_f64(),
            illum_smooth: g.scalar_value(self.illum_smooth).to_f64(),
            reflect_tv: g.scalar_value(self.reflect_tv).to_f64(),
            total: g.scalar_value(self.total).to_f64(),
        }
    }
}

fn check_shapes(s: &RgbImage, r: &Tensor<f64>, i: &Tensor<f64>) -> Result<()> {
    if r.shape() != [s.height(), s.width(), 3] {
        return Err(Error::Argument(format!(
            "reflectance {:?} does not match image {}x{}",
            r.shape(),
            s.height(),
            s.width()
        )));
    }
    if i.shape() != [s.height(), s.width()] {
        return Err(Error::Argument(format!(
            "illumination {:?} does not match image {}x{}",
            i.shape(),
            s.height(),
            s.width()
        )));
    }
    Ok(())
}

/// Reconstruction term alone: `0.5 * mean (s - r.i)^2`.
pub fn recon_loss(s: &RgbImage, r: &Tensor<f64>, i: &Tensor<f64>) -> Result<f64> {
    check_shapes(s, r, i)?;
    let b = eval_breakdown(s, r, i, &LossWeights::default())?;
    Ok(b.recon)
}

/// Reflectance prior terms: `(brightness, tv)`.
pub fn reflectance_prior(r: &Tensor<f64>, s: &RgbImage) -> Result<(f64, f64)> {
    let i = Tensor::filled(vec![s.height(), s.width()], 0.5);
    check_shapes(s, r, &i)?;
    let b = eval_breakdown(s, r, &i, &LossWeights::default())?;
    Ok((b.reflect_hist, b.reflect_tv))
}

/// Structure-aware illumination smoothness term.
pub fn illumination_prior(i: &Tensor<f64>, r: &Tensor<f64>, lambda3: f64) -> Result<f64> {
    if lambda3 < 0.0 {
        return Err(Error::Argument(format!(
            "lambda3 must be nonnegative, got {lambda3}"
        )));
    }
    if i.shape().len() != 2 || r.shape() != [i.shape()[0], i.shape()[1], 3] {
        return Err(Error::Argument(format!(
            "illumination {:?} and reflectance {:?} are inconsistent",
            i.shape(),
            r.shape()
        )));
    }
    let s = RgbImage::filled(i.shape()[0], i.shape()[1], [0.0, 0.0, 0.0]);
    let w = LossWeights {
        lambda3,
        ..Default::default()
    };
    let b = eval_breakdown(&s, r, i, &w)?;
    Ok(b.illum_smooth)
}

fn eval_breakdown(
    s: &RgbImage,
    r: &Tensor<f64>,
    i: &Tensor<f64>,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let g: Graph<f64> = Graph::new();
    let rv = g.constant(r.clone());
    let iv = g.constant(i.clone());
    let vars = total_loss_graph(&g, s, rv, iv, w);
    Ok(vars.breakdown(&g))
}

/// Full objective on a finished decomposition.
pub fn total_loss(
    s: &RgbImage,
    out: &DecompositionOutput,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    let r = out.reflectance.to_tensor::<f64>();
    let i = out.illumination.to_tensor::<f64>();
    check_shapes(s, &r, &i)?;
    eval_breakdown(s, &r, &i, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_of_constant_image_vanish() {
        let t = Tensor::filled(vec![3, 4], 0.7);
        let (dx, dy) = grad_xy(&t);
        assert!(dx.data().iter().chain(dy.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_forward_differences() {
        let t = Tensor::new(vec![1, 3], vec![0.0, 0.5, 1.0]);
        let (dx, _) = grad_xy(&t);
        assert_eq!(dx.data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn single_pixel_has_zero_gradients() {
        let t = Tensor::new(vec![1, 1], vec![0.9]);
        let (dx, dy) = grad_xy(&t);
        assert_eq!(dx.data(), &[0.0]);
        assert_eq!(dy.data(), &[0.0]);
    }

    #[test]
    fn max_channel_picks_largest() {
        let img = RgbImage::new(1, 1, vec![0.2, 0.8, 0.4]);
        assert_eq!(max_channel(&img).data(), &[0.8]);
        let gray = RgbImage::filled(2, 2, [0.3, 0.3, 0.3]);
        assert!(max_channel(&gray).data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn max_channel_dominates_each_channel() {
        let img = RgbImage::new(
            2,
            2,
            vec![0.1, 0.9, 0.5, 0.3, 0.2, 0.7, 0.6, 0.6, 0.6, 0.0, 1.0, 0.2],
        );
        let m = max_channel(&img);
        for y in 0..2 {
            for x in 0..2 {
                let p = img.pixel(y, x);
                assert!(m.at(y, x) >= p[0] && m.at(y, x) >= p[1] && m.at(y, x) >= p[2]);
            }
        }
    }

    #[test]
    fn hist_equalize_constant_is_identity() {
        let g = GrayImage::new(2, 3, vec![0.25; 6]);
        assert_eq!(hist_equalize(&g), g);
    }

    #[test]
    fn hist_equalize_two_levels_map_to_extremes() {
        let g = GrayImage::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        let e = hist_equalize(&g);
        assert_eq!(e.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn hist_equalize_flattens_a_smooth_gradient() {
        // squash a gradient into the lower half of the range; equalization
        // must spread it out, reducing the variance of 16-bin counts
        let n = 64usize;
        let data: Vec<f64> = (0..n).map(|k| 0.25 * (k as f64 / (n - 1) as f64).powi(3)).collect();
        let g = GrayImage::new(1, n, data);
        let e = hist_equalize(&g);
        let hist16 = |img: &GrayImage| {
            let mut h = [0f64; 16];
            for &v in img.data() {
                h[((v * 15.999) as usize).min(15)] += 1.0;
            }
            h
        };
        let variance = |h: &[f64; 16]| {
            let m = h.iter().sum::<f64>() / 16.0;
            h.iter().map(|&c| (c - m) * (c - m)).sum::<f64>() / 16.0
        };
        assert!(variance(&hist16(&e)) < variance(&hist16(&g)));
        assert!(e.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn recon_zero_when_product_matches() {
        let s = RgbImage::filled(2, 2, [0.32, 0.32, 0.32]);
        let r = Tensor::filled(vec![2, 2, 3], 0.8);
        let i = Tensor::filled(vec![2, 2], 0.4);
        assert!(recon_loss(&s, &r, &i).unwrap() < 1e-15);
    }

    #[test]
    fn recon_single_pixel_arithmetic() {
        let s = RgbImage::filled(1, 1, [1.0, 1.0, 1.0]);
        let r = Tensor::filled(vec![1, 1, 3], 1.0);
        let i = Tensor::filled(vec![1, 1], 0.0);
        assert!((recon_loss(&s, &r, &i).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn recon_invariant_to_reciprocal_scaling() {
        let s = RgbImage::filled(2, 2, [0.3, 0.5, 0.2]);
        let r = Tensor::new(vec![2, 2, 3], (0..12).map(|k| 0.2 + 0.05 * k as f64).collect());
        let i = Tensor::filled(vec![2, 2], 0.8);
        let c = 1.25;
        let a = recon_loss(&s, &r, &i).unwrap();
        let b = recon_loss(&s, &r.map(|v| v * c), &i.map(|v| v / c)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn recon_shape_mismatch_is_argument_error() {
        let s = RgbImage::filled(2, 2, [0.3, 0.3, 0.3]);
        let r = Tensor::filled(vec![2, 3, 3], 0.5);
        let i = Tensor::filled(vec![2, 2], 0.5);
        assert!(recon_loss(&s, &r, &i).is_err());
    }

    #[test]
    fn reflectance_prior_constant_case() {
        // constant r and s: tv = 0, hist target equals s itself
        let s = RgbImage::filled(3, 3, [0.2, 0.4, 0.3]);
        let r = Tensor::filled(vec![3, 3, 3], 0.9);
        let (hist, tv) = reflectance_prior(&r, &s).unwrap();
        assert!(tv.abs() < 1e-15);
        assert!((hist - (0.9f64 - 0.4).abs()).abs() < 1e-12);
    }

    #[test]
    fn reflectance_prior_zero_when_max_matches_target() {
        let s = RgbImage::filled(2, 2, [0.1, 0.25, 0.2]);
        // constant s equalizes to itself (max channel 0.25)
        let r = Tensor::new(
            vec![2, 2, 3],
            vec![0.25, 0.1, 0.2, 0.25, 0.25, 0.0, 0.2, 0.25, 0.1, 0.0, 0.0, 0.25],
        );
        let (hist, _) = reflectance_prior(&r, &s).unwrap();
        assert!(hist.abs() < 1e-15);
    }

    #[test]
    fn checkerboard_tv_counts_unit_steps() {
        // 2x2 checkerboard of 0/1 in every channel: every forward difference
        // that crosses a cell edge has magnitude 1; replicate boundary kills
        // the last row/column. mean(|dx| + |dy|) over h*w*3 entries:
        // dx nonzero at (0,0),(1,0); dy nonzero at (0,0),(0,1).
        let mut img = vec![0.0; 2 * 2 * 3];
        for (px, v) in [(0usize, 1.0), (3usize, 1.0)] {
            img[px * 3] = v;
            img[px * 3 + 1] = v;
            img[px * 3 + 2] = v;
        }
        let r = Tensor::new(vec![2, 2, 3], img);
        let s = RgbImage::filled(2, 2, [0.5, 0.5, 0.5]);
        let (_, tv) = reflectance_prior(&r, &s).unwrap();
        // 4 of 4 pixels contribute |dx|+|dy| = 1 each in every channel except
        // boundary: dx: (0,0)=1,(0,1)=0(replicate),(1,0)=1,(1,1)=0;
        // dy: (0,0)=1,(0,1)=1,(1,0)=0,(1,1)=0 -> sum 4 per channel, 12 over
        // 12 entries -> mean 1.0
        assert!((tv - 1.0).abs() < 1e-12);
    }

    #[test]
    fn illumination_prior_zero_for_constant_illumination() {
        let i = Tensor::filled(vec![3, 3], 0.6);
        let r = Tensor::new(vec![3, 3, 3], (0..27).map(|k| (k as f64 * 0.31).sin().abs()).collect());
        assert!(illumination_prior(&i, &r, 10.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn illumination_prior_matches_plain_tv_when_lambda3_zero() {
        let i = Tensor::new(vec![2, 2], vec![0.1, 0.7, 0.4, 0.9]);
        let r = Tensor::new(vec![2, 2, 3], (0..12).map(|k| (k as f64 * 0.17).cos().abs()).collect());
        let got = illumination_prior(&i, &r, 0.0).unwrap();
        let (dx, dy) = grad_xy(&i);
        let plain: f64 = (dx.data().iter().map(|v| v.abs()).sum::<f64>()
            + dy.data().iter().map(|v| v.abs()).sum::<f64>())
            / 8.0;
        assert!((got - plain).abs() < 1e-12);
    }

    #[test]
    fn strong_reflectance_edge_excuses_illumination_edge() {
        // one unit step in i co-located with a unit step in every channel of
        // r: the x-direction contribution is exp(-10) per crossing pixel
        let i = Tensor::new(vec![1, 2], vec![0.0, 1.0]);
        let r = Tensor::new(vec![1, 2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let got = illumination_prior(&i, &r, 10.0).unwrap();
        // dx has one nonzero pixel out of 2, dy none: ((e^-10 + 0)/2 + 0)/2
        let expect = (-10.0f64).exp() / 4.0;
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
        assert!((-10.0f64).exp() < 4.6e-5);
    }

    #[test]
    fn total_is_the_weighted_sum_of_components() {
        let s = RgbImage::filled(4, 4, [0.2, 0.3, 0.25]);
        let r = Tensor::new(vec![4, 4, 3], (0..48).map(|k| 0.3 + 0.01 * (k % 7) as f64).collect());
        let i = Tensor::new(vec![4, 4], (0..16).map(|k| 0.4 + 0.02 * (k % 5) as f64).collect());
        let w = LossWeights::default();
        let b = eval_breakdown(&s, &r, &i, &w).unwrap();
        let sum = b.recon + w.lambda1 * b.reflect_hist + w.lambda2 * b.illum_smooth
            + w.lambda4 * b.reflect_tv;
        assert!((b.total - sum).abs() < 1e-12);
        assert!(b.recon >= 0.0 && b.reflect_hist >= 0.0 && b.illum_smooth >= 0.0 && b.reflect_tv >= 0.0);
    }

    #[test]
    fn zero_weights_leave_only_reconstruction() {
        let s = RgbImage::filled(2, 2, [0.4, 0.4, 0.4]);
        let r = Tensor::filled(vec![2, 2, 3], 0.9);
        let i = Tensor::filled(vec![2, 2], 0.3);
        let w = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 10.0,
            lambda4: 0.0,
        };
        let b = eval_breakdown(&s, &r, &i, &w).unwrap();
        assert!((b.total - b.recon).abs() < 1e-15);
    }

    #[test]
    fn exact_decomposition_with_unit_illumination_has_zero_loss() {
        // r constant, i = 1, s = r.i: every component vanishes
        let r = Tensor::filled(vec![3, 3, 3], 0.37);
        let i = Tensor::filled(vec![3, 3], 1.0);
        let s = RgbImage::filled(3, 3, [0.37, 0.37, 0.37]);
        let b = eval_breakdown(&s, &r, &i, &LossWeights::default()).unwrap();
        assert!(b.total.abs() < 1e-12, "total {}", b.total);
    }

    #[test]
    fn raising_lambda4_never_lowers_the_tv_contribution() {
        let s = RgbImage::filled(3, 3, [0.2, 0.2, 0.2]);
        let r = Tensor::new(vec![3, 3, 3], (0..27).map(|k| ((k * 5 % 9) as f64) / 10.0).collect());
        let i = Tensor::filled(vec![3, 3], 0.5);
        let mut prev = f64::NEG_INFINITY;
        for l4 in [0.0, 0.01, 0.1, 1.0] {
            let w = LossWeights {
                lambda4: l4,
                ..Default::default()
            };
            let b = eval_breakdown(&s, &r, &i, &w).unwrap();
            let contribution = l4 * b.reflect_tv;
            assert!(contribution >= prev);
            prev = contribution;
        }
    }
}
