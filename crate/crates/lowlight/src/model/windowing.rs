//! Window partitioning for shifted-window attention.
//!
//! A `[h, w, c]` feature map is replicate-padded up to multiples of the
//! window side `m`, optionally rolled cyclically by `-shift` along both
//! spatial axes, and tiled into `hw/m^2` non-overlapping `m x m` windows.
//! Partition and merge are pure index maps, so inside the autodiff graph
//! they are single gather nodes and merge∘partition is exactly the identity
//! on the original canvas.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Everything needed to invert a partition exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub height: usize,
    pub width: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowGeometry {
    pub fn new(height: usize, width: usize, window: usize, shift: usize) -> Self {
        assert!(window >= 1);
        assert!(
            shift == 0 || shift == window / 2,
            "shift must be 0 or window/2"
        );
        let pad = |v: usize| v.div_ceil(window) * window;
        Self {
            height,
            width,
            padded_h: pad(height),
            padded_w: pad(width),
            window,
            shift,
        }
    }

    pub fn windows_down(&self) -> usize {
        self.padded_h / self.window
    }

    pub fn windows_across(&self) -> usize {
        self.padded_w / self.window
    }

    pub fn num_windows(&self) -> usize {
        self.windows_down() * self.windows_across()
    }

    pub fn positions(&self) -> usize {
        self.window * self.window
    }

    /// Source pixel (pre-pad, pre-roll) feeding window `z`, position `p`.
    /// Padded cells replicate the nearest edge pixel.
    fn source_pixel(&self, z: usize, p: usize) -> (usize, usize) {
        let (wy, wx) = (z / self.windows_across(), z % self.windows_across());
        let (py, px) = (p / self.window, p % self.window);
        // roll by -shift: rolled[i] = canvas[(i + shift) mod size]
        let y = (wy * self.window + py + self.shift) % self.padded_h;
        let x = (wx * self.window + px + self.shift) % self.padded_w;
        (y.min(self.height - 1), x.min(self.width - 1))
    }

    /// Window and position covering original pixel `(y, x)`.
    fn window_of(&self, y: usize, x: usize) -> (usize, usize) {
        let ry = (y + self.padded_h - self.shift) % self.padded_h;
        let rx = (x + self.padded_w - self.shift) % self.padded_w;
        let z = (ry / self.window) * self.windows_across() + rx / self.window;
        let p = (ry % self.window) * self.window + rx % self.window;
        (z, p)
    }
}

/// Gather indices taking a flat `[h, w, c]` buffer to `[nw, m*m, c]`.
pub fn partition_map(geom: &WindowGeometry, channels: usize) -> (Arc<Vec<usize>>, Vec<usize>) {
    let (nw, pp) = (geom.num_windows(), geom.positions());
    let mut idx = Vec::with_capacity(nw * pp * channels);
    for z in 0..nw {
        for p in 0..pp {
            let (y, x) = geom.source_pixel(z, p);
            let base = (y * geom.width + x) * channels;
            idx.extend(base..base + channels);
        }
    }
    (Arc::new(idx), vec![nw, pp, channels])
}

/// Gather indices taking a flat `[nw, m*m, c]` buffer back to `[h, w, c]`,
/// undoing the roll and cropping the padding.
pub fn merge_map(geom: &WindowGeometry, channels: usize) -> (Arc<Vec<usize>>, Vec<usize>) {
    let pp = geom.positions();
    let mut idx = Vec::with_capacity(geom.height * geom.width * channels);
    for y in 0..geom.height {
        for x in 0..geom.width {
            let (z, p) = geom.window_of(y, x);
            let base = (z * pp + p) * channels;
            idx.extend(base..base + channels);
        }
    }
    (Arc::new(idx), vec![geom.height, geom.width, channels])
}

/// Feature map tiled into windows, with the geometry needed to merge back.
#[derive(Clone, Debug)]
pub struct WindowGrid<T> {
    /// `[nw, m*m, c]`.
    pub windows: Tensor<T>,
    pub geom: WindowGeometry,
}

/// Tile a `[h, w, c]` tensor into windows (replicate padding, cyclic roll).
pub fn window_partition<T: Scalar>(f: &Tensor<T>, window: usize, shift: usize) -> WindowGrid<T> {
    assert_eq!(f.shape().len(), 3, "expected [h, w, c]");
    let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    let geom = WindowGeometry::new(h, w, window, shift);
    let (idx, out_shape) = partition_map(&geom, c);
    let data = idx.iter().map(|&i| f.data()[i]).collect();
    WindowGrid {
        windows: Tensor::new(out_shape, data),
        geom,
    }
}

/// Exact inverse of [`window_partition`].
pub fn window_merge<T: Scalar>(grid: &WindowGrid<T>) -> Result<Tensor<T>> {
    let shape = grid.windows.shape();
    let geom = &grid.geom;
    if shape.len() != 3
        || shape[0] != geom.num_windows()
        || shape[1] != geom.positions()
    {
        return Err(Error::Argument(format!(
            "window grid shape {:?} inconsistent with geometry {:?}",
            shape, geom
        )));
    }
    let c = shape[2];
    let (idx, out_shape) = merge_map(geom, c);
    let data = idx.iter().map(|&i| grid.windows.data()[i]).collect();
    Ok(Tensor::new(out_shape, data))
}

/// Partition a `[h, w]` binary mask to `[nw, m*m]`. Padded cells get 1 so
/// padding never suppresses attention.
pub fn partition_mask(mask: &Tensor<f64>, geom: &WindowGeometry) -> Tensor<f64> {
    assert_eq!(mask.shape(), &[geom.height, geom.width]);
    let (nw, pp) = (geom.num_windows(), geom.positions());
    let mut out = Vec::with_capacity(nw * pp);
    for z in 0..nw {
        for p in 0..pp {
            let (wy, wx) = (z / geom.windows_across(), z % geom.windows_across());
            let (py, px) = (p / geom.window, p % geom.window);
            let y = (wy * geom.window + py + geom.shift) % geom.padded_h;
            let x = (wx * geom.window + px + geom.shift) % geom.padded_w;
            if y >= geom.height || x >= geom.width {
                out.push(1.0);
            } else {
                out.push(mask.data()[y * geom.width + x]);
            }
        }
    }
    Tensor::new(vec![nw, pp], out)
}

/// Additive visibility bias for shifted layers: `delta` between positions
/// whose content was not adjacent before the cyclic roll, 0 otherwise.
/// Returns `None` when `shift == 0`.
pub fn shift_visibility_bias(geom: &WindowGeometry, delta: f64) -> Option<Tensor<f64>> {
    if geom.shift == 0 {
        return None;
    }
    let region = |coord: usize, size: usize| -> usize {
        if size > geom.window && coord < size - geom.window {
            0
        } else if coord < size - geom.shift {
            1
        } else {
            2
        }
    };
    let (nw, pp) = (geom.num_windows(), geom.positions());
    // region id of each rolled-canvas cell, per window position
    let mut ids = vec![0usize; nw * pp];
    for z in 0..nw {
        let (wy, wx) = (z / geom.windows_across(), z % geom.windows_across());
        for p in 0..pp {
            let (py, px) = (p / geom.window, p % geom.window);
            let y = wy * geom.window + py;
            let x = wx * geom.window + px;
            ids[z * pp + p] = region(y, geom.padded_h) * 3 + region(x, geom.padded_w);
        }
    }
    let mut out = vec![0.0; nw * pp * pp];
    for z in 0..nw {
        let wid = &ids[z * pp..(z + 1) * pp];
        for p in 0..pp {
            for q in 0..pp {
                if wid[p] != wid[q] {
                    out[(z * pp + p) * pp + q] = delta;
                }
            }
        }
    }
    Some(Tensor::new(vec![nw, pp, pp], out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coords_tensor(h: usize, w: usize) -> Tensor<f64> {
        // encode (y, x) as y * 100 + x so window contents are identifiable
        let data: Vec<f64> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y * 100 + x) as f64))
            .collect();
        Tensor::new(vec![h, w, 1], data)
    }

    #[test]
    fn window_count_matches_area() {
        let f = coords_tensor(4, 4);
        let grid = window_partition(&f, 2, 0);
        assert_eq!(grid.windows.shape(), &[4, 4, 1]);
    }

    #[test]
    fn merge_inverts_partition_without_padding() {
        let f = coords_tensor(4, 6);
        for shift in [0, 1] {
            let grid = window_partition(&f, 2, shift);
            let back = window_merge(&grid).unwrap();
            assert_eq!(back, f, "shift {shift}");
        }
    }

    #[test]
    fn merge_inverts_partition_with_padding() {
        let f = coords_tensor(5, 5);
        for shift in [0, 2] {
            let grid = window_partition(&f, 4, shift);
            assert_eq!(grid.geom.padded_h, 8);
            let back = window_merge(&grid).unwrap();
            assert_eq!(back, f, "shift {shift}");
        }
    }

    #[test]
    fn shifted_window_contains_expected_positions() {
        // 4x4 canvas, m=2, shift=1: window (0,0) holds original (1,1), (1,2),
        // (2,1), (2,2).
        let f = coords_tensor(4, 4);
        let grid = window_partition(&f, 2, 1);
        let got: Vec<f64> = (0..4).map(|p| grid.windows.at(&[0, p, 0])).collect();
        assert_eq!(got, vec![101.0, 102.0, 201.0, 202.0]);
    }

    #[test]
    fn single_window_is_a_reshape() {
        let f = coords_tensor(3, 3);
        let grid = window_partition(&f, 3, 0);
        assert_eq!(grid.windows.shape(), &[1, 9, 1]);
        assert_eq!(grid.windows.data(), f.data());
    }

    #[test]
    fn inconsistent_geometry_rejected() {
        let f = coords_tensor(4, 4);
        let mut grid = window_partition(&f, 2, 0);
        grid.windows = Tensor::zeros(vec![3, 4, 1]);
        assert!(window_merge(&grid).is_err());
    }

    #[test]
    fn mask_padding_is_one() {
        let mask = Tensor::new(vec![3, 3], vec![0.0; 9]);
        let geom = WindowGeometry::new(3, 3, 4, 0);
        let wm = partition_mask(&mask, &geom);
        assert_eq!(wm.shape(), &[1, 16]);
        // 3x3 zeros inside, padded ring of ones
        let ones = wm.data().iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 16 - 9);
    }

    #[test]
    fn visibility_bias_matches_reference_4x4_m2_s1() {
        // Window 0 of a 4x4/m=2/s=1 partition holds interior content only:
        // no pair is blocked. Window 3 (bottom-right) mixes all four wrapped
        // regions: every cross-position pair is blocked.
        let geom = WindowGeometry::new(4, 4, 2, 1);
        let bias = shift_visibility_bias(&geom, -100.0).unwrap();
        for p in 0..4 {
            for q in 0..4 {
                assert_eq!(bias.at(&[0, p, q]), 0.0, "window 0 ({p},{q})");
                let expect = if p == q { 0.0 } else { -100.0 };
                assert_eq!(bias.at(&[3, p, q]), expect, "window 3 ({p},{q})");
            }
        }
        // window 1 alternates columns (regions 1|2 along x)
        for (p, q, blocked) in [(0, 1, true), (0, 2, false), (1, 3, false), (2, 3, true)] {
            let v = bias.at(&[1, p, q]);
            assert_eq!(v != 0.0, blocked, "window 1 ({p},{q})");
        }
    }

    #[test]
    fn unshifted_layers_have_no_visibility_bias() {
        let geom = WindowGeometry::new(8, 8, 4, 0);
        assert!(shift_visibility_bias(&geom, -1e9).is_none());
    }
}
