//! Signal-to-noise-ratio prior.
//!
//! The per-pixel SNR of a low-light image is approximated from its grayscale
//! version `I'` as `I' / (|I' - denoise(I')| + eps)`, clamped to `[0, 1]`,
//! then thresholded into a binary attention mask. The denoiser is a box mean
//! with replicate borders; values exactly at the threshold binarize to 1 so
//! that noise-free flat regions (which clamp to 1) are never masked out.

use crate::error::{Error, Result};
use crate::image::{to_grayscale, GrayImage, RgbImage};
use crate::tensor::Tensor;

/// Continuous SNR map plus its binarized mask, both `[h, w]`.
#[derive(Clone, Debug)]
pub struct SnrMap {
    /// Clamped ratio in `[0, 1]`.
    pub continuous: Tensor<f64>,
    /// `{0, 1}` attention mask: 1 where `continuous >= threshold`.
    pub mask: Tensor<f64>,
    pub threshold: f64,
}

impl SnrMap {
    pub fn height(&self) -> usize {
        self.continuous.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.continuous.shape()[1]
    }
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Argument(format!(
            "denoise kernel must be odd and positive, got {kernel}"
        )));
    }
    Ok(())
}

/// Box-mean filter of side `kernel` with replicate padding.
pub fn denoise(gray: &GrayImage, kernel: usize) -> Result<GrayImage> {
    check_kernel(kernel)?;
    let (h, w) = (gray.height(), gray.width());
    let r = (kernel / 2) as isize;
    let norm = 1.0 / (kernel * kernel) as f64;
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let sx = (x + dx).clamp(0, w as isize - 1) as usize;
                    acc += gray.at(sy, sx);
                }
            }
            out.push(acc * norm);
        }
    }
    Ok(GrayImage::new(h, w, out))
}

/// Absolute residual `|gray - denoise(gray)|`, the per-pixel noise estimate.
pub fn noise_estimate(gray: &GrayImage, kernel: usize) -> Result<GrayImage> {
    let smooth = denoise(gray, kernel)?;
    let data = gray
        .data()
        .iter()
        .zip(smooth.data())
        .map(|(&a, &b)| (a - b).abs())
        .collect();
    Ok(GrayImage::new(gray.height(), gray.width(), data))
}

/// Elementwise `gray / (e + eps)`. The raw ratio is unbounded; see
/// [`clamp01`].
pub fn snr_ratio(gray: &GrayImage, e: &GrayImage, eps: f64) -> Result<Tensor<f64>> {
    if gray.height() != e.height() || gray.width() != e.width() {
        return Err(Error::Argument(format!(
            "snr_ratio shape mismatch: {}x{} vs {}x{}",
            gray.height(),
            gray.width(),
            e.height(),
            e.width()
        )));
    }
    if eps <= 0.0 {
        return Err(Error::Argument(format!("eps must be positive, got {eps}")));
    }
    let data: Vec<f64> = gray
        .data()
        .iter()
        .zip(e.data())
        .map(|(&g, &n)| g / (n + eps))
        .collect();
    Ok(Tensor::new(vec![gray.height(), gray.width()], data))
}

/// Clamp to `[0, 1]`: negatives to 0, values above 1 to 1, interior
/// unchanged.
pub fn clamp01(ratio: &Tensor<f64>) -> Tensor<f64> {
    ratio.map(|v| v.clamp(0.0, 1.0))
}

/// Threshold into `{0, 1}`; values exactly at `t` map to 1.
pub fn binarize(s: &Tensor<f64>, t: f64) -> Result<Tensor<f64>> {
    if !(0.0 < t && t < 1.0) {
        return Err(Error::Argument(format!(
            "threshold must lie strictly inside (0,1), got {t}"
        )));
    }
    Ok(s.map(|v| if v >= t { 1.0 } else { 0.0 }))
}

/// Full pipeline: grayscale, noise estimate, ratio, clamp, binarize.
pub fn compute_snr_map(img: &RgbImage, kernel: usize, eps: f64, t: f64) -> Result<SnrMap> {
    let gray = to_grayscale(img);
    let e = noise_estimate(&gray, kernel)?;
    let continuous = clamp01(&snr_ratio(&gray, &e, eps)?);
    let mask = binarize(&continuous, t)?;
    Ok(SnrMap {
        continuous,
        mask,
        threshold: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn center_impulse() -> GrayImage {
        let mut data = vec![0.0; 9];
        data[4] = 1.0;
        GrayImage::new(3, 3, data)
    }

    #[test]
    fn kernel_one_is_identity() {
        let g = center_impulse();
        assert_eq!(denoise(&g, 1).unwrap(), g);
        assert!(noise_estimate(&g, 1).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn even_kernel_rejected() {
        let g = center_impulse();
        assert!(matches!(denoise(&g, 2), Err(Error::Argument(_))));
        assert!(matches!(denoise(&g, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn constant_image_fixed_point() {
        let g = GrayImage::new(4, 5, vec![0.42; 20]);
        let d = denoise(&g, 3).unwrap();
        assert!(d.data().iter().all(|&v| (v - 0.42).abs() < 1e-12));
        let e = noise_estimate(&g, 3).unwrap();
        assert!(e.data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn center_impulse_box_mean() {
        let g = center_impulse();
        let d = denoise(&g, 3).unwrap();
        assert!((d.at(1, 1) - 1.0 / 9.0).abs() < 1e-12);
        let e = noise_estimate(&g, 3).unwrap();
        assert!((e.at(1, 1) - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn ratio_guards_division() {
        let g = GrayImage::new(1, 1, vec![0.5]);
        let e = GrayImage::new(1, 1, vec![0.0]);
        let r = snr_ratio(&g, &e, 1e-6).unwrap();
        assert!((r.data()[0] - 5e5).abs() / 5e5 < 1e-9);
    }

    #[test]
    fn ratio_shape_mismatch_is_argument_error() {
        let g = GrayImage::new(1, 2, vec![0.5, 0.5]);
        let e = GrayImage::new(2, 1, vec![0.0, 0.0]);
        assert!(matches!(snr_ratio(&g, &e, 1e-6), Err(Error::Argument(_))));
    }

    #[test]
    fn clamp_rules() {
        let t = Tensor::new(vec![3], vec![0.3, 7.2, -0.1]);
        assert_eq!(clamp01(&t).data(), &[0.3, 1.0, 0.0]);
        // idempotent
        assert_eq!(clamp01(&clamp01(&t)).data(), clamp01(&t).data());
    }

    #[test]
    fn binarize_tie_goes_to_one() {
        let t = Tensor::new(vec![3], vec![0.3, 0.9, 0.5]);
        assert_eq!(binarize(&t, 0.5).unwrap().data(), &[0.0, 1.0, 1.0]);
        assert!(matches!(binarize(&t, 1.0), Err(Error::Argument(_))));
        assert!(matches!(binarize(&t, 0.0), Err(Error::Argument(_))));
    }

    #[test]
    fn raising_a_pixel_never_clears_its_mask_bit() {
        let values = [0.0, 0.2, 0.49, 0.5, 0.7, 1.0];
        for &v in &values {
            for &up in &values {
                if up < v {
                    continue;
                }
                let before = binarize(&Tensor::new(vec![1], vec![v]), 0.5).unwrap();
                let after = binarize(&Tensor::new(vec![1], vec![up]), 0.5).unwrap();
                assert!(after.data()[0] >= before.data()[0]);
            }
        }
    }

    #[test]
    fn constant_image_gives_all_ones() {
        let img = RgbImage::filled(6, 7, [0.3, 0.3, 0.3]);
        let snr = compute_snr_map(&img, 5, 1e-6, 0.5).unwrap();
        assert!(snr.continuous.data().iter().all(|&v| v == 1.0));
        assert!(snr.mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn pipeline_is_bitwise_deterministic() {
        let data: Vec<f64> = (0..6 * 7 * 3).map(|k| ((k * 37 % 97) as f64) / 97.0).collect();
        let img = RgbImage::new(6, 7, data);
        let a = compute_snr_map(&img, 5, 1e-6, 0.5).unwrap();
        let b = compute_snr_map(&img, 5, 1e-6, 0.5).unwrap();
        for (x, y) in a.continuous.data().iter().zip(b.continuous.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.mask.data(), b.mask.data());
    }

    #[test]
    fn black_image_gives_all_zeros() {
        let img = RgbImage::filled(6, 7, [0.0, 0.0, 0.0]);
        let snr = compute_snr_map(&img, 5, 1e-6, 0.5).unwrap();
        assert!(snr.continuous.data().iter().all(|&v| v == 0.0));
        assert!(snr.mask.data().iter().all(|&v| v == 0.0));
    }
}
