//! PSNR and SSIM on `[0, 1]` RGB images.
//!
//! PSNR is `10 log10(1 / mse)` over all entries, capped at 100 dB so that
//! identical images stay finite in CSV output. SSIM is the single-scale
//! variant: 11x11 Gaussian window with sigma 1.5, `C1 = 0.01^2`,
//! `C2 = 0.03^2`, computed per channel on valid (unpadded) window positions
//! and averaged over channels.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{load_image, RgbImage};

pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same_shape(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Argument(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in decibels, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            k[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Structural similarity index in `[-1, 1]`.
///
/// Images must be at least 11x11 so at least one valid window exists.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Argument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let kernel = gaussian_kernel();
    let mut channel_means = [0.0; 3];
    for (ch, mean_slot) in channel_means.iter_mut().enumerate() {
        let mut acc = 0.0;
        let mut count = 0usize;
        for oy in 0..=h - SSIM_WINDOW {
            for ox in 0..=w - SSIM_WINDOW {
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut aa = 0.0;
                let mut bb = 0.0;
                let mut ab = 0.0;
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let wgt = kernel[ky * SSIM_WINDOW + kx];
                        let pa = a.pixel(oy + ky, ox + kx)[ch];
                        let pb = b.pixel(oy + ky, ox + kx)[ch];
                        mu_a += wgt * pa;
                        mu_b += wgt * pb;
                        aa += wgt * pa * pa;
                        bb += wgt * pb * pb;
                        ab += wgt * pa * pb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                acc += num / den;
                count += 1;
            }
        }
        *mean_slot = acc / count as f64;
    }
    Ok((channel_means[0] + channel_means[1] + channel_means[2]) / 3.0)
}

/// Quality of one prediction against its reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores plus their means.
#[derive(Clone, Debug)]
pub struct EvalTable {
    pub rows: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalTable {
    /// Deterministic CSV: one row per image (sorted by filename) plus a
    /// final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("filename,psnr,ssim\n");
        for row in &self.rows {
            out.push_str(&format!("{},{:.6},{:.6}\n", row.name, row.psnr, row.ssim));
        }
        out.push_str(&format!("mean,{:.6},{:.6}\n", self.mean_psnr, self.mean_ssim));
        out
    }
}

fn png_names(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Layout(format!(
            "expected directory {} is missing",
            dir.display()
        )));
    }
    let mut map = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        {
            map.insert(
                path.file_name().unwrap().to_string_lossy().into_owned(),
                path,
            );
        }
    }
    Ok(map)
}

/// Score every prediction in `pred_dir` against the same-named reference in
/// `gt_dir`. Mismatched filename sets are an error listing the symmetric
/// difference.
pub fn evaluate_dir(pred_dir: &Path, gt_dir: &Path) -> Result<EvalTable> {
    let preds = png_names(pred_dir)?;
    let gts = png_names(gt_dir)?;
    let only_pred: Vec<&String> = preds.keys().filter(|k| !gts.contains_key(*k)).collect();
    let only_gt: Vec<&String> = gts.keys().filter(|k| !preds.contains_key(*k)).collect();
    if !only_pred.is_empty() || !only_gt.is_empty() {
        return Err(Error::Argument(format!(
            "filename sets differ: only in predictions {:?}, only in reference {:?}",
            only_pred, only_gt
        )));
    }
    if preds.is_empty() {
        return Err(Error::Argument(format!(
            "no PNG files found under {}",
            pred_dir.display()
        )));
    }

    let mut rows = Vec::with_capacity(preds.len());
    for (name, pred_path) in &preds {
        let pred = load_image(pred_path)?;
        let gt = load_image(&gts[name])?;
        rows.push(ImageScore {
            name: name.clone(),
            psnr: psnr(&pred, &gt)?,
            ssim: ssim(&pred, &gt)?,
        });
    }
    let n = rows.len() as f64;
    Ok(EvalTable {
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows,
    })
}
