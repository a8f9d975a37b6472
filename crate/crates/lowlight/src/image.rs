//! Image types and PNG I/O.
//!
//! Pixels live in `[0, 1]` as `f64`; files are strictly 8-bit RGB PNG.
//! Loading divides by 255, saving rounds `p * 255` to the nearest byte, so a
//! save/load round trip moves a channel by at most `1/510`.
//!
//! Every file read goes through [`load_image`], which reports the path to an
//! optional access recorder. Tests use the recorder to prove that training
//! never touches normal-light images.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use image::ImageReader;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// RGB image with all channels in `[0, 1]`, stored row-major `[h, w, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Single-channel image with values in `[0, 1]`, stored row-major `[h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert!(height >= 1 && width >= 1, "image must be at least 1x1");
        assert_eq!(data.len(), height * width * 3);
        assert!(
            data.iter().all(|&v| (0.0..=1.0).contains(&v)),
            "pixel values must lie in [0,1]"
        );
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let base = (y * self.width + x) * 3;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let base = (y * self.width + x) * 3;
        self.data[base..base + 3].copy_from_slice(&rgb);
    }

    /// Copy into a `[h, w, 3]` tensor of the requested precision.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64_slice(vec![self.height, self.width, 3], &self.data)
    }

    /// Mean BT.601 luma over the whole image.
    pub fn mean_luminance(&self) -> f64 {
        to_grayscale(self).data.iter().sum::<f64>() / (self.height * self.width) as f64
    }
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert!(height >= 1 && width >= 1);
        assert_eq!(data.len(), height * width);
        assert!(
            data.iter().all(|&v| (0.0..=1.0).contains(&v)),
            "pixel values must lie in [0,1]"
        );
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64_slice(vec![self.height, self.width], &self.data)
    }
}

/// BT.601 luma: `0.299 r + 0.587 g + 0.114 b`.
pub fn to_grayscale(img: &RgbImage) -> GrayImage {
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    GrayImage {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Decode an 8-bit RGB PNG from memory.
///
/// Anything that is not exactly 8-bit RGB is rejected with a format error
/// naming the offending property.
pub fn decode_image(bytes: &[u8], origin: &Path) -> Result<RgbImage> {
    let reader = ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::io(origin, e))?;
    match reader.format() {
        Some(image::ImageFormat::Png) => {}
        other => {
            return Err(Error::format(
                origin,
                format!("expected PNG, found {:?}", other),
            ))
        }
    }
    let decoded = reader
        .decode()
        .map_err(|e| Error::format(origin, format!("PNG decode failed: {e}")))?;
    let rgb = match decoded {
        image::DynamicImage::ImageRgb8(buf) => buf,
        other => {
            return Err(Error::format(
                origin,
                format!("expected 8-bit RGB, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data = rgb.into_raw().iter().map(|&b| b as f64 / 255.0).collect();
    Ok(RgbImage {
        height: h,
        width: w,
        data,
    })
}

/// Load an 8-bit RGB PNG from disk.
pub fn load_image(path: &Path) -> Result<RgbImage> {
    access_log::record(path);
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Write an 8-bit RGB PNG; channels are `round(p * 255)`.
pub fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes)
        .expect("buffer size matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })
}

/// Write a single-channel map in `[0, 1]` as an 8-bit grayscale PNG.
pub fn save_gray_map(height: usize, width: usize, data: &[f64], path: &Path) -> Result<()> {
    assert_eq!(data.len(), height * width);
    let bytes: Vec<u8> = data.iter().map(|&v| quantize(v)).collect();
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .expect("buffer size matches dimensions");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })
}

/// Records every path passed to [`load_image`] while enabled.
pub mod access_log {
    use super::*;

    static LOG: Mutex<Option<Vec<PathBuf>>> = Mutex::new(None);

    /// Start recording image reads (clears any previous recording).
    pub fn enable() {
        *LOG.lock().unwrap() = Some(Vec::new());
    }

    /// Stop recording and return everything read since `enable`.
    pub fn drain() -> Vec<PathBuf> {
        LOG.lock().unwrap().take().unwrap_or_default()
    }

    pub(super) fn record(path: &Path) {
        if let Some(log) = LOG.lock().unwrap().as_mut() {
            log.push(path.to_path_buf());
        }
    }
}
