//! LOL dataset discovery and training crops.
//!
//! Expected layouts (pairing is by identical filename):
//!
//! * LOL-v1: `root/our485/{low,high}/*.png`, `root/eval15/{low,high}/*.png`
//! * LOL-v2-real: `root/{Train,Test}/{Low,Normal}/*.png`
//!
//! The training split lists low-light images only; normal-light files are
//! neither listed nor opened on the training path.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetVersion {
    LolV1,
    LolV2Real,
}

impl DatasetVersion {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lol-v1" => Ok(DatasetVersion::LolV1),
            "lol-v2-real" => Ok(DatasetVersion::LolV2Real),
            other => Err(Error::Argument(format!(
                "unknown dataset `{other}` (expected lol-v1 or lol-v2-real)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetVersion::LolV1 => "lol-v1",
            DatasetVersion::LolV2Real => "lol-v2-real",
        }
    }
}

/// Sorted listing of one dataset split.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub split: Split,
    /// Low-light image paths, sorted by filename.
    pub low: Vec<PathBuf>,
    /// Paired normal-light paths (test split only), aligned with `low`.
    pub high: Option<Vec<PathBuf>>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.low.is_empty()
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Layout(format!(
            "expected directory {} is missing",
            dir.display()
        )));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

fn file_names(paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect()
}

/// Discover a LOL split. Deterministic: a pure function of the directory
/// contents, sorted by filename.
pub fn index_lol(root: &Path, split: Split, version: DatasetVersion) -> Result<DatasetIndex> {
    let (low_dir, high_dir) = match (version, split) {
        (DatasetVersion::LolV1, Split::Train) => (root.join("our485/low"), root.join("our485/high")),
        (DatasetVersion::LolV1, Split::Test) => (root.join("eval15/low"), root.join("eval15/high")),
        (DatasetVersion::LolV2Real, Split::Train) => (root.join("Train/Low"), root.join("Train/Normal")),
        (DatasetVersion::LolV2Real, Split::Test) => (root.join("Test/Low"), root.join("Test/Normal")),
    };

    let low = list_pngs(&low_dir)?;
    let high = match split {
        // Unsupervised training never lists normal-light data.
        Split::Train => None,
        Split::Test => {
            let high = list_pngs(&high_dir)?;
            let (ln, hn) = (file_names(&low), file_names(&high));
            if ln != hn {
                let missing: Vec<_> = ln.iter().filter(|n| !hn.contains(n)).collect();
                let extra: Vec<_> = hn.iter().filter(|n| !ln.contains(n)).collect();
                return Err(Error::Layout(format!(
                    "low/high filename mismatch under {}: missing high {:?}, unmatched high {:?}",
                    root.display(),
                    missing,
                    extra
                )));
            }
            Some(high)
        }
    };

    Ok(DatasetIndex {
        root: root.to_path_buf(),
        split,
        low,
        high,
    })
}

/// Contiguous `size x size` crop at offsets drawn from `rng`.
pub fn random_crop(img: &RgbImage, size: usize, rng: &mut impl Rng) -> Result<RgbImage> {
    if size == 0 || size > img.height() || size > img.width() {
        return Err(Error::Argument(format!(
            "crop size {} does not fit a {}x{} image",
            size,
            img.height(),
            img.width()
        )));
    }
    let oy = rng.gen_range(0..=img.height() - size);
    let ox = rng.gen_range(0..=img.width() - size);
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            data.extend_from_slice(&img.pixel(oy + y, ox + x));
        }
    }
    Ok(RgbImage::new(size, size, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_image(h: usize, w: usize) -> RgbImage {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let v = (y * w + x) as f64 / (h * w) as f64;
                data.extend_from_slice(&[v, v, v]);
            }
        }
        RgbImage::new(h, w, data)
    }

    #[test]
    fn identity_crop_when_size_matches() {
        let img = ramp_image(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let crop = random_crop(&img, 4, &mut rng).unwrap();
        assert_eq!(crop, img);
    }

    #[test]
    fn crop_is_deterministic_for_a_seed() {
        let img = ramp_image(16, 12);
        let a = random_crop(&img, 8, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = random_crop(&img, 8, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_offsets_cover_exactly_the_valid_range() {
        // 4x4 image, size 2: offsets must cover {0,1,2}^2 and nothing else.
        let img = ramp_image(4, 4);
        let mut seen = std::collections::HashSet::new();
        for seed in 0..500u64 {
            let crop = random_crop(&img, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            // recover the offset from the top-left pixel value
            let v = crop.pixel(0, 0)[0];
            let flat = (v * 16.0).round() as usize;
            seen.insert((flat / 4, flat % 4));
        }
        let expect: std::collections::HashSet<(usize, usize)> =
            (0..3).flat_map(|y| (0..3).map(move |x| (y, x))).collect();
        assert_eq!(seen, expect);
    }

    #[test]
    fn oversized_crop_is_an_argument_error() {
        let img = ramp_image(4, 4);
        let err = random_crop(&img, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }
}
