#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;

use lowlight::image::decode_image;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data, Path::new("fuzz-input")) {
        // accepted images must satisfy the pixel-range invariant
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
});
