#![no_main]

use libfuzzer_sys::fuzz_target;

use lowlight::config::parse_config;
use lowlight::train::TrainConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(map) = parse_config(text) {
            // applying an arbitrary parsed map may fail, but must not panic
            let _ = TrainConfig::from_map(&map);
        }
    }
});
