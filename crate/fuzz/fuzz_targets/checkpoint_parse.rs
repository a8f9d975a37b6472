#![no_main]

use libfuzzer_sys::fuzz_target;

use lowlight::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::parse(data) {
        // a successful parse must re-serialize and re-parse identically
        let bytes = ckpt.to_bytes();
        let again = Checkpoint::parse(&bytes).expect("round trip of a valid archive");
        assert_eq!(again, ckpt);
    }
});
