#![no_main]

use cpal_core::synth::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = DatasetManifest::from_json_str(text) {
        m.validate().expect("parsed manifest is valid");
    }
});
