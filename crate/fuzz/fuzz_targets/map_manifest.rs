#![no_main]

use cpal_core::pipeline::PacamManifest;
use cpal_core::proto::CandidateIndex;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = PacamManifest::from_json_str(text);
    let _ = CandidateIndex::from_json_str(text);
});
