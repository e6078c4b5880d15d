#![no_main]

use cpal_core::pipeline::{ConfigFile, RunConfig};
use cpal_core::synth::DatasetSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = RunConfig::from_json_str(text) {
        c.validate().expect("parsed config is valid");
    }
    let _ = ConfigFile::from_json_str(text);
    if let Ok(spec) = DatasetSpec::from_json_str(text) {
        spec.validate().expect("parsed spec is valid");
    }
});
