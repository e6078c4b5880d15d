#![no_main]

use cpal_core::npy::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode(data) {
        let again = decode(&encode(&t)).expect("re-encoded tensor must decode");
        assert_eq!(again.shape(), t.shape());
        assert!(again.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
});
