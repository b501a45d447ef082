#![no_main]

use latent_prior::prior::PriorCheckpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = PriorCheckpoint::decode(data) {
        PriorCheckpoint::decode(&ck.encode()).expect("re-encoded checkpoint decodes");
    }
});
