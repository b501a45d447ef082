#![no_main]

use latent_prior::evaluation::parse_prompt_file;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(entries) = parse_prompt_file(text) {
            assert!(!entries.is_empty());
        }
    }
});
