#![no_main]

use latent_prior::inference::EditDirection;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(d) = EditDirection::from_json(text) {
        assert_eq!(EditDirection::from_json(&d.to_json()).unwrap(), d);
    }
});
