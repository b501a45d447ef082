#![no_main]

use latent_prior::data::ShardData;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(shard) = ShardData::decode(data) {
        let again = ShardData::decode(&shard.encode()).expect("re-encoded shard decodes");
        assert_eq!(again.encode(), shard.encode());
    }
});
