#![no_main]
use libfuzzer_sys::fuzz_target;

use pidinet::blocks::NetworkSpec;
use pidinet::config::{parse_blocks, parse_kv, render_blocks};

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        // Architecture strings: a successful parse must survive the
        // render/re-parse round trip unchanged.
        if let Ok(kinds) = parse_blocks(s) {
            let canon = render_blocks(&kinds);
            assert_eq!(parse_blocks(&canon).unwrap(), kinds);
        }

        let _ = parse_kv(s);

        // Whole-network descriptions, as stored inside checkpoints.
        if let Ok(spec) = NetworkSpec::from_kv(s) {
            let back = NetworkSpec::from_kv(&spec.to_kv()).unwrap();
            assert_eq!(back, spec);
        }
    }
});
