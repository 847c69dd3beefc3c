#![no_main]

use libfuzzer_sys::fuzz_target;
use moe_restore::manifest::Manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(Ok(m)) = std::str::from_utf8(data).map(Manifest::parse) {
        let text = m.to_string();
        assert_eq!(Manifest::parse(&text).unwrap().to_string(), text);
    }
});
