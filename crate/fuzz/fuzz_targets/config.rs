#![no_main]

use libfuzzer_sys::fuzz_target;
use moe_restore::config::Config;

fuzz_target!(|data: &[u8]| {
    if let Ok(Ok(c)) = std::str::from_utf8(data).map(Config::parse) {
        let text = c.to_string();
        assert_eq!(Config::parse(&text).unwrap().to_string(), text);
    }
});
