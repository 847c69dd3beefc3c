#![no_main]

use libfuzzer_sys::fuzz_target;
use moe_restore::pnm::{decode_pnm, encode_pgm, encode_ppm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pnm(data) {
        let encode = |t| if img.shape()[0] == 1 { encode_pgm(t) } else { encode_ppm(t) };
        let bytes = encode(&img).unwrap();
        let back = decode_pnm(&bytes).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert_eq!(encode(&back).unwrap(), bytes);
    }
});
