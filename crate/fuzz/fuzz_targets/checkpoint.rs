#![no_main]

use libfuzzer_sys::fuzz_target;
use moe_restore::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        let again = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(again.records.len(), ck.records.len());
        assert_eq!(again.model, ck.model);
    }
});
