#![no_main]

use libfuzzer_sys::fuzz_target;
use modadd::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        assert_eq!(ck.encode(), data);
    }
    // Skip the digest so mutations reach header and array validation.
    let _ = Checkpoint::decode_unverified(data);
});
