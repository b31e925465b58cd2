#![no_main]

use libfuzzer_sys::fuzz_target;
use modadd::runner::Manifest;

fuzz_target!(|data: &[u8]| {
    let _: Result<Manifest, _> = serde_json::from_slice(data);
});
