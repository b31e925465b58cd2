#![no_main]

use libfuzzer_sys::fuzz_target;
use modadd::task_data::{SplitSpec, MODULUS};

fuzz_target!(|data: &str| {
    if let Ok(spec) = SplitSpec::from_text(data, 0, MODULUS) {
        let again = SplitSpec::from_text(&spec.to_text(), 0, MODULUS).expect("own output parses");
        assert_eq!(again, spec);
    }
});
