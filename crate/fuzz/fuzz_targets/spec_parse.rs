#![no_main]

use libfuzzer_sys::fuzz_target;
use modadd::runner::ExperimentSpec;

fuzz_target!(|data: &str| {
    let strict = ExperimentSpec::from_json(data, false);
    let relaxed = ExperimentSpec::from_json(data, true);
    // The escape hatch only ever widens what is accepted.
    if strict.is_ok() {
        assert!(relaxed.is_ok());
    }
});
