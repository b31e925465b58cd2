#![no_main]

use libfuzzer_sys::fuzz_target;
use modadd::runner::ResultsFile;

fuzz_target!(|data: &str| {
    if let Ok(results) = ResultsFile::parse(data) {
        let text = serde_json::to_string(&results).unwrap();
        ResultsFile::parse(&text).expect("valid results survive a round trip");
    }
});
