#![no_main]

use libfuzzer_sys::fuzz_target;
use modadd::tokenizer::Vocabulary;

fuzz_target!(|data: &str| {
    // Anything that parses must survive its own canonical form.
    if let Ok(vocab) = Vocabulary::parse(data) {
        let again = Vocabulary::parse(&vocab.to_text()).expect("canonical form reparses");
        assert_eq!(again.hash(), vocab.hash());
    }
});
