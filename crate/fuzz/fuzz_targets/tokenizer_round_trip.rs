#![no_main]

use libfuzzer_sys::fuzz_target;
use modadd::tokenizer::Vocabulary;

fuzz_target!(|data: &str| {
    let vocab = Vocabulary::builtin();
    if let Ok(seq) = vocab.encode(data) {
        seq.validate().expect("encoded sequences are well formed");
        assert_eq!(vocab.decode(&seq).expect("encoded ids decode"), data);
    }
});
