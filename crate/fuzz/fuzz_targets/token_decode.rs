#![no_main]

use libfuzzer_sys::fuzz_target;
use modadd::tokenizer::{TokenSequence, Vocabulary, MAX_LEN};

fuzz_target!(|data: &[u8]| {
    let vocab = Vocabulary::builtin();
    let ids: Vec<u16> = data
        .chunks_exact(2)
        .take(MAX_LEN)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    let raw_len = ids.len();
    let mut seq = TokenSequence {
        ids,
        mask: vec![true; raw_len],
        raw_len,
    };
    seq.ids.resize(MAX_LEN, 0);
    seq.mask.resize(MAX_LEN, false);
    if let Ok(text) = vocab.decode(&seq) {
        // Decoded text re-encodes to the same non-pad ids.
        let again = vocab.encode(&text).expect("decoded text encodes");
        let kept: Vec<u16> = seq.ids.iter().copied().filter(|&id| id != 0).collect();
        assert_eq!(&again.ids[..again.raw_len], kept.as_slice());
    }
});
