#![no_main]

use libfuzzer_sys::fuzz_target;
use modadd::rendering::{render, TemplateRegistry};
use modadd::rng::Stream;
use modadd::task_data::Pair;
use modadd::tokenizer::Vocabulary;

fuzz_target!(|data: &str| {
    let vocab = Vocabulary::builtin();
    let Ok(registry) = TemplateRegistry::parse(data, &vocab) else {
        return;
    };
    // Accepted templates must render and encode at every reachable position.
    let pair = Pair::new(96, 7, 97).unwrap();
    let mut rng = Stream::from_state(data.len() as u64);
    for t in registry.templates() {
        for target in [0, 10, 40, 70] {
            if let Ok(ex) = render(&pair, t, target, true, &mut rng) {
                assert_eq!(ex.text.chars().position(|c| c.is_ascii_digit()), Some(target));
                vocab.encode(&ex.text).expect("validated templates encode");
            }
        }
    }
});
