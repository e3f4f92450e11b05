#![no_main]

use attn_disagree::data::{format_side, parse_parallel, Vocab};
use libfuzzer_sys::fuzz_target;

// Source and target text separated by a NUL byte.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let (src, tgt) = text.split_once('\0').unwrap_or((text, ""));
    let vocab = Vocab::new(16);
    if let Ok(examples) = parse_parallel(src, tgt, &vocab) {
        let s = format_side(&examples, &vocab, false);
        let t = format_side(&examples, &vocab, true);
        assert_eq!(parse_parallel(&s, &t, &vocab).expect("formatted corpus parses"), examples);
    }
});
