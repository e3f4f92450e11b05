#![no_main]

use attn_disagree::tensor::Tensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(t) = Tensor::from_csv(text) {
        let back = Tensor::from_csv(&t.to_csv()).expect("written tensor parses");
        assert_eq!(back.shape(), t.shape());
    }
});
