#![no_main]

use attn_disagree::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        assert_eq!(Checkpoint::decode(&ck.encode()).expect("re-encoded checkpoint decodes"), ck);
        let _ = ck.into_model();
    }
});
