#![no_main]

use attn_disagree::diagnostics::DisagreementReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(r) = DisagreementReport::from_csv(text) {
        let _ = r.summary_table();
        let _ = DisagreementReport::from_csv(&r.to_csv());
    }
});
