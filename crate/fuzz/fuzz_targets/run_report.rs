#![no_main]

use libfuzzer_sys::fuzz_target;
use quantsparse::harness::RunReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(r) = RunReport::from_json(text) {
        let mut out = Vec::new();
        r.write_errors_csv(&mut out).expect("csv to memory");
    }
});
