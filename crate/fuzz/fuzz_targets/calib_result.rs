#![no_main]

use libfuzzer_sys::fuzz_target;
use quantsparse::calib::CalibResult;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(r) = CalibResult::from_json(text) {
        assert_eq!(r.loss_trace.len(), r.schedule.epochs);
        let _ = r.params.check_block(&r.block);
    }
});
