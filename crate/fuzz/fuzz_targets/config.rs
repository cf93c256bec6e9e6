#![no_main]

use libfuzzer_sys::fuzz_target;
use quantsparse::harness::Config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = Config::from_json(text) {
        // anything accepted must survive a round trip and stay valid
        let back = Config::from_json(&cfg.to_json()).expect("accepted config re-parses");
        assert_eq!(back, cfg);
        let _ = cfg.plan().expect("validated plan");
        assert!(cfg.rank() >= 1);
    }
});
