#![no_main]

use libfuzzer_sys::fuzz_target;
use quantsparse::harness::{Config, SweepGrid};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(grid) = SweepGrid::from_json(text) else {
        return;
    };
    if let Ok(cells) = grid.cells(&Config::default()) {
        assert_eq!(Some(cells.len()), grid.size());
        for c in cells.iter().take(16) {
            let _ = c.apply(&Config::default());
        }
    }
});
