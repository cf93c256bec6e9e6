#![no_main]

use libfuzzer_sys::fuzz_target;
use quantsparse::quant::{fake_quant, QuantParams};
use quantsparse::Matrix;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(p) = QuantParams::from_json(text) else {
        return;
    };
    assert_eq!(QuantParams::from_json(&p.to_json()).expect("round trip"), p);
    // a per-tensor or per-row layout with a matching shape
    let rows = p.groups().min(64);
    if p.check_shape(rows, 1).is_ok() {
        let x = Matrix::from_fn(rows, 1, |i, _| i as f64 - 3.5);
        let y = fake_quant(&x, &p).expect("shape checked");
        assert_eq!(y.shape(), x.shape());
    }
});
