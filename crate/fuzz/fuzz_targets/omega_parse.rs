#![no_main]

use hardylab::operators::{parse_omega, OperatorSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(omega) = parse_omega(text) {
        let spec = OperatorSpec::kernel(omega, 0.1);
        let _ = spec.check_dim(2);
    }
});
