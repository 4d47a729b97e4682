#![no_main]

use hardylab::experiments::ExperimentKind;
use hardylab::operators::{Method, OperatorSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(spec) = OperatorSpec::parse(text) {
        for n in [1, 2] {
            let _ = spec.check_dim(n);
        }
    }
    let _ = Method::parse(text);
    let _ = ExperimentKind::parse(text);
});
