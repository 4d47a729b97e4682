#![no_main]

use hardylab::{Error, WeightSpec};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    // Table weights would touch the file system.
    let no_files = |_: &str| -> hardylab::Result<_> { Err(Error::InvalidArgument("no files".into())) };
    if let Ok(w) = WeightSpec::parse_with(text, no_files) {
        for n in [1, 2] {
            if w.check_dim(n).is_ok() {
                let _ = w.value(&[0.5, -0.25][..n]);
            }
        }
        let _ = w.pow(0.5);
        if w.check_dim(1).is_ok() {
            let _ = w.interval_mass(-1.0, 1.0);
            let _ = w.interval_ess_inf(-1.0, 1.0);
        }
    }
});
