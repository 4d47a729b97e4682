#![no_main]

use hardylab::format::{parse_grid, write_grid};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(f) = parse_grid(text) {
        let back = parse_grid(&write_grid(&f)).expect("written grids parse");
        assert_eq!(back.grid(), f.grid());
        assert!(back
            .values()
            .iter()
            .zip(f.values())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
});
