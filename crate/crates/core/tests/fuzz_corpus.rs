//! Replays the checked-in fuzz seeds through the parsers so a regression
//! shows up without a nightly toolchain.

use std::fs;
use std::path::PathBuf;

use hardylab::experiments::{ExperimentConfig, ExperimentKind};
use hardylab::format::{parse_grid, write_grid};
use hardylab::operators::{parse_omega, Method, OperatorSpec};
use hardylab::{Error, WeightSpec};

fn seeds(target: &str) -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut out: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.display().to_string(), fs::read_to_string(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn grid_seeds() {
    let mut parsed = 0;
    for (_, text) in seeds("grid_parse") {
        if let Ok(f) = parse_grid(&text) {
            assert_eq!(parse_grid(&write_grid(&f)).unwrap(), f);
            parsed += 1;
        }
    }
    assert!(parsed >= 2);
}

#[test]
fn weight_seeds() {
    let no_files = |_: &str| -> hardylab::Result<_> { Err(Error::InvalidArgument("no files".into())) };
    for (path, text) in seeds("weight_spec_parse") {
        let r = WeightSpec::parse_with(&text, no_files);
        assert_eq!(r.is_ok(), !path.ends_with("table"), "{path}: {r:?}");
    }
}

#[test]
fn omega_seeds() {
    for (path, text) in seeds("omega_parse") {
        assert!(parse_omega(&text).is_ok(), "{path}");
    }
}

#[test]
fn spec_string_seeds() {
    for (path, text) in seeds("operator_spec_parse") {
        let any = OperatorSpec::parse(&text).is_ok()
            || Method::parse(&text).is_ok()
            || ExperimentKind::parse(&text).is_ok();
        assert!(any, "{path}");
    }
}

#[test]
fn experiment_config_seeds() {
    for (path, text) in seeds("experiment_config") {
        let cfg = ExperimentConfig::from_json(&text).unwrap_or_else(|e| panic!("{path}: {e}"));
        let echo = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&echo).unwrap(), cfg);
    }
}
