use std::path::Path;
use std::process::{Command, Output};

use hardylab::atoms::{make_random_atom, AtomParams};
use hardylab::format::{read_grid_file, write_grid_file};
use hardylab::operators::{apply, Method, OperatorSpec};
use hardylab::{Ball, Grid, GridFunction, WeightSpec};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hardylab"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn hardylab")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout)
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", String::from_utf8_lossy(&o.stdout)))
}

fn stderr_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("stderr is empty");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn golden(name: &str) -> String {
    format!("{}/tests/golden/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn atom_file(dir: &Path) -> (std::path::PathBuf, GridFunction) {
    let g = Grid::new(1, 8.0, 1024).unwrap();
    let params = AtomParams::new(
        2.0 / 3.0,
        4.0,
        1,
        Ball::interval(0.5, 1.0).unwrap(),
        WeightSpec::power(-0.5, vec![]),
    )
    .unwrap();
    let a = make_random_atom(&g, &params, 9).unwrap();
    let path = dir.join("atom.grid");
    write_grid_file(&path, &a).unwrap();
    (path, a)
}

#[test]
fn weights_of_lebesgue_measure() {
    let o = run(&[
        "weights", "--weight", "one", "--p", "2", "--depth", "8", "--cells", "1024",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["ap_char"], 1.0);
    assert_eq!(v["weight"]["kind"], "one");
}

#[test]
fn non_integrable_weight_exits_with_divergence() {
    let o = run(&[
        "weights",
        "--weight",
        "power:a=-1",
        "--p",
        "2",
        "--depth",
        "8",
        "--cells",
        "1024",
    ]);
    assert_eq!(o.status.code(), Some(4));
    let e = stderr_json(&o);
    assert_eq!(e["diverged"], true);
    assert_eq!(e["error"]["kind"], "diverged");
}

#[test]
fn p0_at_most_one_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = atom_file(dir.path());
    let o = run(&[
        "validate",
        "--kind",
        "atom",
        "--in",
        path.to_str().unwrap(),
        "--p",
        "0.5",
        "--p0",
        "1",
        "--d",
        "0",
        "--ball",
        "0.5,1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"]["kind"], "invalid_argument");
}

#[test]
fn unknown_flags_are_rejected() {
    let o = run(&["weights", "--weight", "one", "--bogus", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["schema_version"], 1);
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn generated_atom_validates() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = atom_file(dir.path());
    let out = dir.path().join("v.json");
    for kind in ["atom", "molecule"] {
        let o = run(&[
            "validate",
            "--kind",
            kind,
            "--in",
            path.to_str().unwrap(),
            "--weight",
            "power:a=-0.5",
            "--p",
            "0.6666666666666666",
            "--p0",
            "4",
            "--d",
            "1",
            "--ball",
            "0.5,1",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(v["report"]["pass"], true, "{kind}");
        assert_eq!(v["schema_version"], 1);
    }
}

#[test]
fn operator_output_matches_library_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (path, a) = atom_file(dir.path());
    let out = dir.path().join("ha.grid");
    let o = run(&[
        "operator",
        "--op",
        "hilbert",
        "--in",
        path.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["schema_version"], 1);
    let from_file = read_grid_file(&out).unwrap();
    let direct = apply(&a, &OperatorSpec::Hilbert, Method::multiplier())
        .unwrap()
        .output;
    assert_eq!(from_file.values(), direct.values());

    let omega = dir.path().join("omega.txt");
    std::fs::write(
        &omega,
        "#hardylab-omega v1 n=1 M=2\n-0.3183098861837907 0.3183098861837907\n",
    )
    .unwrap();
    let kout = dir.path().join("ka.grid");
    let op = format!("kernel:{}", omega.display());
    let o = run(&[
        "operator",
        "--op",
        &op,
        "--in",
        path.to_str().unwrap(),
        "--out",
        kout.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let k = read_grid_file(&kout).unwrap();
    let diff = k.combine(1.0, &direct, -1.0).unwrap().max_abs();
    assert!(diff < 1e-12 * direct.max_abs());

    std::fs::write(&omega, "#hardylab-omega v1 n=1 M=2\n1 1\n").unwrap();
    let o = run(&[
        "operator",
        "--op",
        &op,
        "--in",
        path.to_str().unwrap(),
        "--out",
        kout.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn emitted_grids_re_parse() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = atom_file(dir.path());
    let gout = dir.path().join("m.grid");
    let o = run(&[
        "maximal",
        "--op",
        "smooth",
        "--in",
        path.to_str().unwrap(),
        "--grid-out",
        gout.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_grid_file(&gout).unwrap();
    let again = dir.path().join("m2.grid");
    write_grid_file(&again, &m).unwrap();
    assert_eq!(read_grid_file(&again).unwrap().values(), m.values());

    let o = run(&[
        "maximal",
        "--op",
        "hardy-norm",
        "--in",
        path.to_str().unwrap(),
        "--weight",
        "power:a=-0.5",
        "--p",
        "0.6666666666666666",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout_json(&o)["hardy_norm"].as_f64().unwrap() > 0.0);
}

#[test]
fn decomposition_embeds_atoms() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid::new(1, 8.0, 2048).unwrap();
    let params = AtomParams::new(
        2.0 / 3.0,
        4.0,
        1,
        Ball::interval(-0.5, 1.5).unwrap(),
        WeightSpec::power(-0.5, vec![]),
    )
    .unwrap();
    let a = make_random_atom(&g, &params, 4).unwrap();
    let path = dir.path().join("f.grid");
    write_grid_file(&path, &a).unwrap();
    let out = dir.path().join("dec.json");
    let o = run(&[
        "decompose",
        "--in",
        path.to_str().unwrap(),
        "--weight",
        "power:a=-0.5",
        "--p",
        "0.6666666666666666",
        "--p0",
        "4",
        "--d",
        "1",
        "--depth",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["all_atoms_pass"], true);
    let entries = v["entries"].as_array().unwrap();
    assert!(!entries.is_empty());
    let mut sum = GridFunction::zeros(g);
    for e in entries {
        let atom = hardylab::format::parse_grid(e["atom"].as_str().unwrap()).unwrap();
        sum.add_scaled(&atom, e["lambda"].as_f64().unwrap()).unwrap();
    }
    let err = sum.combine(1.0, &a, -1.0).unwrap().lp_norm(2.0) / a.lp_norm(2.0);
    assert!(err < 1e-6, "{err}");

    // A function with nonzero mean cannot be decomposed into atoms.
    let bump =
        GridFunction::from_fn(g, |x| (-(x[0] * x[0]) * 4.0).exp() * f64::from(x[0].abs() < 2.0)).unwrap();
    write_grid_file(&path, &bump).unwrap();
    let o = run(&[
        "decompose",
        "--in",
        path.to_str().unwrap(),
        "--p",
        "1",
        "--p0",
        "2",
        "--d",
        "0",
        "--depth",
        "8",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

fn experiment(config: &str, extra: &[&str], threads: Option<&str>) -> (Output, String) {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let mut cmd = bin();
    cmd.args([
        "experiment",
        "--kind",
        "atom-uniform-bound",
        "--config",
        config,
        "--out",
        out.to_str().unwrap(),
    ])
    .args(extra);
    if let Some(t) = threads {
        cmd.env("HARDYLAB_THREADS", t);
    }
    let o = cmd.output().unwrap();
    let text = std::fs::read_to_string(&out).unwrap_or_default();
    (o, text)
}

#[test]
fn experiment_is_reproducible_across_thread_counts() {
    let cfg = golden("hilbert_small.json");
    let (o1, r1) = experiment(&cfg, &[], Some("1"));
    let (o4, r4) = experiment(&cfg, &[], Some("4"));
    assert_eq!(
        o1.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o1.stderr)
    );
    assert_eq!(o4.status.code(), Some(0));
    assert_eq!(r1, r4);
    let (_, other) = experiment(&cfg, &["--seed", "2025"], None);
    assert_ne!(r1, other);
}

/// Compares two JSON documents: identical structure and strings, numbers
/// within a relative `tol` (FFT kernels may round differently across CPUs).
fn close(a: &Value, b: &Value, tol: f64, path: &str) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            assert!((x - y).abs() <= tol * x.abs().max(y.abs()), "{path}: {x} vs {y}");
        }
        (Value::Array(x), Value::Array(y)) => {
            assert_eq!(x.len(), y.len(), "{path}");
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                close(u, v, tol, &format!("{path}[{i}]"));
            }
        }
        (Value::Object(x), Value::Object(y)) => {
            assert_eq!(
                x.keys().collect::<Vec<_>>(),
                y.keys().collect::<Vec<_>>(),
                "{path}"
            );
            for (k, u) in x {
                close(u, &y[k], tol, &format!("{path}.{k}"));
            }
        }
        _ => assert_eq!(a, b, "{path}"),
    }
}

#[test]
fn experiment_matches_golden_report() {
    let (o, text) = experiment(&golden("hilbert_small.json"), &[], None);
    assert_eq!(o.status.code(), Some(0));
    let got: Value = serde_json::from_str(&text).unwrap();
    let want: Value =
        serde_json::from_str(&std::fs::read_to_string(golden("hilbert_small.report.json")).unwrap()).unwrap();
    close(&got, &want, 1e-9, "$");
}

#[test]
fn failed_hypotheses_still_write_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("plot.csv");
    let (o, text) = experiment(
        &golden("ialpha_boundary.json"),
        &["--plot-csv", csv.to_str().unwrap()],
        None,
    );
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_json(&o)["error"]["kind"], "hypothesis_not_satisfied");
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["hypotheses_satisfied"], false);
    assert_eq!(v["trials"].as_array().unwrap().len(), 3);
    let plot = std::fs::read_to_string(&csv).unwrap();
    let mut lines = plot.lines();
    assert_eq!(lines.next(), Some("trial,statistic,grid_N"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn bad_thread_count_is_an_argument_error() {
    let (o, _) = experiment(&golden("hilbert_small.json"), &[], Some("zero"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn experiment_kind_defaults_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let cfg = golden("hilbert_small.json");
    let o = run(&["experiment", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (_, with_kind) = experiment(&cfg, &[], None);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), with_kind);
    let clash = run(&[
        "experiment",
        "--kind",
        "hardy-boundedness",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(clash.status.code(), Some(2));
}
