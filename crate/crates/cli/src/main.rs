//! `hardylab`: command-line front end.
//!
//! Exit codes: 0 success, 2 invalid arguments, 3 theorem hypotheses not
//! satisfied, 4 numerical divergence. Failures print one JSON object on
//! stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use hardylab::atoms::{parse_extended, validate_atom, validate_molecule, AtomParams, Tolerances};
use hardylab::czdecomp::{decompose, DecompositionParams};
use hardylab::experiments::{run_experiment, ExperimentConfig, ExperimentKind};
use hardylab::format::{read_grid_file, write_grid, write_grid_file};
use hardylab::maximal::{
    fractional_maximal, hardy_norm, hl_maximal, smooth_maximal_with_warnings, Bump, MaximalConfig,
};
use hardylab::operators::{apply, parse_omega, Method, OperatorSpec};
use hardylab::weights::{
    ap_characteristic, critical_indices, rh_characteristic, weight_profile, BallFamily, P_CAP, R_CAP,
};
use hardylab::{Ball, Error, Grid, GridFunction, WeightSpec, SCHEMA_VERSION, VERSION};

#[derive(Parser)]
#[command(name = "hardylab", version, about = "Weighted Hardy space toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// A_p / RH_s characteristics and critical indices of a weight.
    Weights(WeightsArgs),
    /// Maximal functions and the discrete H^p_w quasi-norm.
    Maximal(MaximalArgs),
    /// Check atom or molecule conditions.
    Validate(ValidateArgs),
    /// Atomic decomposition of a grid function (1-D).
    Decompose(DecomposeArgs),
    /// Apply a singular integral or the Riesz potential.
    Operator(OperatorArgs),
    /// Run a seeded experiment from a JSON config.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct MaximalOpts {
    /// Dyadic scales 2^k for k in kmin,kmax (default: spacing to box size).
    #[arg(long, value_name = "KMIN,KMAX", allow_hyphen_values = true)]
    scales: Option<String>,
    #[arg(long, value_enum, default_value_t = BumpArg::Standard)]
    bump: BumpArg,
    /// Planar family depth (default: all levels).
    #[arg(long)]
    family_depth: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BumpArg {
    Standard,
    Narrow,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Standard,
    Exhaustive,
    Shifted,
}

#[derive(Args)]
struct WeightsArgs {
    #[arg(long)]
    weight: String,
    /// A_p exponent.
    #[arg(long)]
    p: Option<f64>,
    /// Reverse-Hölder exponent.
    #[arg(long)]
    s: Option<f64>,
    #[arg(long, default_value_t = 10)]
    depth: u32,
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Cells per axis (default 4096 on the line, 256 in the plane).
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long, default_value_t = 8.0)]
    half_extent: f64,
    #[arg(long, value_enum, default_value_t = FamilyArg::Standard)]
    family: FamilyArg,
    /// Skip the critical-index bisection.
    #[arg(long)]
    no_indices: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MaximalOp {
    Hl,
    Frac,
    Smooth,
    HardyNorm,
}

#[derive(Args)]
struct MaximalArgs {
    #[arg(long, value_enum)]
    op: MaximalOp,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "one")]
    weight: String,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[command(flatten)]
    maximal: MaximalOpts,
    /// Also write the maximal function as a grid file.
    #[arg(long)]
    grid_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ValidateKind {
    Atom,
    Molecule,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, value_enum)]
    kind: ValidateKind,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "one")]
    weight: String,
    #[arg(long)]
    p: f64,
    /// A number above 1, or `inf`.
    #[arg(long)]
    p0: String,
    #[arg(long)]
    d: u32,
    /// `c,r` on the line, `c1,c2,r` in the plane.
    #[arg(long, allow_hyphen_values = true)]
    ball: String,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DecomposeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "one")]
    weight: String,
    #[arg(long)]
    p: f64,
    #[arg(long)]
    p0: String,
    #[arg(long)]
    d: u32,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Family depth for the admissibility check.
    #[arg(long, default_value_t = 10)]
    depth: u32,
    #[command(flatten)]
    maximal: MaximalOpts,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OperatorArgs {
    /// `hilbert`, `riesz:<j>`, `ialpha:<alpha>` or `kernel:<omega-file>`.
    #[arg(long)]
    op: String,
    /// `multiplier`, `periodic`, `quadrature` or `truncated`.
    #[arg(long, default_value = "multiplier")]
    method: String,
    /// Truncation radius for quadrature (default 2h).
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long = "in")]
    input: PathBuf,
    /// Output grid file.
    #[arg(long)]
    out: PathBuf,
    /// JSON summary (default stdout).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Must agree with the config's `kind` when both are given.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config trial count.
    #[arg(long)]
    trials: Option<usize>,
    /// Record wall time in the report (breaks bit-for-bit reproducibility).
    #[arg(long)]
    wall_time: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    plot_csv: Option<PathBuf>,
}

/// A command's result: its JSON document and the exit code to use after
/// writing it.
struct Outcome {
    doc: Value,
    code: u8,
}

impl Outcome {
    fn ok(doc: Value) -> Self {
        Self { doc, code: 0 }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Parse { .. } | Error::Io(_) => 2,
        Error::Hypothesis(_) => 3,
        Error::Diverged(_) | Error::Numerical(_) => 4,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidArgument(_) => "invalid_argument",
        Error::Parse { .. } => "parse",
        Error::Io(_) => "io",
        Error::Hypothesis(_) => "hypothesis_not_satisfied",
        Error::Diverged(_) => "diverged",
        Error::Numerical(_) => "numerical",
    }
}

fn fail(kind: &str, code: u8, message: String) -> ExitCode {
    let doc = json!({
        "schema_version": SCHEMA_VERSION,
        "error": { "kind": kind, "exit_code": code, "message": message },
        "diverged": code == 4,
    });
    eprintln!("{doc}");
    ExitCode::from(code)
}

fn to_value<T: serde::Serialize>(v: &T) -> Result<Value, Error> {
    serde_json::to_value(v).map_err(|e| Error::Numerical(format!("serialization failed: {e}")))
}

fn stamp(mut doc: Value, command: &str) -> Value {
    if let Value::Object(m) = &mut doc {
        m.insert("schema_version".into(), json!(SCHEMA_VERSION));
        m.insert("artifact_version".into(), json!(VERSION));
        m.insert("command".into(), json!(command));
    }
    doc
}

fn emit(doc: &Value, out: Option<&Path>) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(doc).map_err(|e| Error::Numerical(e.to_string()))? + "\n";
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::InvalidArgument(format!("bad {what} component {t:?}")))
        })
        .collect()
}

fn parse_ball(s: &str, dim: usize) -> Result<Ball, Error> {
    let v = parse_list(s, "ball")?;
    if v.len() != dim + 1 {
        return Err(Error::InvalidArgument(format!(
            "--ball needs {} comma-separated numbers on a {dim}-D grid",
            dim + 1
        )));
    }
    Ball::new(v[..dim].to_vec(), v[dim])
}

fn maximal_config(opts: &MaximalOpts, grid: &Grid) -> Result<MaximalConfig, Error> {
    let mut cfg = MaximalConfig::for_grid(grid).with_bump(match opts.bump {
        BumpArg::Standard => Bump::Standard,
        BumpArg::Narrow => Bump::Narrow,
    });
    if let Some(s) = &opts.scales {
        let v: Vec<i32> = s
            .split(',')
            .map(|t| t.trim().parse::<i32>())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::InvalidArgument(format!("--scales expects KMIN,KMAX, got {s:?}")))?;
        if v.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "--scales expects KMIN,KMAX, got {s:?}"
            )));
        }
        cfg.scale_range = (v[0], v[1]);
    }
    if let Some(d) = opts.family_depth {
        cfg.family_depth = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn weights(a: &WeightsArgs) -> Result<Outcome, Error> {
    let w = WeightSpec::parse(&a.weight)?;
    let cells = a.cells.unwrap_or(if a.dim == 1 { 4096 } else { 256 });
    let grid = Grid::new(a.dim, a.half_extent, cells)?;
    w.check_dim(a.dim)?;
    let family = match a.family {
        FamilyArg::Standard => BallFamily::standard(grid, a.depth)?,
        FamilyArg::Exhaustive => BallFamily::exhaustive(grid, a.depth)?,
        FamilyArg::Shifted => BallFamily::shifted_dyadic(grid, a.depth)?,
    };
    let mut doc = json!({
        "weight": to_value(&w)?,
        "grid": to_value(&grid)?,
        "family": to_value(&family)?,
    });
    if let Some(p) = a.p {
        let c = ap_characteristic(&w, p, &family)?;
        doc["p"] = json!(p);
        doc["ap_char"] = json!(c.value());
        doc["ap"] = to_value(&c)?;
    }
    if let Some(s) = a.s {
        let c = rh_characteristic(&w, s, &family)?;
        doc["s"] = json!(s);
        doc["rh_char"] = json!(c.value());
        doc["rh"] = to_value(&c)?;
    }
    if !a.no_indices {
        if a.p.is_none() && a.s.is_none() {
            doc["profile"] = to_value(&weight_profile(&w, &family)?)?;
        } else {
            doc["critical_indices"] = to_value(&critical_indices(&w, &family, P_CAP, R_CAP)?)?;
        }
    }
    Ok(Outcome::ok(doc))
}

fn maximal(a: &MaximalArgs) -> Result<Outcome, Error> {
    let f = read_grid_file(&a.input)?;
    let grid = *f.grid();
    let cfg = maximal_config(&a.maximal, &grid)?;
    let mut doc = json!({ "op": op_name(a.op), "config": to_value(&cfg)? });
    let (m, warnings): (Option<GridFunction>, Vec<String>) = match a.op {
        MaximalOp::Hl => (Some(hl_maximal(&f, &cfg)), vec![]),
        MaximalOp::Frac => {
            let alpha = a
                .alpha
                .ok_or_else(|| Error::InvalidArgument("--alpha is required for frac".into()))?;
            (Some(fractional_maximal(&f, alpha, &cfg)?), vec![])
        }
        MaximalOp::Smooth => {
            let (m, w) = smooth_maximal_with_warnings(&f, &cfg)?;
            (Some(m), w)
        }
        MaximalOp::HardyNorm => {
            let p =
                a.p.ok_or_else(|| Error::InvalidArgument("--p is required for hardy-norm".into()))?;
            let w = WeightSpec::parse(&a.weight)?;
            let v = hardy_norm(&f, &w, p, &cfg)?;
            doc["weight"] = to_value(&w)?;
            doc["p"] = json!(p);
            doc["hardy_norm"] = json!(v);
            (None, smooth_maximal_with_warnings(&f, &cfg)?.1)
        }
    };
    if let Some(m) = m {
        doc["max_value"] = json!(m.max_abs());
        if let Some(path) = &a.grid_out {
            write_grid_file(path, &m)?;
        } else {
            doc["grid"] = json!(write_grid(&m));
        }
    }
    doc["warnings"] = json!(warnings);
    Ok(Outcome::ok(doc))
}

fn op_name(op: MaximalOp) -> &'static str {
    match op {
        MaximalOp::Hl => "hl",
        MaximalOp::Frac => "frac",
        MaximalOp::Smooth => "smooth",
        MaximalOp::HardyNorm => "hardy-norm",
    }
}

fn validate(a: &ValidateArgs) -> Result<Outcome, Error> {
    let p0 = parse_extended(&a.p0)?;
    let w = WeightSpec::parse(&a.weight)?;
    // Parameter errors come before any file access.
    let probe = AtomParams::new(a.p, p0, a.d, Ball::new(vec![0.0], 1.0)?, WeightSpec::One)?;
    let f = read_grid_file(&a.input)?;
    let ball = parse_ball(&a.ball, f.grid().dim())?;
    let params = AtomParams::new(probe.p, probe.p0, probe.d, ball, w)?;
    let tol = Tolerances::uniform(a.tol);
    let rep = match a.kind {
        ValidateKind::Atom => validate_atom(&f, &params, tol)?,
        ValidateKind::Molecule => validate_molecule(&f, &params, tol)?,
    };
    Ok(Outcome::ok(
        json!({ "params": to_value(&params)?, "report": to_value(&rep)? }),
    ))
}

fn decompose_cmd(a: &DecomposeArgs) -> Result<Outcome, Error> {
    let p0 = parse_extended(&a.p0)?;
    let w = WeightSpec::parse(&a.weight)?;
    let f = read_grid_file(&a.input)?;
    let grid = *f.grid();
    let cfg = maximal_config(&a.maximal, &grid)?;
    let params = DecompositionParams {
        p: a.p,
        p0,
        d: a.d,
        weight: w,
    };
    let family = BallFamily::standard(grid, a.depth.min(grid.levels()))?;
    let profile = weight_profile(&params.weight, &family)?;
    let adm = params.check(&profile, &family)?;
    let dec = decompose(&f, &params, &cfg, Some(&adm), Tolerances::uniform(a.tol))?;
    let entries: Vec<Value> = dec
        .entries
        .iter()
        .map(|e| {
            let mut v = to_value(e)?;
            v["atom"] = json!(write_grid(&e.atom));
            Ok(v)
        })
        .collect::<Result<_, Error>>()?;
    let mut doc = to_value(&dec)?;
    doc["entries"] = Value::Array(entries);
    doc["admissibility"] = to_value(&adm)?;
    Ok(Outcome::ok(doc))
}

fn operator(a: &OperatorArgs) -> Result<Outcome, Error> {
    let mut method = Method::parse(&a.method)?;
    let f = read_grid_file(&a.input)?;
    let h = f.grid().spacing();
    if let (Some(e), Method::Quadrature { epsilon, .. }) = (a.epsilon, &mut method) {
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "--epsilon must be positive, got {e}"
            )));
        }
        *epsilon = Some(e);
    }
    let spec = match a.op.strip_prefix("kernel:") {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            OperatorSpec::kernel(parse_omega(&text)?, a.epsilon.unwrap_or(2.0 * h))
        }
        None => OperatorSpec::parse(&a.op)?,
    };
    let out = apply(&f, &spec, method)?;
    write_grid_file(&a.out, &out.output)?;
    let doc = json!({
        "operator": to_value(&spec)?,
        "method": to_value(&method)?,
        "output": a.out.display().to_string(),
        "l2_in": f.lp_norm(2.0),
        "l2_out": out.output.lp_norm(2.0),
        "warnings": out.warnings,
    });
    Ok(Outcome::ok(doc))
}

fn experiment(a: &ExperimentArgs) -> Result<Outcome, Error> {
    let kind = a.kind.as_deref().map(ExperimentKind::parse).transpose()?;
    let text = std::fs::read_to_string(&a.config)?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = a.trials {
        cfg.trials = t;
    }
    if a.wall_time {
        cfg.record_wall_time = true;
    }
    let report = run_experiment(&cfg, kind)?;
    if let Some(path) = &a.plot_csv {
        std::fs::write(path, report.plot_csv())?;
    }
    let code = if !report.hypotheses_satisfied {
        3
    } else if report.trials.iter().any(|t| !t.statistic.is_finite()) {
        4
    } else {
        0
    };
    Ok(Outcome {
        doc: to_value(&report)?,
        code,
    })
}

fn configure_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var("HARDYLAB_THREADS") {
        let k: usize = v.trim().parse().ok().filter(|k| *k > 0).ok_or_else(|| {
            Error::InvalidArgument(format!("HARDYLAB_THREADS must be a positive integer, got {v:?}"))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return fail("invalid_argument", 2, e.to_string().trim().to_string());
        }
    };
    if let Err(e) = configure_threads() {
        return fail(error_kind(&e), exit_code(&e), e.to_string());
    }
    let (name, out, result) = match &cli.command {
        Command::Weights(a) => ("weights", a.out.as_deref(), weights(a)),
        Command::Maximal(a) => ("maximal", a.out.as_deref(), maximal(a)),
        Command::Validate(a) => ("validate", a.out.as_deref(), validate(a)),
        Command::Decompose(a) => ("decompose", a.out.as_deref(), decompose_cmd(a)),
        Command::Operator(a) => ("operator", a.report.as_deref(), operator(a)),
        Command::Experiment(a) => ("experiment", a.out.as_deref(), experiment(a)),
    };
    match result {
        Ok(o) => {
            let doc = stamp(o.doc, name);
            if let Err(e) = emit(&doc, out) {
                return fail(error_kind(&e), exit_code(&e), e.to_string());
            }
            if o.code != 0 {
                let msg = match o.code {
                    3 => "hypotheses not satisfied; see the report",
                    _ => "non-finite statistics; see the report",
                };
                let kind = if o.code == 3 {
                    "hypothesis_not_satisfied"
                } else {
                    "diverged"
                };
                return fail(kind, o.code, msg.into());
            }
            ExitCode::SUCCESS
        }
        Err(e) => fail(error_kind(&e), exit_code(&e), e.to_string()),
    }
}
