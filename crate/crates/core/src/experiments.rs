//! Seeded experiments that measure the constants in the boundedness
//! results: uniform bounds for operator images of atoms, molecular
//! synthesis, the critical-index chains, and end-to-end operator ratios.
//!
//! Every trial draws from its own ChaCha stream `(seed, trial)`, so reports
//! do not depend on scheduling or thread count. Constants are witnessed by
//! their stability under `N -> N/2`, never against a fixed value.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::atoms::{check_parameters, make_random_atom, make_random_molecule, AtomParams, Tolerances};
use crate::czdecomp::{decompose, DecompositionParams};
use crate::error::{invalid, Error, Result};
use crate::grid::{weighted_lp_norm_with_masses, Ball, Grid, GridFunction};
use crate::maximal::{hardy_norm_with_masses, MaximalConfig};
use crate::operators::{apply, potential_atom_moments, Method, OperatorSpec};
use crate::weights::{
    ap_characteristic, critical_indices, BallFamily, CriticalIndices, WeightSpec, P_CAP, R_CAP,
};

/// Accepted band for `max at N / max at N/2`.
pub const STABILITY_BAND: (f64, f64) = (0.8, 1.25);
/// Relative slack when comparing numerically estimated critical indices.
pub const INDEX_TOL: f64 = 0.05;
const DEFAULT_FAMILY_DEPTH: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    AtomUniformBound,
    MolecularSynthesis,
    IndexInequalities,
    HardyBoundedness,
}

impl ExperimentKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "atom_uniform_bound" => Ok(Self::AtomUniformBound),
            "molecular_synthesis" => Ok(Self::MolecularSynthesis),
            "index_inequalities" => Ok(Self::IndexInequalities),
            "hardy_boundedness" => Ok(Self::HardyBoundedness),
            _ => Err(invalid(format!(
                "unknown experiment kind {s:?} (expected atom-uniform-bound, molecular-synthesis, \
                 index-inequalities, hardy-boundedness)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dim: usize,
    pub half_extent: f64,
    pub cells: usize,
}

impl GridConfig {
    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dim, self.half_extent, self.cells)
    }
}

fn default_weight() -> String {
    "one".into()
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    /// Weight grammar: `one`, `power:a=..`, `prod:..`, `table:<path>`.
    #[serde(default = "default_weight")]
    pub weight: String,
    /// `hilbert`, `riesz:<j>` or `ialpha:<alpha>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    pub p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q0: Option<f64>,
    #[serde(default)]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    pub grid: GridConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maximal: Option<MaximalConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family_depth: Option<u32>,
    /// Terms per trial (molecules for synthesis, atoms for boundedness).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terms: Option<usize>,
    /// Ball radii as fractions of the half-extent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_range: Option<(f64, f64)>,
    #[serde(default = "yes")]
    pub refine: bool,
    #[serde(default = "yes")]
    pub decompose: bool,
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HypothesisCheck {
    pub name: String,
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    pub satisfied: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl HypothesisCheck {
    fn new(name: &str, lhs: Option<f64>, rhs: Option<f64>, satisfied: bool) -> Self {
        Self {
            name: name.into(),
            lhs,
            rhs,
            satisfied,
            note: None,
        }
    }

    fn note(mut self, s: impl Into<String>) -> Self {
        self.note = Some(s.into());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IndexRecord {
    pub weight: String,
    pub indices: Option<CriticalIndices>,
    /// Set when the weight itself is not locally integrable.
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub statistic: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coarse_statistic: Option<f64>,
    pub values: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub statistic: String,
    pub max: Option<f64>,
    pub median: Option<f64>,
    /// `max` over the first `k + 1` trials, for saturation checks.
    pub running_max: Vec<f64>,
    /// Maxima of the auxiliary per-trial values.
    pub value_max: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Refinement {
    pub fine_cells: usize,
    pub coarse_cells: usize,
    pub max_fine: f64,
    pub max_coarse: f64,
    pub ratio: f64,
    pub band: (f64, f64),
    pub stable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainReport {
    pub name: String,
    /// Terms of the chain left to right; `None` is the capped index read as
    /// infinity.
    pub terms: Vec<Option<f64>>,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub artifact_version: String,
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub hypotheses: Vec<HypothesisCheck>,
    pub hypotheses_satisfied: bool,
    pub indices: Vec<IndexRecord>,
    pub chains: Vec<ChainReport>,
    pub trials: Vec<TrialRecord>,
    pub summary: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub refinement: Option<Refinement>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl ExperimentReport {
    /// `trial,statistic,grid_N` rows for plotting.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("trial,statistic,grid_N\n");
        let fine = self.config.grid.cells;
        for t in &self.trials {
            out.push_str(&format!("{},{:e},{}\n", t.trial, t.statistic, fine));
        }
        for t in &self.trials {
            if let Some(c) = t.coarse_statistic {
                out.push_str(&format!("{},{:e},{}\n", t.trial, c, fine / 2));
            }
        }
        out
    }
}

/// Operator with the exponents of its source and target spaces.
#[derive(Clone, Debug)]
struct Setup {
    kind: ExperimentKind,
    weight: WeightSpec,
    op: Option<OperatorSpec>,
    method: Method,
    p: f64,
    p0: f64,
    d: u32,
    alpha: Option<f64>,
    /// Target exponent (`p` for singular integrals).
    q: f64,
    /// Weight of the atoms (`w` or `w^p`) and of the target space.
    atom_weight: WeightSpec,
    target_weight: WeightSpec,
    terms: usize,
    radius_range: (f64, f64),
    decompose_enabled: bool,
}

fn resolve(cfg: &ExperimentConfig, kind: ExperimentKind, grid: &Grid) -> Result<Setup> {
    let n = grid.dim() as f64;
    let weight = WeightSpec::parse(&cfg.weight)?;
    weight.check_dim(grid.dim())?;
    let p = cfg.p;
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid(format!("p must lie in (0, 1], got {p}")));
    }
    let op = match (&cfg.operator, kind) {
        (Some(s), _) => Some(OperatorSpec::parse(s)?),
        (None, ExperimentKind::AtomUniformBound | ExperimentKind::HardyBoundedness) => {
            return Err(invalid("this experiment needs an operator"));
        }
        (None, _) => None,
    };
    if let Some(op) = &op {
        if matches!(op, OperatorSpec::Identity) {
            return Err(invalid("the identity is not an experiment operator"));
        }
        op.check_dim(grid.dim())?;
    }
    let alpha = match (&op, cfg.alpha) {
        (Some(OperatorSpec::RieszPotential { alpha }), Some(a)) if (a - alpha).abs() > 1e-12 => {
            return Err(invalid(format!(
                "alpha {a} disagrees with the operator's {alpha}"
            )));
        }
        (Some(OperatorSpec::RieszPotential { alpha }), _) => Some(*alpha),
        (_, Some(_)) => return Err(invalid("alpha is only meaningful for ialpha:<alpha>")),
        _ => None,
    };
    let method = match (&cfg.method, &op) {
        (Some(m), _) => Method::parse(m)?,
        (None, Some(OperatorSpec::RieszPotential { .. })) => Method::quadrature(),
        _ => Method::multiplier(),
    };
    let needs_atoms = kind != ExperimentKind::IndexInequalities;
    let p0 = match cfg.p0 {
        Some(v) if !(v > 1.0) => return Err(invalid(format!("p0 must exceed 1, got {v}"))),
        Some(v) => v,
        None if needs_atoms => return Err(invalid("p0 is required")),
        None => f64::NAN,
    };
    let (q, atom_weight, target_weight) = match alpha {
        Some(a) => {
            let inv_q = 1.0 / p - a / n;
            let q = 1.0 / inv_q;
            if let Some(cq) = cfg.q {
                if (cq - q).abs() > 1e-9 * q {
                    return Err(invalid(format!(
                        "q must satisfy 1/q = 1/p - alpha/n, i.e. q = {q}; got {cq}"
                    )));
                }
            }
            if needs_atoms {
                let inv_q0 = 1.0 / p0 - a / n;
                if !(inv_q0 > 0.0) {
                    return Err(invalid(format!("need p0 < n/alpha = {}", n / a)));
                }
                if let Some(cq0) = cfg.q0 {
                    if (cq0 - 1.0 / inv_q0).abs() > 1e-9 / inv_q0 {
                        return Err(invalid(format!(
                            "q0 must equal {} from 1/q0 = 1/p0 - alpha/n",
                            1.0 / inv_q0
                        )));
                    }
                }
            }
            (q, weight.pow(p), weight.pow(q))
        }
        None => {
            if kind == ExperimentKind::IndexInequalities {
                if let Some(q) = cfg.q {
                    if !(q > p) {
                        return Err(invalid(format!("the second chain needs q > p, got q = {q}")));
                    }
                }
            } else if cfg.q.is_some() || cfg.q0.is_some() {
                return Err(invalid("q and q0 apply to the Riesz potential only"));
            }
            (cfg.q.unwrap_or(p), weight.clone(), weight.clone())
        }
    };
    let d = match (cfg.d, alpha) {
        (Some(d), Some(a)) if d < potential_atom_moments(grid.dim(), p, a) => {
            return Err(invalid(format!(
                "potential images need d >= {} vanishing moments",
                potential_atom_moments(grid.dim(), p, a)
            )));
        }
        (Some(d), _) => d,
        (None, Some(a)) => potential_atom_moments(grid.dim(), p, a),
        (None, None) => (n * (1.0 / p - 1.0)).floor() as u32,
    };
    let terms = cfg.terms.unwrap_or(match kind {
        ExperimentKind::MolecularSynthesis => 8,
        _ => 3,
    });
    if needs_atoms && terms == 0 && kind != ExperimentKind::AtomUniformBound {
        return Err(invalid("terms must be positive"));
    }
    let radius_range = cfg.radius_range.unwrap_or((1.0 / 32.0, 1.0 / 8.0));
    if !(radius_range.0 > 0.0 && radius_range.0 <= radius_range.1 && radius_range.1 < 0.5) {
        return Err(invalid(format!(
            "radius range must satisfy 0 < lo <= hi < 1/2, got {radius_range:?}"
        )));
    }
    Ok(Setup {
        kind,
        weight,
        op,
        method,
        p,
        p0,
        d,
        alpha,
        q,
        atom_weight,
        target_weight,
        terms,
        radius_range,
        decompose_enabled: cfg.decompose,
    })
}

fn indices_of(w: &WeightSpec, label: &str, family: &BallFamily) -> Result<IndexRecord> {
    match critical_indices(w, family, P_CAP, R_CAP) {
        Ok(idx) => Ok(IndexRecord {
            weight: label.into(),
            indices: Some(idx),
            diverged: false,
        }),
        Err(Error::Diverged(_)) => Ok(IndexRecord {
            weight: label.into(),
            indices: None,
            diverged: true,
        }),
        Err(e) => Err(e),
    }
}

fn in_a1(w: &WeightSpec, family: &BallFamily) -> Result<bool> {
    match ap_characteristic(w, 1.0, family) {
        Ok(c) => Ok(c.is_bounded()),
        Err(Error::Diverged(_)) => Ok(false),
        Err(e) => Err(e),
    }
}

/// `r/(r - 1)`, 1 for a capped index.
fn conjugate(idx: &CriticalIndices) -> f64 {
    if idx.r_capped {
        1.0
    } else {
        idx.r_critical / (idx.r_critical - 1.0)
    }
}

struct Hypotheses {
    checks: Vec<HypothesisCheck>,
    indices: Vec<IndexRecord>,
    chains: Vec<ChainReport>,
}

fn check_hypotheses(setup: &Setup, family: &BallFamily) -> Result<Hypotheses> {
    let n = family.grid().dim() as f64;
    let w = &setup.weight;
    let base = indices_of(w, "w", family)?;
    let mut checks = Vec::new();
    let mut indices = vec![base.clone()];
    let mut chains = Vec::new();
    let Some(idx) = base.indices.clone() else {
        checks.push(HypothesisCheck::new("w locally integrable", None, None, false));
        return Ok(Hypotheses {
            checks,
            indices,
            chains,
        });
    };
    let a_inf = !idx.q_exceeds_cap;
    checks.push(
        HypothesisCheck::new("w in A_infinity", Some(idx.q_critical), Some(P_CAP), a_inf)
            .note("q~_w below the largest tested exponent"),
    );
    match (setup.kind, setup.alpha) {
        (ExperimentKind::IndexInequalities, _) => {
            let p = setup.p;
            let wp = w.pow(p);
            let rec_p = indices_of(&wp, "w^p", family)?;
            indices.push(rec_p.clone());
            let h20 = p < 1.0 && in_a1(&w.pow(1.0 / p), family)?;
            checks.push(HypothesisCheck::new("w^(1/p) in A_1", None, None, h20));
            let r = |rec: &IndexRecord| {
                rec.indices
                    .as_ref()
                    .map(|i| (!i.r_capped).then_some(i.r_critical))
            };
            if h20 {
                if let (Some(rw), Some(rwp)) = (r(&base), r(&rec_p)) {
                    let scaled = rwp.map(|v| p * v);
                    let holds = leq(scaled, rw) && leq(rw, rwp);
                    chains.push(ChainReport {
                        name: "p r_{w^p} <= r_w <= r_{w^p}".into(),
                        terms: vec![scaled, rw, rwp],
                        holds,
                    });
                }
            }
            if let Some(q) = setup_q_for_chain(setup) {
                let wq = w.pow(q);
                let rec_q = indices_of(&wq, "w^q", family)?;
                indices.push(rec_q.clone());
                let h21 = in_a1(&wq, family)?;
                checks.push(HypothesisCheck::new("w^q in A_1", None, None, h21));
                if h21 {
                    if let (Some(rwp), Some(rwq)) = (r(&rec_p), r(&rec_q)) {
                        let (lhs, rhs) = (rwp.map(|v| p * v), rwq.map(|v| q * v));
                        chains.push(ChainReport {
                            name: "p r_{w^p} <= q r_{w^q}".into(),
                            terms: vec![lhs, rhs],
                            holds: leq(lhs, rhs),
                        });
                    }
                }
            }
        }
        (_, Some(alpha)) => {
            let conj = conjugate(&idx);
            checks.push(
                HypothesisCheck::new(
                    "r_w/(r_w - 1) < n/alpha",
                    Some(conj),
                    Some(n / alpha),
                    conj < n / alpha * (1.0 - INDEX_TOL),
                )
                .note(format!(
                    "strict, with relative slack {INDEX_TOL} for the estimated index"
                )),
            );
            let p = setup.p;
            if p <= n / (n + alpha) + 1e-12 {
                let ok = in_a1(&w.pow(1.0 / p), family)?;
                checks.push(HypothesisCheck::new(
                    "w^(1/s) in A_1 with s = p <= n/(n + alpha)",
                    None,
                    None,
                    ok,
                ));
            } else {
                let e = n / ((n - alpha) * p);
                let ok = in_a1(&w.pow(e), family)?;
                checks.push(HypothesisCheck::new(
                    "w^(n/((n - alpha) s)) in A_1 with s = p",
                    Some(e),
                    None,
                    ok,
                ));
            }
        }
        (ExperimentKind::AtomUniformBound, None) => {
            let lhs = (1.0 / conjugate(&idx)) * setup.p0;
            checks.push(
                HypothesisCheck::new(
                    "(r_w - 1)/r_w p0 > 1",
                    Some(lhs),
                    Some(1.0),
                    lhs > 1.0 + INDEX_TOL,
                )
                .note(format!("with relative slack {INDEX_TOL} for the estimated index")),
            );
        }
        _ => {}
    }
    Ok(Hypotheses {
        checks,
        indices,
        chains,
    })
}

fn setup_q_for_chain(setup: &Setup) -> Option<f64> {
    (setup.kind == ExperimentKind::IndexInequalities && setup.q != setup.p).then_some(setup.q)
}

/// `a <= b` with `None` read as the capped index (infinity) and a relative
/// slack of [`INDEX_TOL`].
fn leq(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (_, None) => true,
        (None, Some(_)) => false,
        (Some(a), Some(b)) => a <= b * (1.0 + INDEX_TOL),
    }
}

/// Per-grid state shared by all trials.
struct GridCtx {
    grid: Grid,
    cfg: MaximalConfig,
    atom_masses: Vec<f64>,
    target_masses: Vec<f64>,
}

impl GridCtx {
    fn new(grid: Grid, setup: &Setup, cfg: Option<MaximalConfig>) -> Result<Self> {
        Ok(Self {
            grid,
            cfg: cfg.unwrap_or_else(|| MaximalConfig::for_grid(&grid)),
            atom_masses: setup.atom_weight.cell_masses(&grid)?,
            target_masses: setup.target_weight.cell_masses(&grid)?,
        })
    }
}

struct TrialOut {
    statistic: f64,
    values: BTreeMap<String, f64>,
    warnings: Vec<String>,
}

/// Ball for term `j` of a trial; depends on the stream and the half-extent
/// only, so both refinement grids see the same balls.
fn draw_ball(rng: &mut ChaCha20Rng, setup: &Setup, n: usize, big: f64, min_radius: f64) -> Result<Ball> {
    let (lo, hi) = (setup.radius_range.0 * big, setup.radius_range.1 * big);
    let lo = lo.max(min_radius).min(hi);
    let r = (rng.gen_range(lo.ln()..=hi.ln())).exp();
    let reach = 0.5 * big - r;
    let center = (0..n).map(|_| rng.gen_range(-reach..=reach)).collect();
    Ball::new(center, r)
}

/// Coefficients with `sum lambda^p = 1`.
fn draw_lambdas(rng: &mut ChaCha20Rng, k: usize, p: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s = raw.iter().map(|v: &f64| v.powf(p)).sum::<f64>().powf(1.0 / p);
    raw.iter().map(|v| v / s).collect()
}

fn trial_stream(seed: u64, trial: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn run_trial(setup: &Setup, ctx: &GridCtx, seed: u64, trial: usize, min_radius: f64) -> Result<TrialOut> {
    let grid = ctx.grid;
    let (n, big) = (grid.dim(), grid.half_extent());
    let mut rng = trial_stream(seed, trial);
    let mut values = BTreeMap::new();
    let mut warnings = Vec::new();
    let atom = |rng: &mut ChaCha20Rng, molecule: bool| -> Result<(GridFunction, AtomParams)> {
        let ball = draw_ball(rng, setup, n, big, min_radius)?;
        let params = AtomParams::new(setup.p, setup.p0, setup.d, ball, setup.atom_weight.clone())?;
        let s = rng.gen::<u64>();
        let f = if molecule {
            make_random_molecule(&grid, &params, s)?
        } else {
            make_random_atom(&grid, &params, s)?
        };
        Ok((f, params))
    };
    let statistic = match setup.kind {
        ExperimentKind::AtomUniformBound => {
            let (a, _) = atom(&mut rng, false)?;
            let ta = apply(&a, setup.op.as_ref().expect("operator"), setup.method)?;
            warnings.extend(ta.warnings);
            weighted_lp_norm_with_masses(&ta.output, setup.q, &ctx.target_masses, None)?
        }
        ExperimentKind::MolecularSynthesis => {
            let lambdas = draw_lambdas(&mut rng, setup.terms, setup.p);
            let mut f = GridFunction::zeros(grid);
            for (j, l) in lambdas.iter().enumerate() {
                let (m, _) = atom(&mut rng, j % 2 == 1)?;
                f.add_scaled(&m, *l)?;
            }
            let h = hardy_norm_with_masses(&f, &ctx.atom_masses, setup.p, &ctx.cfg)?.powf(setup.p);
            // Homogeneity: scaling the coefficients by t scales the norm by t^p.
            let t = 3.0;
            let ht = hardy_norm_with_masses(&f.scaled(t), &ctx.atom_masses, setup.p, &ctx.cfg)?.powf(setup.p);
            values.insert(
                "homogeneity_defect".into(),
                (ht / (t.powf(setup.p) * h) - 1.0).abs(),
            );
            values.insert(
                "lambda_p_sum".into(),
                lambdas.iter().map(|l| l.powf(setup.p)).sum(),
            );
            h
        }
        ExperimentKind::HardyBoundedness => {
            let lambdas = draw_lambdas(&mut rng, setup.terms, setup.p);
            let mut f = GridFunction::zeros(grid);
            for l in &lambdas {
                let (a, _) = atom(&mut rng, false)?;
                f.add_scaled(&a, *l)?;
            }
            let op = setup.op.as_ref().expect("operator");
            let tf = apply(&f, op, setup.method)?;
            warnings.extend(tf.warnings);
            let tf = tf.output;
            let hin = hardy_norm_with_masses(&f, &ctx.atom_masses, setup.p, &ctx.cfg)?;
            let lebesgue = weighted_lp_norm_with_masses(&tf, setup.q, &ctx.target_masses, None)?;
            values.insert("hardy_norm_in".into(), hin);
            values.insert("lebesgue_ratio".into(), lebesgue / hin);
            let ratio = if setup.q <= 1.0 {
                let hout = hardy_norm_with_masses(&tf, &ctx.target_masses, setup.q, &ctx.cfg)?;
                values.insert("hardy_norm_out".into(), hout);
                hout / hin
            } else {
                lebesgue / hin
            };
            if setup.decompose_enabled && n == 1 {
                resynthesize(setup, ctx, &f, &tf, hin, &mut values, &mut warnings);
            }
            ratio
        }
        ExperimentKind::IndexInequalities => unreachable!("no trials"),
    };
    Ok(TrialOut {
        statistic,
        values,
        warnings,
    })
}

/// Decomposes `f`, applies the operator atom by atom and compares the sum
/// with `T f`.
fn resynthesize(
    setup: &Setup,
    ctx: &GridCtx,
    f: &GridFunction,
    tf: &GridFunction,
    hin: f64,
    values: &mut BTreeMap<String, f64>,
    warnings: &mut Vec<String>,
) {
    let params = DecompositionParams {
        p: setup.p,
        p0: setup.p0,
        d: setup.d,
        weight: setup.atom_weight.clone(),
    };
    let dec = match decompose(f, &params, &ctx.cfg, None, Tolerances::uniform(1e-8)) {
        Ok(d) => d,
        Err(e) => {
            warnings.push(format!("decomposition skipped: {e}"));
            return;
        }
    };
    let op = setup.op.as_ref().expect("operator");
    let mut sum = GridFunction::zeros(ctx.grid);
    for e in &dec.entries {
        match apply(&e.atom, op, setup.method) {
            Ok(ta) => {
                if sum.add_scaled(&ta.output, e.lambda).is_err() {
                    return;
                }
            }
            Err(err) => {
                warnings.push(format!("per-atom image failed: {err}"));
                return;
            }
        }
    }
    let denom = tf.lp_norm(2.0);
    if let Ok(diff) = sum.combine(1.0, tf, -1.0) {
        values.insert(
            "resynthesis_error".into(),
            if denom > 0.0 {
                diff.lp_norm(2.0) / denom
            } else {
                0.0
            },
        );
    }
    values.insert("atoms".into(), dec.entries.len() as f64);
    values.insert(
        "coefficient_ratio".into(),
        dec.coefficient_mass_p / hin.powf(setup.p),
    );
    if !dec.all_atoms_pass {
        warnings.push("some decomposition atoms failed validation".into());
    }
}

fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    })
}

fn statistic_name(setup: &Setup) -> String {
    match setup.kind {
        ExperimentKind::AtomUniformBound => "weighted norm of the atom image".into(),
        ExperimentKind::MolecularSynthesis => "hardy_norm^p / sum lambda^p".into(),
        ExperimentKind::HardyBoundedness => "target norm of Tf / hardy_norm(f)".into(),
        ExperimentKind::IndexInequalities => "none".into(),
    }
}

/// Runs an experiment. `kind` overrides a missing `config.kind` and must
/// agree with a present one.
pub fn run_experiment(config: &ExperimentConfig, kind: Option<ExperimentKind>) -> Result<ExperimentReport> {
    let start = Instant::now();
    let kind = match (config.kind, kind) {
        (Some(a), Some(b)) if a != b => {
            return Err(invalid(format!("--kind {b:?} disagrees with the config's {a:?}")));
        }
        (Some(k), _) | (None, Some(k)) => k,
        (None, None) => return Err(invalid("experiment kind missing")),
    };
    let grid = config.grid.grid()?;
    let setup = resolve(config, kind, &grid)?;
    let depth = config
        .family_depth
        .unwrap_or(DEFAULT_FAMILY_DEPTH.min(grid.levels()));
    let family = BallFamily::standard(grid, depth)?;
    let mut warnings = Vec::new();

    // Admissibility of the atoms themselves is a precondition, not a
    // measured hypothesis.
    if kind != ExperimentKind::IndexInequalities {
        let profile = crate::weights::weight_profile(&setup.atom_weight, &family)?;
        let ball = Ball::new(grid.origin(), grid.half_extent())?;
        let params = AtomParams::new(setup.p, setup.p0, setup.d, ball, setup.atom_weight.clone())?;
        let adm = check_parameters(&params, &profile, &family)?;
        if !adm.pass {
            return Err(invalid(format!(
                "inadmissible atom parameters: need p0 > {} and d >= {} (got p0 = {}, d = {})",
                adm.p0_lower_bound, adm.d_min, setup.p0, setup.d
            )));
        }
    }
    let hyp = check_hypotheses(&setup, &family)?;
    let hypotheses_satisfied = hyp.checks.iter().all(|c| c.satisfied);

    let trials = if kind == ExperimentKind::IndexInequalities {
        if config.trials > 0 {
            warnings.push("index inequalities run no trials; trials ignored".into());
        }
        0
    } else {
        config.trials
    };
    let coarse = if config.refine && trials > 0 {
        Some(grid.coarsened()?)
    } else {
        None
    };
    let min_radius = 4.0 * coarse.unwrap_or(grid).spacing() * 2.0;
    let fine_ctx = GridCtx::new(grid, &setup, config.maximal)?;
    let coarse_ctx = coarse
        .map(|g| GridCtx::new(g, &setup, config.maximal))
        .transpose()?;

    let results: Vec<Result<(TrialOut, Option<f64>)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let fine = run_trial(&setup, &fine_ctx, config.seed, t, min_radius)?;
            let c = match &coarse_ctx {
                Some(ctx) => Some(run_trial(&setup, ctx, config.seed, t, min_radius)?.statistic),
                None => None,
            };
            Ok((fine, c))
        })
        .collect();
    let mut records = Vec::with_capacity(trials);
    for (t, r) in results.into_iter().enumerate() {
        let (out, c) = r?;
        records.push(TrialRecord {
            trial: t,
            statistic: out.statistic,
            coarse_statistic: c,
            values: out.values,
            warnings: out.warnings,
        });
    }

    let stats: Vec<f64> = records.iter().map(|r| r.statistic).collect();
    let mut running = Vec::with_capacity(stats.len());
    let mut m = f64::NEG_INFINITY;
    for s in &stats {
        m = m.max(*s);
        running.push(m);
    }
    let mut value_max = BTreeMap::new();
    for r in &records {
        for (k, v) in &r.values {
            let e = value_max.entry(k.clone()).or_insert(f64::NEG_INFINITY);
            *e = f64::max(*e, *v);
        }
    }
    let summary = Summary {
        statistic: statistic_name(&setup),
        max: running.last().copied(),
        median: median(&stats),
        running_max: running,
        value_max,
    };
    let refinement = coarse.filter(|_| !records.is_empty()).map(|cg| {
        let max_fine = summary.max.unwrap_or(0.0);
        let max_coarse = records
            .iter()
            .filter_map(|r| r.coarse_statistic)
            .fold(f64::NEG_INFINITY, f64::max);
        let ratio = max_fine / max_coarse;
        Refinement {
            fine_cells: grid.cells_per_axis(),
            coarse_cells: cg.cells_per_axis(),
            max_fine,
            max_coarse,
            ratio,
            band: STABILITY_BAND,
            stable: ratio >= STABILITY_BAND.0 && ratio <= STABILITY_BAND.1,
        }
    });
    if records.iter().any(|r| !r.statistic.is_finite()) {
        warnings.push("non-finite statistic in some trials".into());
    }
    Ok(ExperimentReport {
        schema_version: crate::SCHEMA_VERSION,
        artifact_version: crate::VERSION.into(),
        kind,
        config: config.clone(),
        hypotheses: hyp.checks,
        hypotheses_satisfied,
        indices: hyp.indices,
        chains: hyp.chains,
        trials: records,
        summary,
        refinement,
        warnings,
        wall_time_s: config.record_wall_time.then(|| start.elapsed().as_secs_f64()),
    })
}
