//! Atom and molecule parameters, validators and seeded generators.
//!
//! A `w-(p, p0, d)` atom is supported in a ball `B`, has
//! `||a||_{L^{p0}} <= |B|^{1/p0} w(B)^{-1/p}` and vanishing moments up to
//! order `d`. Molecules trade the support condition for the envelope
//! `w(B)^{-1/p} (1 + |x - x0|/r)^{-2n-2d-3}` outside `2B`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Serialize, Serializer};

use crate::error::{invalid, Error, Result};
use crate::grid::{ball_lebesgue_measure, multi_indices, Ball, Grid, GridFunction};
use crate::weights::{ball_mass, rh_characteristic, BallFamily, Characteristic, WeightProfile, WeightSpec};

/// Largest Gram condition number accepted when orthogonalizing monomials.
pub const MAX_GRAM_CONDITION: f64 = 1e12;
pub const MAX_GENERATOR_RETRIES: u32 = 5;

/// Serializes `+inf` as the string `"inf"` (JSON has no infinity).
pub(crate) fn ser_extended<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

/// Parses a real or `inf`.
pub fn parse_extended(s: &str) -> Result<f64> {
    let t = s.trim();
    if t.eq_ignore_ascii_case("inf") || t == "∞" {
        return Ok(f64::INFINITY);
    }
    crate::weights::parse_real(t)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AtomParams {
    pub p: f64,
    /// `+inf` selects the sup-norm branch.
    #[serde(serialize_with = "ser_extended")]
    pub p0: f64,
    pub d: u32,
    pub ball: Ball,
    pub weight: WeightSpec,
}

impl AtomParams {
    pub fn new(p: f64, p0: f64, d: u32, ball: Ball, weight: WeightSpec) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(invalid(format!("p must lie in (0, 1], got {p}")));
        }
        if !(p0 > 1.0) {
            return Err(invalid(format!("p0 must exceed 1, got {p0}")));
        }
        weight.check_dim(ball.dim())?;
        Ok(Self {
            p,
            p0,
            d,
            ball,
            weight,
        })
    }

    pub fn with_ball(&self, ball: Ball) -> Self {
        Self { ball, ..self.clone() }
    }

    /// `|B|^{1/p0} w(B)^{-1/p}`, the size bound of condition (a2).
    pub fn size_bound(&self, grid: &Grid) -> Result<f64> {
        let n = grid.dim();
        let lebesgue = ball_lebesgue_measure(&self.ball, n)?;
        let (wb, _) = ball_mass(&self.weight, grid, &self.ball)?;
        if !(wb.is_finite() && wb > 0.0) {
            return Err(Error::Diverged(format!("w(B) = {wb} on the atom ball")));
        }
        let lebesgue_part = if self.p0.is_infinite() {
            1.0
        } else {
            lebesgue.powf(1.0 / self.p0)
        };
        Ok(lebesgue_part * wb.powf(-1.0 / self.p))
    }

    /// `w(B)^{-1/p}`, the height of the molecule envelope.
    pub fn envelope_height(&self, grid: &Grid) -> Result<f64> {
        let (wb, _) = ball_mass(&self.weight, grid, &self.ball)?;
        if !(wb.is_finite() && wb > 0.0) {
            return Err(Error::Diverged(format!("w(B) = {wb} on the atom ball")));
        }
        Ok(wb.powf(-1.0 / self.p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdmissibilityReport {
    pub p_in_range: bool,
    /// `max{1, p r_w/(r_w - 1)}`, with `r_w/(r_w - 1) = 1` when `r_w` is capped.
    #[serde(serialize_with = "ser_extended")]
    pub p0_lower_bound: f64,
    /// `p0 - p0_lower_bound` (positive passes).
    #[serde(serialize_with = "ser_extended")]
    pub p0_margin: f64,
    pub p0_ok: bool,
    /// `floor(n (q~_w / p - 1))`, at least 0.
    pub d_min: u32,
    pub d_ok: bool,
    /// Conjugate exponent `(p0/p)'` of the implied reverse-Hölder class.
    #[serde(serialize_with = "ser_extended")]
    pub rh_exponent: f64,
    /// `RH_{(p0/p)'}` characteristic (absent when the exponent is 1).
    pub rh_witness: Option<Characteristic>,
    pub pass: bool,
}

/// Checks `max{1, p r_w/(r_w-1)} < p0` and `d >= floor(n(q~_w/p - 1))`.
pub fn check_parameters(
    params: &AtomParams,
    profile: &WeightProfile,
    family: &BallFamily,
) -> Result<AdmissibilityReport> {
    let n = family.grid().dim() as f64;
    let p = params.p;
    let p_in_range = p > 0.0 && p <= 1.0;
    let lower = 1f64.max(p * profile.rh_conjugate());
    let p0_margin = params.p0 - lower;
    let p0_ok = params.p0 > lower;
    let d_min = (n * (profile.q_critical / p - 1.0)).floor().max(0.0) as u32;
    let d_ok = params.d >= d_min;
    let ratio = params.p0 / p;
    let rh_exponent = if ratio.is_infinite() {
        1.0
    } else if ratio > 1.0 {
        ratio / (ratio - 1.0)
    } else {
        f64::INFINITY
    };
    let rh_witness = if rh_exponent > 1.0 && rh_exponent.is_finite() {
        Some(rh_characteristic(&params.weight, rh_exponent, family)?)
    } else {
        None
    };
    Ok(AdmissibilityReport {
        p_in_range,
        p0_lower_bound: lower,
        p0_margin,
        p0_ok,
        d_min,
        d_ok,
        rh_exponent,
        rh_witness,
        pass: p_in_range && p0_ok && d_ok,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerances {
    /// Moment residuals must satisfy `|m_alpha| <= moment * ||f||_1 * r^{|alpha|}`.
    pub moment: f64,
    /// Relative slack allowed in the size condition.
    pub size: f64,
    /// Relative slack allowed above the decay envelope.
    pub decay: f64,
}

impl Tolerances {
    pub fn uniform(tol: f64) -> Self {
        Self {
            moment: tol,
            size: tol,
            decay: tol,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationKind {
    Atom,
    Molecule,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidationReport {
    pub kind: ValidationKind,
    /// `int |f|` over cells that do not meet `B` (atoms; must be exactly 0).
    pub support_mass_outside: f64,
    /// `L^{p0}` norm (over `B` for atoms, over `2B` for molecules).
    pub size_norm: f64,
    pub size_bound: f64,
    /// `(bound - norm) / bound`; positive is a pass margin.
    pub size_residual: f64,
    /// Largest `|m| / envelope` outside `2B` (molecules only).
    pub decay_max_ratio: Option<f64>,
    /// `max(0, decay_max_ratio - 1)` (molecules only).
    pub decay_max_violation: Option<f64>,
    pub decay_exponent: Option<i32>,
    /// `max_{|alpha| = k} |int (x - x0)^alpha f|`, indexed by `k <= d`.
    pub moment_residuals: Vec<f64>,
    /// Moment residuals divided by `||f||_1 r^k`.
    pub moment_relative: Vec<f64>,
    /// `||f||_{L^{p0}(box)} / (|B|^{1/p0} w(B)^{-1/p})` (molecules only).
    pub box_norm_constant: Option<f64>,
    pub support_ok: bool,
    pub size_ok: bool,
    pub decay_ok: bool,
    pub moments_ok: bool,
    pub pass: bool,
    pub tolerances: Tolerances,
}

fn check_grid(f: &GridFunction, params: &AtomParams) -> Result<()> {
    if params.ball.dim() != f.grid().dim() {
        return Err(invalid("ball dimension does not match the grid"));
    }
    params.weight.check_dim(f.grid().dim())
}

fn lp_norm_where(f: &GridFunction, p0: f64, keep: impl Fn(usize) -> bool) -> f64 {
    let vol = f.grid().cell_volume();
    let vals = f
        .values()
        .iter()
        .enumerate()
        .filter(|(i, _)| keep(*i))
        .map(|(_, v)| v.abs());
    if p0.is_infinite() {
        vals.fold(0.0, f64::max)
    } else {
        (vals.map(|v| v.powf(p0)).sum::<f64>() * vol).powf(1.0 / p0)
    }
}

/// `max_{|alpha|=k} |int (x - x0)^alpha f|` for `k = 0..=d`, plus the
/// relative residuals against `||f||_1 r^k`.
pub fn centered_moments(f: &GridFunction, ball: &Ball, d: u32) -> (Vec<f64>, Vec<f64>) {
    let grid = f.grid();
    let n = grid.dim();
    let vol = grid.cell_volume();
    let l1 = f.values().iter().map(|v| v.abs()).sum::<f64>() * vol;
    let idx = multi_indices(n, d);
    let mut sums = vec![0.0f64; idx.len()];
    for (i, &v) in f.values().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let c = grid.center(i);
        let u: Vec<f64> = (0..n).map(|k| c[k] - ball.center[k]).collect();
        for (s, alpha) in sums.iter_mut().zip(&idx) {
            *s += v * crate::grid::monomial(&u, alpha);
        }
    }
    let mut raw = vec![0.0f64; d as usize + 1];
    for (s, alpha) in sums.iter().zip(&idx) {
        let k = alpha.iter().sum::<u32>() as usize;
        raw[k] = raw[k].max((s * vol).abs());
    }
    let rel = raw
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let scale = l1 * ball.radius.powi(k as i32);
            if scale > 0.0 {
                m / scale
            } else {
                0.0
            }
        })
        .collect();
    (raw, rel)
}

/// Conditions (a1)–(a3).
pub fn validate_atom(a: &GridFunction, params: &AtomParams, tol: Tolerances) -> Result<ValidationReport> {
    check_grid(a, params)?;
    let grid = *a.grid();
    let n = grid.dim();
    let h = grid.spacing();
    let inside: Vec<bool> = (0..grid.len())
        .map(|i| params.ball.meets_cell(&grid.center(i)[..n], h))
        .collect();
    let support_mass_outside = a
        .values()
        .iter()
        .zip(&inside)
        .filter(|(_, inside)| !**inside)
        .map(|(v, _)| v.abs())
        .sum::<f64>()
        * grid.cell_volume();
    let size_norm = lp_norm_where(a, params.p0, |i| inside[i]);
    let size_bound = params.size_bound(&grid)?;
    let size_residual = (size_bound - size_norm) / size_bound;
    let (moment_residuals, moment_relative) = centered_moments(a, &params.ball, params.d);
    let support_ok = support_mass_outside == 0.0;
    let size_ok = size_residual >= -tol.size;
    let moments_ok = moment_relative.iter().all(|r| *r <= tol.moment);
    Ok(ValidationReport {
        kind: ValidationKind::Atom,
        support_mass_outside,
        size_norm,
        size_bound,
        size_residual,
        decay_max_ratio: None,
        decay_max_violation: None,
        decay_exponent: None,
        moment_residuals,
        moment_relative,
        box_norm_constant: None,
        support_ok,
        size_ok,
        decay_ok: true,
        moments_ok,
        pass: support_ok && size_ok && moments_ok,
        tolerances: tol,
    })
}

/// Exponent of the molecule envelope, `2n + 2d + 3`.
pub fn molecule_decay_exponent(n: usize, d: u32) -> i32 {
    2 * n as i32 + 2 * d as i32 + 3
}

/// Conditions (m1)–(m3), plus the measured box-norm constant.
pub fn validate_molecule(m: &GridFunction, params: &AtomParams, tol: Tolerances) -> Result<ValidationReport> {
    check_grid(m, params)?;
    let grid = *m.grid();
    let n = grid.dim();
    let h = grid.spacing();
    let ball = &params.ball;
    let double = ball.scaled(2.0);
    let in_double: Vec<bool> = (0..grid.len())
        .map(|i| double.meets_cell(&grid.center(i)[..n], h))
        .collect();
    let size_norm = lp_norm_where(m, params.p0, |i| in_double[i]);
    let size_bound = params.size_bound(&grid)?;
    let size_residual = (size_bound - size_norm) / size_bound;
    let height = params.envelope_height(&grid)?;
    let e = molecule_decay_exponent(n, params.d);
    let mut decay_max_ratio = 0.0f64;
    for (i, v) in m.values().iter().enumerate() {
        let c = grid.center(i);
        if v == &0.0 || double.contains(&c[..n]) {
            continue;
        }
        let env = height * (1.0 + ball.distance_to_center(&c[..n]) / ball.radius).powi(-e);
        decay_max_ratio = decay_max_ratio.max(v.abs() / env);
    }
    let (moment_residuals, moment_relative) = centered_moments(m, ball, params.d);
    let box_norm = lp_norm_where(m, params.p0, |_| true);
    let size_ok = size_residual >= -tol.size;
    let decay_ok = decay_max_ratio <= 1.0 + tol.decay;
    let moments_ok = moment_relative.iter().all(|r| *r <= tol.moment);
    Ok(ValidationReport {
        kind: ValidationKind::Molecule,
        support_mass_outside: 0.0,
        size_norm,
        size_bound,
        size_residual,
        decay_max_ratio: Some(decay_max_ratio),
        decay_max_violation: Some((decay_max_ratio - 1.0).max(0.0)),
        decay_exponent: Some(e),
        moment_residuals,
        moment_relative,
        box_norm_constant: Some(box_norm / size_bound),
        support_ok: true,
        size_ok,
        decay_ok,
        moments_ok,
        pass: size_ok && decay_ok && moments_ok,
        tolerances: tol,
    })
}

/// Removes the projection of `g` onto polynomials of degree `<= d` under
/// the discrete measure `mu` (per cell), returning `mu * (g - P g)` on the
/// listed cells. Coordinates are `(x - x0)/r`. Errors when the Gram matrix
/// of the monomials is too ill-conditioned.
pub(crate) fn project_out_polynomials(
    grid: &Grid,
    cells: &[usize],
    g: &[f64],
    mu: &[f64],
    ball: &Ball,
    d: u32,
) -> Result<Vec<f64>> {
    let n = grid.dim();
    let idx = multi_indices(n, d);
    let (rows, cols) = (cells.len(), idx.len());
    if rows < cols {
        return Err(Error::Numerical(format!(
            "{rows} cells cannot carry {cols} vanishing moments"
        )));
    }
    let sq: Vec<f64> = mu.iter().map(|m| m.sqrt()).collect();
    let mut v = DMatrix::<f64>::zeros(rows, cols);
    for (r, &cell) in cells.iter().enumerate() {
        let c = grid.center(cell);
        let u: Vec<f64> = (0..n).map(|k| (c[k] - ball.center[k]) / ball.radius).collect();
        for (col, alpha) in idx.iter().enumerate() {
            v[(r, col)] = sq[r] * crate::grid::monomial(&u, alpha);
        }
    }
    let sv = v.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 {
        (smax / smin).powi(2)
    } else {
        f64::INFINITY
    };
    if !(cond <= MAX_GRAM_CONDITION) {
        return Err(Error::Numerical(format!(
            "monomial Gram condition number {cond:.3e} exceeds {MAX_GRAM_CONDITION:.0e}"
        )));
    }
    let q = v.qr().q();
    let mut resid = nalgebra::DVector::from_iterator(rows, g.iter().zip(&sq).map(|(g, s)| g * s));
    // Two passes keep the residual orthogonal to working precision.
    for _ in 0..2 {
        let coeffs = q.tr_mul(&resid);
        resid -= &q * coeffs;
    }
    Ok(resid.iter().zip(&sq).map(|(r, s)| r * s).collect())
}

/// `g - P g` on the listed cells, where `P g` is the `mu`-weighted least
/// squares fit of `g` by polynomials of degree `<= d` in `(x - x0)/r`.
/// Rank deficient supports (too few cells for the degree) are handled by
/// dropping singular directions below `1e-11` of the largest, so
/// `mu * (g - P g)` always has vanishing discrete moments.
pub(crate) fn polynomial_residual(
    grid: &Grid,
    cells: &[usize],
    g: &[f64],
    mu: &[f64],
    ball: &Ball,
    d: u32,
) -> Vec<f64> {
    let n = grid.dim();
    let idx = multi_indices(n, d);
    let (rows, cols) = (cells.len(), idx.len());
    if rows == 0 {
        return Vec::new();
    }
    let sq: Vec<f64> = mu.iter().map(|m| m.sqrt()).collect();
    let mut m = DMatrix::<f64>::zeros(rows, cols);
    for (r, &cell) in cells.iter().enumerate() {
        let c = grid.center(cell);
        let u: Vec<f64> = (0..n).map(|k| (c[k] - ball.center[k]) / ball.radius).collect();
        for (col, alpha) in idx.iter().enumerate() {
            m[(r, col)] = crate::grid::monomial(&u, alpha);
        }
    }
    let mut v = m.clone();
    for (r, s) in sq.iter().enumerate() {
        v.row_mut(r).scale_mut(*s);
    }
    let svd = v.svd(true, true);
    let smax = svd.singular_values.max();
    let pinv = svd
        .pseudo_inverse(smax * 1e-11)
        .expect("both factors were requested");
    let mut resid = nalgebra::DVector::from_column_slice(g);
    for _ in 0..2 {
        let rhs = nalgebra::DVector::from_iterator(rows, resid.iter().zip(&sq).map(|(g, s)| g * s));
        let coeffs = &pinv * rhs;
        resid -= &m * coeffs;
    }
    resid.iter().copied().collect()
}

/// Cells whose centers lie strictly inside the ball.
fn cells_inside(grid: &Grid, ball: &Ball) -> Vec<usize> {
    let n = grid.dim();
    (0..grid.len())
        .filter(|&i| ball.distance_to_center(&grid.center(i)[..n]) < ball.radius)
        .collect()
}

fn bump(u2: f64) -> f64 {
    if u2 >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u2)).exp()
    }
}

/// Smooth random trigonometric noise with decaying coefficients, in local
/// coordinates `u = (x - x0)/r`.
struct Noise {
    terms: Vec<(Vec<f64>, f64, f64)>,
}

impl Noise {
    fn draw(rng: &mut ChaCha20Rng, n: usize) -> Self {
        let mut terms = Vec::new();
        let modes: Vec<Vec<f64>> = match n {
            1 => (1..=6).map(|k| vec![k as f64]).collect(),
            _ => (0..=3)
                .flat_map(|a| (0..=3).map(move |b| vec![a as f64, b as f64]))
                .filter(|m| m.iter().any(|v| *v > 0.0))
                .collect(),
        };
        for k in modes {
            let norm: f64 = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (a, b): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            terms.push((k, a / norm, b / norm));
        }
        // A random offset keeps the constant mode from vanishing by accident.
        terms.push((vec![0.0; n], rng.gen_range(-1.0..1.0), 0.0));
        Self { terms }
    }

    fn eval(&self, u: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(k, a, b)| {
                let phase: f64 = k.iter().zip(u).map(|(k, u)| k * u).sum::<f64>() * std::f64::consts::PI;
                a * phase.cos() + b * phase.sin()
            })
            .sum()
    }
}

fn sub_seed(seed: u64, attempt: u32) -> u64 {
    seed ^ (attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn check_generator_ball(grid: &Grid, ball: &Ball) -> Result<()> {
    let half = 0.5 * grid.half_extent();
    if ball.dim() != grid.dim() {
        return Err(invalid("ball dimension does not match the grid"));
    }
    if ball
        .center
        .iter()
        .any(|c| c.abs() + ball.radius > half * (1.0 + 1e-12))
    {
        return Err(invalid("generated atoms must lie in the half-box"));
    }
    if ball.radius < 4.0 * grid.spacing() {
        return Err(invalid("atom ball spans fewer than four cells; refine the grid"));
    }
    Ok(())
}

fn rescale_to_bound(values: &mut [f64], grid: &Grid, params: &AtomParams) -> Result<()> {
    let norm = if params.p0.is_infinite() {
        values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    } else {
        (values.iter().map(|v| v.abs().powf(params.p0)).sum::<f64>() * grid.cell_volume())
            .powf(1.0 / params.p0)
    };
    if !(norm > 0.0) {
        return Err(Error::Numerical("generated function vanished".into()));
    }
    let s = params.size_bound(grid)? / norm;
    for v in values.iter_mut() {
        *v *= s;
    }
    Ok(())
}

/// Draws a smooth atom on `params.ball`: bump-windowed random noise with
/// its polynomial part (degree `<= d`, bump-weighted projection) removed,
/// scaled so that (a2) holds with equality. Deterministic in `seed`.
pub fn make_random_atom(grid: &Grid, params: &AtomParams, seed: u64) -> Result<GridFunction> {
    check_generator_ball(grid, &params.ball)?;
    let n = grid.dim();
    let cells = cells_inside(grid, &params.ball);
    let mut last = None;
    for attempt in 0..=MAX_GENERATOR_RETRIES {
        let mut rng = ChaCha20Rng::seed_from_u64(sub_seed(seed, attempt));
        let noise = Noise::draw(&mut rng, n);
        let mut g = Vec::with_capacity(cells.len());
        let mut mu = Vec::with_capacity(cells.len());
        for &i in &cells {
            let c = grid.center(i);
            let u: Vec<f64> = (0..n)
                .map(|k| (c[k] - params.ball.center[k]) / params.ball.radius)
                .collect();
            g.push(noise.eval(&u));
            mu.push(bump(u.iter().map(|v| v * v).sum()));
        }
        match project_out_polynomials(grid, &cells, &g, &mu, &params.ball, params.d) {
            Ok(mut vals) => {
                let mut out = vec![0.0; grid.len()];
                rescale_to_bound(&mut vals, grid, params)?;
                for (&i, v) in cells.iter().zip(vals) {
                    out[i] = v;
                }
                return GridFunction::new(*grid, out);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Numerical("atom generation failed".into())))
}

/// Draws a molecule centered on `params.ball` with envelope-controlled tails:
/// noise times `(1 + |u|)^{-(2n + 3d + 4)}` with moments removed under that
/// profile, scaled so that (m1) or (m2) holds with equality, whichever binds.
pub fn make_random_molecule(grid: &Grid, params: &AtomParams, seed: u64) -> Result<GridFunction> {
    check_generator_ball(grid, &params.ball)?;
    let n = grid.dim();
    let ball = &params.ball;
    let cells: Vec<usize> = (0..grid.len()).collect();
    let profile_exp = (2 * n + 3 * params.d as usize + 4) as i32;
    let mut last = None;
    for attempt in 0..=MAX_GENERATOR_RETRIES {
        let mut rng = ChaCha20Rng::seed_from_u64(sub_seed(seed ^ 0x5bd1_e995, attempt));
        let noise = Noise::draw(&mut rng, n);
        let mut g = Vec::with_capacity(cells.len());
        let mut mu = Vec::with_capacity(cells.len());
        for &i in &cells {
            let c = grid.center(i);
            let u: Vec<f64> = (0..n).map(|k| (c[k] - ball.center[k]) / ball.radius).collect();
            let r = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            // Noise is only meaningful near the ball; freeze it beyond 2r.
            let uc: Vec<f64> = if r > 2.0 {
                u.iter().map(|v| v * 2.0 / r).collect()
            } else {
                u
            };
            g.push(noise.eval(&uc));
            mu.push((1.0 + r).powi(-profile_exp));
        }
        let vals = match project_out_polynomials(grid, &cells, &g, &mu, ball, params.d) {
            Ok(v) => v,
            Err(e) => {
                last = Some(e);
                continue;
            }
        };
        let mut out = vals;
        let mut f = GridFunction::new(*grid, out.clone())?;
        let rep = validate_molecule(&f, params, Tolerances::uniform(0.0))?;
        let s_size = rep.size_bound / rep.size_norm;
        let s_decay = match rep.decay_max_ratio {
            Some(r) if r > 0.0 => 1.0 / r,
            _ => f64::INFINITY,
        };
        let s = s_size.min(s_decay);
        if !(s.is_finite() && s > 0.0) {
            last = Some(Error::Numerical("molecule normalization failed".into()));
            continue;
        }
        for v in out.iter_mut() {
            *v *= s;
        }
        f = GridFunction::new(*grid, out)?;
        return Ok(f);
    }
    Err(last.unwrap_or_else(|| Error::Numerical("molecule generation failed".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::{weight_profile, BallFamily};

    fn line() -> Grid {
        Grid::new(1, 2.0, 1024).unwrap()
    }

    fn params(w: WeightSpec, p0: f64, d: u32, c: f64, r: f64) -> AtomParams {
        AtomParams::new(2.0 / 3.0, p0, d, Ball::interval(c, r).unwrap(), w).unwrap()
    }

    #[test]
    fn admissibility_examples() {
        let g = Grid::new(1, 1.0, 256).unwrap();
        let fam = BallFamily::standard(g, 8).unwrap();
        let one = WeightSpec::one();
        let prof = weight_profile(&one, &fam).unwrap();
        let ball = Ball::interval(0.0, 0.25).unwrap();
        let p = AtomParams::new(0.5, 2.0, 0, ball.clone(), one.clone()).unwrap();
        let rep = check_parameters(&p, &prof, &fam).unwrap();
        assert_eq!(rep.d_min, 1);
        assert!(!rep.d_ok && rep.p0_ok);
        assert!(AtomParams::new(0.5, 1.0, 1, ball.clone(), one).is_err());
        let w = WeightSpec::power(-0.5, vec![]);
        let prof = weight_profile(&w, &fam).unwrap();
        let p = AtomParams::new(1.0, 2.5, 0, ball, w).unwrap();
        let rep = check_parameters(&p, &prof, &fam).unwrap();
        assert!((rep.p0_lower_bound - 2.0).abs() < 1e-3, "{}", rep.p0_lower_bound);
        assert!(rep.pass);
    }

    #[test]
    fn sign_atom_passes_and_indicator_fails() {
        let g = line();
        let w = WeightSpec::power(-0.5, vec![]);
        let p = AtomParams::new(
            0.5,
            f64::INFINITY,
            0,
            Ball::interval(0.0, 1.0).unwrap(),
            w.clone(),
        )
        .unwrap();
        let wb = w.interval_mass(-1.0, 1.0).unwrap();
        let a = GridFunction::from_fn(g, |x| {
            if x[0].abs() <= 1.0 {
                0.5 * wb.powf(-2.0) * x[0].signum()
            } else {
                0.0
            }
        })
        .unwrap();
        let rep = validate_atom(&a, &p, Tolerances::uniform(1e-12)).unwrap();
        assert!(rep.pass, "{rep:?}");
        let chi = GridFunction::from_fn(g, |x| if x[0].abs() <= 1.0 { 1e-3 } else { 0.0 }).unwrap();
        let rep = validate_atom(&chi, &p.with_ball(p.ball.clone()), Tolerances::uniform(1e-12)).unwrap();
        assert!(!rep.moments_ok);
        assert!((rep.moment_residuals[0] - 2e-3).abs() < 1e-12);
    }

    #[test]
    fn random_atoms_are_exact_atoms_and_molecules() {
        let g = line();
        let w = WeightSpec::power(-0.5, vec![]);
        for (seed, d, p0) in [(1u64, 1u32, 4.0), (2, 3, f64::INFINITY), (3, 0, 2.0)] {
            let p = params(w.clone(), p0, d, 0.3, 0.25);
            let a = make_random_atom(&g, &p, seed).unwrap();
            assert_eq!(a, make_random_atom(&g, &p, seed).unwrap());
            let rep = validate_atom(&a, &p, Tolerances::uniform(1e-9)).unwrap();
            assert!(rep.pass, "{rep:?}");
            assert!(rep.size_residual.abs() < 1e-12);
            assert!(rep.moment_relative.iter().all(|r| *r < 1e-10));
            assert!(validate_molecule(&a, &p, Tolerances::uniform(1e-9)).unwrap().pass);
            let twice = validate_atom(&a.scaled(2.0), &p, Tolerances::uniform(1e-9)).unwrap();
            assert!(!twice.size_ok && twice.size_residual < 0.0);
        }
    }

    #[test]
    fn slow_tails_fail_the_envelope() {
        let g = Grid::new(1, 8.0, 4096).unwrap();
        let w = WeightSpec::one();
        let r = 0.25;
        let p = AtomParams::new(1.0, 2.0, 0, Ball::interval(0.0, r).unwrap(), w).unwrap();
        let height = p.envelope_height(&g).unwrap();
        let raw = GridFunction::from_fn(g, |x| height * (1.0 + x[0].abs() / r).powi(-4)).unwrap();
        let mean = raw.integral() / (2.0 * g.half_extent());
        let m = raw.map(|v| v - mean);
        let rep = validate_molecule(&m, &p, Tolerances::uniform(1e-6)).unwrap();
        assert!(!rep.decay_ok);
    }

    #[test]
    fn random_molecules_validate() {
        let g = line();
        let w = WeightSpec::power(-0.5, vec![]);
        let p = params(w, 4.0, 1, -0.2, 0.125);
        let m = make_random_molecule(&g, &p, 9).unwrap();
        let rep = validate_molecule(&m, &p, Tolerances::uniform(1e-9)).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert!(rep.box_norm_constant.unwrap() <= 10.0);
    }

    #[test]
    fn planar_atoms() {
        let g = Grid::new(2, 2.0, 128).unwrap();
        let p = AtomParams::new(
            0.8,
            3.0,
            2,
            Ball::new(vec![0.2, -0.1], 0.3).unwrap(),
            WeightSpec::power(0.5, vec![]),
        )
        .unwrap();
        let a = make_random_atom(&g, &p, 5).unwrap();
        let rep = validate_atom(&a, &p, Tolerances::uniform(1e-9)).unwrap();
        assert!(rep.pass, "{rep:?}");
        assert_eq!(rep.moment_residuals.len(), 3);
    }

    #[test]
    fn generator_rejects_balls_outside_half_box() {
        let g = line();
        let p = params(WeightSpec::one(), 2.0, 0, 0.9, 0.25);
        assert!(make_random_atom(&g, &p, 0).is_err());
    }

    #[test]
    fn extended_reals() {
        assert!(parse_extended("inf").unwrap().is_infinite());
        assert_eq!(parse_extended("4").unwrap(), 4.0);
        assert!(parse_extended("nan").is_err());
        let p = params(WeightSpec::one(), f64::INFINITY, 0, 0.0, 0.5);
        assert_eq!(serde_json::to_value(&p).unwrap()["p0"], "inf");
    }
}
