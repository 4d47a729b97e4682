//! A_p, A_{p,q} and reverse-Hölder characteristics over ball families,
//! critical indices, and the doubling and fractional-order gap reports.
//!
//! Every characteristic is a supremum over a finite family, so the values
//! are lower bounds for the supremum over all balls.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::grid::{Ball, Grid};
use crate::weights::WeightSpec;

/// A characteristic at or above this value counts as "not in the class".
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;
/// Masses or quotients above this value are reported as diverged.
pub const OVERFLOW_CAP: f64 = 1e30;
pub const P_CAP: f64 = 16.0;
pub const R_CAP: f64 = 64.0;
pub const BISECTION_TOL: f64 = 1e-4;
/// Deepest lattice accepted for the exhaustive 1-D family (`2^12` edges).
pub const MAX_EXHAUSTIVE_DEPTH: u32 = 12;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Characteristic {
    Finite { value: f64 },
    Diverged { reason: String },
}

impl Characteristic {
    pub fn value(&self) -> Option<f64> {
        match self {
            Characteristic::Finite { value } => Some(*value),
            Characteristic::Diverged { .. } => None,
        }
    }

    /// Finite and below the divergence threshold.
    pub fn is_bounded(&self) -> bool {
        self.value().is_some_and(|v| v < DIVERGENCE_THRESHOLD)
    }

    pub fn is_diverged(&self) -> bool {
        matches!(self, Characteristic::Diverged { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FamilyKind {
    /// 1-D: every interval whose endpoints lie on the level-`depth` dyadic lattice.
    Exhaustive,
    /// Dyadic cubes of levels `0..=depth` plus copies shifted by a third of
    /// the side; in 2-D each square contributes its circumscribed ball,
    /// clipped to the box.
    ShiftedDyadic,
    Explicit {
        balls: Vec<Ball>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BallFamily {
    grid: Grid,
    depth: u32,
    kind: FamilyKind,
}

impl BallFamily {
    /// Exhaustive lattice intervals in 1-D, shifted dyadic balls in 2-D.
    pub fn standard(grid: Grid, depth: u32) -> Result<Self> {
        match grid.dim() {
            1 => Self::exhaustive(grid, depth),
            _ => Self::shifted_dyadic(grid, depth),
        }
    }

    pub fn exhaustive(grid: Grid, depth: u32) -> Result<Self> {
        if grid.dim() != 1 {
            return Err(invalid("the exhaustive family is one-dimensional"));
        }
        if depth > MAX_EXHAUSTIVE_DEPTH {
            return Err(invalid(format!(
                "exhaustive family depth {depth} exceeds {MAX_EXHAUSTIVE_DEPTH}"
            )));
        }
        Ok(Self {
            grid,
            depth,
            kind: FamilyKind::Exhaustive,
        })
    }

    pub fn shifted_dyadic(grid: Grid, depth: u32) -> Result<Self> {
        let max = if grid.dim() == 1 { 24 } else { grid.levels() };
        if depth > max {
            return Err(invalid(format!("family depth {depth} exceeds {max}")));
        }
        Ok(Self {
            grid,
            depth,
            kind: FamilyKind::ShiftedDyadic,
        })
    }

    pub fn explicit(grid: Grid, balls: Vec<Ball>) -> Result<Self> {
        if balls.is_empty() {
            return Err(invalid("ball family is empty"));
        }
        for b in &balls {
            if b.dim() != grid.dim() {
                return Err(invalid("ball dimension does not match the grid"));
            }
            if !grid.contains_ball(b) {
                return Err(invalid(format!(
                    "ball {:?} r={} leaves the box",
                    b.center, b.radius
                )));
            }
        }
        Ok(Self {
            grid,
            depth: 0,
            kind: FamilyKind::Explicit { balls },
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn kind(&self) -> &FamilyKind {
        &self.kind
    }

    /// Enumerates the family as balls (1-D intervals as `B(mid, len/2)`).
    pub fn balls(&self) -> Vec<Ball> {
        let r = self.grid.half_extent();
        match &self.kind {
            FamilyKind::Explicit { balls } => balls.clone(),
            FamilyKind::Exhaustive => {
                let m = 1usize << self.depth;
                let s = 2.0 * r / m as f64;
                let mut out = Vec::with_capacity(m * (m + 1) / 2);
                for i in 0..m {
                    for j in i..m {
                        let lo = -r + i as f64 * s;
                        let len = (j + 1 - i) as f64 * s;
                        out.push(Ball {
                            center: vec![lo + 0.5 * len],
                            radius: 0.5 * len,
                        });
                    }
                }
                out
            }
            FamilyKind::ShiftedDyadic => {
                let mut out = Vec::new();
                for level in 0..=self.depth {
                    let k_max = 1usize << level;
                    let s = 2.0 * r / k_max as f64;
                    if self.grid.dim() == 1 {
                        for shift in [0.0, 1.0 / 3.0, 2.0 / 3.0] {
                            for k in 0..k_max {
                                let lo = -r + (k as f64 + shift) * s;
                                if lo + s <= r * (1.0 + 1e-15) {
                                    out.push(Ball {
                                        center: vec![lo + 0.5 * s],
                                        radius: 0.5 * s,
                                    });
                                }
                            }
                        }
                    } else {
                        for (sx, sy) in [
                            (0.0, 0.0),
                            (1.0 / 3.0, 0.0),
                            (0.0, 1.0 / 3.0),
                            (1.0 / 3.0, 1.0 / 3.0),
                        ] {
                            for a in 0..k_max {
                                for b in 0..k_max {
                                    let cx = -r + (a as f64 + 0.5 + sx) * s;
                                    let cy = -r + (b as f64 + 0.5 + sy) * s;
                                    if cx + 0.5 * s <= r * (1.0 + 1e-15) && cy + 0.5 * s <= r * (1.0 + 1e-15)
                                    {
                                        out.push(Ball {
                                            center: vec![cx, cy],
                                            radius: s * std::f64::consts::FRAC_1_SQRT_2,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

/// What a quotient needs from each ball: masses of `w^e` for each listed
/// exponent, and optionally the essential infimum of `w`.
struct Needs<'a> {
    exps: &'a [f64],
    ess_inf: bool,
}

struct BallStats<'a> {
    measure: f64,
    masses: &'a [f64],
    ess_inf: f64,
}

type Outcome = std::result::Result<f64, String>;

fn check_masses(masses: &[f64], exps: &[f64], what: impl Fn() -> String) -> std::result::Result<(), String> {
    for (m, e) in masses.iter().zip(exps) {
        if !m.is_finite() || *m > OVERFLOW_CAP {
            return Err(format!("mass of w^{e} on {} is not finite", what()));
        }
    }
    Ok(())
}

fn check_quotient(q: f64, what: impl Fn() -> String) -> Outcome {
    if q.is_nan() || q > OVERFLOW_CAP {
        Err(format!("quotient on {} exceeds the overflow cap", what()))
    } else {
        Ok(q)
    }
}

/// Supremum of `quot` over the family.
fn family_sup(
    w: &WeightSpec,
    family: &BallFamily,
    needs: Needs<'_>,
    quot: impl Fn(&BallStats<'_>) -> f64 + Sync,
) -> Result<Characteristic> {
    let grid = family.grid;
    w.check_dim(grid.dim())?;
    let powered: Vec<WeightSpec> = needs.exps.iter().map(|&e| w.pow(e)).collect();
    let k = needs.exps.len();
    let outcome: Outcome = match (&family.kind, grid.dim()) {
        (FamilyKind::Exhaustive, _) => {
            let r = grid.half_extent();
            let m = 1usize << family.depth;
            let s = 2.0 * r / m as f64;
            let edge = |i: usize| -r + i as f64 * s;
            let seg_mass: Vec<Vec<f64>> = powered
                .iter()
                .map(|v| (0..m).map(|i| v.interval_mass(edge(i), edge(i + 1))).collect())
                .collect::<Result<_>>()?;
            let seg_inf: Vec<f64> = if needs.ess_inf {
                (0..m)
                    .map(|i| w.interval_ess_inf(edge(i), edge(i + 1)))
                    .collect::<Result<_>>()?
            } else {
                vec![1.0; m]
            };
            let rows: Vec<Outcome> = (0..m)
                .into_par_iter()
                .map(|i| {
                    let mut acc = vec![0.0; k];
                    let mut inf = f64::INFINITY;
                    let mut best = 0.0f64;
                    for j in i..m {
                        for (a, col) in acc.iter_mut().zip(&seg_mass) {
                            *a += col[j];
                        }
                        inf = inf.min(seg_inf[j]);
                        let what = || format!("[{}, {}]", edge(i), edge(j + 1));
                        check_masses(&acc, needs.exps, what)?;
                        let stats = BallStats {
                            measure: (j + 1 - i) as f64 * s,
                            masses: &acc,
                            ess_inf: inf,
                        };
                        best = best.max(check_quotient(quot(&stats), what)?);
                    }
                    Ok(best)
                })
                .collect();
            reduce_outcomes(rows)
        }
        (_, 1) => {
            let balls = family.balls();
            let rows: Vec<Outcome> = balls
                .par_iter()
                .map(|b| {
                    let (x0, x1) = b.bounds_1d();
                    let (x0, x1) = (x0.max(-grid.half_extent()), x1.min(grid.half_extent()));
                    let what = || format!("[{x0}, {x1}]");
                    let masses = powered
                        .iter()
                        .map(|v| v.interval_mass(x0, x1))
                        .collect::<Result<Vec<_>>>()
                        .map_err(|e| e.to_string())?;
                    check_masses(&masses, needs.exps, what)?;
                    let ess_inf = if needs.ess_inf {
                        w.interval_ess_inf(x0, x1).map_err(|e| e.to_string())?
                    } else {
                        1.0
                    };
                    let stats = BallStats {
                        measure: x1 - x0,
                        masses: &masses,
                        ess_inf,
                    };
                    check_quotient(quot(&stats), what)
                })
                .collect();
            reduce_outcomes(rows)
        }
        _ => {
            let cells: Vec<Vec<f64>> = powered
                .iter()
                .map(|v| v.cell_masses(&grid))
                .collect::<Result<_>>()?;
            let infs = if needs.ess_inf {
                w.cell_ess_infs(&grid)?
            } else {
                Vec::new()
            };
            let balls = family.balls();
            let rows: Vec<Outcome> = balls
                .par_iter()
                .map(|b| {
                    let mut masses = vec![0.0; k];
                    let mut inf = f64::INFINITY;
                    let count = for_cells_in_disk(&grid, b, |i| {
                        for (m, col) in masses.iter_mut().zip(&cells) {
                            *m += col[i];
                        }
                        if needs.ess_inf {
                            inf = inf.min(infs[i]);
                        }
                    });
                    if count == 0 {
                        return Ok(0.0);
                    }
                    let what = || format!("B({:?}, {})", b.center, b.radius);
                    check_masses(&masses, needs.exps, what)?;
                    let stats = BallStats {
                        measure: count as f64 * grid.cell_volume(),
                        masses: &masses,
                        ess_inf: if needs.ess_inf { inf } else { 1.0 },
                    };
                    check_quotient(quot(&stats), what)
                })
                .collect();
            reduce_outcomes(rows)
        }
    };
    Ok(match outcome {
        Ok(value) => Characteristic::Finite { value },
        Err(reason) => Characteristic::Diverged { reason },
    })
}

/// First divergence in enumeration order wins, otherwise the maximum; the
/// result does not depend on how the parallel map was scheduled.
fn reduce_outcomes(rows: Vec<Outcome>) -> Outcome {
    let mut best = 0.0f64;
    for r in rows {
        best = best.max(r?);
    }
    Ok(best)
}

/// Calls `f` for every cell of a planar grid whose center lies in the closed
/// ball; returns the number of cells visited.
pub(crate) fn for_cells_in_disk(grid: &Grid, b: &Ball, mut f: impl FnMut(usize)) -> usize {
    let n = grid.cells_per_axis();
    let h = grid.spacing();
    let r0 = grid.half_extent();
    let idx = |x: f64| ((x + r0) / h - 0.5).ceil().max(0.0) as usize;
    let top = |x: f64| (((x + r0) / h - 0.5).floor()).min(n as f64 - 1.0);
    let (cx, cy, rad) = (b.center[0], b.center[1], b.radius);
    let row_hi = top(cx + rad);
    if row_hi < 0.0 {
        return 0;
    }
    let mut count = 0;
    for row in idx(cx - rad)..=row_hi as usize {
        let dx = grid.axis_center(row) - cx;
        let rem = rad * rad - dx * dx;
        if rem < 0.0 {
            continue;
        }
        let half = rem.sqrt();
        let col_hi = top(cy + half);
        if col_hi < 0.0 {
            continue;
        }
        for col in idx(cy - half)..=col_hi as usize {
            let dy = grid.axis_center(col) - cy;
            if dx * dx + dy * dy <= rad * rad {
                f(grid.flat(row, col));
                count += 1;
            }
        }
    }
    count
}

fn jensen_checked(c: Characteristic, what: &str) -> Result<Characteristic> {
    if let Some(v) = c.value() {
        if v < 1.0 - 1e-9 {
            return Err(Error::Numerical(format!("{what} characteristic {v} is below 1")));
        }
    }
    Ok(c)
}

/// `sup_B (avg_B w)(avg_B w^{-1/(p-1)})^{p-1}`; for `p = 1` the quotient
/// `avg_B w / ess inf_B w`.
pub fn ap_characteristic(w: &WeightSpec, p: f64, family: &BallFamily) -> Result<Characteristic> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(invalid(format!("A_p needs finite p >= 1, got {p}")));
    }
    let c = if p == 1.0 {
        family_sup(
            w,
            family,
            Needs {
                exps: &[1.0],
                ess_inf: true,
            },
            |b| b.masses[0] / b.measure / b.ess_inf,
        )?
    } else {
        let e = -1.0 / (p - 1.0);
        family_sup(
            w,
            family,
            Needs {
                exps: &[1.0, e],
                ess_inf: false,
            },
            |b| b.masses[0] / b.measure * (b.masses[1] / b.measure).powf(p - 1.0),
        )?
    };
    jensen_checked(c, "A_p")
}

/// `sup_B (avg_B w^s)^{1/s} / avg_B w`.
pub fn rh_characteristic(w: &WeightSpec, s: f64, family: &BallFamily) -> Result<Characteristic> {
    if !(s > 1.0) || !s.is_finite() {
        return Err(invalid(format!("RH_s needs finite s > 1, got {s}")));
    }
    let c = family_sup(
        w,
        family,
        Needs {
            exps: &[s, 1.0],
            ess_inf: false,
        },
        |b| (b.masses[0] / b.measure).powf(1.0 / s) / (b.masses[1] / b.measure),
    )?;
    jensen_checked(c, "RH_s")
}

/// `sup_B (avg_B w^q)^{1/q} (avg_B w^{-p'})^{1/p'}`; for `p = 1` the second
/// factor is `1 / ess inf_B w`.
pub fn apq_characteristic(w: &WeightSpec, p: f64, q: f64, family: &BallFamily) -> Result<Characteristic> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(invalid(format!("A_(p,q) needs finite p >= 1, got {p}")));
    }
    if !(q >= p) || !q.is_finite() {
        return Err(invalid(format!("A_(p,q) needs finite q >= p, got p={p}, q={q}")));
    }
    let c = if p == 1.0 {
        // ess inf of w^q is (ess inf w)^q for q > 0.
        family_sup(
            w,
            family,
            Needs {
                exps: &[q],
                ess_inf: true,
            },
            |b| (b.masses[0] / b.measure).powf(1.0 / q) / b.ess_inf,
        )?
    } else {
        let pc = p / (p - 1.0);
        family_sup(
            w,
            family,
            Needs {
                exps: &[q, -pc],
                ess_inf: false,
            },
            |b| (b.masses[0] / b.measure).powf(1.0 / q) * (b.masses[1] / b.measure).powf(1.0 / pc),
        )?
    };
    jensen_checked(c, "A_(p,q)")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriticalIndices {
    /// Estimate of `inf{q : w in A_q}`.
    pub q_critical: f64,
    /// `w` is not in `A_{p_cap}`; `q_critical` then equals `p_cap`.
    pub q_exceeds_cap: bool,
    /// Estimate of `sup{r : w in RH_r}`; equals `r_cap` when capped.
    pub r_critical: f64,
    /// `rh_characteristic(r_cap)` stays below the threshold (the "+inf-cap" case).
    pub r_capped: bool,
    pub p_cap: f64,
    pub r_cap: f64,
    pub threshold: f64,
    pub tolerance: f64,
    pub family_depth: u32,
}

fn check_box_mass(w: &WeightSpec, grid: &Grid) -> Result<()> {
    w.check_dim(grid.dim())?;
    let total: f64 = w.cell_masses(grid)?.iter().sum();
    if !total.is_finite() || total > OVERFLOW_CAP {
        return Err(Error::Diverged("the weight has infinite mass on the box".into()));
    }
    Ok(())
}

/// Bisection for `q~_w` and `r_w` against [`DIVERGENCE_THRESHOLD`].
pub fn critical_indices(
    w: &WeightSpec,
    family: &BallFamily,
    p_cap: f64,
    r_cap: f64,
) -> Result<CriticalIndices> {
    if !(p_cap > 1.0 && r_cap > 1.0) {
        return Err(invalid("caps must exceed 1"));
    }
    check_box_mass(w, family.grid())?;
    let in_ap = |p: f64| -> Result<bool> { Ok(ap_characteristic(w, p, family)?.is_bounded()) };
    let in_rh = |s: f64| -> Result<bool> { Ok(rh_characteristic(w, s, family)?.is_bounded()) };

    let (q_critical, q_exceeds_cap) = if in_ap(1.0)? {
        (1.0, false)
    } else if !in_ap(p_cap)? {
        (p_cap, true)
    } else {
        let (mut lo, mut hi) = (1.0, p_cap);
        while hi - lo > BISECTION_TOL {
            let mid = 0.5 * (lo + hi);
            if in_ap(mid)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        (0.5 * (lo + hi), false)
    };

    let (r_critical, r_capped) = if in_rh(r_cap)? {
        (r_cap, true)
    } else {
        let (mut lo, mut hi) = (1.0, r_cap);
        while hi - lo > BISECTION_TOL {
            let mid = 0.5 * (lo + hi);
            if in_rh(mid)? {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (0.5 * (lo + hi), false)
    };

    Ok(CriticalIndices {
        q_critical,
        q_exceeds_cap,
        r_critical,
        r_capped,
        p_cap,
        r_cap,
        threshold: DIVERGENCE_THRESHOLD,
        tolerance: BISECTION_TOL,
        family_depth: family.depth(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CharacteristicSample {
    pub exponent: f64,
    pub characteristic: Characteristic,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightProfile {
    pub ap_char: Vec<CharacteristicSample>,
    pub rh_char: Vec<CharacteristicSample>,
    pub q_critical: f64,
    pub q_exceeds_cap: bool,
    pub r_critical: f64,
    pub r_capped: bool,
    pub family_depth: u32,
    pub threshold: f64,
    pub overflow_cap: f64,
}

impl WeightProfile {
    /// `r_w / (r_w - 1)`, read as 1 when `r_w` is capped.
    pub fn rh_conjugate(&self) -> f64 {
        if self.r_capped {
            1.0
        } else {
            self.r_critical / (self.r_critical - 1.0)
        }
    }
}

pub const PROFILE_P: [f64; 7] = [1.0, 1.5, 2.0, 3.0, 4.0, 8.0, 16.0];
pub const PROFILE_S: [f64; 8] = [1.5, 2.0, 3.0, 4.0, 8.0, 16.0, 32.0, 64.0];

pub fn weight_profile(w: &WeightSpec, family: &BallFamily) -> Result<WeightProfile> {
    let idx = critical_indices(w, family, P_CAP, R_CAP)?;
    let ap_char = PROFILE_P
        .iter()
        .map(|&p| {
            Ok(CharacteristicSample {
                exponent: p,
                characteristic: ap_characteristic(w, p, family)?,
            })
        })
        .collect::<Result<_>>()?;
    let rh_char = PROFILE_S
        .iter()
        .map(|&s| {
            Ok(CharacteristicSample {
                exponent: s,
                characteristic: rh_characteristic(w, s, family)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(WeightProfile {
        ap_char,
        rh_char,
        q_critical: idx.q_critical,
        q_exceeds_cap: idx.q_exceeds_cap,
        r_critical: idx.r_critical,
        r_capped: idx.r_capped,
        family_depth: family.depth(),
        threshold: DIVERGENCE_THRESHOLD,
        overflow_cap: OVERFLOW_CAP,
    })
}

/// Mass of `w` on a ball: exact interval mass in 1-D, sum of the masses of
/// cells whose centers lie in the ball in 2-D (with the matching cell-count
/// measure as second component).
pub fn ball_mass(w: &WeightSpec, grid: &Grid, b: &Ball) -> Result<(f64, f64)> {
    match grid.dim() {
        1 => {
            let (x0, x1) = b.bounds_1d();
            Ok((w.interval_mass(x0, x1)?, x1 - x0))
        }
        _ => {
            let masses = w.cell_masses(grid)?;
            Ok(disk_mass(&masses, grid, b))
        }
    }
}

fn disk_mass(masses: &[f64], grid: &Grid, b: &Ball) -> (f64, f64) {
    let mut m = 0.0;
    let count = for_cells_in_disk(grid, b, |i| m += masses[i]);
    (m, count as f64 * grid.cell_volume())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DoublingReport {
    pub lambda: f64,
    pub p: f64,
    /// `max w(lambda B) / w(B)` over balls whose dilate stays in the box.
    pub max_ratio: f64,
    /// `lambda^{np} [w]_{A_p}`.
    pub bound: f64,
    pub ap_char: Characteristic,
    pub balls_checked: usize,
    pub balls_skipped: usize,
    pub pass: bool,
}

/// Compares `w(lambda B) / w(B)` against `lambda^{np} [w]_{A_p}`, where the
/// characteristic is taken over the family together with the dilated balls.
pub fn doubling_gap(w: &WeightSpec, p: f64, lambda: f64, family: &BallFamily) -> Result<DoublingReport> {
    if !(lambda > 1.0) || !lambda.is_finite() {
        return Err(invalid(format!("dilation must exceed 1, got {lambda}")));
    }
    let grid = *family.grid();
    let n = grid.dim() as f64;
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for b in family.balls() {
        let big = b.scaled(lambda);
        if grid.contains_ball(&big) {
            pairs.push((b, big));
        } else {
            skipped += 1;
        }
    }
    let base = ap_characteristic(w, p, family)?;
    let dilated = if pairs.is_empty() {
        base.clone()
    } else {
        let fam = BallFamily::explicit(grid, pairs.iter().map(|(_, b)| b.clone()).collect())?;
        ap_characteristic(w, p, &fam)?
    };
    let ap_char = match (base.value(), dilated.value()) {
        (Some(a), Some(b)) => Characteristic::Finite { value: a.max(b) },
        _ => {
            if base.is_diverged() {
                base
            } else {
                dilated
            }
        }
    };
    let cells = if grid.dim() == 2 {
        Some(w.cell_masses(&grid)?)
    } else {
        None
    };
    let mut max_ratio = 0.0f64;
    let mut worst_margin = 0.0f64;
    for (b, big) in &pairs {
        let ((m, lb), (mb, lbig)) = match &cells {
            Some(c) => (disk_mass(c, &grid, b), disk_mass(c, &grid, big)),
            None => (ball_mass(w, &grid, b)?, ball_mass(w, &grid, big)?),
        };
        if m <= 0.0 || lb <= 0.0 {
            continue;
        }
        let ratio = mb / m;
        max_ratio = max_ratio.max(ratio);
        // Per-ball form of the bound with the actual measure ratio, which
        // equals lambda^n except for the clipped discrete disks in 2-D.
        let allowed = (lbig / lb).powf(p);
        worst_margin = worst_margin.max(ratio / allowed);
    }
    let (bound, pass) = match ap_char.value() {
        Some(a) => (
            lambda.powf(n * p) * a,
            worst_margin <= a * (1.0 + 1e-12) && max_ratio.is_finite(),
        ),
        None => (f64::INFINITY, false),
    };
    Ok(DoublingReport {
        lambda,
        p,
        max_ratio,
        bound,
        ap_char,
        balls_checked: pairs.len(),
        balls_skipped: skipped,
        pass,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FractionalGapReport {
    pub p: f64,
    pub q: f64,
    pub alpha: f64,
    /// `max [w^p(B)]^{-1/p} [w^q(B)]^{1/q} / |B|^{-alpha/n}`.
    pub max_lhs_over_rhs: f64,
    /// `[w^p]_{RH_{q/p}}^{1/p}`.
    pub rh_bound: Characteristic,
    pub pass: bool,
}

pub fn fractional_gap(
    w: &WeightSpec,
    p: f64,
    q: f64,
    alpha: f64,
    family: &BallFamily,
) -> Result<FractionalGapReport> {
    let n = family.grid().dim() as f64;
    if !(alpha > 0.0 && alpha < n) {
        return Err(invalid(format!("alpha must lie in (0, {n}), got {alpha}")));
    }
    if !(p > 0.0 && p < n / alpha) {
        return Err(invalid(format!("need 0 < p < n/alpha = {}, got {p}", n / alpha)));
    }
    let expected = 1.0 / p - alpha / n;
    if !(q > 0.0) || ((1.0 / q) - expected).abs() > 1e-12 * expected.abs().max(1.0) {
        return Err(invalid(format!(
            "need 1/q = 1/p - alpha/n = {expected}, got q={q}"
        )));
    }
    let lhs = family_sup(
        w,
        family,
        Needs {
            exps: &[p, q],
            ess_inf: false,
        },
        |b| b.masses[0].powf(-1.0 / p) * b.masses[1].powf(1.0 / q) * b.measure.powf(alpha / n),
    )?;
    let rh = rh_characteristic(&w.pow(p), q / p, family)?;
    let rh_bound = match rh.value() {
        Some(v) => Characteristic::Finite {
            value: v.powf(1.0 / p),
        },
        None => rh,
    };
    let max_lhs_over_rhs = lhs.value().unwrap_or(f64::INFINITY);
    let pass = match rh_bound.value() {
        Some(b) => max_lhs_over_rhs <= b * (1.0 + 1e-9),
        None => false,
    };
    Ok(FractionalGapReport {
        p,
        q,
        alpha,
        max_lhs_over_rhs,
        rh_bound,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_family(depth: u32) -> BallFamily {
        BallFamily::standard(Grid::new(1, 1.0, 1 << depth).unwrap(), depth).unwrap()
    }

    fn val(c: Characteristic) -> f64 {
        c.value().expect("finite characteristic")
    }

    #[test]
    fn unit_weight_has_unit_characteristics() {
        let f = line_family(6);
        let one = WeightSpec::one();
        assert!((val(ap_characteristic(&one, 2.0, &f).unwrap()) - 1.0).abs() < 1e-12);
        assert!((val(ap_characteristic(&one, 1.0, &f).unwrap()) - 1.0).abs() < 1e-12);
        assert!((val(rh_characteristic(&one, 2.0, &f).unwrap()) - 1.0).abs() < 1e-12);
        assert!((val(apq_characteristic(&one, 2.0, 3.0, &f).unwrap()) - 1.0).abs() < 1e-12);
        let g2 = Grid::new(2, 1.0, 16).unwrap();
        let f2 = BallFamily::standard(g2, 3).unwrap();
        assert!((val(ap_characteristic(&one, 2.0, &f2).unwrap()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_integrable_power_diverges() {
        let f = line_family(8);
        assert!(ap_characteristic(&WeightSpec::power(-1.0, vec![]), 2.0, &f)
            .unwrap()
            .is_diverged());
        let w = WeightSpec::power(-0.5, vec![]);
        assert!(val(rh_characteristic(&w, 1.5, &f).unwrap()).is_finite());
        assert!(rh_characteristic(&w, 2.5, &f).unwrap().is_diverged());
        assert!(ap_characteristic(&w, 0.5, &f).is_err());
        assert!(apq_characteristic(&w, 3.0, 2.0, &f).is_err());
    }

    #[test]
    fn ap_grows_with_depth_for_positive_power() {
        // |x| sits exactly on the A_2 boundary, so it diverges there.
        let edge = WeightSpec::power(1.0, vec![]);
        assert!(ap_characteristic(&edge, 2.0, &line_family(6))
            .unwrap()
            .is_diverged());
        let w = WeightSpec::power(0.5, vec![]);
        let a6 = val(ap_characteristic(&w, 2.0, &line_family(6)).unwrap());
        let a8 = val(ap_characteristic(&w, 2.0, &line_family(8)).unwrap());
        assert!(a6 >= 1.0 && a8 >= a6);
    }

    #[test]
    fn critical_indices_of_unit_and_powers() {
        let f = line_family(8);
        let c = critical_indices(&WeightSpec::one(), &f, P_CAP, R_CAP).unwrap();
        assert_eq!(c.q_critical, 1.0);
        assert!(c.r_capped);
        let c = critical_indices(&WeightSpec::power(1.0, vec![]), &f, P_CAP, R_CAP).unwrap();
        assert!((c.q_critical - 2.0).abs() < 0.05 && c.r_capped);
        let c = critical_indices(&WeightSpec::power(-0.5, vec![]), &f, P_CAP, R_CAP).unwrap();
        assert!((c.q_critical - 1.0).abs() < 0.05);
        assert!((c.r_critical - 2.0).abs() < 0.1);
        assert!(critical_indices(&WeightSpec::power(-1.0, vec![]), &f, P_CAP, R_CAP).is_err());
    }

    #[test]
    fn doubling_on_lebesgue_and_power() {
        let f = line_family(6);
        let r = doubling_gap(&WeightSpec::one(), 2.0, 2.0, &f).unwrap();
        assert!((r.max_ratio - 2.0).abs() < 1e-12 && r.bound >= 2.0 && r.pass);
        let g = *f.grid();
        let fam = BallFamily::explicit(g, vec![Ball::interval(0.0, 0.25).unwrap()]).unwrap();
        let r = doubling_gap(&WeightSpec::power(1.0, vec![]), 3.0, 2.0, &fam).unwrap();
        assert!((r.max_ratio - 4.0).abs() < 1e-12 && r.pass);
    }

    #[test]
    fn fractional_gap_equality_and_errors() {
        let f = line_family(6);
        let q = 2.0 / 3.0;
        let r = fractional_gap(&WeightSpec::one(), 0.5, q, 0.5, &f).unwrap();
        assert!((r.max_lhs_over_rhs - 1.0).abs() < 1e-12 && r.pass);
        let r = fractional_gap(&WeightSpec::power(-0.25, vec![]), 0.5, q, 0.5, &f).unwrap();
        assert!(r.pass);
        assert!(fractional_gap(&WeightSpec::one(), 2.0, 1.0, 0.5, &f).is_err());
        assert!(fractional_gap(&WeightSpec::one(), 0.5, 1.0, 0.5, &f).is_err());
    }

    #[test]
    fn explicit_family_rejects_escaping_balls() {
        let g = Grid::new(1, 1.0, 8).unwrap();
        assert!(BallFamily::explicit(g, vec![Ball::interval(0.9, 0.2).unwrap()]).is_err());
        assert!(BallFamily::explicit(g, vec![]).is_err());
    }
}
