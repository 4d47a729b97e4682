//! Constructive atomic decomposition on the line: level sets of the smooth
//! maximal function, Whitney covers, moment-corrected pieces and their
//! normalization into weighted atoms.
//!
//! Everything is resolved on the grid's cells. An open set is a union of
//! runs of cells, cubes are dyadic runs of `2^s` cells aligned with the
//! grid's tree, and distances are measured between cell centers in units of
//! cells, so the Whitney inequalities are checked in exact integer
//! arithmetic.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::atoms::{
    centered_moments, check_parameters, polynomial_residual, validate_atom, AdmissibilityReport, AtomParams,
    Tolerances, ValidationReport,
};
use crate::error::{invalid, Error, Result};
use crate::grid::{Ball, DyadicCube, Grid, GridFunction};
use crate::maximal::{hardy_norm, smooth_maximal, MaximalConfig};
use crate::weights::WeightSpec;
use crate::weights::{ball_mass, BallFamily, WeightProfile};

/// `Q*` is `Q` dilated by this factor about its center (rounded down to
/// whole cells on each side).
pub const DILATION: f64 = 9.0 / 8.0;
/// Smallest cube, in cells, that the level set `{M_phi f > max/4}` must
/// contain before the construction is attempted.
pub const MIN_RESOLVED_CUBE: usize = 4;
/// Pieces whose sup is below this fraction of the largest term that
/// entered them are cancellation residue and are dropped.
pub const NOISE_FLOOR: f64 = 1e-7;
/// Relative tolerance on the moments of `f` itself.
pub const INPUT_MOMENT_TOL: f64 = 1e-8;

/// A union of runs of cells `[start, end)` on a 1-D grid, kept sorted and
/// with adjacent runs merged.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CellSet {
    cells: usize,
    runs: Vec<(usize, usize)>,
}

impl CellSet {
    pub fn empty(cells: usize) -> Self {
        Self {
            cells,
            runs: Vec::new(),
        }
    }

    pub fn from_mask(mask: &[bool]) -> Self {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, &m) in mask.iter().enumerate() {
            match (m, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    runs.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s, mask.len()));
        }
        Self {
            cells: mask.len(),
            runs,
        }
    }

    /// Cells whose centers lie in one of the open intervals `(a, b)`.
    pub fn from_intervals(grid: &Grid, intervals: &[(f64, f64)]) -> Result<Self> {
        if grid.dim() != 1 {
            return Err(invalid("cell sets are one-dimensional"));
        }
        let mask: Vec<bool> = (0..grid.cells_per_axis())
            .map(|i| {
                let x = grid.axis_center(i);
                intervals.iter().any(|&(a, b)| a < x && x < b)
            })
            .collect();
        Ok(Self::from_mask(&mask))
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn runs(&self) -> &[(usize, usize)] {
        &self.runs
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.runs.iter().map(|(a, b)| b - a).sum()
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.runs.iter().any(|&(a, b)| a <= cell && cell < b)
    }

    pub fn is_subset(&self, other: &CellSet) -> bool {
        self.runs
            .iter()
            .all(|&(a, b)| other.runs.iter().any(|&(c, d)| c <= a && b <= d))
    }

    pub fn touches_boundary(&self) -> bool {
        self.runs.iter().any(|&(a, b)| a == 0 || b == self.cells)
    }

    /// Cell-center distance (in cells) from `cell` to the nearest cell
    /// outside the set; `None` when the complement is empty.
    pub fn distance_to_complement(&self, cell: usize) -> Option<usize> {
        if !self.contains(cell) {
            return Some(0);
        }
        let &(a, b) = self.runs.iter().find(|&&(a, b)| a <= cell && cell < b)?;
        let left = (a > 0).then(|| cell - a + 1);
        let right = (b < self.cells).then(|| b - cell);
        match (left, right) {
            (Some(l), Some(r)) => Some(l.min(r)),
            (l, r) => l.or(r),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelSetFamily {
    pub base: f64,
    /// `(floor log2 min+, ceil log2 max)` of the maximal function; `None`
    /// for `f = 0`.
    pub j_range: Option<(i32, i32)>,
    pub sets: BTreeMap<i32, CellSet>,
}

impl LevelSetFamily {
    pub fn is_nested(&self) -> bool {
        self.sets
            .iter()
            .zip(self.sets.iter().skip(1))
            .all(|((_, lo), (_, hi))| hi.is_subset(lo))
    }
}

/// `O_j = {M_phi f > 2^j}` for every `j` in the range of the maximal
/// function.
pub fn level_sets(f: &GridFunction, cfg: &MaximalConfig) -> Result<LevelSetFamily> {
    let m = smooth_maximal(f, cfg)?;
    Ok(level_sets_of(m.values()))
}

fn level_sets_of(m: &[f64]) -> LevelSetFamily {
    let positive = m.iter().copied().filter(|v| *v > 0.0);
    let min = positive.clone().fold(f64::INFINITY, f64::min);
    let max = positive.fold(0.0f64, f64::max);
    if max == 0.0 {
        return LevelSetFamily {
            base: 2.0,
            j_range: None,
            sets: BTreeMap::new(),
        };
    }
    let range = (min.log2().floor() as i32, max.log2().ceil() as i32);
    let sets = (range.0..=range.1)
        .map(|j| {
            let t = 2f64.powi(j);
            let mask: Vec<bool> = m.iter().map(|v| *v > t).collect();
            (j, CellSet::from_mask(&mask))
        })
        .collect();
    LevelSetFamily {
        base: 2.0,
        j_range: Some(range),
        sets,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WhitneyCube {
    pub cube: DyadicCube,
    /// First cell and number of cells.
    pub start: usize,
    pub side: usize,
    /// Cell-center distance to the complement of the parent set.
    pub distance: usize,
}

impl WhitneyCube {
    /// Cells of `Q*`: `Q` widened by `floor(side/16)` cells on each side.
    pub fn dilated_range(&self) -> (usize, usize) {
        let m = self.side / 16;
        (self.start - m, self.start + self.side + m)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct WhitneyCover {
    pub cubes: Vec<WhitneyCube>,
    pub parent_set: CellSet,
    pub dilation: f64,
}

impl WhitneyCover {
    /// Disjoint cubes whose union is the parent set and with
    /// `side <= distance <= 4 side`.
    pub fn check_invariants(&self) -> bool {
        let mut covered = vec![0u32; self.parent_set.cells()];
        for q in &self.cubes {
            if !(q.side <= q.distance && q.distance <= 4 * q.side) {
                return false;
            }
            for c in &mut covered[q.start..q.start + q.side] {
                *c += 1;
            }
        }
        covered
            .iter()
            .enumerate()
            .all(|(i, &c)| c == u32::from(self.parent_set.contains(i)))
    }
}

/// Maximal dyadic runs `Q` inside the set with `side(Q) <= dist(Q, O^c)`.
/// The property passes to children, so the maximal runs tile the set; the
/// failure of the parent gives `dist <= 3 side`.
pub fn whitney(set: &CellSet) -> Result<WhitneyCover> {
    if set.touches_boundary() {
        return Err(invalid(
            "open set touches the box boundary; enlarge the box or localize f",
        ));
    }
    if !set.cells().is_power_of_two() {
        return Err(invalid("cell count must be a power of two"));
    }
    let levels = set.cells().trailing_zeros();
    let mut cubes = Vec::new();
    for &(a, b) in set.runs() {
        let dist = |q: usize, s: usize| (q - a + 1).min(b - (q + s) + 1);
        let mut pos = a;
        while pos < b {
            let mut s = 1usize << levels;
            loop {
                if pos % s == 0 && pos + s <= b && s <= dist(pos, s) {
                    break;
                }
                s >>= 1;
            }
            cubes.push(WhitneyCube {
                cube: DyadicCube::new(levels - s.trailing_zeros(), vec![(pos / s) as i64]),
                start: pos,
                side: s,
                distance: dist(pos, s),
            });
            pos += s;
        }
    }
    Ok(WhitneyCover {
        cubes,
        parent_set: set.clone(),
        dilation: DILATION,
    })
}

/// Exponents of the decomposition; the ball of each atom is chosen by the
/// construction.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecompositionParams {
    pub p: f64,
    #[serde(serialize_with = "crate::atoms::ser_extended")]
    pub p0: f64,
    pub d: u32,
    pub weight: WeightSpec,
}

impl DecompositionParams {
    pub fn atom_params(&self, ball: Ball) -> Result<AtomParams> {
        AtomParams::new(self.p, self.p0, self.d, ball, self.weight.clone())
    }

    /// Admissibility of `(p, p0, d)` for the weight.
    pub fn check(&self, profile: &WeightProfile, family: &BallFamily) -> Result<AdmissibilityReport> {
        let g = family.grid();
        let ball = Ball::new(g.origin(), g.half_extent())?;
        check_parameters(&self.atom_params(ball)?, profile, family)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    /// `g^{j_lo} = f - sum_k b_k^{j_lo}`, the part of `f` below the lowest
    /// level set that avoids the box boundary.
    Base,
    Piece,
}

#[derive(Clone, Debug, Serialize)]
pub struct DecompositionEntry {
    pub kind: EntryKind,
    pub j: i32,
    pub k: usize,
    pub lambda: f64,
    pub atom: GridFunction,
    pub ball: Ball,
    /// `Q_k^j` (absent for the base entry).
    pub cube: Option<DyadicCube>,
    /// Cells `[start, end)` allowed by support property (i).
    pub allowed: (usize, usize),
    /// `sup |A| / 2^j`.
    pub height_ratio: f64,
    /// `lambda / (2^j w(B)^{1/p})`.
    pub coefficient_ratio: f64,
    /// Smallest `c` with `B subset c Q`.
    pub containment: Option<f64>,
    pub validation: ValidationReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct AtomicDecomposition {
    pub params: DecompositionParams,
    pub entries: Vec<DecompositionEntry>,
    /// `||f - sum lambda a||_s / ||f||_s`, keyed by `s`.
    pub reconstruction_error_s: BTreeMap<String, f64>,
    pub coefficient_mass_p: f64,
    /// `||M_phi f||^p_{L^p_w}`.
    pub hardy_norm_p: f64,
    /// `coefficient_mass_p / hardy_norm_p`, the measured constant `c'`.
    pub mass_ratio: f64,
    pub j_range: Option<(i32, i32)>,
    pub j_lo: Option<i32>,
    pub dilation: f64,
    /// Global height constant `max sup|A_k^j| / 2^j`.
    pub height_constant: f64,
    /// `max lambda / (2^j w(B)^{1/p})`.
    pub coefficient_constant: f64,
    /// `max c` with `B_k^j subset c Q_k^j`.
    pub containment_constant: f64,
    /// `max_k #E_k^j` (cubes of the next level meeting `Q_k^{j*}`).
    pub max_overlap_down: usize,
    /// `max_i #E_i^j` (cubes of this level meeting `Q_i^{j+1*}`).
    pub max_overlap_up: usize,
    /// Largest moment residual relative to `||A||_1 r^k` over all entries.
    pub max_moment_relative: f64,
    /// Mass of pieces outside their allowed cells.
    pub support_violation: f64,
    /// Pieces at or below the noise floor (left out of the entries; their
    /// sum stays in the reconstruction error).
    pub dropped_pieces: usize,
    pub dropped_sup: f64,
    pub all_atoms_pass: bool,
    pub tolerances: Tolerances,
    pub warnings: Vec<String>,
}

/// Cutoff data of one Whitney cube: cells of `Q*`, `zeta` on them and
/// `f - P f` (the `zeta`-weighted polynomial residual of `f`).
struct CubeData {
    lo: usize,
    hi: usize,
    zeta: Vec<f64>,
    resid: Vec<f64>,
    ball: Ball,
}

impl CubeData {
    fn zeta_at(&self, cell: usize) -> f64 {
        if (self.lo..self.hi).contains(&cell) {
            self.zeta[cell - self.lo]
        } else {
            0.0
        }
    }
}

struct Level {
    j: i32,
    cover: WhitneyCover,
    data: Vec<CubeData>,
}

fn smoothstep(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let a = (-1.0 / x).exp();
    let b = (-1.0 / (1.0 - x)).exp();
    a / (a + b)
}

/// Profile of one cube: 1 on `Q`, decaying smoothly to 0 across the
/// dilation margin.
fn eta(q: &WhitneyCube, cell: usize) -> f64 {
    let m = q.side / 16;
    let end = q.start + q.side;
    let t = if cell < q.start {
        q.start - cell
    } else if cell >= end {
        cell + 1 - end
    } else {
        0
    };
    if t == 0 {
        1.0
    } else if t > m {
        0.0
    } else {
        smoothstep(1.0 - t as f64 / (m + 1) as f64)
    }
}

fn range_ball(grid: &Grid, lo: usize, hi: usize) -> Ball {
    let (a, b) = (grid.axis_edge(lo), grid.axis_edge(hi));
    Ball {
        center: vec![0.5 * (a + b)],
        radius: 0.5 * (b - a),
    }
}

fn build_level(grid: &Grid, f: &[f64], j: i32, set: &CellSet, d: u32) -> Result<Level> {
    let cover = whitney(set)?;
    let n = grid.cells_per_axis();
    let mut total = vec![0.0; n];
    for q in &cover.cubes {
        let (lo, hi) = q.dilated_range();
        for (c, t) in total.iter_mut().enumerate().take(hi).skip(lo) {
            *t += eta(q, c);
        }
    }
    let data = cover
        .cubes
        .par_iter()
        .map(|q| {
            let (lo, hi) = q.dilated_range();
            let cells: Vec<usize> = (lo..hi).collect();
            let zeta: Vec<f64> = cells.iter().map(|&c| eta(q, c) / total[c]).collect();
            let ball = range_ball(grid, lo, hi);
            let resid = polynomial_residual(grid, &cells, &f[lo..hi], &zeta, &ball, d);
            CubeData {
                lo,
                hi,
                zeta,
                resid,
                ball,
            }
        })
        .collect();
    Ok(Level { j, cover, data })
}

fn overlaps(a: &CubeData, b: &CubeData) -> bool {
    a.lo < b.hi && b.lo < a.hi
}

/// Discrete `L^s` norm, scaled by the sup so tiny pieces do not underflow.
fn discrete_norm(v: &[f64], s: f64, vol: f64) -> f64 {
    let sup = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if sup == 0.0 {
        return 0.0;
    }
    sup * (v.iter().map(|x| (x.abs() / sup).powf(s)).sum::<f64>() * vol).powf(1.0 / s)
}

/// The construction, for `f` with vanishing moments through degree `d`.
///
/// With `zeta_k^j` a partition of unity of `O_j` subordinate to the
/// `Q_k^{j*}`, `P_k^j` the `zeta_k^j`-weighted projection of `f` onto
/// polynomials of degree `<= d` and `b_k^j = (f - P_k^j) zeta_k^j`,
///
/// `A_k^j = b_k^j - sum_{i in E_k^j} zeta_i^{j+1} ((f - P_i^{j+1}) zeta_k^j - P_{i,k})`
///
/// where `P_{i,k}` projects `(f - P_i^{j+1}) zeta_k^j` under
/// `zeta_i^{j+1}`. Summing over `k` gives
/// `sum_k b_k^j - sum_i b_i^{j+1}`, so the pieces telescope to
/// `f - g^{j_lo}` and the base piece `g^{j_lo}` closes the sum.
///
/// `admissibility`, when given, must pass.
pub fn decompose(
    f: &GridFunction,
    params: &DecompositionParams,
    cfg: &MaximalConfig,
    admissibility: Option<&AdmissibilityReport>,
    tol: Tolerances,
) -> Result<AtomicDecomposition> {
    let grid = *f.grid();
    if grid.dim() != 1 {
        return Err(invalid("the decomposition is implemented on the line only"));
    }
    if !(params.p > 0.0 && params.p <= 1.0) || !(params.p0 > 1.0) {
        return Err(invalid(format!(
            "need 0 < p <= 1 and p0 > 1, got p={} p0={}",
            params.p, params.p0
        )));
    }
    params.weight.check_dim(1)?;
    if let Some(a) = admissibility {
        if !a.pass {
            return Err(invalid(format!(
                "parameters not admissible for the weight: p0 must exceed {:.6}, d must be at least {}",
                a.p0_lower_bound, a.d_min
            )));
        }
    }
    let mut out = AtomicDecomposition {
        params: params.clone(),
        entries: Vec::new(),
        reconstruction_error_s: BTreeMap::new(),
        coefficient_mass_p: 0.0,
        hardy_norm_p: 0.0,
        mass_ratio: f64::NAN,
        j_range: None,
        j_lo: None,
        dilation: DILATION,
        height_constant: 0.0,
        coefficient_constant: 0.0,
        containment_constant: 0.0,
        max_overlap_down: 0,
        max_overlap_up: 0,
        max_moment_relative: 0.0,
        support_violation: 0.0,
        dropped_pieces: 0,
        dropped_sup: 0.0,
        all_atoms_pass: true,
        tolerances: tol,
        warnings: Vec::new(),
    };
    if f.max_abs() == 0.0 {
        for s in [2, 4] {
            out.reconstruction_error_s.insert(s.to_string(), 0.0);
        }
        out.mass_ratio = 0.0;
        return Ok(out);
    }
    let fv = f.values();
    let n = grid.cells_per_axis();
    let hull = range_ball(
        &grid,
        f.support().next().unwrap(),
        f.support().last().unwrap() + 1,
    );
    let (_, rel) = centered_moments(f, &hull, params.d);
    if let Some(worst) = rel.iter().copied().reduce(f64::max) {
        if worst > INPUT_MOMENT_TOL {
            return Err(Error::Hypothesis(format!(
                "f must have vanishing moments through degree {}: relative moment residual {worst:.3e}",
                params.d
            )));
        }
    }

    let family = level_sets(f, cfg)?;
    out.j_range = family.j_range;
    let j_lo = family
        .sets
        .iter()
        .find(|(_, s)| !s.is_empty() && !s.touches_boundary())
        .map(|(j, _)| *j)
        .ok_or_else(|| invalid("every level set touches the box boundary; enlarge the box"))?;
    out.j_lo = Some(j_lo);
    let active: Vec<(i32, &CellSet)> = family
        .sets
        .iter()
        .filter(|(j, s)| **j >= j_lo && !s.is_empty())
        .map(|(j, s)| (*j, s))
        .collect();

    let levels: Vec<Level> = active
        .par_iter()
        .map(|(j, s)| build_level(&grid, fv, *j, s, params.d))
        .collect::<Result<_>>()?;
    // Resolution check on the level where M_phi f exceeds a quarter of its
    // maximum: a feature that narrow is carried by single cells.
    let (_, j_max) = family.j_range.expect("f is nonzero");
    let probe = levels
        .iter()
        .rev()
        .find(|l| l.j <= j_max - 2)
        .unwrap_or(&levels[0]);
    let widest = probe.cover.cubes.iter().map(|q| q.side).max().unwrap_or(0);
    if widest < MIN_RESOLVED_CUBE {
        return Err(invalid(format!(
            "level set O_{} is not resolved (largest Whitney cube has {widest} cells, need {MIN_RESOLVED_CUBE}); refine grid",
            probe.j
        )));
    }

    // Raw pieces: (kind, j, k, values on [lo, hi), allowed range, cube index).
    struct Raw {
        kind: EntryKind,
        j: i32,
        k: usize,
        lo: usize,
        hi: usize,
        values: Vec<f64>,
        cube: Option<(DyadicCube, usize, usize)>,
        /// Largest magnitude among the terms summed into `values`.
        scale: f64,
    }

    let mut base = fv.to_vec();
    for c in &levels[0].data {
        for (i, cell) in (c.lo..c.hi).enumerate() {
            base[cell] -= c.zeta[i] * c.resid[i];
        }
    }
    let mut raws = Vec::new();
    if let (Some(lo), Some(hi)) = (
        base.iter().position(|v| *v != 0.0),
        base.iter().rposition(|v| *v != 0.0),
    ) {
        raws.push(Raw {
            kind: EntryKind::Base,
            j: j_lo,
            k: 0,
            lo,
            hi: hi + 1,
            values: base[lo..=hi].to_vec(),
            cube: None,

            scale: fv.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        });
    }

    let mut max_up = 0;
    let pieces: Vec<Vec<Raw>> = levels
        .par_iter()
        .enumerate()
        .map(|(li, level)| {
            let next = levels.get(li + 1).filter(|l| l.j == level.j + 1);
            level
                .data
                .iter()
                .zip(&level.cover.cubes)
                .enumerate()
                .map(|(k, (c, q))| {
                    let meets: Vec<&CubeData> = next
                        .map(|nx| nx.data.iter().filter(|i| overlaps(i, c)).collect())
                        .unwrap_or_default();
                    let lo = meets.iter().map(|i| i.lo).chain([c.lo]).min().unwrap();
                    let hi = meets.iter().map(|i| i.hi).chain([c.hi]).max().unwrap();
                    let mut values = vec![0.0; hi - lo];
                    let mut scale = fv[lo..hi].iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    for (t, cell) in (c.lo..c.hi).enumerate() {
                        let b = c.zeta[t] * c.resid[t];
                        values[cell - lo] += b;
                        scale = scale.max(b.abs());
                    }
                    for i in &meets {
                        let cells: Vec<usize> = (i.lo..i.hi).collect();
                        let g: Vec<f64> = cells
                            .iter()
                            .zip(&i.resid)
                            .map(|(&cell, r)| r * c.zeta_at(cell))
                            .collect();
                        let r = polynomial_residual(&grid, &cells, &g, &i.zeta, &i.ball, params.d);
                        for (t, cell) in cells.iter().enumerate() {
                            let v = i.zeta[t] * r[t];
                            values[cell - lo] -= v;
                            scale = scale.max(v.abs());
                        }
                    }
                    Raw {
                        kind: EntryKind::Piece,
                        j: level.j,
                        k,
                        lo,
                        hi,
                        values,
                        cube: Some((q.cube.clone(), q.start, q.side)),

                        scale,
                    }
                })
                .collect()
        })
        .collect();
    for (li, level) in levels.iter().enumerate() {
        if let Some(prev) = li
            .checked_sub(1)
            .map(|p| &levels[p])
            .filter(|p| p.j + 1 == level.j)
        {
            for i in &level.data {
                max_up = max_up.max(prev.data.iter().filter(|k| overlaps(i, k)).count());
            }
        }
    }
    out.max_overlap_up = max_up;
    raws.extend(pieces.into_iter().flatten());

    let h = grid.spacing();
    let (kept, dropped): (Vec<Raw>, Vec<Raw>) = raws.into_iter().partition(|raw| {
        let sup = raw.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        sup > NOISE_FLOOR * raw.scale
    });
    out.dropped_pieces = dropped.len();
    out.dropped_sup = dropped
        .iter()
        .flat_map(|r| r.values.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let entries: Vec<Option<DecompositionEntry>> = kept
        .into_par_iter()
        .map(|raw| -> Result<Option<DecompositionEntry>> {
            let sup = raw.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let ball = range_ball(&grid, raw.lo, raw.hi);
            let ap = params.atom_params(ball.clone())?;
            let norm = if params.p0.is_infinite() {
                sup
            } else {
                discrete_norm(&raw.values, params.p0, h)
            };
            let lambda = norm / ap.size_bound(&grid)?;
            let mut vals = vec![0.0; n];
            for (t, v) in raw.values.iter().enumerate() {
                vals[raw.lo + t] = v / lambda;
            }
            let atom = GridFunction::new(grid, vals)?;
            let validation = validate_atom(&atom, &ap, tol)?;
            let scale = 2f64.powi(raw.j);
            let (wb, _) = ball_mass(&params.weight, &grid, &ball)?;
            let containment = raw.cube.as_ref().map(|(_, start, side)| {
                let qc = *start as f64 + 0.5 * *side as f64;
                let far = (raw.lo as f64 - qc).abs().max(raw.hi as f64 - qc);
                2.0 * far / *side as f64
            });
            Ok(Some(DecompositionEntry {
                kind: raw.kind,
                j: raw.j,
                k: raw.k,
                lambda,
                atom,
                ball,
                cube: raw.cube.map(|(c, _, _)| c),
                allowed: (raw.lo, raw.hi),
                height_ratio: sup / scale,
                coefficient_ratio: lambda / (scale * wb.powf(1.0 / params.p)),
                containment,
                validation,
            }))
        })
        .collect::<Result<_>>()?;
    out.entries = entries.into_iter().flatten().collect();
    out.max_overlap_down = levels
        .iter()
        .zip(levels.iter().skip(1))
        .filter(|(a, b)| a.j + 1 == b.j)
        .flat_map(|(a, b)| {
            a.data
                .iter()
                .map(move |k| b.data.iter().filter(|i| overlaps(i, k)).count())
        })
        .max()
        .unwrap_or(0);

    let mut recon = vec![0.0; n];
    for e in &out.entries {
        for (r, v) in recon.iter_mut().zip(e.atom.values()) {
            *r += e.lambda * v;
        }
        out.coefficient_mass_p += e.lambda.powf(params.p);
        out.height_constant = out.height_constant.max(e.height_ratio);
        out.coefficient_constant = out.coefficient_constant.max(e.coefficient_ratio);
        if let Some(c) = e.containment {
            out.containment_constant = out.containment_constant.max(c);
        }
        out.max_moment_relative = e
            .validation
            .moment_relative
            .iter()
            .fold(out.max_moment_relative, |m, v| m.max(*v));
        out.support_violation += e.validation.support_mass_outside;
        out.all_atoms_pass &= e.validation.pass;
    }
    let diff: Vec<f64> = recon.iter().zip(fv).map(|(r, f)| r - f).collect();
    for s in [2.0, 4.0] {
        let err = discrete_norm(&diff, s, h) / discrete_norm(fv, s, h);
        out.reconstruction_error_s.insert(format!("{s}"), err);
    }
    let hn = hardy_norm(f, &params.weight, params.p, cfg)?;
    out.hardy_norm_p = hn.powf(params.p);
    out.mass_ratio = out.coefficient_mass_p / out.hardy_norm_p;
    if !out.all_atoms_pass {
        out.warnings.push("some pieces failed atom validation".into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atoms::make_random_atom;

    #[test]
    fn whitney_of_unit_interval() {
        let g = Grid::new(1, 2.0, 256).unwrap();
        let set = CellSet::from_intervals(&g, &[(0.0, 1.0)]).unwrap();
        let cover = whitney(&set).unwrap();
        assert!(cover.check_invariants());
        let big = cover.cubes.iter().map(|q| q.side).max().unwrap();
        assert_eq!(big as f64 * g.spacing(), 0.25);
        let biggest: Vec<_> = cover.cubes.iter().filter(|q| q.side == big).collect();
        assert_eq!(biggest.len(), 2);
        let mid = g.axis_cell(0.5).unwrap() as i64;
        // Reflection about x = 1/2 maps cell c to 2*mid - 1 - c.
        let mut left: Vec<(i64, usize)> = cover.cubes.iter().map(|q| (q.start as i64, q.side)).collect();
        let mut mirrored: Vec<(i64, usize)> = cover
            .cubes
            .iter()
            .map(|q| (2 * mid - (q.start + q.side) as i64, q.side))
            .collect();
        left.sort();
        mirrored.sort();
        assert_eq!(left, mirrored);
    }

    #[test]
    fn whitney_edge_cases() {
        let g = Grid::new(1, 1.0, 64).unwrap();
        let empty = CellSet::empty(64);
        assert!(whitney(&empty).unwrap().cubes.is_empty());
        let edge = CellSet::from_intervals(&g, &[(-2.0, 0.0)]).unwrap();
        assert!(matches!(whitney(&edge), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_function() {
        let g = Grid::new(1, 8.0, 256).unwrap();
        let f = GridFunction::zeros(g);
        let cfg = MaximalConfig::for_grid(&g);
        let ls = level_sets(&f, &cfg).unwrap();
        assert!(ls.sets.is_empty() && ls.j_range.is_none());
        let params = DecompositionParams {
            p: 2.0 / 3.0,
            p0: 4.0,
            d: 1,
            weight: WeightSpec::one(),
        };
        let dec = decompose(&f, &params, &cfg, None, Tolerances::uniform(1e-8)).unwrap();
        assert!(dec.entries.is_empty());
    }

    #[test]
    fn single_atom_round_trip() {
        let g = Grid::new(1, 8.0, 4096).unwrap();
        let w = WeightSpec::power(-0.5, vec![]);
        let ball = Ball::interval(0.3, 1.0).unwrap();
        let ap = AtomParams::new(2.0 / 3.0, 4.0, 1, ball, w.clone()).unwrap();
        let f = make_random_atom(&g, &ap, 7).unwrap();
        let cfg = MaximalConfig::for_grid(&g);
        let ls = level_sets(&f, &cfg).unwrap();
        assert!(ls.is_nested());
        let params = DecompositionParams {
            p: 2.0 / 3.0,
            p0: 4.0,
            d: 1,
            weight: w,
        };
        let dec = decompose(&f, &params, &cfg, None, Tolerances::uniform(1e-8)).unwrap();
        assert!(dec.reconstruction_error_s["2"] <= 1e-6);
        assert!(dec.reconstruction_error_s["4"] <= 1e-6);
        assert_eq!(dec.support_violation, 0.0);
        assert!(dec.all_atoms_pass);
    }
}
