//! Uniform dyadic grids over the box `[-R, R]^n`, dyadic cubes, balls and
//! sampled grid functions.
//!
//! Samples live at cell centers `x_i = -R + (i + 1/2) h`; every integral is
//! a midpoint sum except weight masses, which come from [`WeightSpec`]
//! (exact antiderivatives for power weights).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::weights::WeightSpec;

/// Highest total moment order accepted by [`moment`].
pub const MAX_MOMENT_ORDER: u32 = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dim: usize,
    half_extent: f64,
    cells_per_axis: usize,
}

impl Grid {
    pub fn new(dim: usize, half_extent: f64, cells_per_axis: usize) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(invalid(format!("dimension must be 1 or 2, got {dim}")));
        }
        if !(half_extent.is_finite() && half_extent > 0.0) {
            return Err(invalid(format!(
                "half extent must be positive, got {half_extent}"
            )));
        }
        if cells_per_axis < 2 || !cells_per_axis.is_power_of_two() {
            return Err(invalid(format!(
                "cells per axis must be a power of two >= 2, got {cells_per_axis}"
            )));
        }
        if cells_per_axis > (1 << 24) {
            return Err(invalid("cells per axis above 2^24"));
        }
        Ok(Self {
            dim,
            half_extent,
            cells_per_axis,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    pub fn cells_per_axis(&self) -> usize {
        self.cells_per_axis
    }

    /// `h = 2R / N`; exact because `N` is a power of two.
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_extent / self.cells_per_axis as f64
    }

    /// `log2 N`, the depth of the finest dyadic level.
    pub fn levels(&self) -> u32 {
        self.cells_per_axis.trailing_zeros()
    }

    pub fn len(&self) -> usize {
        self.cells_per_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn box_volume(&self) -> f64 {
        (2.0 * self.half_extent).powi(self.dim as i32)
    }

    /// Coordinate of the center of cell `i` along one axis.
    pub fn axis_center(&self, i: usize) -> f64 {
        -self.half_extent + (i as f64 + 0.5) * self.spacing()
    }

    /// Left edge of cell `i` along one axis (`i == N` gives the right box edge).
    pub fn axis_edge(&self, i: usize) -> f64 {
        -self.half_extent + i as f64 * self.spacing()
    }

    /// Cell center of the flat (row-major) index; the second coordinate is 0 in 1-D.
    pub fn center(&self, flat: usize) -> [f64; 2] {
        match self.dim {
            1 => [self.axis_center(flat), 0.0],
            _ => {
                let n = self.cells_per_axis;
                [self.axis_center(flat / n), self.axis_center(flat % n)]
            }
        }
    }

    pub fn flat(&self, row: usize, col: usize) -> usize {
        row * self.cells_per_axis + col
    }

    /// Index of the cell containing `x` along one axis, if inside the box.
    pub fn axis_cell(&self, x: f64) -> Option<usize> {
        let t = (x + self.half_extent) / self.spacing();
        if t < 0.0 || t >= self.cells_per_axis as f64 || !t.is_finite() {
            None
        } else {
            Some(t.floor() as usize)
        }
    }

    pub fn refined(&self) -> Result<Self> {
        Self::new(self.dim, self.half_extent, self.cells_per_axis * 2)
    }

    pub fn coarsened(&self) -> Result<Self> {
        Self::new(self.dim, self.half_extent, self.cells_per_axis / 2)
    }

    /// Whether the ball lies in the closed box.
    pub fn contains_ball(&self, ball: &Ball) -> bool {
        let tol = 1e-12 * self.half_extent;
        ball.center
            .iter()
            .all(|&c| c - ball.radius >= -self.half_extent - tol && c + ball.radius <= self.half_extent + tol)
    }

    pub fn origin(&self) -> Vec<f64> {
        vec![0.0; self.dim]
    }
}

/// `B(center, radius)`; Euclidean in every dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(invalid(format!("ball radius must be positive, got {radius}")));
        }
        if center.is_empty() || center.len() > 2 || center.iter().any(|c| !c.is_finite()) {
            return Err(invalid("ball center must be a finite point in R^1 or R^2"));
        }
        Ok(Self { center, radius })
    }

    pub fn interval(center: f64, radius: f64) -> Result<Self> {
        Self::new(vec![center], radius)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `cB = B(x0, c r)`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            center: self.center.clone(),
            radius: self.radius * c,
        }
    }

    pub fn distance_to_center(&self, x: &[f64]) -> f64 {
        self.center
            .iter()
            .zip(x)
            .map(|(c, x)| (x - c) * (x - c))
            .sum::<f64>()
            .sqrt()
    }

    /// Closed-ball membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        self.distance_to_center(x) <= self.radius
    }

    /// Whether the cell with the given center and side meets the closed ball
    /// (cells straddling the boundary count as inside).
    pub fn meets_cell(&self, center: &[f64], side: f64) -> bool {
        let half = 0.5 * side;
        let d2: f64 = self
            .center
            .iter()
            .zip(center)
            .map(|(c, x)| {
                let gap = ((x - c).abs() - half).max(0.0);
                gap * gap
            })
            .sum();
        d2.sqrt() < self.radius
    }

    /// `[c - r, c + r]` for 1-D balls.
    pub fn bounds_1d(&self) -> (f64, f64) {
        (self.center[0] - self.radius, self.center[0] + self.radius)
    }
}

/// `|B|`: `2r` on the line, `pi r^2` in the plane.
pub fn ball_lebesgue_measure(ball: &Ball, n: usize) -> Result<f64> {
    if !(ball.radius > 0.0 && ball.radius.is_finite()) {
        return Err(invalid(format!(
            "ball radius must be positive, got {}",
            ball.radius
        )));
    }
    match n {
        1 => Ok(2.0 * ball.radius),
        2 => Ok(std::f64::consts::PI * ball.radius * ball.radius),
        _ => Err(invalid(format!("dimension must be 1 or 2, got {n}"))),
    }
}

/// A dyadic cube of the grid's tree: level `j` splits each axis of the box
/// into `2^j` pieces and `index` selects one of them.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicCube {
    pub level: u32,
    pub index: Vec<i64>,
}

impl DyadicCube {
    pub fn new(level: u32, index: Vec<i64>) -> Self {
        Self { level, index }
    }

    pub fn side(&self, grid: &Grid) -> f64 {
        2.0 * grid.half_extent() * (0.5f64).powi(self.level as i32)
    }

    /// Ancestor at a coarser level.
    pub fn ancestor(&self, level: u32) -> Option<DyadicCube> {
        if level > self.level {
            return None;
        }
        let shift = self.level - level;
        Some(DyadicCube {
            level,
            index: self.index.iter().map(|k| k >> shift).collect(),
        })
    }

    pub fn contains(&self, other: &DyadicCube) -> bool {
        other.index.len() == self.index.len() && other.ancestor(self.level).as_ref() == Some(self)
    }

    pub fn is_disjoint(&self, other: &DyadicCube) -> bool {
        !(self.contains(other) || other.contains(self))
    }

    /// Cell range `[start, end)` covered along one axis of a grid whose
    /// finest level is `grid_levels`.
    pub fn cell_range(&self, axis: usize, grid_levels: u32) -> (i64, i64) {
        let cells = 1i64 << (grid_levels - self.level.min(grid_levels));
        let k = self.index[axis];
        (k * cells, (k + 1) * cells)
    }
}

/// Cell-center samples of a real function on a [`Grid`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    grid: Grid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(invalid(format!(
                "expected {} samples, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("sample {i} is not finite")));
        }
        Ok(Self { grid, values })
    }

    pub(crate) fn from_vec_unchecked(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            values: vec![0.0; grid.len()],
            grid,
        }
    }

    /// Samples `f` at every cell center; `f` receives an `n`-length slice.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let n = grid.dim();
        let values = (0..grid.len())
            .map(|i| {
                let c = grid.center(i);
                f(&c[..n])
            })
            .collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.map(|v| c * v)
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &GridFunction, b: f64) -> Result<Self> {
        self.check_same_grid(other)?;
        Ok(Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn add_scaled(&mut self, other: &GridFunction, c: f64) -> Result<()> {
        self.check_same_grid(other)?;
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += c * y;
        }
        Ok(())
    }

    pub fn check_same_grid(&self, other: &GridFunction) -> Result<()> {
        if self.grid != other.grid {
            return Err(invalid("grid functions live on different grids"));
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Unweighted `L^p` norm (midpoint rule); `p = inf` gives the sup norm.
    pub fn lp_norm(&self, p: f64) -> f64 {
        if p.is_infinite() {
            return self.max_abs();
        }
        let s: f64 = self.values.iter().map(|v| v.abs().powf(p)).sum();
        (s * self.grid.cell_volume()).powf(1.0 / p)
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Cells carrying a nonzero sample.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
    }

    /// Translate by whole cells along the first axis (1-D) with zero fill.
    pub fn shifted_cells(&self, shift: isize) -> Self {
        let n = self.grid.cells_per_axis() as isize;
        let mut out = vec![0.0; self.values.len()];
        match self.grid.dim() {
            1 => {
                for i in 0..n {
                    let j = i - shift;
                    if (0..n).contains(&j) {
                        out[i as usize] = self.values[j as usize];
                    }
                }
            }
            _ => {
                for r in 0..n {
                    let src = r - shift;
                    if (0..n).contains(&src) {
                        let (d, s) = ((r * n) as usize, (src * n) as usize);
                        out[d..d + n as usize].copy_from_slice(&self.values[s..s + n as usize]);
                    }
                }
            }
        }
        Self {
            grid: self.grid,
            values: out,
        }
    }
}

/// All multi-indices of length `dim` with total order `<= max_order`,
/// graded by order.
pub fn multi_indices(dim: usize, max_order: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for order in 0..=max_order {
        match dim {
            1 => out.push(vec![order]),
            _ => {
                for a in (0..=order).rev() {
                    out.push(vec![a, order - a]);
                }
            }
        }
    }
    out
}

pub(crate) fn monomial(x: &[f64], alpha: &[u32]) -> f64 {
    x.iter().zip(alpha).map(|(x, &a)| x.powi(a as i32)).product()
}

/// Midpoint-rule value of `int x^alpha f(x) dx`.
pub fn moment(f: &GridFunction, alpha: &[u32]) -> Result<f64> {
    let grid = f.grid();
    if alpha.len() != grid.dim() {
        return Err(invalid(format!(
            "multi-index has length {}, grid dimension is {}",
            alpha.len(),
            grid.dim()
        )));
    }
    let order: u32 = alpha.iter().sum();
    if order > MAX_MOMENT_ORDER {
        return Err(invalid(format!(
            "moment order {order} exceeds {MAX_MOMENT_ORDER}"
        )));
    }
    let n = grid.dim();
    let s: f64 = f
        .values()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(i, v)| {
            let c = grid.center(i);
            v * monomial(&c[..n], alpha)
        })
        .sum();
    Ok(s * grid.cell_volume())
}

/// `(sum |f|^p w(cell))^{1/p}`, optionally restricted to cells whose centers
/// lie in `region`.
pub fn weighted_lp_norm(f: &GridFunction, p: f64, w: &WeightSpec, region: Option<&Ball>) -> Result<f64> {
    if !(p > 0.0) || p.is_nan() {
        return Err(invalid(format!("exponent p must be positive, got {p}")));
    }
    let grid = f.grid();
    let masses = w.cell_masses(grid)?;
    weighted_lp_norm_with_masses(f, p, &masses, region)
}

/// As [`weighted_lp_norm`] with precomputed cell masses.
pub fn weighted_lp_norm_with_masses(
    f: &GridFunction,
    p: f64,
    masses: &[f64],
    region: Option<&Ball>,
) -> Result<f64> {
    let grid = f.grid();
    let n = grid.dim();
    if let Some(b) = region {
        if b.dim() != n {
            return Err(invalid("region dimension does not match grid"));
        }
    }
    let mut acc = 0.0;
    for (i, (&v, &m)) in f.values().iter().zip(masses).enumerate() {
        if v == 0.0 {
            continue;
        }
        if let Some(b) = region {
            let c = grid.center(i);
            if !b.contains(&c[..n]) {
                continue;
            }
        }
        if !m.is_finite() {
            return Err(Error::Diverged(format!("weight mass of cell {i} is not finite")));
        }
        acc += v.abs().powf(p) * m;
    }
    Ok(acc.powf(1.0 / p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, r: f64) -> Grid {
        Grid::new(1, r, n).unwrap()
    }

    #[test]
    fn ball_measures() {
        let b = Ball::interval(0.0, 1.0).unwrap();
        assert_eq!(ball_lebesgue_measure(&b, 1).unwrap(), 2.0);
        assert_eq!(ball_lebesgue_measure(&b.scaled(2.0), 1).unwrap(), 4.0);
        let d = Ball::new(vec![0.0, 0.0], 1.0).unwrap();
        assert!((ball_lebesgue_measure(&d, 2).unwrap() - std::f64::consts::PI).abs() < 1e-12);
        assert!(Ball::interval(0.0, 0.0).is_err());
        assert!(Ball::interval(0.0, -1.0).is_err());
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(Grid::new(3, 1.0, 8).is_err());
        assert!(Grid::new(1, 1.0, 12).is_err());
        assert!(Grid::new(1, 0.0, 8).is_err());
        let g = line(8, 1.0);
        assert_eq!(g.spacing() * 8.0, 2.0);
        assert_eq!(g.axis_center(0), -1.0 + 0.125);
    }

    #[test]
    fn unweighted_norm_of_constant() {
        let g = line(64, 1.0);
        let f = GridFunction::from_fn(g, |_| 1.0).unwrap();
        let n = weighted_lp_norm(&f, 2.0, &WeightSpec::one(), None).unwrap();
        assert!((n - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn power_weighted_norm_uses_exact_masses() {
        let g = line(64, 1.0);
        let f = GridFunction::from_fn(g, |_| 1.0).unwrap();
        let w = WeightSpec::power(1.0, vec![0.0]);
        let n = weighted_lp_norm(&f, 1.0, &w, None).unwrap();
        assert!((n - 1.0).abs() < 1e-10);
    }

    #[test]
    fn region_restriction_counts_cells() {
        let g = line(256, 1.0);
        let f = GridFunction::from_fn(g, |x| if (0.0..=1.0).contains(&x[0]) { 1.0 } else { 0.0 }).unwrap();
        let b = Ball::interval(0.0, 0.5).unwrap();
        let n = weighted_lp_norm(&f, 1.0, &WeightSpec::one(), Some(&b)).unwrap();
        assert!((n - 0.5).abs() <= g.spacing());
        assert!(weighted_lp_norm(&f, 0.0, &WeightSpec::one(), None).is_err());
    }

    #[test]
    fn moments() {
        let g = line(512, 1.0);
        let odd = GridFunction::from_fn(g, |x| x[0]).unwrap();
        assert!(moment(&odd, &[0]).unwrap().abs() < 1e-12);
        let one = GridFunction::from_fn(g, |_| 1.0).unwrap();
        let h = g.spacing();
        assert!((moment(&one, &[2]).unwrap() - 2.0 / 3.0).abs() <= 2.0 * h * h);
        let zero = GridFunction::zeros(g);
        for k in 0..=MAX_MOMENT_ORDER {
            assert_eq!(moment(&zero, &[k]).unwrap(), 0.0);
        }
        assert!(moment(&one, &[13]).is_err());
        assert!(moment(&one, &[1, 1]).is_err());
    }

    #[test]
    fn dyadic_cubes_nest_or_are_disjoint() {
        let a = DyadicCube::new(2, vec![1]);
        let b = DyadicCube::new(4, vec![5]);
        let c = DyadicCube::new(4, vec![9]);
        assert!(a.contains(&b));
        assert!(!a.contains(&c));
        assert!(a.is_disjoint(&c));
        assert_eq!(a.cell_range(0, 6), (16, 32));
    }

    #[test]
    fn multi_index_enumeration() {
        assert_eq!(multi_indices(1, 2), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(multi_indices(2, 1).len(), 3);
        assert_eq!(multi_indices(2, 3).len(), 10);
    }

    #[test]
    fn shifting_moves_samples() {
        let g = line(8, 1.0);
        let f = GridFunction::new(g, vec![0., 1., 2., 0., 0., 0., 0., 0.]).unwrap();
        let s = f.shifted_cells(2);
        assert_eq!(s.values(), &[0., 0., 0., 1., 2., 0., 0., 0.]);
    }
}
