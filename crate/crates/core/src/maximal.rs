//! Hardy–Littlewood, fractional and smooth maximal functions, and the
//! discrete `H^p_w` quasi-norm `||M_phi f||_{L^p_w}`.
//!
//! In 1-D the Hardy–Littlewood and fractional suprema run over every
//! interval made of whole grid cells (`O(N^2)` by a suffix-maximum sweep).
//! In 2-D they run over circumscribed balls of dyadic squares and their
//! third-shifted copies, with the discrete cell-count measure and zero
//! extension outside the box.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::fft::PaddedSpectrum;
use crate::grid::{weighted_lp_norm, Ball, Grid, GridFunction};
use crate::weights::WeightSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bump {
    /// `exp(-1 / (1 - |x|^2))` on the unit ball.
    #[default]
    Standard,
    /// `exp(-4 / (1 - |x|^2))`, a more concentrated alternative profile.
    Narrow,
}

impl Bump {
    fn profile(self, r2: f64) -> f64 {
        if r2 >= 1.0 {
            return 0.0;
        }
        let s = match self {
            Bump::Standard => 1.0,
            Bump::Narrow => 4.0,
        };
        (-s / (1.0 - r2)).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaximalConfig {
    /// Number of dyadic levels, counted up from the finest, in the planar
    /// ball family. Unused on the line, where all cell intervals are used.
    pub family_depth: u32,
    /// Dyadic scales `t = 2^k`, `k_min <= k <= k_max`, for `M_phi`.
    pub scale_range: (i32, i32),
    #[serde(default)]
    pub bump: Bump,
}

impl MaximalConfig {
    /// Scales from the grid spacing up to the box size, full planar family.
    pub fn for_grid(grid: &Grid) -> Self {
        Self {
            family_depth: grid.levels(),
            scale_range: (
                grid.spacing().log2().ceil() as i32,
                (2.0 * grid.half_extent()).log2().floor() as i32,
            ),
            bump: Bump::Standard,
        }
    }

    pub fn with_bump(mut self, bump: Bump) -> Self {
        self.bump = bump;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_range.0 >= self.scale_range.1 {
            return Err(invalid(format!(
                "scale range needs k_min < k_max, got {:?}",
                self.scale_range
            )));
        }
        Ok(())
    }

    /// Scales actually used on `grid` and warnings for the clipped ones.
    pub fn scales(&self, grid: &Grid) -> Result<(Vec<f64>, Vec<String>)> {
        self.validate()?;
        let (lo, hi) = (grid.spacing(), 2.0 * grid.half_extent());
        let mut warnings = Vec::new();
        let mut out = Vec::new();
        for k in self.scale_range.0..=self.scale_range.1 {
            let t = 2f64.powi(k);
            if t < lo * (1.0 - 1e-12) {
                warnings.push(format!("scale 2^{k} below the grid spacing was clipped"));
            } else if t > hi * (1.0 + 1e-12) {
                warnings.push(format!("scale 2^{k} above the box size was clipped"));
            } else {
                out.push(t);
            }
        }
        if out.is_empty() {
            return Err(invalid(
                "no dyadic scale lies between the grid spacing and the box size",
            ));
        }
        Ok((out, warnings))
    }
}

/// `sup |B|^{beta} int_B |f|` over the family, at each cell: `beta = -1`
/// gives the Hardy–Littlewood function, `beta = alpha/n - 1` the fractional one.
fn family_maximal(f: &GridFunction, beta: f64, cfg: &MaximalConfig) -> GridFunction {
    let grid = *f.grid();
    let abs: Vec<f64> = f.values().iter().map(|v| v.abs()).collect();
    let out = match grid.dim() {
        1 => interval_maximal(&abs, grid.spacing(), beta),
        _ => disk_maximal(&abs, &grid, beta, cfg.family_depth),
    };
    GridFunction::from_vec_unchecked(grid, out)
}

fn interval_maximal(abs: &[f64], h: f64, beta: f64) -> Vec<f64> {
    let n = abs.len();
    let chunk = 64.max(n / (4 * rayon::current_num_threads().max(1)));
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let partial: Vec<Vec<f64>> = starts
        .par_iter()
        .map(|&s| {
            let mut best = vec![0.0f64; n];
            let mut avg = vec![0.0f64; n];
            for i in s..(s + chunk).min(n) {
                let mut sum = 0.0;
                for j in i..n {
                    sum += abs[j];
                    let len = (j + 1 - i) as f64 * h;
                    avg[j] = sum * h * len.powf(beta);
                }
                // Suffix maxima: the best interval [i, j] with j >= k.
                let mut run = 0.0f64;
                for k in (i..n).rev() {
                    run = run.max(avg[k]);
                    best[k] = best[k].max(run);
                }
            }
            best
        })
        .collect();
    let mut out = vec![0.0f64; n];
    for b in partial {
        for (o, v) in out.iter_mut().zip(b) {
            *o = o.max(v);
        }
    }
    out
}

/// Number of lattice points `(i, j) in Z^2` with `(i h - cx)^2 + (j h - cy)^2 <= r^2`,
/// with the lattice phase given by the cell centers (the discrete measure of
/// a ball under zero extension).
fn lattice_count(grid: &Grid, b: &Ball) -> usize {
    let h = grid.spacing();
    let r0 = grid.half_extent();
    let to_idx = |x: f64| (x + r0) / h - 0.5;
    let (cx, cy, rad) = (b.center[0], b.center[1], b.radius);
    let mut count = 0usize;
    let lo = to_idx(cx - rad).ceil() as i64;
    let hi = to_idx(cx + rad).floor() as i64;
    for row in lo..=hi {
        let x = -r0 + (row as f64 + 0.5) * h;
        let rem = rad * rad - (x - cx) * (x - cx);
        if rem < 0.0 {
            continue;
        }
        let half = rem.sqrt();
        let (c0, c1) = (to_idx(cy - half).ceil() as i64, to_idx(cy + half).floor() as i64);
        for col in c0..=c1 {
            let y = -r0 + (col as f64 + 0.5) * h;
            let (dx, dy) = (x - cx, y - cy);
            if dx * dx + dy * dy <= rad * rad {
                count += 1;
            }
        }
    }
    count
}

fn disk_maximal(abs: &[f64], grid: &Grid, beta: f64, family_depth: u32) -> Vec<f64> {
    let levels = grid.levels();
    let coarsest = levels.saturating_sub(family_depth);
    let r = grid.half_extent();
    let mut balls = Vec::new();
    for level in coarsest..=levels {
        let k = 1usize << level;
        let s = 2.0 * r / k as f64;
        for (sx, sy) in [
            (0.0, 0.0),
            (1.0 / 3.0, 0.0),
            (0.0, 1.0 / 3.0),
            (1.0 / 3.0, 1.0 / 3.0),
        ] {
            for a in 0..k {
                for b in 0..k {
                    balls.push(Ball {
                        center: vec![-r + (a as f64 + 0.5 + sx) * s, -r + (b as f64 + 0.5 + sy) * s],
                        radius: s * std::f64::consts::FRAC_1_SQRT_2,
                    });
                }
            }
        }
    }
    let area = grid.cell_volume();
    let chunk = 256;
    let partial: Vec<Vec<f64>> = balls
        .par_chunks(chunk)
        .map(|bs| {
            let mut best = vec![0.0f64; abs.len()];
            let mut members = Vec::new();
            for b in bs {
                members.clear();
                let mut sum = 0.0;
                crate::weights::for_cells_in_disk(grid, b, |i| {
                    members.push(i);
                    sum += abs[i];
                });
                if members.is_empty() {
                    continue;
                }
                let measure = lattice_count(grid, b) as f64 * area;
                let v = sum * area * measure.powf(beta);
                for &i in &members {
                    best[i] = best[i].max(v);
                }
            }
            best
        })
        .collect();
    let mut out = vec![0.0f64; abs.len()];
    for b in partial {
        for (o, v) in out.iter_mut().zip(b) {
            *o = o.max(v);
        }
    }
    out
}

/// Uncentered Hardy–Littlewood maximal function over the grid family.
pub fn hl_maximal(f: &GridFunction, cfg: &MaximalConfig) -> GridFunction {
    family_maximal(f, -1.0, cfg)
}

/// `M_alpha f = sup_{B contains x} |B|^{alpha/n - 1} int_B |f|`.
pub fn fractional_maximal(f: &GridFunction, alpha: f64, cfg: &MaximalConfig) -> Result<GridFunction> {
    let n = f.grid().dim() as f64;
    if !(alpha > 0.0 && alpha < n) {
        return Err(invalid(format!("alpha must lie in (0, {n}), got {alpha}")));
    }
    Ok(family_maximal(f, alpha / n - 1.0, cfg))
}

/// Taps of `phi_t` on the grid, normalized so that `sum phi_t h^n = 1`.
fn bump_taps(grid: &Grid, t: f64, bump: Bump) -> Vec<([isize; 2], f64)> {
    let h = grid.spacing();
    let m = (t / h).floor() as isize;
    let mut taps = Vec::new();
    let dims = grid.dim();
    for dx in -m..=m {
        let ys = if dims == 1 { 0..=0 } else { -m..=m };
        for dy in ys {
            let r2 = ((dx * dx + dy * dy) as f64) * h * h / (t * t);
            let v = bump.profile(r2);
            if v > 0.0 {
                taps.push(([dx, dy], v));
            }
        }
    }
    let total: f64 = taps.iter().map(|(_, v)| v).sum();
    for tap in &mut taps {
        tap.1 /= total;
    }
    taps
}

/// `M_phi f(x) = max_k |(phi_{2^k} * f)(x)|` over the configured dyadic
/// scales, by zero-padded FFT convolution.
pub fn smooth_maximal(f: &GridFunction, cfg: &MaximalConfig) -> Result<GridFunction> {
    Ok(smooth_maximal_with_warnings(f, cfg)?.0)
}

/// As [`smooth_maximal`], also returning the scale-clipping warnings.
pub fn smooth_maximal_with_warnings(
    f: &GridFunction,
    cfg: &MaximalConfig,
) -> Result<(GridFunction, Vec<String>)> {
    let grid = *f.grid();
    let (scales, warnings) = cfg.scales(&grid)?;
    if f.values().iter().all(|v| *v == 0.0) {
        return Ok((GridFunction::zeros(grid), warnings));
    }
    let spec = PaddedSpectrum::new(f, 2 * grid.cells_per_axis());
    let per_scale: Vec<Vec<f64>> = scales
        .par_iter()
        .map(|&t| spec.convolve(&bump_taps(&grid, t, cfg.bump)))
        .collect();
    let mut out = vec![0.0f64; grid.len()];
    for conv in per_scale {
        for (o, v) in out.iter_mut().zip(conv) {
            *o = o.max(v.abs());
        }
    }
    Ok((GridFunction::from_vec_unchecked(grid, out), warnings))
}

/// Discrete `H^p_w` quasi-norm: `||M_phi f||_{L^p_w}`.
pub fn hardy_norm(f: &GridFunction, w: &WeightSpec, p: f64, cfg: &MaximalConfig) -> Result<f64> {
    if !(p > 0.0) {
        return Err(invalid(format!("exponent p must be positive, got {p}")));
    }
    weighted_lp_norm(&smooth_maximal(f, cfg)?, p, w, None)
}

/// As [`hardy_norm`] with precomputed cell masses of `w`.
pub fn hardy_norm_with_masses(f: &GridFunction, masses: &[f64], p: f64, cfg: &MaximalConfig) -> Result<f64> {
    if !(p > 0.0) {
        return Err(invalid(format!("exponent p must be positive, got {p}")));
    }
    crate::grid::weighted_lp_norm_with_masses(&smooth_maximal(f, cfg)?, p, masses, None)
}
