//! Singular integrals of convolution type and the Riesz potential on grid
//! functions, plus certification of operator images as molecules.
//!
//! Conventions: `H f = (1/pi) p.v. int f(x - y) / y dy` with multiplier
//! `-i sgn(xi)`; `R_j f = (1/2pi) p.v. int y_j / |y|^3 f(x - y) dy` with
//! multiplier `-i xi_j / |xi|`; `I_alpha f = int |x - y|^{alpha - n} f(y) dy`
//! without normalizing constant. Grid functions are read as piecewise
//! constant on cells and zero outside the box.

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::Serialize;

use crate::atoms::{validate_molecule, AtomParams, Tolerances, ValidationReport};
use crate::error::{invalid, parse_err, Result};
use crate::fft::{transform, PaddedSpectrum};
use crate::grid::{multi_indices, Grid, GridFunction};
use crate::quad::{gauss_legendre, gl_integrate, gl_integrate_2d};

/// Mean of the angular part allowed by the cancellation hypothesis.
pub const OMEGA_MEAN_TOL: f64 = 1e-12;
/// Oversampling of the padded lattice for planar multipliers.
pub const PLANAR_PAD_FACTOR: usize = 8;
pub const OMEGA_MAGIC: &str = "#hardylab-omega";

/// Samples of the angular part `Omega` of a kernel `Omega(y/|y|)/|y|^n`.
/// On the line `samples = [Omega(-1), Omega(+1)]`; in the plane the samples
/// sit at angles `2 pi m / M` and are interpolated trigonometrically.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Omega {
    pub dim: usize,
    pub samples: Vec<f64>,
}

impl Omega {
    pub fn new(dim: usize, samples: Vec<f64>) -> Result<Self> {
        match dim {
            1 if samples.len() != 2 => {
                return Err(invalid("a 1-D angular part has exactly two samples"));
            }
            2 if samples.len() < 3 => return Err(invalid("a planar angular part needs at least 3 samples")),
            1 | 2 => {}
            _ => return Err(invalid(format!("dimension must be 1 or 2, got {dim}"))),
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(invalid("angular samples must be finite"));
        }
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let scale = samples.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if mean.abs() > OMEGA_MEAN_TOL * scale {
            return Err(invalid(format!(
                "angular part must have mean zero on the sphere (mean {mean:.3e})"
            )));
        }
        Ok(Self { dim, samples })
    }

    /// Fourier coefficients `(k, a_k)`, `|k| <= (M-1)/2`, without `k = 0`.
    fn coefficients(&self) -> Vec<(i64, Complex64)> {
        let m = self.samples.len();
        let kmax = ((m - 1) / 2) as i64;
        (-kmax..=kmax)
            .filter(|k| *k != 0)
            .map(|k| {
                let a: Complex64 = self
                    .samples
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        let t = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
                        Complex64::from_polar(*v, -(k as f64) * t)
                    })
                    .sum();
                (k, a / m as f64)
            })
            .collect()
    }

    fn eval_angle(coeffs: &[(i64, Complex64)], theta: f64) -> f64 {
        coeffs
            .iter()
            .map(|(k, a)| (a * Complex64::from_polar(1.0, *k as f64 * theta)).re)
            .sum()
    }

    /// Multiplier of the kernel at polar frequency angle `phi`.
    fn multiplier(coeffs: &[(i64, Complex64)], phi: f64) -> Complex64 {
        use std::f64::consts::PI;
        coeffs
            .iter()
            .map(|(k, a)| {
                let ka = k.unsigned_abs() as f64;
                let g = if k % 2 != 0 {
                    Complex64::new(0.0, -2.0 * PI * (ka * PI / 2.0).sin() / ka)
                } else {
                    let sign = if (k.unsigned_abs() / 2) % 2 == 0 {
                        1.0
                    } else {
                        -1.0
                    };
                    Complex64::new(2.0 * PI * sign / ka, 0.0)
                };
                a * g * Complex64::from_polar(1.0, *k as f64 * phi)
            })
            .sum()
    }
}

/// `#hardylab-omega v1 n=<dim> M=<count>` followed by the samples.
pub fn parse_omega(text: &str) -> Result<Omega> {
    let mut lines = text.lines().enumerate().skip_while(|(_, l)| l.trim().is_empty());
    let (hl, header) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(OMEGA_MAGIC) || parts.next() != Some("v1") {
        return Err(parse_err(
            hl + 1,
            format!("header must start with {OMEGA_MAGIC} v1"),
        ));
    }
    let (mut dim, mut count) = (None, None);
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| parse_err(hl + 1, format!("expected key=value, got {p:?}")))?;
        let v: usize = v
            .parse()
            .map_err(|_| parse_err(hl + 1, format!("bad value for {k}: {v:?}")))?;
        match k {
            "n" => dim = Some(v),
            "M" => count = Some(v),
            _ => return Err(parse_err(hl + 1, format!("unknown header key {k:?}"))),
        }
    }
    let dim = dim.ok_or_else(|| parse_err(hl + 1, "missing n="))?;
    let count = count.ok_or_else(|| parse_err(hl + 1, "missing M="))?;
    if count > 1 << 16 {
        return Err(parse_err(hl + 1, "too many samples"));
    }
    let mut samples = Vec::with_capacity(count);
    for (lno, line) in lines {
        for tok in line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
        {
            if samples.len() == count {
                return Err(parse_err(lno + 1, format!("more than {count} values")));
            }
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(lno + 1, format!("not a number: {tok:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(lno + 1, format!("non-finite value {tok:?}")));
            }
            samples.push(v);
        }
    }
    if samples.len() != count {
        return Err(parse_err(
            text.lines().count().max(1),
            format!("expected {count} values, found {}", samples.len()),
        ));
    }
    Omega::new(dim, samples)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorSpec {
    Identity,
    Hilbert,
    /// `axis` is 1 or 2.
    Riesz {
        axis: usize,
    },
    RieszPotential {
        alpha: f64,
    },
    TruncatedKernel {
        omega: Omega,
        epsilon: f64,
    },
}

impl OperatorSpec {
    /// `hilbert`, `riesz:<j>`, `ialpha:<alpha>` or `identity`; kernels are
    /// built with [`OperatorSpec::kernel`].
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "hilbert" {
            return Ok(OperatorSpec::Hilbert);
        }
        if s == "identity" {
            return Ok(OperatorSpec::Identity);
        }
        if let Some(j) = s.strip_prefix("riesz:") {
            let axis: usize = j
                .parse()
                .map_err(|_| invalid(format!("riesz axis must be 1 or 2, got {j:?}")))?;
            if !(1..=2).contains(&axis) {
                return Err(invalid(format!("riesz axis must be 1 or 2, got {axis}")));
            }
            return Ok(OperatorSpec::Riesz { axis });
        }
        if let Some(a) = s.strip_prefix("ialpha:") {
            let alpha = crate::weights::parse_real(a)?;
            if !(alpha > 0.0) {
                return Err(invalid(format!("alpha must be positive, got {alpha}")));
            }
            return Ok(OperatorSpec::RieszPotential { alpha });
        }
        Err(invalid(format!(
            "unknown operator {s:?} (expected hilbert, riesz:<j>, ialpha:<alpha>, kernel:<file>)"
        )))
    }

    pub fn kernel(omega: Omega, epsilon: f64) -> Self {
        OperatorSpec::TruncatedKernel { omega, epsilon }
    }

    pub fn check_dim(&self, n: usize) -> Result<()> {
        match self {
            OperatorSpec::Hilbert if n != 1 => Err(invalid("the Hilbert transform is one-dimensional")),
            OperatorSpec::Riesz { .. } if n != 2 => Err(invalid("Riesz transforms are planar")),
            OperatorSpec::RieszPotential { alpha } if !(*alpha > 0.0 && *alpha < n as f64) => Err(invalid(
                format!("Riesz potential needs 0 < alpha < n = {n}, got {alpha}"),
            )),
            OperatorSpec::TruncatedKernel { omega, .. } if omega.dim != n => {
                Err(invalid("angular part dimension does not match the grid"))
            }
            _ => Ok(()),
        }
    }

    /// Decay exponent `beta` of `|T a(x)| ~ |x - x0|^{-beta}` for an atom
    /// with `d` vanishing moments.
    pub fn image_decay(&self, n: usize, d: u32) -> f64 {
        match self {
            OperatorSpec::RieszPotential { alpha } => n as f64 - alpha + d as f64 + 1.0,
            _ => (n + d as usize + 1) as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    /// Treat `f` as periodic on the box (no padding).
    Periodic,
    /// Linear convolution: exact band-limited taps on the line, an
    /// oversampled padded lattice in the plane.
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Multiplier {
        padding: Padding,
    },
    /// Truncated sum over `|y| > epsilon` (at least `h`), exact per cell on
    /// the line. With `correction` the first-order Taylor term of the
    /// excluded ball is added back, which turns the truncated integral into
    /// an approximation of the principal value.
    Quadrature {
        epsilon: Option<f64>,
        correction: bool,
    },
}

impl Method {
    pub fn multiplier() -> Self {
        Method::Multiplier {
            padding: Padding::Linear,
        }
    }

    pub fn quadrature() -> Self {
        Method::Quadrature {
            epsilon: None,
            correction: true,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "multiplier" => Ok(Self::multiplier()),
            "periodic" => Ok(Method::Multiplier {
                padding: Padding::Periodic,
            }),
            "quadrature" => Ok(Self::quadrature()),
            "truncated" => Ok(Method::Quadrature {
                epsilon: None,
                correction: false,
            }),
            _ => Err(invalid(format!(
                "unknown method {s:?} (expected multiplier, periodic, quadrature, truncated)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Applied {
    pub output: GridFunction,
    pub warnings: Vec<String>,
}

/// Applies a singular integral or the identity.
pub fn singular_integral(f: &GridFunction, spec: &OperatorSpec, method: Method) -> Result<Applied> {
    let grid = *f.grid();
    let n = grid.dim();
    spec.check_dim(n)?;
    let mut warnings = Vec::new();
    let out = match (spec, method) {
        (OperatorSpec::Identity, _) => f.values().to_vec(),
        (OperatorSpec::RieszPotential { .. }, _) => {
            return Err(invalid("use riesz_potential for I_alpha"));
        }
        (_, Method::Multiplier { padding }) => apply_multiplier(f, spec, padding),
        (_, Method::Quadrature { epsilon, correction }) => {
            let h = grid.spacing();
            let mut eps = epsilon.unwrap_or(match spec {
                OperatorSpec::TruncatedKernel { epsilon, .. } => *epsilon,
                _ => 2.0 * h,
            });
            if eps < h {
                warnings.push(format!("epsilon {eps} is below the spacing; clipped to h = {h}"));
                eps = h;
            }
            if !eps.is_finite() {
                return Err(invalid("epsilon must be finite"));
            }
            match n {
                1 => quadrature_1d(f, spec, eps, correction),
                _ => quadrature_2d(f, spec, eps, correction),
            }
        }
    };
    Ok(Applied {
        output: GridFunction::new(grid, out)?,
        warnings,
    })
}

/// Coefficient `c` of the 1-D kernel `c / y` (`1/pi` for Hilbert).
fn line_kernel_coefficient(spec: &OperatorSpec) -> f64 {
    match spec {
        OperatorSpec::TruncatedKernel { omega, .. } => omega.samples[1],
        _ => std::f64::consts::FRAC_1_PI,
    }
}

fn apply_multiplier(f: &GridFunction, spec: &OperatorSpec, padding: Padding) -> Vec<f64> {
    let grid = *f.grid();
    let (n, nn, h) = (grid.dim(), grid.cells_per_axis(), grid.spacing());
    let coeffs = match spec {
        OperatorSpec::TruncatedKernel { omega, .. } if n == 2 => omega.coefficients(),
        _ => Vec::new(),
    };
    let symbol = |xi: [f64; 2]| -> Complex64 {
        match (spec, n) {
            (_, 1) => {
                let c = line_kernel_coefficient(spec) * std::f64::consts::PI;
                Complex64::new(0.0, -c * xi[0].signum() * f64::from(xi[0] != 0.0))
            }
            (OperatorSpec::Riesz { axis }, _) => {
                let r = xi[0].hypot(xi[1]);
                if r == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, -xi[axis - 1] / r)
                }
            }
            _ => {
                if xi == [0.0, 0.0] {
                    Complex64::new(0.0, 0.0)
                } else {
                    Omega::multiplier(&coeffs, xi[1].atan2(xi[0]))
                }
            }
        }
    };
    match padding {
        Padding::Periodic => {
            let mut data: Vec<Complex64> = f.values().iter().map(|v| Complex64::new(*v, 0.0)).collect();
            transform(&mut data, nn, n, false);
            let freq = |k: usize| {
                let k = if k <= nn / 2 {
                    k as f64
                } else {
                    k as f64 - nn as f64
                };
                k / (nn as f64 * h)
            };
            match n {
                1 => {
                    for (k, v) in data.iter_mut().enumerate() {
                        // The Nyquist mode is its own mirror image; drop it.
                        let m = if 2 * k == nn {
                            Complex64::new(0.0, 0.0)
                        } else {
                            symbol([freq(k), 0.0])
                        };
                        *v *= m;
                    }
                }
                _ => {
                    for r in 0..nn {
                        for c in 0..nn {
                            let m = if 2 * r == nn || 2 * c == nn {
                                Complex64::new(0.0, 0.0)
                            } else {
                                symbol([freq(r), freq(c)])
                            };
                            data[r * nn + c] *= m;
                        }
                    }
                }
            }
            transform(&mut data, nn, n, true);
            let scale = 1.0 / data.len() as f64;
            data.iter().map(|z| z.re * scale).collect()
        }
        Padding::Linear if n == 1 => {
            // Band-limited kernel c (1 - cos(pi y/h)) / y sampled at y = m h.
            let c = line_kernel_coefficient(spec);
            let taps: Vec<([isize; 2], f64)> = (1..nn as isize)
                .step_by(2)
                .flat_map(|m| {
                    let v = 2.0 * c / m as f64;
                    [([m, 0], v), ([-m, 0], -v)]
                })
                .collect();
            PaddedSpectrum::new(f, 2 * nn).convolve(&taps)
        }
        Padding::Linear => PaddedSpectrum::new(f, PLANAR_PAD_FACTOR * nn).multiply(h, symbol),
    }
}

/// `ln|t1| - ln|t0|` over the parts of `[t0, t1]` with `|t| > eps`.
fn log_weight(t0: f64, t1: f64, eps: f64) -> f64 {
    let mut w = 0.0;
    let hi = t1.min(-eps);
    if t0 < hi {
        w += hi.abs().ln() - t0.abs().ln();
    }
    let lo = t0.max(eps);
    if lo < t1 {
        w += t1.abs().ln() - lo.abs().ln();
    }
    w
}

/// Centered differences along one axis (one-sided at the edges).
fn gradient(f: &GridFunction, axis: usize) -> Vec<f64> {
    let grid = f.grid();
    let (nn, h) = (grid.cells_per_axis(), grid.spacing());
    let v = f.values();
    let (stride, pos): (usize, Box<dyn Fn(usize) -> usize>) = match (grid.dim(), axis) {
        (1, _) => (1, Box::new(|i| i)),
        (_, 0) => (nn, Box::new(move |i| i / nn)),
        _ => (1, Box::new(move |i| i % nn)),
    };
    (0..v.len())
        .map(|i| {
            let p = pos(i);
            if p == 0 {
                (v[i + stride] - v[i]) / h
            } else if p == nn - 1 {
                (v[i] - v[i - stride]) / h
            } else {
                (v[i + stride] - v[i - stride]) / (2.0 * h)
            }
        })
        .collect()
}

fn quadrature_1d(f: &GridFunction, spec: &OperatorSpec, eps: f64, correction: bool) -> Vec<f64> {
    let grid = f.grid();
    let (nn, h) = (grid.cells_per_axis(), grid.spacing());
    let c = line_kernel_coefficient(spec);
    // Cell at offset m = i - j covers t = x_i - y in [(m - 1/2) h, (m + 1/2) h].
    let weights: Vec<f64> = (0..2 * nn - 1)
        .map(|k| {
            let m = k as f64 - (nn - 1) as f64;
            c * log_weight((m - 0.5) * h, (m + 0.5) * h, eps)
        })
        .collect();
    let v = f.values();
    let df = if correction { gradient(f, 0) } else { vec![0.0; nn] };
    (0..nn)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for (j, fj) in v.iter().enumerate() {
                acc += fj * weights[i + nn - 1 - j];
            }
            acc - 2.0 * eps * c * df[i]
        })
        .collect()
}

/// `T_eps f(x)` at an arbitrary point for 1-D kernels, exact per cell.
pub fn truncated_at(f: &GridFunction, spec: &OperatorSpec, x: f64, eps: f64) -> Result<f64> {
    let grid = f.grid();
    spec.check_dim(grid.dim())?;
    if grid.dim() != 1 {
        return Err(invalid("point evaluation is one-dimensional"));
    }
    let c = line_kernel_coefficient(spec);
    let mut acc = 0.0;
    for (j, fj) in f.values().iter().enumerate() {
        if *fj != 0.0 {
            let (a, b) = (grid.axis_edge(j), grid.axis_edge(j + 1));
            acc += fj * c * log_weight(x - b, x - a, eps);
        }
    }
    Ok(acc)
}

/// Planar kernel `k(y)` for Riesz transforms and angular kernels.
fn planar_kernel(spec: &OperatorSpec) -> Box<dyn Fn(f64, f64) -> f64 + Sync> {
    match spec {
        OperatorSpec::Riesz { axis } => {
            let axis = *axis;
            Box::new(move |y0, y1| {
                let r = y0.hypot(y1);
                let yj = if axis == 1 { y0 } else { y1 };
                yj / (2.0 * std::f64::consts::PI * r * r * r)
            })
        }
        OperatorSpec::TruncatedKernel { omega, .. } => {
            let coeffs = omega.coefficients();
            Box::new(move |y0, y1| {
                let r2 = y0 * y0 + y1 * y1;
                Omega::eval_angle(&coeffs, y1.atan2(y0)) / r2
            })
        }
        _ => unreachable!("planar kernels are Riesz or angular"),
    }
}

fn quadrature_2d(f: &GridFunction, spec: &OperatorSpec, eps: f64, correction: bool) -> Vec<f64> {
    let grid = f.grid();
    let (nn, h) = (grid.cells_per_axis() as isize, grid.spacing());
    let k = planar_kernel(spec);
    let mut taps = Vec::new();
    let mut excluded = Vec::new();
    for dr in -(nn - 1)..nn {
        for dc in -(nn - 1)..nn {
            let (y0, y1) = (dr as f64 * h, dc as f64 * h);
            if y0.hypot(y1) > eps {
                taps.push(([dr, dc], k(y0, y1) * h * h));
            } else {
                excluded.push((y0, y1));
            }
        }
    }
    let mut out = PaddedSpectrum::new(f, 2 * nn as usize).convolve(&taps);
    if correction {
        // p.v. int_D k(y) f(x - y) dy ~ -grad f(x) . int_D k(y) y dy over the
        // excluded cells D.
        let mut moment = [0.0f64; 2];
        let half = 0.5 * h;
        for (y0, y1) in excluded {
            for (l, m) in moment.iter_mut().enumerate() {
                *m += if y0 == 0.0 && y1 == 0.0 {
                    // Polar form over the centre square: int k(u) u_l R(theta) d theta.
                    let (nodes, wts) = gauss_legendre(32);
                    let mut s = 0.0;
                    for q in 0..8 {
                        let (a, b) = (
                            q as f64 * std::f64::consts::FRAC_PI_4,
                            (q + 1) as f64 * std::f64::consts::FRAC_PI_4,
                        );
                        let (mid, rad) = (0.5 * (a + b), 0.5 * (b - a));
                        for (x, w) in nodes.iter().zip(&wts) {
                            let t = mid + rad * x;
                            let (ct, st) = (t.cos(), t.sin());
                            let reach = half / ct.abs().max(st.abs());
                            let u = if l == 0 { ct } else { st };
                            s += w * rad * k(ct, st) * u * reach;
                        }
                    }
                    s
                } else {
                    gl_integrate_2d(
                        |a, b| k(a, b) * if l == 0 { a } else { b },
                        (y0 - half, y0 + half),
                        (y1 - half, y1 + half),
                    )
                };
            }
        }
        let g0 = gradient(f, 0);
        let g1 = gradient(f, 1);
        for (i, o) in out.iter_mut().enumerate() {
            *o -= moment[0] * g0[i] + moment[1] * g1[i];
        }
    }
    out
}

/// `I_alpha f` on the cell centers: exact cellwise integration of the
/// kernel on the line, midpoint rule with an exact self-cell term in the
/// plane.
pub fn riesz_potential(f: &GridFunction, alpha: f64) -> Result<GridFunction> {
    let grid = *f.grid();
    let n = grid.dim();
    OperatorSpec::RieszPotential { alpha }.check_dim(n)?;
    let (nn, h) = (grid.cells_per_axis() as isize, grid.spacing());
    let taps: Vec<([isize; 2], f64)> = match n {
        1 => {
            let prim = |t: f64| t.signum() * t.abs().powf(alpha) / alpha;
            (-(nn - 1)..nn)
                .map(|m| {
                    let (a, b) = ((m as f64 - 0.5) * h, (m as f64 + 0.5) * h);
                    ([m, 0], prim(b) - prim(a))
                })
                .collect()
        }
        _ => {
            let self_cell = 8.0
                * gl_integrate(
                    |t| (0.5 * h / t.cos()).powf(alpha) / alpha,
                    0.0,
                    std::f64::consts::FRAC_PI_4,
                );
            let mut taps = Vec::with_capacity((2 * nn as usize).pow(2));
            for dr in -(nn - 1)..nn {
                for dc in -(nn - 1)..nn {
                    let v = if dr == 0 && dc == 0 {
                        self_cell
                    } else {
                        let r = (dr as f64).hypot(dc as f64) * h;
                        r.powf(alpha - 2.0) * h * h
                    };
                    taps.push(([dr, dc], v));
                }
            }
            taps
        }
    };
    GridFunction::new(grid, PaddedSpectrum::new(f, 2 * nn as usize).convolve(&taps))
}

/// `I_alpha f(x)` at an arbitrary point on the line, exact for the
/// piecewise-constant reading of `f`.
pub fn riesz_potential_at(f: &GridFunction, alpha: f64, x: f64) -> Result<f64> {
    let grid = f.grid();
    if grid.dim() != 1 {
        return Err(invalid("point evaluation is one-dimensional"));
    }
    OperatorSpec::RieszPotential { alpha }.check_dim(1)?;
    let prim = |t: f64| t.signum() * t.abs().powf(alpha) / alpha;
    Ok(f.values()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != 0.0)
        .map(|(j, v)| v * (prim(x - grid.axis_edge(j)) - prim(x - grid.axis_edge(j + 1))))
        .sum())
}

/// Applies any operator with its natural method.
pub fn apply(f: &GridFunction, spec: &OperatorSpec, method: Method) -> Result<Applied> {
    match spec {
        OperatorSpec::RieszPotential { alpha } => {
            if matches!(method, Method::Multiplier { .. }) {
                return Err(invalid("the Riesz potential is computed by quadrature only"));
            }
            Ok(Applied {
                output: riesz_potential(f, *alpha)?,
                warnings: Vec::new(),
            })
        }
        _ => singular_integral(f, spec, method),
    }
}

/// Parameters of `I_alpha a` for a `w^p-(p, p0, d)` atom `a`: exponents
/// `1/q = 1/p - alpha/n`, `1/q0 = 1/p0 - alpha/n`, weight `w^q`, and
/// `d_q = floor(n (1/q - 1))` vanishing moments.
pub fn potential_image_params(in_params: &AtomParams, alpha: f64) -> Result<AtomParams> {
    let n = in_params.ball.dim() as f64;
    let inv_q = 1.0 / in_params.p - alpha / n;
    let inv_q0 = 1.0 / in_params.p0 - alpha / n;
    if !(inv_q > 0.0 && inv_q0 > 0.0) {
        return Err(invalid(format!(
            "need 1/p - alpha/n > 0 and 1/p0 - alpha/n > 0 (p={}, p0={}, alpha={alpha})",
            in_params.p, in_params.p0
        )));
    }
    let (q, q0) = (1.0 / inv_q, 1.0 / inv_q0);
    if q > 1.0 + 1e-12 {
        return Err(invalid(format!(
            "target exponent q = {q} exceeds 1; need p <= n/(n + alpha)"
        )));
    }
    let d_q = (n * (inv_q - 1.0) + 1e-12).floor().max(0.0) as u32;
    // in_params.weight is w^p; w^q = (w^p)^{q/p}.
    let weight = in_params.weight.pow(q / in_params.p);
    AtomParams::new(q.min(1.0), q0, d_q, in_params.ball.clone(), weight)
}

/// `2 d_q + 3 + floor(alpha) + n` vanishing moments required of the input
/// atom for the potential image to be a molecule.
pub fn potential_atom_moments(n: usize, p: f64, alpha: f64) -> u32 {
    let inv_q = 1.0 / p - alpha / n as f64;
    let d_q = (n as f64 * (inv_q - 1.0) + 1e-12).floor().max(0.0) as u32;
    2 * d_q + 3 + alpha.floor() as u32 + n as u32
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageReport {
    /// Validation of `C T a` against the output parameters (moment fields
    /// are the raw box moments).
    pub validation: ValidationReport,
    /// The constant used: measured `min(c_m1, c_m2)` unless fixed.
    pub constant: f64,
    pub measured: bool,
    /// Largest `C` with `||C T a||_{L^p0(2B)}` within the size bound.
    pub c_m1: f64,
    /// Largest `C` with `C |T a|` under the decay envelope outside `2B`.
    pub c_m2: f64,
    /// Fitted far-field constant `K` in `|T a| <= K |x - x0|^{-beta}`.
    pub tail_constant: f64,
    pub tail_exponent: f64,
    /// Bound on the moments carried by `T a` outside the box.
    pub moment_tail_bound: Vec<f64>,
    /// `max(0, |box moment| - tail bound) / (||T a||_1 r^k)`.
    pub moment_relative_corrected: Vec<f64>,
    pub moments_ok: bool,
    /// Least-squares slope of the log outer envelope
    /// `sup_{|y - x0| >= |x - x0|} |T a(y)|` against `log|x - x0|` outside
    /// `2B`; expected at most `-beta + 0.1`. The envelope, unlike `|T a|`
    /// itself, ignores sign changes of the tail.
    pub decay_fit_exponent: Option<f64>,
    pub decay_fit_ok: bool,
    pub pass: bool,
}

/// Applies the operator to an atom and certifies the image as a molecule.
#[allow(clippy::too_many_arguments)]
pub fn molecule_image_report(
    a: &GridFunction,
    in_params: &AtomParams,
    spec: &OperatorSpec,
    method: Method,
    out_params: &AtomParams,
    constant: Option<f64>,
    tol: Tolerances,
) -> Result<ImageReport> {
    let grid = *a.grid();
    let n = grid.dim();
    let ta = apply(a, spec, method)?.output;
    let raw = validate_molecule(&ta, out_params, tol)?;
    let c_m1 = if raw.size_norm > 0.0 {
        raw.size_bound / raw.size_norm
    } else {
        f64::INFINITY
    };
    let c_m2 = match raw.decay_max_ratio {
        Some(r) if r > 0.0 => 1.0 / r,
        _ => f64::INFINITY,
    };
    let measured = constant.is_none();
    let c = constant.unwrap_or(c_m1.min(c_m2));
    if !(c.is_finite() && c > 0.0) {
        return Err(invalid(format!(
            "molecule constant must be positive and finite, got {c}"
        )));
    }
    let scaled = ta.scaled(c);
    let validation = validate_molecule(&scaled, out_params, tol)?;

    let beta = spec.image_decay(n, in_params.d);
    let ball = &out_params.ball;
    let (x0, r) = (&ball.center, ball.radius);
    let mut tail_constant = 0.0f64;
    let mut tail = Vec::new();
    let peak = scaled.max_abs();
    for (i, v) in scaled.values().iter().enumerate() {
        let x = grid.center(i);
        let dist = ball.distance_to_center(&x[..n]);
        if dist <= 2.0 * r {
            continue;
        }
        tail_constant = tail_constant.max(v.abs() * dist.powf(beta));
        tail.push((dist, v.abs()));
    }
    tail.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut envelope = 0.0f64;
    let mut fit = Vec::new();
    for (dist, v) in tail {
        envelope = envelope.max(v);
        if envelope > 1e-12 * peak {
            fit.push((dist.ln(), envelope.ln()));
        }
    }
    let decay_fit_exponent = (fit.len() >= 8).then(|| {
        let m = fit.len() as f64;
        let (sx, sy) = fit.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        let (mx, my) = (sx / m, sy / m);
        let (num, den) = fit.iter().fold((0.0, 0.0), |(a, b), (x, y)| {
            (a + (x - mx) * (y - my), b + (x - mx) * (x - mx))
        });
        num / den
    });
    let decay_fit_ok = decay_fit_exponent.is_none_or(|s| s <= -beta + 0.1);

    // Outside the box lies outside the largest ball about x0 inside the box.
    let rho = grid.half_extent() - x0.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let d_out = out_params.d;
    let moment_tail_bound: Vec<f64> = (0..=d_out)
        .map(|k| {
            let e = beta - k as f64;
            match n {
                1 => tail_constant * 2.0 * rho.powf(1.0 - e) / (e - 1.0),
                _ => tail_constant * 2.0 * std::f64::consts::PI * rho.powf(2.0 - e) / (e - 2.0),
            }
        })
        .collect();
    let l1 = scaled.lp_norm(1.0);
    let moment_relative_corrected: Vec<f64> = validation
        .moment_residuals
        .iter()
        .zip(&moment_tail_bound)
        .enumerate()
        .map(|(k, (m, t))| {
            let scale = l1 * r.powi(k as i32);
            if scale > 0.0 {
                (m - t).max(0.0) / scale
            } else {
                0.0
            }
        })
        .collect();
    let moments_ok = moment_relative_corrected.iter().all(|v| *v <= tol.moment);
    let pass = validation.size_ok && validation.decay_ok && moments_ok;
    Ok(ImageReport {
        validation,
        constant: c,
        measured,
        c_m1,
        c_m2,
        tail_constant,
        tail_exponent: beta,
        moment_tail_bound,
        moment_relative_corrected,
        moments_ok,
        decay_fit_exponent,
        decay_fit_ok,
        pass,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelEstimate {
    /// `(|alpha|, C)` with `|d^alpha k(y)| <= C |y|^{-n-|alpha|}` on the
    /// sampled range.
    pub constants: Vec<(u32, f64)>,
    pub radius_range: (f64, f64),
}

/// Finite-difference witness of the kernel bound
/// `|d^alpha k(y)| <= C |y|^{-n-|alpha|}` for `|alpha| <= 2`, sampled on
/// lattice points with `4h <= |y| <= R`.
pub fn kernel_estimate(spec: &OperatorSpec, grid: &Grid) -> Result<KernelEstimate> {
    let n = grid.dim();
    spec.check_dim(n)?;
    let (h, big) = (grid.spacing(), grid.half_extent());
    let k: Box<dyn Fn(f64, f64) -> f64 + Sync> = match (spec, n) {
        (OperatorSpec::Hilbert, _) | (OperatorSpec::TruncatedKernel { .. }, 1) => {
            let c = line_kernel_coefficient(spec);
            Box::new(move |y, _| c / y)
        }
        (OperatorSpec::RieszPotential { alpha }, _) => {
            let e = alpha - n as f64;
            Box::new(move |y0, y1| y0.hypot(y1).powf(e))
        }
        (OperatorSpec::Identity, _) => return Err(invalid("the identity has no kernel")),
        _ => planar_kernel(spec),
    };
    let mut constants = vec![(0u32, 0.0f64), (1, 0.0), (2, 0.0)];
    let points: Vec<[f64; 2]> = match n {
        1 => (4..=(big / h) as i64)
            .flat_map(|m| [[m as f64 * h, 0.0], [-(m as f64) * h, 0.0]])
            .collect(),
        _ => {
            let mmax = (big / h) as i64;
            let stride = (mmax / 32).max(1);
            let mut pts = Vec::new();
            for a in (-mmax..=mmax).step_by(stride as usize) {
                for b in (-mmax..=mmax).step_by(stride as usize) {
                    let r = (a as f64).hypot(b as f64) * h;
                    if r >= 4.0 * h && r <= big {
                        pts.push([a as f64 * h, b as f64 * h]);
                    }
                }
            }
            pts
        }
    };
    for idx in multi_indices(n, 2) {
        let order: u32 = idx.iter().sum();
        for y in &points {
            let r = y[0].hypot(y[1]);
            let d = finite_difference(&k, *y, &idx, 1e-3 * r);
            let c = d.abs() * r.powf(n as f64 + order as f64);
            let slot = &mut constants[order as usize].1;
            *slot = slot.max(c);
        }
    }
    Ok(KernelEstimate {
        constants,
        radius_range: (4.0 * h, big),
    })
}

fn finite_difference(k: &dyn Fn(f64, f64) -> f64, y: [f64; 2], alpha: &[u32], s: f64) -> f64 {
    // Central differences, applied one axis at a time.
    fn diff(k: &dyn Fn(f64, f64) -> f64, y: [f64; 2], orders: [u32; 2], s: f64) -> f64 {
        if orders[0] > 0 {
            let mut o = orders;
            o[0] -= 1;
            return (diff(k, [y[0] + s, y[1]], o, s) - diff(k, [y[0] - s, y[1]], o, s)) / (2.0 * s);
        }
        if orders[1] > 0 {
            let mut o = orders;
            o[1] -= 1;
            return (diff(k, [y[0], y[1] + s], o, s) - diff(k, [y[0], y[1] - s], o, s)) / (2.0 * s);
        }
        k(y[0], y[1])
    }
    let orders = [alpha[0], alpha.get(1).copied().unwrap_or(0)];
    diff(k, y, orders, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atoms::make_random_atom;
    use crate::grid::Ball;
    use crate::weights::WeightSpec;
    use std::f64::consts::PI;

    fn bump(grid: Grid, c: f64, r: f64) -> GridFunction {
        GridFunction::from_fn(grid, |x| {
            let u = ((x[0] - c) / r).powi(2);
            if u < 1.0 {
                (-1.0 / (1.0 - u)).exp()
            } else {
                0.0
            }
        })
        .unwrap()
    }

    fn rel_l2(a: &GridFunction, b: &GridFunction) -> f64 {
        a.combine(1.0, b, -1.0).unwrap().lp_norm(2.0) / b.lp_norm(2.0)
    }

    #[test]
    fn hilbert_of_cosine_is_sine() {
        let g = Grid::new(1, 4.0, 512).unwrap();
        let l = 8.0;
        for k in [1.0, 3.0, 17.0] {
            let f = GridFunction::from_fn(g, |x| (2.0 * PI * k * x[0] / l).cos()).unwrap();
            let hf = singular_integral(&f, &OperatorSpec::Hilbert, Method::parse("periodic").unwrap())
                .unwrap()
                .output;
            let want = GridFunction::from_fn(g, |x| (2.0 * PI * k * x[0] / l).sin()).unwrap();
            let err = hf.combine(1.0, &want, -1.0).unwrap().max_abs();
            assert!(err < 1e-10, "k={k} err={err}");
        }
    }

    #[test]
    fn multiplier_and_quadrature_agree() {
        let g = Grid::new(1, 8.0, 4096).unwrap();
        for (c, r) in [(0.0, 1.0), (0.7, 0.4), (-1.5, 2.0)] {
            let f = bump(g, c, r);
            let m = singular_integral(&f, &OperatorSpec::Hilbert, Method::multiplier())
                .unwrap()
                .output;
            let q = singular_integral(&f, &OperatorSpec::Hilbert, Method::quadrature())
                .unwrap()
                .output;
            let t = singular_integral(&f, &OperatorSpec::Hilbert, Method::parse("truncated").unwrap())
                .unwrap()
                .output;
            let (eq, et) = (rel_l2(&q, &m), rel_l2(&t, &m));
            assert!(eq < 1e-3, "corrected {eq}");
            assert!(et > eq, "truncated {et} corrected {eq}");
        }
    }

    #[test]
    fn odd_kernel_vanishes_at_center_of_even_function() {
        let g = Grid::new(1, 4.0, 256).unwrap();
        let f = GridFunction::from_fn(g, |x| (-x[0] * x[0]).exp() * (x[0].abs() < 3.0) as u8 as f64).unwrap();
        let v = truncated_at(&f, &OperatorSpec::Hilbert, 0.0, 2.0 * g.spacing()).unwrap();
        assert!(v.abs() < 1e-12, "{v}");
    }

    #[test]
    fn hilbert_is_an_isometry() {
        let g = Grid::new(1, 8.0, 2048).unwrap();
        let f = GridFunction::from_fn(g, |x| x[0] * (-x[0] * x[0]).exp()).unwrap();
        let hf = singular_integral(&f, &OperatorSpec::Hilbert, Method::parse("periodic").unwrap())
            .unwrap()
            .output;
        assert!((hf.lp_norm(2.0) / f.lp_norm(2.0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn potential_of_indicator() {
        let g = Grid::new(1, 4.0, 1024).unwrap();
        let chi = GridFunction::from_fn(g, |x| f64::from(x[0].abs() < 1.0)).unwrap();
        let v = riesz_potential_at(&chi, 0.5, 0.0).unwrap();
        assert!((v - 4.0).abs() < 1e-8, "{v}");
        for x in [1.5, 2.0, 3.25] {
            let want = 2.0 * ((x + 1.0f64).sqrt() - (x - 1.0f64).sqrt());
            assert!((riesz_potential_at(&chi, 0.5, x).unwrap() - want).abs() < 1e-8);
        }
        let on_grid = riesz_potential(&chi, 0.5).unwrap();
        assert!(on_grid.values().iter().all(|v| *v >= 0.0));
        let i = g.axis_cell(1.5 + 0.5 * g.spacing()).unwrap();
        let x = g.axis_center(i);
        let want = 2.0 * ((x + 1.0).sqrt() - (x - 1.0).sqrt());
        assert!((on_grid.values()[i] - want).abs() < 1e-8);
    }

    #[test]
    fn potential_dilation_covariance() {
        let g = Grid::new(1, 4.0, 256).unwrap();
        let fine = Grid::new(1, 4.0, 512).unwrap();
        let f = bump(g, 0.3, 1.0);
        let alpha = 0.5;
        // f(2x) on the half-spacing grid: fine cell i maps onto coarse cell i - N/2.
        let half = g.cells_per_axis() / 2;
        let vals: Vec<f64> = (0..512)
            .map(|i| {
                let j = i as isize - half as isize;
                if (0..256).contains(&j) {
                    f.values()[j as usize]
                } else {
                    0.0
                }
            })
            .collect();
        let f2 = GridFunction::new(fine, vals).unwrap();
        let lhs = riesz_potential(&f2, alpha).unwrap();
        let rhs = riesz_potential(&f, alpha).unwrap();
        for i in 128..384 {
            let j = i - half;
            let want = 2f64.powf(-alpha) * rhs.values()[j];
            assert!((lhs.values()[i] - want).abs() < 1e-8 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn riesz_multiplier_matches_quadrature() {
        let g = Grid::new(2, 4.0, 64).unwrap();
        let f = GridFunction::from_fn(g, |x| (-(x[0] * x[0] + 2.0 * x[1] * x[1])).exp()).unwrap();
        for axis in [1, 2] {
            let spec = OperatorSpec::Riesz { axis };
            let m = singular_integral(&f, &spec, Method::multiplier()).unwrap().output;
            let q = singular_integral(&f, &spec, Method::quadrature()).unwrap().output;
            let e = rel_l2(&q, &m);
            assert!(e < 2e-2, "axis {axis}: {e}");
        }
    }

    #[test]
    fn angular_kernel_reproduces_riesz() {
        let g = Grid::new(2, 4.0, 32).unwrap();
        let f = GridFunction::from_fn(g, |x| (-(x[0] * x[0] + x[1] * x[1])).exp() * x[1]).unwrap();
        let m = 16;
        let samples = (0..m)
            .map(|j| (2.0 * PI * j as f64 / m as f64).cos() / (2.0 * PI))
            .collect();
        let spec = OperatorSpec::kernel(Omega::new(2, samples).unwrap(), 2.0 * g.spacing());
        for method in [Method::multiplier(), Method::quadrature()] {
            let a = singular_integral(&f, &spec, method).unwrap().output;
            let b = singular_integral(&f, &OperatorSpec::Riesz { axis: 1 }, method)
                .unwrap()
                .output;
            assert!(rel_l2(&a, &b) < 1e-10);
        }
        let bad = Omega::new(2, vec![1.0, 1.0, 1.0]);
        assert!(bad.is_err());
    }

    #[test]
    fn omega_text_round_trip() {
        let o = parse_omega("#hardylab-omega v1 n=1 M=2\n-0.5, 0.5\n").unwrap();
        assert_eq!(o.samples, vec![-0.5, 0.5]);
        assert!(parse_omega("#hardylab-omega v1 n=1 M=2\n1 1\n").is_err());
        assert!(parse_omega("#hardylab-omega v1 n=1\n1 -1\n").is_err());
    }

    #[test]
    fn linearity() {
        let g = Grid::new(1, 8.0, 512).unwrap();
        let (f, k) = (bump(g, 0.0, 1.0), bump(g, 1.0, 0.5));
        let sum = f.combine(2.0, &k, -3.0).unwrap();
        for spec in [OperatorSpec::Hilbert, OperatorSpec::RieszPotential { alpha: 0.5 }] {
            let method = if matches!(spec, OperatorSpec::Hilbert) {
                Method::multiplier()
            } else {
                Method::quadrature()
            };
            let a = apply(&sum, &spec, method).unwrap().output;
            let b = apply(&f, &spec, method)
                .unwrap()
                .output
                .combine(2.0, &apply(&k, &spec, method).unwrap().output, -3.0)
                .unwrap();
            assert!(a.combine(1.0, &b, -1.0).unwrap().max_abs() < 1e-12 * b.max_abs().max(1.0));
        }
    }

    #[test]
    fn kernel_bound_witness() {
        let g = Grid::new(1, 8.0, 512).unwrap();
        let est = kernel_estimate(&OperatorSpec::Hilbert, &g).unwrap();
        // 1/(pi y): |k| y = 1/pi, |k'| y^2 = 1/pi, |k''| y^3 = 2/pi.
        let want = [1.0 / PI, 1.0 / PI, 2.0 / PI];
        for ((_, c), w) in est.constants.iter().zip(want) {
            assert!((c / w - 1.0).abs() < 0.05, "{c} vs {w}");
        }
        let g2 = Grid::new(2, 4.0, 64).unwrap();
        let est = kernel_estimate(&OperatorSpec::Riesz { axis: 1 }, &g2).unwrap();
        assert!(est.constants.iter().all(|(_, c)| c.is_finite() && *c > 0.0));
    }

    #[test]
    fn identity_image_is_the_atom() {
        let g = Grid::new(1, 8.0, 1024).unwrap();
        let w = WeightSpec::power(-0.5, vec![]);
        let ap = AtomParams::new(2.0 / 3.0, 4.0, 1, Ball::interval(0.5, 1.0).unwrap(), w).unwrap();
        let a = make_random_atom(&g, &ap, 3).unwrap();
        let tol = Tolerances::uniform(1e-8);
        let rep = molecule_image_report(
            &a,
            &ap,
            &OperatorSpec::Identity,
            Method::multiplier(),
            &ap,
            Some(1.0),
            tol,
        )
        .unwrap();
        let direct = validate_molecule(&a, &ap, tol).unwrap();
        assert!(rep.pass && direct.pass);
        assert_eq!(rep.validation, direct);
    }

    #[test]
    fn hilbert_image_is_a_molecule() {
        let g = Grid::new(1, 8.0, 4096).unwrap();
        let w = WeightSpec::power(-0.5, vec![]);
        let ap = AtomParams::new(2.0 / 3.0, 4.0, 1, Ball::interval(-0.5, 0.75).unwrap(), w).unwrap();
        let a = make_random_atom(&g, &ap, 11).unwrap();
        let rep = molecule_image_report(
            &a,
            &ap,
            &OperatorSpec::Hilbert,
            Method::multiplier(),
            &ap,
            None,
            Tolerances::uniform(1e-6),
        )
        .unwrap();
        assert!(rep.pass);
        assert!(rep.decay_fit_ok);
    }

    #[test]
    fn potential_image_is_a_molecule() {
        let g = Grid::new(1, 8.0, 4096).unwrap();
        let w = WeightSpec::power(-0.5, vec![]);
        let (p, alpha) = (2.0 / 3.0, 0.5);
        let d = potential_atom_moments(1, p, alpha);
        assert_eq!(d, 4);
        let ap = AtomParams::new(p, 1.5, d, Ball::interval(0.25, 1.0).unwrap(), w.pow(p)).unwrap();
        let out = potential_image_params(&ap, alpha).unwrap();
        assert!((out.p - 1.0).abs() < 1e-12 && (out.p0 - 6.0).abs() < 1e-9 && out.d == 0);
        let a = make_random_atom(&g, &ap, 5).unwrap();
        let spec = OperatorSpec::RieszPotential { alpha };
        let rep = molecule_image_report(
            &a,
            &ap,
            &spec,
            Method::quadrature(),
            &out,
            None,
            Tolerances::uniform(1e-6),
        )
        .unwrap();
        assert!(rep.pass);
        assert!(rep.decay_fit_ok);
    }
}
