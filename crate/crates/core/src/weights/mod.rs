//! Weight representations and their masses.
//!
//! Power weights `|x - c|^a` carry exact interval masses (1-D) and exact
//! corner-rectangle masses near the singular point (2-D). Tabulated weights
//! are piecewise constant on the cells of their table grid. Products of
//! power terms are one-dimensional and integrated by tanh–sinh quadrature
//! split at the singular points.

mod characteristics;

pub use characteristics::*;

use std::sync::Arc;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::format::read_grid_file;
use crate::grid::{Grid, GridFunction};
use crate::quad::{gl_integrate, gl_integrate_2d, tanh_sinh};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PowerTerm {
    pub a: f64,
    /// Singular point; empty means the origin.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub center: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSpec {
    One,
    Power {
        a: f64,
        #[serde(skip_serializing_if = "Vec::is_empty")]
        center: Vec<f64>,
    },
    /// Positive samples raised to `exponent` (1 for a freshly loaded table).
    Tabulated {
        source: String,
        exponent: f64,
        #[serde(skip)]
        table: Arc<GridFunction>,
    },
    Product {
        terms: Vec<PowerTerm>,
    },
}

impl WeightSpec {
    pub fn one() -> Self {
        WeightSpec::One
    }

    pub fn power(a: f64, center: Vec<f64>) -> Self {
        WeightSpec::Power { a, center }
    }

    pub fn tabulated(source: impl Into<String>, table: GridFunction) -> Result<Self> {
        if let Some(i) = table.values().iter().position(|v| !(*v > 0.0)) {
            return Err(invalid(format!("tabulated weight must be positive (sample {i})")));
        }
        Ok(WeightSpec::Tabulated {
            source: source.into(),
            exponent: 1.0,
            table: Arc::new(table),
        })
    }

    pub fn product(terms: Vec<PowerTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(invalid("product weight needs at least one term"));
        }
        if terms.iter().any(|t| t.center.len() > 1) {
            return Err(invalid("product weights are one-dimensional"));
        }
        Ok(WeightSpec::Product { terms })
    }

    /// Parses the weight grammar, reading tables from the filesystem.
    pub fn parse(s: &str) -> Result<Self> {
        Self::parse_with(s, |p| read_grid_file(p))
    }

    /// Parses the weight grammar with a caller-supplied table loader.
    pub fn parse_with(s: &str, load: impl Fn(&str) -> Result<GridFunction>) -> Result<Self> {
        let s = s.trim();
        if s == "one" {
            return Ok(WeightSpec::One);
        }
        if let Some(rest) = s.strip_prefix("power:") {
            let t = parse_power_term(rest)?;
            return Ok(WeightSpec::Power {
                a: t.a,
                center: t.center,
            });
        }
        if let Some(path) = s.strip_prefix("table:") {
            if path.is_empty() {
                return Err(invalid("table weight needs a path"));
            }
            return Self::tabulated(path, load(path)?);
        }
        if let Some(rest) = s.strip_prefix("prod:") {
            let terms = rest
                .split(';')
                .map(|t| {
                    t.strip_prefix("power:")
                        .ok_or_else(|| invalid(format!("product term must be power:..., got {t:?}")))
                        .and_then(parse_power_term)
                })
                .collect::<Result<Vec<_>>>()?;
            return Self::product(terms);
        }
        Err(invalid(format!(
            "unknown weight {s:?}; expected one | power:a=..[,c=..] | table:<path> | prod:power:..;power:.."
        )))
    }

    /// `w^s`: exponent multiplication for power kinds, pointwise power for tables.
    pub fn pow(&self, s: f64) -> Self {
        match self {
            WeightSpec::One => WeightSpec::One,
            WeightSpec::Power { a, center } => WeightSpec::Power {
                a: a * s,
                center: center.clone(),
            },
            WeightSpec::Tabulated {
                source,
                exponent,
                table,
            } => WeightSpec::Tabulated {
                source: source.clone(),
                exponent: exponent * s,
                table: table.clone(),
            },
            WeightSpec::Product { terms } => WeightSpec::Product {
                terms: terms
                    .iter()
                    .map(|t| PowerTerm {
                        a: t.a * s,
                        center: t.center.clone(),
                    })
                    .collect(),
            },
        }
    }

    /// Checks that the weight can be evaluated on an `n`-dimensional box.
    pub fn check_dim(&self, n: usize) -> Result<()> {
        let ok = match self {
            WeightSpec::One => true,
            WeightSpec::Power { a, center } => {
                if !a.is_finite() {
                    return Err(invalid("power exponent must be finite"));
                }
                center.is_empty() || center.len() == n
            }
            WeightSpec::Tabulated { table, .. } => table.grid().dim() == n,
            WeightSpec::Product { terms } => {
                if terms.iter().any(|t| !t.a.is_finite()) {
                    return Err(invalid("power exponent must be finite"));
                }
                n == 1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("weight is not defined in dimension {n}")))
        }
    }

    /// Whether the weight is integrable near every point of `R^n`.
    pub fn locally_integrable(&self, n: usize) -> bool {
        match self {
            WeightSpec::Power { a, .. } => *a > -(n as f64),
            WeightSpec::Product { terms } => product_singularities(terms).iter().all(|(_, a)| *a > -1.0),
            _ => true,
        }
    }

    /// Pointwise value (`+inf` at a negative-power singularity).
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            WeightSpec::One => 1.0,
            WeightSpec::Power { a, center } => dist(x, center).powf(*a),
            WeightSpec::Tabulated { exponent, table, .. } => {
                let g = table.grid();
                let cell = match g.dim() {
                    1 => g.axis_cell(x[0]),
                    _ => g
                        .axis_cell(x[0])
                        .zip(g.axis_cell(x[1]))
                        .map(|(r, c)| g.flat(r, c)),
                };
                cell.map_or(f64::NAN, |i| table.values()[i].powf(*exponent))
            }
            WeightSpec::Product { terms } => terms
                .iter()
                .map(|t| (x[0] - center_1d(&t.center)).abs().powf(t.a))
                .product(),
        }
    }

    /// `int_{x0}^{x1} w` on the line; `+inf` when the weight is not
    /// integrable there.
    pub fn interval_mass(&self, x0: f64, x1: f64) -> Result<f64> {
        if !(x0 <= x1) {
            return Err(invalid(format!("bad interval [{x0}, {x1}]")));
        }
        match self {
            WeightSpec::One => Ok(x1 - x0),
            WeightSpec::Power { a, center } => {
                if center.len() > 1 {
                    return Err(invalid("interval mass of a planar weight"));
                }
                Ok(power_interval_mass(
                    *a,
                    x0 - center_1d(center),
                    x1 - center_1d(center),
                ))
            }
            WeightSpec::Tabulated { exponent, table, .. } => {
                table_rect_integral(table, *exponent, (x0, x1), None)
            }
            WeightSpec::Product { terms } => Ok(product_interval_mass(terms, x0, x1)),
        }
    }

    /// Essential infimum over `[x0, x1]`. Exact for power and tabulated
    /// kinds; for products, the minimum over 65 equispaced samples (0 when a
    /// positive-exponent singular point lies in the interval).
    pub fn interval_ess_inf(&self, x0: f64, x1: f64) -> Result<f64> {
        match self {
            WeightSpec::One => Ok(1.0),
            WeightSpec::Power { a, center } => {
                let c = center_1d(center);
                let (dmin, dmax) = interval_dist_range(x0 - c, x1 - c);
                Ok(if *a > 0.0 { dmin.powf(*a) } else { dmax.powf(*a) })
            }
            WeightSpec::Tabulated { exponent, table, .. } => {
                let g = table.grid();
                let (lo, hi) = table_cell_span(g, x0, x1)?;
                Ok((lo..hi)
                    .map(|i| table.values()[i].powf(*exponent))
                    .fold(f64::INFINITY, f64::min))
            }
            WeightSpec::Product { terms } => {
                for (c, a) in product_singularities(terms) {
                    if a > 0.0 && (x0..=x1).contains(&c) {
                        return Ok(0.0);
                    }
                }
                Ok((0..=64)
                    .map(|k| self.value(&[x0 + (x1 - x0) * k as f64 / 64.0]))
                    .fold(f64::INFINITY, f64::min))
            }
        }
    }

    /// Mass of every cell of `grid`, row-major; entries may be `+inf`.
    pub fn cell_masses(&self, grid: &Grid) -> Result<Vec<f64>> {
        self.check_dim(grid.dim())?;
        let h = grid.spacing();
        let n = grid.cells_per_axis();
        match grid.dim() {
            1 => (0..n)
                .map(|i| self.interval_mass(grid.axis_edge(i), grid.axis_edge(i + 1)))
                .collect(),
            _ => {
                let mut out = Vec::with_capacity(grid.len());
                for r in 0..n {
                    for c in 0..n {
                        let xr = (grid.axis_edge(r), grid.axis_edge(r + 1));
                        let yr = (grid.axis_edge(c), grid.axis_edge(c + 1));
                        out.push(self.rect_mass(xr, yr, h)?);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Essential infimum over each cell of `grid` (row-major).
    pub fn cell_ess_infs(&self, grid: &Grid) -> Result<Vec<f64>> {
        self.check_dim(grid.dim())?;
        let n = grid.cells_per_axis();
        match grid.dim() {
            1 => (0..n)
                .map(|i| self.interval_ess_inf(grid.axis_edge(i), grid.axis_edge(i + 1)))
                .collect(),
            _ => {
                let mut out = Vec::with_capacity(grid.len());
                for r in 0..n {
                    for c in 0..n {
                        let xr = (grid.axis_edge(r), grid.axis_edge(r + 1));
                        let yr = (grid.axis_edge(c), grid.axis_edge(c + 1));
                        out.push(match self {
                            WeightSpec::One => 1.0,
                            WeightSpec::Power { a, center } => {
                                let c0 = center_2d(center);
                                let (dmin, dmax) = rect_dist_range(
                                    (xr.0 - c0[0], xr.1 - c0[0]),
                                    (yr.0 - c0[1], yr.1 - c0[1]),
                                );
                                if *a > 0.0 {
                                    dmin.powf(*a)
                                } else {
                                    dmax.powf(*a)
                                }
                            }
                            WeightSpec::Tabulated { .. } => table_rect_min(self, xr, yr)?,
                            WeightSpec::Product { .. } => unreachable!("checked by check_dim"),
                        });
                    }
                }
                Ok(out)
            }
        }
    }

    fn rect_mass(&self, xr: (f64, f64), yr: (f64, f64), h: f64) -> Result<f64> {
        match self {
            WeightSpec::One => Ok((xr.1 - xr.0) * (yr.1 - yr.0)),
            WeightSpec::Power { a, center } => {
                let c = center_2d(center);
                Ok(power_rect_mass(
                    *a,
                    (xr.0 - c[0], xr.1 - c[0]),
                    (yr.0 - c[1], yr.1 - c[1]),
                    h,
                ))
            }
            WeightSpec::Tabulated { exponent, table, .. } => {
                table_rect_integral(table, *exponent, xr, Some(yr))
            }
            WeightSpec::Product { .. } => Err(invalid("product weights are one-dimensional")),
        }
    }
}

fn parse_power_term(s: &str) -> Result<PowerTerm> {
    let mut a = None;
    let mut center = None;
    for kv in s.split(',') {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| invalid(format!("expected key=value in power term, got {kv:?}")))?;
        match k.trim() {
            "a" if a.is_none() => a = Some(parse_real(v)?),
            "c" if center.is_none() => {
                center = Some(v.split(':').map(parse_real).collect::<Result<Vec<_>>>()?);
            }
            "a" | "c" => return Err(invalid(format!("duplicate key {k:?} in power term"))),
            _ => return Err(invalid(format!("unknown key {k:?} in power term"))),
        }
    }
    let a = a.ok_or_else(|| invalid("power term needs a=<real>"))?;
    let center = center.unwrap_or_default();
    if center.len() > 2 {
        return Err(invalid("power center has more than two coordinates"));
    }
    Ok(PowerTerm { a, center })
}

pub(crate) fn parse_real(s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| invalid(format!("not a real number: {s:?}")))?;
    if !v.is_finite() {
        return Err(invalid(format!("not a finite real: {s:?}")));
    }
    Ok(v)
}

fn dist(x: &[f64], center: &[f64]) -> f64 {
    x.iter()
        .enumerate()
        .map(|(i, xi)| {
            let d = xi - center.get(i).copied().unwrap_or(0.0);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

fn center_1d(c: &[f64]) -> f64 {
    c.first().copied().unwrap_or(0.0)
}

fn center_2d(c: &[f64]) -> [f64; 2] {
    [
        c.first().copied().unwrap_or(0.0),
        c.get(1).copied().unwrap_or(0.0),
    ]
}

fn interval_dist_range(t0: f64, t1: f64) -> (f64, f64) {
    let dmax = t0.abs().max(t1.abs());
    let dmin = if t0 <= 0.0 && t1 >= 0.0 {
        0.0
    } else {
        t0.abs().min(t1.abs())
    };
    (dmin, dmax)
}

fn rect_dist_range(x: (f64, f64), y: (f64, f64)) -> (f64, f64) {
    let (xmin, xmax) = interval_dist_range(x.0, x.1);
    let (ymin, ymax) = interval_dist_range(y.0, y.1);
    (xmin.hypot(ymin), xmax.hypot(ymax))
}

/// `int_u^v t^a dt` for `0 <= u <= v`, written to avoid cancellation when
/// the interval is short relative to its distance from the origin.
fn pos_power_mass(a: f64, u: f64, v: f64) -> f64 {
    if v <= u {
        return 0.0;
    }
    let e = a + 1.0;
    if u == 0.0 {
        return if e <= 0.0 { f64::INFINITY } else { v.powf(e) / e };
    }
    let rel = ((v - u) / u).ln_1p();
    if e == 0.0 {
        rel
    } else {
        u.powf(e) * (e * rel).exp_m1() / e
    }
}

/// Exact `int_{t0}^{t1} |t|^a dt`.
fn power_interval_mass(a: f64, t0: f64, t1: f64) -> f64 {
    if t0 >= 0.0 {
        pos_power_mass(a, t0, t1)
    } else if t1 <= 0.0 {
        pos_power_mass(a, -t1, -t0)
    } else {
        pos_power_mass(a, 0.0, -t0) + pos_power_mass(a, 0.0, t1)
    }
}

/// `int_0^X int_0^Y (x^2 + y^2)^{a/2} dy dx` for `X, Y >= 0`, `a > -2`,
/// via polar coordinates split along the diagonal of the rectangle:
/// `X^{a+2}/(a+2) int_0^{Y/X} (1+t^2)^{a/2} dt` plus the mirrored term.
fn corner_rect_mass(a: f64, x: f64, y: f64) -> f64 {
    if x == 0.0 || y == 0.0 {
        return 0.0;
    }
    let e = a + 2.0;
    let part = |u: f64, v: f64| u.powf(e) / e * radial_profile_integral(a, v / u);
    part(x, y) + part(y, x)
}

/// `int_0^rho (1+t^2)^{a/2} dt`, composite Gauss–Legendre with geometric
/// panels beyond 1.
fn radial_profile_integral(a: f64, rho: f64) -> f64 {
    let f = |t: f64| (1.0 + t * t).powf(0.5 * a);
    if rho <= 1.0 {
        return gl_integrate(f, 0.0, rho);
    }
    let mut acc = gl_integrate(f, 0.0, 1.0);
    let mut lo = 1.0;
    while lo < rho {
        let hi = (2.0 * lo).min(rho);
        acc += gl_integrate(f, lo, hi);
        lo = hi;
    }
    acc
}

fn signed_pieces(t0: f64, t1: f64) -> [(f64, f64); 2] {
    if t0 >= 0.0 {
        [(t1, 1.0), (t0, -1.0)]
    } else if t1 <= 0.0 {
        [(-t0, 1.0), (-t1, -1.0)]
    } else {
        [(-t0, 1.0), (t1, 1.0)]
    }
}

/// Mass of `|x|^a` over a rectangle given relative to the singular point.
fn power_rect_mass(a: f64, x: (f64, f64), y: (f64, f64), h: f64) -> f64 {
    let (dmin, _) = rect_dist_range(x, y);
    if a == 0.0 {
        return (x.1 - x.0) * (y.1 - y.0);
    }
    if dmin > 2.0 * h {
        return gl_integrate_2d(|u, v| u.hypot(v).powf(a), x, y);
    }
    if dmin == 0.0 && a <= -2.0 {
        return f64::INFINITY;
    }
    let mut acc = 0.0;
    for (px, sx) in signed_pieces(x.0, x.1) {
        for (py, sy) in signed_pieces(y.0, y.1) {
            acc += sx * sy * corner_rect_mass(a, px, py);
        }
    }
    acc
}

/// Distinct singular points of a product with their summed exponents.
fn product_singularities(terms: &[PowerTerm]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = Vec::new();
    for t in terms {
        let c = center_1d(&t.center);
        match out.iter_mut().find(|(x, _)| *x == c) {
            Some(e) => e.1 += t.a,
            None => out.push((c, t.a)),
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

fn product_interval_mass(terms: &[PowerTerm], x0: f64, x1: f64) -> f64 {
    let sing = product_singularities(terms);
    if sing.iter().any(|&(c, a)| a <= -1.0 && (x0..=x1).contains(&c)) {
        return f64::INFINITY;
    }
    let f = |x: f64| {
        terms
            .iter()
            .map(|t| (x - center_1d(&t.center)).abs().powf(t.a))
            .product::<f64>()
    };
    let mut cuts = vec![x0];
    cuts.extend(sing.iter().map(|s| s.0).filter(|c| *c > x0 && *c < x1));
    cuts.push(x1);
    let mut acc = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let len = hi - lo;
        let near = sing
            .iter()
            .any(|&(c, a)| a != 0.0 && c >= lo - len && c <= hi + len);
        acc += if near {
            // Singular points sit on piece endpoints after the split above.
            let g = |x: f64, da: f64, db: f64| {
                terms
                    .iter()
                    .map(|t| {
                        let c = center_1d(&t.center);
                        let d = if c == lo {
                            da
                        } else if c == hi {
                            db
                        } else {
                            (x - c).abs()
                        };
                        d.powf(t.a)
                    })
                    .product::<f64>()
            };
            tanh_sinh(g, lo, hi)
        } else {
            gl_integrate(f, lo, hi)
        };
    }
    acc
}

fn table_cell_span(g: &Grid, x0: f64, x1: f64) -> Result<(usize, usize)> {
    let tol = 1e-12 * g.half_extent();
    if x0 < -g.half_extent() - tol || x1 > g.half_extent() + tol {
        return Err(invalid(format!(
            "[{x0}, {x1}] leaves the table box [-{0}, {0}]",
            g.half_extent()
        )));
    }
    let h = g.spacing();
    let lo = (((x0 + g.half_extent()) / h).floor().max(0.0) as usize).min(g.cells_per_axis() - 1);
    let hi = (((x1 + g.half_extent()) / h).ceil() as usize).clamp(lo + 1, g.cells_per_axis());
    Ok((lo, hi))
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

fn table_rect_integral(
    table: &GridFunction,
    exponent: f64,
    xr: (f64, f64),
    yr: Option<(f64, f64)>,
) -> Result<f64> {
    let g = table.grid();
    let (r0, r1) = table_cell_span(g, xr.0, xr.1)?;
    let mut acc = 0.0;
    match yr {
        None => {
            for i in r0..r1 {
                let len = overlap(xr, (g.axis_edge(i), g.axis_edge(i + 1)));
                acc += len * table.values()[i].powf(exponent);
            }
        }
        Some(yr) => {
            let (c0, c1) = table_cell_span(g, yr.0, yr.1)?;
            for r in r0..r1 {
                let lx = overlap(xr, (g.axis_edge(r), g.axis_edge(r + 1)));
                for c in c0..c1 {
                    let ly = overlap(yr, (g.axis_edge(c), g.axis_edge(c + 1)));
                    acc += lx * ly * table.values()[g.flat(r, c)].powf(exponent);
                }
            }
        }
    }
    Ok(acc)
}

fn table_rect_min(w: &WeightSpec, xr: (f64, f64), yr: (f64, f64)) -> Result<f64> {
    let WeightSpec::Tabulated { exponent, table, .. } = w else {
        return Err(Error::Numerical("not a tabulated weight".into()));
    };
    let g = table.grid();
    let (r0, r1) = table_cell_span(g, xr.0, xr.1)?;
    let (c0, c1) = table_cell_span(g, yr.0, yr.1)?;
    let mut m = f64::INFINITY;
    for r in r0..r1 {
        for c in c0..c1 {
            m = m.min(table.values()[g.flat(r, c)].powf(*exponent));
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_tables(_: &str) -> Result<GridFunction> {
        Err(invalid("no tables in this test"))
    }

    #[test]
    fn grammar() {
        assert_eq!(WeightSpec::parse_with("one", no_tables).unwrap(), WeightSpec::One);
        assert_eq!(
            WeightSpec::parse_with("power:a=-0.5", no_tables).unwrap(),
            WeightSpec::power(-0.5, vec![])
        );
        assert_eq!(
            WeightSpec::parse_with("power:a=1,c=0.25:-1", no_tables).unwrap(),
            WeightSpec::power(1.0, vec![0.25, -1.0])
        );
        let p = WeightSpec::parse_with("prod:power:a=0.5;power:a=-0.25,c=1", no_tables).unwrap();
        assert!(matches!(p, WeightSpec::Product { ref terms } if terms.len() == 2));
        for bad in [
            "",
            "two",
            "power:",
            "power:a=x",
            "power:a=1,a=2",
            "power:b=1",
            "power:a=inf",
            "prod:",
            "prod:one",
            "table:",
            "power:a=1,c=1:2:3",
        ] {
            assert!(WeightSpec::parse_with(bad, no_tables).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn json_echo_round_trips_exponent_bits() {
        let a = 0.1f64 + 0.2;
        let w = WeightSpec::parse_with(&format!("power:a={a:?}"), no_tables).unwrap();
        let j = serde_json::to_value(&w).unwrap();
        assert_eq!(j["kind"], "power");
        assert_eq!(j["a"].as_f64().unwrap().to_bits(), a.to_bits());
    }

    #[test]
    fn power_interval_masses_are_exact() {
        let w = WeightSpec::power(1.0, vec![]);
        assert!((w.interval_mass(-1.0, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let w = WeightSpec::power(-0.5, vec![]);
        assert!((w.interval_mass(0.0, 4.0).unwrap() - 4.0).abs() < 1e-14);
        assert!((w.interval_mass(1.0, 4.0).unwrap() - 2.0).abs() < 1e-14);
        assert!((w.interval_mass(-4.0, -1.0).unwrap() - 2.0).abs() < 1e-14);
        assert!(WeightSpec::power(-1.0, vec![])
            .interval_mass(-1.0, 1.0)
            .unwrap()
            .is_infinite());
        assert!(WeightSpec::power(-1.0, vec![])
            .interval_mass(0.5, 1.0)
            .unwrap()
            .is_finite());
        // Short intervals far from the singular point keep full relative precision.
        let m = WeightSpec::power(2.0, vec![])
            .interval_mass(1.0, 1.0 + 1e-9)
            .unwrap();
        let exact = ((1.0f64 + 1e-9).powi(3) - 1.0) / 3.0;
        assert!(((m - exact) / exact).abs() < 1e-6);
    }

    #[test]
    fn planar_power_masses() {
        let g = Grid::new(2, 1.0, 16).unwrap();
        for a in [-1.5, -0.5, 1.0, 2.0] {
            let m: f64 = WeightSpec::power(a, vec![]).cell_masses(&g).unwrap().iter().sum();
            // Square [-1,1]^2: 8 int_0^{pi/4} (sec t)^{a+2}/(a+2) dt.
            let exact = 8.0 / (a + 2.0)
                * gl_integrate(
                    |t: f64| t.cos().powf(-(a + 2.0)),
                    0.0,
                    std::f64::consts::FRAC_PI_4,
                );
            assert!((m - exact).abs() < 1e-10 * exact, "a={a}: {m} vs {exact}");
        }
        let m = WeightSpec::power(-2.0, vec![]).cell_masses(&g).unwrap();
        assert!(m.iter().any(|v| v.is_infinite()));
    }

    #[test]
    fn product_masses_match_quadrature() {
        let w = WeightSpec::product(vec![
            PowerTerm {
                a: 0.5,
                center: vec![],
            },
            PowerTerm {
                a: -0.5,
                center: vec![],
            },
        ])
        .unwrap();
        assert!((w.interval_mass(-1.0, 1.0).unwrap() - 2.0).abs() < 1e-10);
        let w = WeightSpec::product(vec![PowerTerm {
            a: -0.5,
            center: vec![0.25],
        }])
        .unwrap();
        let exact = WeightSpec::power(-0.5, vec![0.25])
            .interval_mass(-1.0, 1.0)
            .unwrap();
        assert!((w.interval_mass(-1.0, 1.0).unwrap() - exact).abs() < 1e-9);
    }

    #[test]
    fn tabulated_masses_and_powers() {
        let g = Grid::new(1, 1.0, 4).unwrap();
        let t = GridFunction::new(g, vec![1.0, 2.0, 4.0, 8.0]).unwrap();
        let w = WeightSpec::tabulated("t", t).unwrap();
        assert!((w.interval_mass(-1.0, 1.0).unwrap() - 7.5).abs() < 1e-14);
        assert!((w.interval_mass(-0.75, -0.25).unwrap() - 0.75).abs() < 1e-14);
        assert!((w.pow(-1.0).interval_mass(0.5, 1.0).unwrap() - 0.0625).abs() < 1e-15);
        assert_eq!(w.interval_ess_inf(-0.2, 1.0).unwrap(), 2.0);
        assert!(w.interval_mass(-2.0, 0.0).is_err());
        let z = GridFunction::new(g, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(WeightSpec::tabulated("z", z).is_err());
    }

    #[test]
    fn ess_inf_of_powers() {
        let w = WeightSpec::power(-0.5, vec![]);
        assert_eq!(w.interval_ess_inf(-1.0, 0.25).unwrap(), 1.0);
        let w = WeightSpec::power(2.0, vec![]);
        assert_eq!(w.interval_ess_inf(-1.0, 0.25).unwrap(), 0.0);
        assert_eq!(w.interval_ess_inf(0.5, 1.0).unwrap(), 0.25);
    }
}
