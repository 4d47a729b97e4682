//! The `hardylab-grid v1` text format.
//!
//! ```text
//! #hardylab-grid v1 n=1 N=4 R=1
//! 0.0000000000000000e0,1.0000000000000000e0,...
//! ```
//!
//! Values are row-major; separators may be commas, whitespace or line
//! breaks. Writers emit 17 significant digits so every value round-trips.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{parse_err, Result};
use crate::grid::{Grid, GridFunction};

pub const GRID_MAGIC: &str = "#hardylab-grid";
pub const GRID_VERSION: &str = "v1";

/// Upper bound on `N^n` accepted from untrusted input.
pub const MAX_SAMPLES: usize = 1 << 26;

pub fn parse_grid(text: &str) -> Result<GridFunction> {
    let mut lines = text.lines().enumerate().skip_while(|(_, l)| l.trim().is_empty());
    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "empty input"))?;
    let grid = parse_header(header.trim(), hline + 1)?;
    let total = grid.len();
    let mut values = Vec::with_capacity(total.min(1 << 20));
    for (lno, line) in lines {
        for tok in line.split(|c: char| c == ',' || c.is_whitespace()) {
            if tok.is_empty() {
                continue;
            }
            if values.len() == total {
                return Err(parse_err(lno + 1, format!("more than {total} values")));
            }
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_err(lno + 1, format!("not a number: {tok:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(lno + 1, format!("non-finite value {tok:?}")));
            }
            values.push(v);
        }
    }
    if values.len() != total {
        return Err(parse_err(
            text.lines().count().max(1),
            format!("expected {total} values, found {}", values.len()),
        ));
    }
    Ok(GridFunction::from_vec_unchecked(grid, values))
}

fn parse_header(line: &str, lno: usize) -> Result<Grid> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(GRID_MAGIC) {
        return Err(parse_err(lno, format!("header must start with {GRID_MAGIC}")));
    }
    if parts.next() != Some(GRID_VERSION) {
        return Err(parse_err(
            lno,
            format!("unsupported version, expected {GRID_VERSION}"),
        ));
    }
    let (mut n, mut cells, mut r) = (None, None, None);
    for kv in parts {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| parse_err(lno, format!("expected key=value, got {kv:?}")))?;
        let bad = || parse_err(lno, format!("bad value for {k}: {v:?}"));
        let slot_taken = match k {
            "n" => n.replace(v.parse::<usize>().map_err(|_| bad())?).is_some(),
            "N" => cells.replace(v.parse::<usize>().map_err(|_| bad())?).is_some(),
            "R" => r.replace(v.parse::<f64>().map_err(|_| bad())?).is_some(),
            _ => return Err(parse_err(lno, format!("unknown header key {k:?}"))),
        };
        if slot_taken {
            return Err(parse_err(lno, format!("duplicate header key {k:?}")));
        }
    }
    let missing = |k: &str| parse_err(lno, format!("header is missing {k}"));
    let (n, cells, r) = (
        n.ok_or_else(|| missing("n"))?,
        cells.ok_or_else(|| missing("N"))?,
        r.ok_or_else(|| missing("R"))?,
    );
    let grid = Grid::new(n, r, cells).map_err(|e| parse_err(lno, e.to_string()))?;
    if grid.len() > MAX_SAMPLES {
        return Err(parse_err(
            lno,
            format!("grid has more than {MAX_SAMPLES} samples"),
        ));
    }
    Ok(grid)
}

pub fn write_grid(f: &GridFunction) -> String {
    let g = f.grid();
    let mut out = format!(
        "{GRID_MAGIC} {GRID_VERSION} n={} N={} R={}\n",
        g.dim(),
        g.cells_per_axis(),
        g.half_extent()
    );
    let row = if g.dim() == 1 { g.len() } else { g.cells_per_axis() };
    for chunk in f.values().chunks(row) {
        for (i, v) in chunk.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn read_grid_file(path: impl AsRef<Path>) -> Result<GridFunction> {
    parse_grid(&std::fs::read_to_string(path)?)
}

pub fn write_grid_file(path: impl AsRef<Path>, f: &GridFunction) -> Result<()> {
    std::fs::write(path, write_grid(f))?;
    Ok(())
}
