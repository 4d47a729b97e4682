//! Zero-padded FFT convolution and Fourier multipliers on grid functions.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::grid::GridFunction;

/// In-place transform of a `p`-point line (`dim == 1`) or a `p x p` row-major
/// square (`dim == 2`). The inverse is unnormalized.
pub(crate) fn transform(data: &mut [Complex64], p: usize, dim: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let fft = if inverse {
        planner.plan_fft_inverse(p)
    } else {
        planner.plan_fft_forward(p)
    };
    fft.process(data);
    if dim == 2 {
        transpose(data, p);
        fft.process(data);
        transpose(data, p);
    }
}

fn transpose(data: &mut [Complex64], p: usize) {
    for r in 0..p {
        for c in r + 1..p {
            data.swap(r * p + c, c * p + r);
        }
    }
}

/// The spectrum of `f` zero-padded to `p` points per axis (`p >= 2N`), ready
/// for repeated linear convolutions.
pub(crate) struct PaddedSpectrum {
    n: usize,
    dim: usize,
    p: usize,
    spectrum: Vec<Complex64>,
}

impl PaddedSpectrum {
    pub(crate) fn new(f: &GridFunction, p: usize) -> Self {
        let g = f.grid();
        let (n, dim) = (g.cells_per_axis(), g.dim());
        debug_assert!(p >= 2 * n);
        let mut data = vec![Complex64::new(0.0, 0.0); p.pow(dim as u32)];
        match dim {
            1 => {
                for (d, v) in data.iter_mut().zip(f.values()) {
                    d.re = *v;
                }
            }
            _ => {
                for r in 0..n {
                    for c in 0..n {
                        data[r * p + c].re = f.values()[r * n + c];
                    }
                }
            }
        }
        transform(&mut data, p, dim, false);
        Self {
            n,
            dim,
            p,
            spectrum: data,
        }
    }

    /// `(k * f)(x_i) = sum_j k(i - j) f_j` on the original cells, where the
    /// kernel is given by cell offset and only offsets with `|d| < N` matter.
    /// `kernel` lists nonzero taps as `(offset, value)`; offsets are
    /// `[dx, 0]` in 1-D.
    pub(crate) fn convolve(&self, taps: &[([isize; 2], f64)]) -> Vec<f64> {
        let (n, p) = (self.n, self.p);
        let wrap = |d: isize| (d.rem_euclid(p as isize)) as usize;
        let mut k = vec![Complex64::new(0.0, 0.0); self.spectrum.len()];
        for &([dx, dy], v) in taps {
            if dx.unsigned_abs() >= n || dy.unsigned_abs() >= n {
                continue;
            }
            let idx = match self.dim {
                1 => wrap(dx),
                _ => wrap(dx) * p + wrap(dy),
            };
            k[idx].re += v;
        }
        transform(&mut k, p, self.dim, false);
        for (a, b) in k.iter_mut().zip(&self.spectrum) {
            *a *= b;
        }
        transform(&mut k, p, self.dim, true);
        self.extract(&k)
    }

    /// Applies a Fourier multiplier given on the padded frequency lattice as
    /// `m(xi)` with `xi` in cycles per unit length.
    pub(crate) fn multiply(&self, spacing: f64, m: impl Fn([f64; 2]) -> Complex64) -> Vec<f64> {
        let p = self.p;
        let freq = |k: usize| {
            let k = if k <= p / 2 { k as f64 } else { k as f64 - p as f64 };
            k / (p as f64 * spacing)
        };
        let mut data = self.spectrum.clone();
        match self.dim {
            1 => {
                for (k, v) in data.iter_mut().enumerate() {
                    *v *= m([freq(k), 0.0]);
                }
            }
            _ => {
                for r in 0..p {
                    for c in 0..p {
                        data[r * p + c] *= m([freq(r), freq(c)]);
                    }
                }
            }
        }
        transform(&mut data, p, self.dim, true);
        self.extract(&data)
    }

    fn extract(&self, data: &[Complex64]) -> Vec<f64> {
        let (n, p) = (self.n, self.p);
        let scale = 1.0 / (p.pow(self.dim as u32) as f64);
        match self.dim {
            1 => data[..n].iter().map(|z| z.re * scale).collect(),
            _ => {
                let mut out = Vec::with_capacity(n * n);
                for r in 0..n {
                    out.extend(data[r * p..r * p + n].iter().map(|z| z.re * scale));
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn convolution_matches_direct_sum() {
        let g = Grid::new(1, 1.0, 16).unwrap();
        let f = GridFunction::from_fn(g, |x| (3.0 * x[0]).sin() + 0.5).unwrap();
        let taps = [([-2, 0], 0.25), ([0, 0], 1.0), ([3, 0], -0.5)];
        let got = PaddedSpectrum::new(&f, 32).convolve(&taps);
        for i in 0..16isize {
            let mut want = 0.0;
            for &([d, _], v) in &taps {
                let j = i - d;
                if (0..16).contains(&j) {
                    want += v * f.values()[j as usize];
                }
            }
            assert!((got[i as usize] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn planar_convolution_matches_direct_sum() {
        let g = Grid::new(2, 1.0, 8).unwrap();
        let f = GridFunction::from_fn(g, |x| x[0] - 2.0 * x[1] * x[1]).unwrap();
        let taps = [([1, -1], 0.5), ([0, 2], 2.0)];
        let got = PaddedSpectrum::new(&f, 16).convolve(&taps);
        for r in 0..8isize {
            for c in 0..8isize {
                let mut want = 0.0;
                for &([dx, dy], v) in &taps {
                    let (rr, cc) = (r - dx, c - dy);
                    if (0..8).contains(&rr) && (0..8).contains(&cc) {
                        want += v * f.values()[(rr * 8 + cc) as usize];
                    }
                }
                assert!((got[(r * 8 + c) as usize] - want).abs() < 1e-12);
            }
        }
    }
}
