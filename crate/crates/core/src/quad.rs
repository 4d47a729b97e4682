//! Fixed quadrature rules used for weight masses.

use std::sync::OnceLock;

/// Gauss–Legendre nodes and weights on `[-1, 1]`, computed by Newton
/// iteration on the Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (z * pn - pn1) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn gl16() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(16))
}

/// 16-point Gauss–Legendre on `[a, b]`; for integrands smooth on the
/// closed interval.
pub fn gl_integrate(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let (x, w) = gl16();
    let (m, r) = (0.5 * (a + b), 0.5 * (b - a));
    x.iter().zip(w).map(|(x, w)| w * f(m + r * x)).sum::<f64>() * r
}

/// Tensor 16x16 Gauss–Legendre on a rectangle.
pub fn gl_integrate_2d(f: impl Fn(f64, f64) -> f64, x: (f64, f64), y: (f64, f64)) -> f64 {
    let (nodes, wts) = gl16();
    let (mx, rx) = (0.5 * (x.0 + x.1), 0.5 * (x.1 - x.0));
    let (my, ry) = (0.5 * (y.0 + y.1), 0.5 * (y.1 - y.0));
    let mut acc = 0.0;
    for (u, wu) in nodes.iter().zip(wts) {
        let mut row = 0.0;
        for (v, wv) in nodes.iter().zip(wts) {
            row += wv * f(mx + rx * u, my + ry * v);
        }
        acc += wu * row;
    }
    acc * rx * ry
}

/// Tanh–sinh (double exponential) rule on `[a, b]`; tolerates integrable
/// power singularities at either endpoint. Nodes are generated as offsets
/// from the nearer endpoint and `f(x, x - a, b - x)` receives both
/// distances, so integrands singular at an endpoint can use the exact
/// distance even where `x` itself rounds onto the endpoint.
pub fn tanh_sinh(f: impl Fn(f64, f64, f64) -> f64, a: f64, b: f64) -> f64 {
    const STEP: f64 = 1.0 / 32.0;
    const KMAX: i32 = 6 * 32;
    let half = 0.5 * (b - a);
    let mut acc = 0.0;
    for k in -KMAX..=KMAX {
        let t = k as f64 * STEP;
        let s = std::f64::consts::FRAC_PI_2 * t.sinh();
        let c = s.cosh();
        // 1 - tanh(s) = 2 / (1 + e^{2s}), computed without cancellation.
        let off = half * 2.0 / (1.0 + (2.0 * s.abs()).exp());
        let wt = std::f64::consts::FRAC_PI_2 * t.cosh() / (c * c);
        if off <= 0.0 || wt == 0.0 {
            continue;
        }
        let (x, da, db) = if s < 0.0 {
            (a + off, off, 2.0 * half - off)
        } else {
            (b - off, 2.0 * half - off, off)
        };
        let v = f(x, da, db);
        if v.is_finite() {
            acc += wt * v;
        }
    }
    acc * half * STEP
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_is_exact_on_polynomials() {
        let (x, w) = gauss_legendre(8);
        let s: f64 = w.iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        let m: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(14)).sum();
        assert!((m - 2.0 / 15.0).abs() < 1e-14);
        assert!((gl_integrate(|t| t.exp(), 0.0, 1.0) - (1f64.exp() - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn tanh_sinh_handles_endpoint_singularities() {
        let v = tanh_sinh(|_, da, _| da.powf(-0.5), 0.0, 1.0);
        assert!((v - 2.0).abs() < 1e-10, "{v}");
        let v = tanh_sinh(|_, _, db| db.powf(-0.75), 0.0, 1.0);
        assert!((v - 4.0).abs() < 1e-9, "{v}");
        let v = tanh_sinh(|t, _, _| t * t, -1.0, 2.0);
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn tensor_rule() {
        let v = gl_integrate_2d(|x, y| x * x * y, (0.0, 1.0), (0.0, 2.0));
        assert!((v - 2.0 / 3.0).abs() < 1e-14);
    }
}
