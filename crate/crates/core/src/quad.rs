//! One-dimensional quadrature: composite Gauss-Legendre with caller-supplied
//! breakpoints, and the trapezoid rule on sampled data.

use std::f64::consts::PI;
use std::sync::OnceLock;

const GL_ORDER: usize = 16;

/// Gauss-Legendre nodes and weights on [-1, 1], computed by Newton
/// iteration on the Legendre polynomial.
pub fn gauss_legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            // p1 = P_n(z), p0 = P_{n-1}(z)
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre_rule(GL_ORDER))
}

/// Integrates `f` over `[a, b]` with `panels` equal Gauss-Legendre panels.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, panels: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (nodes, weights) = rule();
    let panels = panels.max(1);
    let width = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * width;
        let mid = lo + 0.5 * width;
        let mut s = 0.0;
        for (z, w) in nodes.iter().zip(weights) {
            s += w * f(mid + 0.5 * width * z);
        }
        total += 0.5 * width * s;
    }
    total
}

/// Like [`integrate`], but splits `[a, b]` at every breakpoint inside it so
/// that integrands with jumps or kinks at known places stay accurate.
pub fn integrate_with_breaks<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, breaks: &[f64], panels_per_piece: usize) -> f64 {
    let mut cuts: Vec<f64> = breaks.iter().copied().filter(|&c| c > a && c < b).collect();
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut total = 0.0;
    let mut lo = a;
    for c in cuts.into_iter().chain(std::iter::once(b)) {
        total += integrate(&f, lo, c, panels_per_piece);
        lo = c;
    }
    total
}

/// Trapezoid rule over sampled values at (not necessarily uniform) points.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2).zip(ys.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum()
}
