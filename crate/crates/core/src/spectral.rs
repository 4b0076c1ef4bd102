//! Grid discretisation of the Feynman-Kac quadratic form
//! `E(u,u) − ∫u²(Q − 1)dμ`, its lowest eigenpairs, h-transformed kernel
//! tables and the integrability / ultracontractivity checks built on them.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GridFunction, GroundState, ModelSpec, Motion, SpectralTriple, TestFunction};
use crate::motion::{gaussian_series_tail, mehler_1d};
use crate::quad;
use crate::rng::LabRng;

/// Kernel tables drop modes whose weight `e^{−(λ_k − λ₁)t}` is below this.
pub const MODE_TAIL: f64 = 1e-12;
/// Default number of table nodes for closed-form kernel sources.
pub const DEFAULT_TABLE_NODES: usize = 401;
/// Below this time the on-diagonal kernel is not resolved and trace checks
/// give no verdict.
pub const MIN_RESOLVED_TIME: f64 = 1e-2;

const MAX_INVERSE_ITERATIONS: usize = 100_000;
const EIGEN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridOptions {
    /// Number of interior nodes.
    pub n: usize,
    /// Half-width `R` of the truncation window for whole-line motions.
    /// `None` picks `R` so that a Gaussian with twice the variance of the
    /// reference measure has mass below `1e-12` outside. The ground state
    /// lives on `h²m`, which is wider than `m`.
    pub truncation: Option<f64>,
    /// Number of eigenpairs retained for eigenbasis kernels.
    pub modes: usize,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions { n: 4000, truncation: None, modes: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Dirichlet,
    TruncatedLine,
}

/// Uniform interior nodes of `(lo, hi)`, zero boundary values at both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub dx: f64,
    pub nodes: Vec<f64>,
    /// `m`-mass attached to each node.
    pub weights: Vec<f64>,
    pub boundary: Boundary,
}

fn log_reference_density(model: &ModelSpec, x: f64) -> f64 {
    match model.motion {
        Motion::Ou { c, sigma, .. } => {
            let k = c / (sigma * sigma);
            0.5 * (k / PI).ln() - k * x * x
        }
        Motion::IntervalBm { .. } => 0.0,
    }
}

/// Half-width `R` with `m([−R, R]ᶜ) < 1e-12` for a Gaussian `m ∝ e^{−k x²}`.
fn gaussian_truncation(k: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 20.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if libm::erfc(mid) < 1e-12 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi / k.sqrt()
}

fn require_one_dimensional(model: &ModelSpec) -> Result<()> {
    if let Motion::Ou { dim, .. } = model.motion {
        if dim != 1 {
            return Err(Error::Unsupported(format!("the grid solver is one-dimensional, got d = {dim}")));
        }
    }
    Ok(())
}

pub fn grid_for(model: &ModelSpec, opts: &GridOptions) -> Result<Grid> {
    require_one_dimensional(model)?;
    if opts.n < 3 {
        return Err(Error::Precondition(format!("grid needs at least 3 nodes, got {}", opts.n)));
    }
    let (lo, hi, boundary) = match model.motion {
        Motion::IntervalBm { length, .. } => (0.0, length, Boundary::Dirichlet),
        Motion::Ou { c, sigma, .. } => {
            let r = match opts.truncation {
                Some(r) if r > 0.0 => r,
                Some(r) => return Err(Error::Precondition(format!("truncation must be positive, got {r}"))),
                None => gaussian_truncation(0.5 * c / (sigma * sigma)),
            };
            (-r, r, Boundary::TruncatedLine)
        }
    };
    let dx = (hi - lo) / (opts.n + 1) as f64;
    let nodes: Vec<f64> = (1..=opts.n).map(|i| lo + i as f64 * dx).collect();
    let weights: Vec<f64> = nodes.iter().map(|&x| log_reference_density(model, x).exp() * dx).collect();
    if weights.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::Precondition(
            "reference weights underflow on this truncation window; use a smaller R".into(),
        ));
    }
    Ok(Grid { lo, hi, dx, nodes, weights, boundary })
}

/// Symmetric tridiagonal matrix `W^{-1/2} K W^{-1/2}` whose Rayleigh
/// quotient in `v = W^{1/2}u` is the discretised form over `∫u² dm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormMatrix {
    pub grid: Grid,
    pub diag: Vec<f64>,
    /// `off[i]` couples nodes `i` and `i + 1`.
    pub off: Vec<f64>,
    /// Potential density `(Q − 1)β` at the nodes, point mass excluded.
    pub potential: Vec<f64>,
    /// Node carrying the point mass and the amount `(Q − 1)q` put there.
    pub point_mass: Option<(usize, f64)>,
}

impl FormMatrix {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.len();
        for i in 0..n {
            let mut s = self.diag[i] * v[i];
            if i > 0 {
                s += self.off[i - 1] * v[i - 1];
            }
            if i + 1 < n {
                s += self.off[i] * v[i + 1];
            }
            out[i] = s;
        }
    }

    /// Rayleigh quotient of grid values `u` with respect to `∫u² dm`.
    pub fn rayleigh(&self, u: &[f64]) -> f64 {
        let v: Vec<f64> = u.iter().zip(&self.grid.weights).map(|(u, w)| u * w.sqrt()).collect();
        let mut av = vec![0.0; v.len()];
        self.apply(&v, &mut av);
        dot(&v, &av) / dot(&v, &v)
    }

    /// Adds a constant to the potential.
    pub fn shifted(&self, kappa: f64) -> FormMatrix {
        let mut out = self.clone();
        for d in &mut out.diag {
            *d -= kappa;
        }
        for p in &mut out.potential {
            *p += kappa;
        }
        out
    }

    /// Number of eigenvalues strictly below `s`.
    pub fn count_below(&self, s: f64) -> usize {
        let pivmin = f64::MIN_POSITIVE * 1e3;
        let mut count = 0;
        let mut q = 1.0;
        for i in 0..self.len() {
            let coupling = if i == 0 { 0.0 } else { self.off[i - 1] * self.off[i - 1] / q };
            q = self.diag[i] - s - coupling;
            if q.abs() < pivmin {
                q = -pivmin;
            }
            if q < 0.0 {
                count += 1;
            }
        }
        count
    }

    fn gershgorin(&self) -> (f64, f64) {
        let n = self.len();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let r = if i > 0 { self.off[i - 1].abs() } else { 0.0 } + if i + 1 < n { self.off[i].abs() } else { 0.0 };
            lo = lo.min(self.diag[i] - r);
            hi = hi.max(self.diag[i] + r);
        }
        (lo, hi)
    }

    /// The `k`-th smallest eigenvalue (0-based) by Sturm bisection.
    pub fn eigenvalue(&self, k: usize) -> f64 {
        let (mut lo, mut hi) = self.gershgorin();
        let scale = lo.abs().max(hi.abs()).max(1.0);
        for _ in 0..200 {
            if hi - lo <= 4.0 * f64::EPSILON * scale {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.count_below(mid) > k {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn discretize(model: &ModelSpec, grid: &Grid) -> Result<FormMatrix> {
    require_one_dimensional(model)?;
    let n = grid.nodes.len();
    let dx = grid.dx;
    let half_s2 = 0.5 * model.sigma() * model.sigma() / (dx * dx);
    let logs: Vec<f64> = grid.nodes.iter().map(|&x| log_reference_density(model, x)).collect();
    let log_mid = |x: f64| log_reference_density(model, x);
    let potential: Vec<f64> = grid.nodes.iter().map(|&x| model.potential_density(x)).collect();
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; n.saturating_sub(1)];
    for i in 0..n {
        let x = grid.nodes[i];
        let left = (log_mid(x - 0.5 * dx) - logs[i]).exp();
        let right = (log_mid(x + 0.5 * dx) - logs[i]).exp();
        diag[i] = half_s2 * (left + right) - potential[i];
        if i + 1 < n {
            let mid = log_mid(x + 0.5 * dx);
            off[i] = -half_s2 * (mid - 0.5 * (logs[i] + logs[i + 1])).exp();
        }
    }
    let point_mass = match model.rate.point_mass {
        None => None,
        Some(pm) => {
            if !(pm.at > grid.lo && pm.at < grid.hi) {
                return Err(Error::OutOfDomain { what: "point mass", value: pm.at });
            }
            let j = (((pm.at - grid.lo) / dx).round() as usize).clamp(1, n) - 1;
            let amount = (model.mean_offspring(pm.at) - 1.0) * pm.weight;
            diag[j] -= amount / grid.weights[j];
            Some((j, amount))
        }
    };
    Ok(FormMatrix { grid: grid.clone(), diag, off, potential, point_mass })
}

/// Pivoted LU factorisation of a shifted tridiagonal matrix.
struct TridiagonalLu {
    dl: Vec<f64>,
    d: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    swapped: Vec<bool>,
}

impl TridiagonalLu {
    fn new(form: &FormMatrix, shift: f64) -> Self {
        let n = form.len();
        let mut dl = form.off.clone();
        let mut d: Vec<f64> = form.diag.iter().map(|v| v - shift).collect();
        let mut du = form.off.clone();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swapped = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                if d[i] != 0.0 {
                    let fact = dl[i] / d[i];
                    dl[i] = fact;
                    d[i + 1] -= fact * du[i];
                }
            } else {
                let fact = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] *= -fact;
                }
                swapped[i] = true;
            }
        }
        let tiny = f64::EPSILON * form.gershgorin().1.abs().max(1.0);
        for v in &mut d {
            if v.abs() < tiny {
                *v = if *v < 0.0 { -tiny } else { tiny };
            }
        }
        TridiagonalLu { dl, d, du, du2, swapped }
    }

    fn solve(&self, b: &mut [f64]) {
        let n = self.d.len();
        for i in 0..n.saturating_sub(1) {
            if self.swapped[i] {
                let tmp = b[i];
                b[i] = b[i + 1];
                b[i + 1] = tmp - self.dl[i] * b[i];
            } else {
                b[i + 1] -= self.dl[i] * b[i];
            }
        }
        b[n - 1] /= self.d[n - 1];
        if n >= 2 {
            b[n - 2] = (b[n - 2] - self.du[n - 2] * b[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - self.du[i] * b[i + 1] - self.du2[i] * b[i + 2]) / self.d[i];
        }
    }
}

/// Eigenvalue and eigenfunction values `u` at the grid nodes, normalised
/// so that `Σ u² w = 1` (the grid version of `∫u² dm = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenpair {
    pub value: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
}

/// Inverse iteration for the `k`-th eigenpair in `v`-coordinates, kept
/// orthogonal to `previous`.
fn inverse_iteration(form: &FormMatrix, k: usize, previous: &[Vec<f64>]) -> Result<(f64, Vec<f64>, usize)> {
    let n = form.len();
    let target = form.eigenvalue(k);
    let scale = target.abs().max(1.0);
    let shift = target - 1e-10 * scale;
    let lu = TridiagonalLu::new(form, shift);
    // Deterministic start with components along every mode.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64 + 1.0) * 0.618_033_988_749_894_9).fract()).collect();
    let mut av = vec![0.0; n];
    let mut last = f64::NAN;
    let mut change = f64::INFINITY;
    // Rounding in the Rayleigh quotient scales with the matrix norm, not
    // with the eigenvalue, so high modes need this floor to terminate.
    let (glo, ghi) = form.gershgorin();
    let tol = (EIGEN_TOLERANCE * scale).max(64.0 * f64::EPSILON * glo.abs().max(ghi.abs()));
    for it in 1..=MAX_INVERSE_ITERATIONS {
        for p in previous {
            let c = dot(&v, p);
            for (a, b) in v.iter_mut().zip(p) {
                *a -= c * b;
            }
        }
        let norm = dot(&v, &v).sqrt();
        for a in &mut v {
            *a /= norm;
        }
        lu.solve(&mut v);
        for p in previous {
            let c = dot(&v, p);
            for (a, b) in v.iter_mut().zip(p) {
                *a -= c * b;
            }
        }
        let norm = dot(&v, &v).sqrt();
        for a in &mut v {
            *a /= norm;
        }
        form.apply(&v, &mut av);
        let rq = dot(&v, &av);
        change = (rq - last).abs();
        if it >= 2 && change < tol {
            return Ok((rq, v, it));
        }
        last = rq;
    }
    Err(Error::NoConvergence { iterations: MAX_INVERSE_ITERATIONS, last_change: change })
}

fn to_function_values(form: &FormMatrix, v: &[f64]) -> Vec<f64> {
    v.iter().zip(&form.grid.weights).map(|(v, w)| v / w.sqrt()).collect()
}

/// The `count` lowest eigenpairs, ascending.
pub fn eigenpairs(form: &FormMatrix, count: usize) -> Result<Vec<Eigenpair>> {
    if count > form.len() {
        return Err(Error::InsufficientModes { required: count, available: form.len() });
    }
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let (value, v, iterations) = inverse_iteration(form, k, &vs)?;
        let mut u = to_function_values(form, &v);
        if k == 0 {
            let s: f64 = u.iter().sum();
            if s < 0.0 {
                u.iter_mut().for_each(|x| *x = -*x);
            }
        } else {
            // Fix signs by the first node with a non-negligible value.
            let first = u.iter().copied().find(|x| x.abs() > 1e-8).unwrap_or(1.0);
            if first < 0.0 {
                u.iter_mut().for_each(|x| *x = -*x);
            }
        }
        vs.push(v);
        out.push(Eigenpair { value, vector: u, iterations });
    }
    Ok(out)
}

pub fn lowest_two_eigenpairs(form: &FormMatrix) -> Result<(Eigenpair, Eigenpair)> {
    let mut pairs = eigenpairs(form, 2)?;
    let second = pairs.pop().expect("two pairs");
    let first = pairs.pop().expect("two pairs");
    Ok((first, second))
}

/// `∫ g² dm` for the piecewise-linear interpolant of grid values `g`
/// (zero at both ends of the window).
fn interpolant_norm2(model: &ModelSpec, f: &GridFunction) -> f64 {
    let panels = f.nodes.len() + 1;
    quad::integrate(
        |x| {
            let v = f.eval(x);
            v * v * log_reference_density(model, x).exp()
        },
        f.lo,
        f.hi,
        panels,
    )
}

/// Spectral triple from the grid solver. The tabulated ground state is
/// rescaled so that its interpolant has unit `L²(m)` norm.
pub fn grid_spectral_triple(model: &ModelSpec, opts: &GridOptions) -> Result<SpectralTriple> {
    model.validate()?;
    let grid = grid_for(model, opts)?;
    let form = discretize(model, &grid)?;
    let (first, second) = lowest_two_eigenpairs(&form)?;
    let mut gf = GridFunction { lo: grid.lo, hi: grid.hi, nodes: grid.nodes.clone(), values: first.vector };
    let scale = interpolant_norm2(model, &gf).sqrt();
    gf.values.iter_mut().for_each(|v| *v /= scale);
    if gf.values.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Precondition("grid ground state is not strictly positive".into()));
    }
    let h_norm_check = interpolant_norm2(model, &gf);
    Ok(SpectralTriple {
        lambda1: first.value,
        lambda2: second.value,
        gap: second.value - first.value,
        h: GroundState::Grid(gf),
        h_norm_check,
    })
}

/// `K` grid eigenpairs of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenBasis {
    pub grid: Grid,
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
    /// Size of the full discrete spectrum.
    pub dimension: usize,
    /// Smallest eigenvalue not retained (`+∞` if all are).
    pub next_value: f64,
}

pub fn eigenbasis(form: &FormMatrix, modes: usize) -> Result<EigenBasis> {
    let pairs = eigenpairs(form, modes)?;
    let next_value = if modes < form.len() { form.eigenvalue(modes) } else { f64::INFINITY };
    Ok(EigenBasis {
        grid: form.grid.clone(),
        values: pairs.iter().map(|p| p.value).collect(),
        vectors: pairs.into_iter().map(|p| p.vector).collect(),
        dimension: form.len(),
        next_value,
    })
}

impl EigenBasis {
    /// Linear interpolation of mode `k` at `x`.
    pub fn mode_at(&self, k: usize, x: f64) -> f64 {
        GridFunction {
            lo: self.grid.lo,
            hi: self.grid.hi,
            nodes: self.grid.nodes.clone(),
            values: self.vectors[k].clone(),
        }
        .eval(x)
    }

    fn modes_needed(&self, t: f64) -> usize {
        let cutoff = self.values[0] - MODE_TAIL.ln() / t;
        let retained = self.values.iter().filter(|&&v| v < cutoff).count();
        if retained == self.values.len() && self.next_value < cutoff {
            self.values.len() + 1
        } else {
            retained
        }
    }
}

/// Where the h-transformed kernel comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSource {
    /// h-transformed branching OU: Mehler kernel with rate `alpha`.
    Mehler { alpha: f64, dim: usize },
    /// Killed motion on `(0, length)` with constant potential: sine series.
    Sine { length: f64, sigma: f64 },
    /// Grid eigenbasis of a general one-dimensional model.
    Eigenbasis(Box<EigenBasis>),
}

impl KernelSource {
    /// Picks the closed form matching `spectral.h`, or builds an eigenbasis.
    pub fn for_model(model: &ModelSpec, spectral: &SpectralTriple, opts: &GridOptions) -> Result<Self> {
        match (&spectral.h, model.motion) {
            (GroundState::OuGaussian { alpha, dim, .. }, Motion::Ou { sigma, .. }) => {
                if sigma != 1.0 {
                    return Err(Error::Unsupported("closed-form OU kernels assume sigma = 1".into()));
                }
                Ok(KernelSource::Mehler { alpha: *alpha, dim: *dim })
            }
            (GroundState::Sine { length }, Motion::IntervalBm { sigma, .. }) => {
                Ok(KernelSource::Sine { length: *length, sigma })
            }
            _ => {
                let grid = grid_for(model, opts)?;
                let form = discretize(model, &grid)?;
                Ok(KernelSource::Eigenbasis(Box::new(eigenbasis(&form, opts.modes.min(form.len()))?)))
            }
        }
    }

    pub fn eigenbasis(model: &ModelSpec, opts: &GridOptions) -> Result<Self> {
        let grid = grid_for(model, opts)?;
        let form = discretize(model, &grid)?;
        Ok(KernelSource::Eigenbasis(Box::new(eigenbasis(&form, opts.modes.min(form.len()))?)))
    }

    /// `λ_h` as seen by this source.
    pub fn gap(&self) -> f64 {
        match self {
            KernelSource::Mehler { alpha, .. } => *alpha,
            KernelSource::Sine { length, sigma } => {
                let k = PI / length;
                1.5 * sigma * sigma * k * k
            }
            KernelSource::Eigenbasis(b) => b.values.get(1).copied().unwrap_or(f64::INFINITY) - b.values[0],
        }
    }

    fn one_dimensional(&self) -> Result<()> {
        if let KernelSource::Mehler { dim, .. } = self {
            if *dim != 1 {
                return Err(Error::Unsupported(format!("kernel tables are one-dimensional, got d = {dim}")));
            }
        }
        Ok(())
    }

    fn sine_terms(kappa: f64) -> usize {
        // Terms with n² e^{−(n²−1)κ} below 1e-17 are dropped.
        let mut n = 1usize;
        loop {
            let nf = (n + 1) as f64;
            if nf * nf * (-(nf * nf - 1.0) * kappa).exp() < 1e-17 || n > 1_000_000 {
                return n;
            }
            n += 1;
        }
    }

    /// Closed-form `p^h(t, x, y)` for the catalog sources.
    pub fn density_h(&self, t: f64, x: f64, y: f64) -> Result<f64> {
        if !(t > 0.0) {
            return Err(Error::Precondition(format!("kernel needs t > 0, got {t}")));
        }
        match self {
            KernelSource::Mehler { alpha, .. } => Ok(mehler_1d(t, x, y, *alpha)),
            KernelSource::Sine { length, sigma } => {
                for v in [x, y] {
                    if !(v > 0.0 && v < *length) {
                        return Err(Error::OutOfDomain { what: "kernel argument", value: v });
                    }
                }
                let k = PI / length;
                let kappa = sigma * sigma * k * k * t / 2.0;
                let terms = Self::sine_terms(kappa);
                Ok(sine_kernel(k * x, k * y, kappa, terms))
            }
            KernelSource::Eigenbasis(_) => {
                Err(Error::Unsupported("eigenbasis kernels are only tabulated at grid nodes".into()))
            }
        }
    }

    /// `ã_t(x) = p^h(t, x, x)`.
    pub fn diagonal(&self, t: f64, x: f64) -> Result<f64> {
        match self {
            KernelSource::Eigenbasis(b) => {
                let needed = b.modes_needed(t);
                if needed > b.values.len() {
                    return Err(Error::InsufficientModes { required: needed, available: b.values.len() });
                }
                let h = b.mode_at(0, x);
                let mut s = 0.0;
                for k in 0..needed {
                    let u = b.mode_at(k, x);
                    s += (-(b.values[k] - b.values[0]) * t).exp() * u * u;
                }
                Ok(s / (h * h))
            }
            _ => self.density_h(t, x, x),
        }
    }

    /// Table nodes with their `m̃` weights and the first few non-constant
    /// eigenfunctions of `P^h` evaluated there.
    fn table_layout(&self, nodes: usize) -> (Vec<f64>, Vec<f64>, Vec<Vec<f64>>) {
        match self {
            KernelSource::Mehler { alpha, .. } => {
                let r = 8.0 / alpha.sqrt();
                let n = nodes.max(3);
                let dx = 2.0 * r / (n - 1) as f64;
                let xs: Vec<f64> = (0..n).map(|i| -r + i as f64 * dx).collect();
                let ws: Vec<f64> = xs
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| {
                        let end = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
                        end * dx * (alpha / PI).sqrt() * (-alpha * x * x).exp()
                    })
                    .collect();
                let modes = (1..=5).map(|j| xs.iter().map(|&x| hermite(j, alpha.sqrt() * x)).collect()).collect();
                (xs, ws, modes)
            }
            KernelSource::Sine { length, .. } => {
                let n = nodes.max(3);
                let dx = length / (n + 1) as f64;
                let k = PI / length;
                let xs: Vec<f64> = (1..=n).map(|i| i as f64 * dx).collect();
                let ws: Vec<f64> = xs.iter().map(|&x| dx * 2.0 / length * (k * x).sin().powi(2)).collect();
                let modes =
                    (2..=6).map(|j| xs.iter().map(|&x| (j as f64 * k * x).sin() / (k * x).sin()).collect()).collect();
                (xs, ws, modes)
            }
            KernelSource::Eigenbasis(b) => {
                let stride = b.grid.nodes.len().div_ceil(nodes.max(3)).max(1);
                let idx: Vec<usize> = (stride / 2..b.grid.nodes.len()).step_by(stride).collect();
                let xs: Vec<f64> = idx.iter().map(|&i| b.grid.nodes[i]).collect();
                let h = &b.vectors[0];
                let ws: Vec<f64> = idx.iter().map(|&i| b.grid.weights[i] * stride as f64 * h[i] * h[i]).collect();
                let modes = (1..b.vectors.len().min(6))
                    .map(|k| idx.iter().map(|&i| b.vectors[k][i] / h[i]).collect())
                    .collect();
                (xs, ws, modes)
            }
        }
    }
}

/// Physicists' Hermite polynomial `H_n`.
fn hermite(n: usize, x: f64) -> f64 {
    let (mut h0, mut h1) = (1.0, 2.0 * x);
    if n == 0 {
        return h0;
    }
    for k in 1..n {
        let h2 = 2.0 * x * h1 - 2.0 * k as f64 * h0;
        h0 = h1;
        h1 = h2;
    }
    h1
}

/// `Σ_n e^{−(n²−1)κ} sin(nu) sin(nv) / (sin u sin v)` with `u, v ∈ (0, π)`.
fn sine_kernel(u: f64, v: f64, kappa: f64, terms: usize) -> f64 {
    let (su, sv) = (u.sin(), v.sin());
    let mut s = 0.0;
    for n in 1..=terms {
        let nf = n as f64;
        s += (-(nf * nf - 1.0) * kappa).exp() * ratio_sin(n, u, su) * ratio_sin(n, v, sv);
    }
    s
}

/// `sin(nu)/sin(u)`, finite as `u → 0` or `u → π`.
#[inline]
fn ratio_sin(n: usize, u: f64, su: f64) -> f64 {
    if su.abs() > 1e-8 {
        (n as f64 * u).sin() / su
    } else {
        let sign = if u > 1.0 && n.is_multiple_of(2) { -1.0 } else { 1.0 };
        sign * n as f64
    }
}

/// `p^h(t, xᵢ, xⱼ)` on table nodes with the `m̃` quadrature weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTable {
    pub t: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    /// Row-major `n × n`.
    pub values: Vec<f64>,
    pub diag: Vec<f64>,
    /// First non-constant eigenfunctions of `P^h` at the nodes.
    pub modes: Vec<Vec<f64>>,
}

pub fn kernel_table(source: &KernelSource, t: f64, nodes: usize) -> Result<KernelTable> {
    if !(t > 0.0) {
        return Err(Error::Precondition(format!("kernel table needs t > 0, got {t}")));
    }
    source.one_dimensional()?;
    let (xs, ws, modes) = source.table_layout(nodes);
    let n = xs.len();
    let mut values = vec![0.0; n * n];
    match source {
        KernelSource::Mehler { alpha, .. } => {
            for i in 0..n {
                for j in i..n {
                    let v = mehler_1d(t, xs[i], xs[j], *alpha);
                    values[i * n + j] = v;
                    values[j * n + i] = v;
                }
            }
        }
        KernelSource::Sine { length, sigma } => {
            let k = PI / length;
            let kappa = sigma * sigma * k * k * t / 2.0;
            let terms = KernelSource::sine_terms(kappa);
            if terms > n {
                return Err(Error::InsufficientModes { required: terms, available: n });
            }
            let basis: Vec<Vec<f64>> =
                (1..=terms).map(|m| xs.iter().map(|&x| ratio_sin(m, k * x, (k * x).sin())).collect()).collect();
            fill_from_modes(&mut values, n, &basis, |m| (-(((m + 1) * (m + 1)) as f64 - 1.0) * kappa).exp());
        }
        KernelSource::Eigenbasis(b) => {
            let needed = b.modes_needed(t);
            if needed > b.values.len() {
                return Err(Error::InsufficientModes { required: needed, available: b.values.len() });
            }
            let stride = b.grid.nodes.len().div_ceil(nodes.max(3)).max(1);
            let idx: Vec<usize> = (stride / 2..b.grid.nodes.len()).step_by(stride).collect();
            let h = &b.vectors[0];
            let basis: Vec<Vec<f64>> =
                (0..needed).map(|k| idx.iter().map(|&i| b.vectors[k][i] / h[i]).collect()).collect();
            fill_from_modes(&mut values, n, &basis, |k| (-(b.values[k] - b.values[0]) * t).exp());
        }
    }
    let diag = (0..n).map(|i| values[i * n + i]).collect();
    Ok(KernelTable { t, nodes: xs, weights: ws, values, diag, modes })
}

fn fill_from_modes<C: Fn(usize) -> f64>(values: &mut [f64], n: usize, basis: &[Vec<f64>], coef: C) {
    for (m, phi) in basis.iter().enumerate() {
        let c = coef(m);
        for i in 0..n {
            let ci = c * phi[i];
            for j in 0..n {
                values[i * n + j] += ci * phi[j];
            }
        }
    }
}

impl KernelTable {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    /// Largest `|p(x,y) − p(y,x)|`, relative to `max(1, p)`.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (self.get(i, j), self.get(j, i));
                worst = worst.max((a - b).abs() / a.abs().max(1.0));
            }
        }
        worst
    }

    /// Largest deviation of `∫ p^h(t, x, y) m̃(dy)` from 1 over the rows.
    pub fn row_defect(&self) -> f64 {
        let n = self.len();
        (0..n)
            .map(|i| {
                let s: f64 = (0..n).map(|j| self.get(i, j) * self.weights[j]).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `P^h_t g` at the nodes.
    pub fn apply(&self, g: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n).map(|i| (0..n).map(|j| self.get(i, j) * g[j] * self.weights[j]).sum()).collect()
    }

    pub fn mean(&self, g: &[f64]) -> f64 {
        dot(g, &self.weights)
    }

    pub fn norm(&self, g: &[f64]) -> f64 {
        g.iter().zip(&self.weights).map(|(g, w)| g * g * w).sum::<f64>().sqrt()
    }

    /// Indices of nodes whose row is fully resolved by the table window
    /// (the middle three quarters for whole-line tables, everything for
    /// bounded ones).
    pub fn inner_indices(&self, bounded: bool) -> Vec<usize> {
        let n = self.len();
        if bounded {
            return (0..n).collect();
        }
        let (lo, hi) = (self.nodes[0], self.nodes[n - 1]);
        let mid = 0.5 * (lo + hi);
        let half = 0.375 * (hi - lo);
        (0..n).filter(|&i| (self.nodes[i] - mid).abs() <= half).collect()
    }
}

/// Largest relative defect of `∫p(s,x,z)p(t,z,y)m̃(dz) = p(s+t,x,y)` over
/// pairs drawn from `indices` (every `stride`-th).
pub fn chapman_kolmogorov_defect(
    a: &KernelTable,
    b: &KernelTable,
    ab: &KernelTable,
    indices: &[usize],
    stride: usize,
) -> f64 {
    let n = a.len();
    let picked: Vec<usize> = indices.iter().copied().step_by(stride.max(1)).collect();
    let mut worst: f64 = 0.0;
    for &i in &picked {
        for &j in &picked {
            let lhs: f64 = (0..n).map(|k| a.get(i, k) * b.get(k, j) * a.weights[k]).sum();
            let rhs = ab.get(i, j);
            worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1e-300));
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoincareCase {
    pub t: f64,
    pub label: String,
    /// `‖P^h_t φ‖ / ‖φ‖`.
    pub ratio: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoincareReport {
    pub gap: f64,
    pub slack: f64,
    pub cases: Vec<PoincareCase>,
    pub passes: bool,
}

fn center(table: &KernelTable, g: &[f64]) -> Vec<f64> {
    let total: f64 = table.weights.iter().sum();
    let mean = table.mean(g) / total;
    g.iter().map(|v| v - mean).collect()
}

fn random_vectors(n: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = LabRng::seed_from_u64(seed);
    (0..count).map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).collect()
}

/// Largest deviation of the table's constant and mode vectors from an
/// orthonormal system under the table quadrature.
fn orthonormality_defect(table: &KernelTable) -> f64 {
    let total: f64 = table.weights.iter().sum();
    let mut basis = vec![vec![1.0 / total.sqrt(); table.len()]];
    basis.extend(table.modes.iter().cloned());
    let mut worst: f64 = 0.0;
    for (i, a) in basis.iter().enumerate() {
        for b in &basis[..=i] {
            let ip: f64 = a.iter().zip(b).zip(&table.weights).map(|((a, b), w)| a * b * w).sum();
            let target = if std::ptr::eq(a, b) { 1.0 } else { 0.0 };
            worst = worst.max((ip - target).abs());
        }
    }
    worst
}

/// `‖P^h_t φ‖ ≤ e^{−λ_h t}‖φ‖` for centred `φ`: the first five non-constant
/// modes, five seeded random vectors and the zero vector.
///
/// Closed-form tables use a slack of `1e-9`. Grid eigenbasis tables add the
/// measured orthonormality defect of their modes on the table nodes, since the
/// first mode meets the bound with equality and the coarse quadrature cannot
/// resolve it more finely than that.
pub fn check_poincare(source: &KernelSource, times: &[f64], nodes: usize, seed: u64) -> Result<PoincareReport> {
    let gap = source.gap();
    let mut slack: f64 = 1e-9;
    let mut cases = Vec::new();
    for &t in times {
        let table = kernel_table(source, t, nodes)?;
        if let KernelSource::Eigenbasis(_) = source {
            slack = slack.max(1e-9 + orthonormality_defect(&table));
        }
        let bound = (-gap * t).exp();
        let mut tests: Vec<(String, Vec<f64>)> =
            table.modes.iter().enumerate().map(|(k, m)| (format!("mode {}", k + 1), m.clone())).collect();
        for (k, v) in random_vectors(table.len(), 5, seed).into_iter().enumerate() {
            tests.push((format!("random {}", k + 1), v));
        }
        tests.push(("constant".into(), vec![1.0; table.len()]));
        for (label, phi) in tests {
            let phi = center(&table, &phi);
            let norm = table.norm(&phi);
            let out = table.norm(&table.apply(&phi));
            let (ratio, holds) = if norm < 1e-12 {
                (0.0, out <= slack)
            } else {
                let r = out / norm;
                (r, r <= bound + slack)
            };
            cases.push(PoincareCase { t, label, ratio, bound, holds });
        }
    }
    let passes = cases.iter().all(|c| c.holds);
    Ok(PoincareReport { gap, slack, cases, passes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Finiteness {
    Finite,
    Infinite,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionWReport {
    pub t0: f64,
    /// Quadrature of `∫ ã_{t₀} dm̃` over the table window.
    pub value: f64,
    /// Bound on what the window misses.
    pub tail_bound: f64,
    /// Exact trace when a closed form exists.
    pub closed_form: Option<f64>,
    pub verdict: Finiteness,
    pub diagnostic: String,
}

/// Trace condition `∫ p^h(t₀, y, y) m̃(dy) < ∞`.
pub fn check_condition_w(source: &KernelSource, t0: f64) -> Result<ConditionWReport> {
    if !(t0 > 0.0) {
        return Err(Error::Precondition(format!("t0 must be positive, got {t0}")));
    }
    if t0 < MIN_RESOLVED_TIME {
        let probe: Vec<String> = [1.0, 2.0, 4.0]
            .iter()
            .map(|m| {
                let t = m * MIN_RESOLVED_TIME;
                format!("t = {t}: {:.6e}", trace_estimate(source, t).map(|v| v.0).unwrap_or(f64::NAN))
            })
            .collect();
        return Ok(ConditionWReport {
            t0,
            value: f64::NAN,
            tail_bound: f64::NAN,
            closed_form: None,
            verdict: Finiteness::Undetermined,
            diagnostic: format!("t0 below the resolved range; the trace grows as t decreases ({})", probe.join(", ")),
        });
    }
    let (value, tail_bound, closed_form) = trace_estimate(source, t0)?;
    let verdict = if value.is_finite() && tail_bound.is_finite() {
        Finiteness::Finite
    } else if value.is_infinite() || tail_bound.is_infinite() {
        Finiteness::Infinite
    } else {
        Finiteness::Undetermined
    };
    Ok(ConditionWReport {
        t0,
        value,
        tail_bound,
        closed_form,
        verdict,
        diagnostic: "trace quadrature with truncation bound".into(),
    })
}

fn trace_estimate(source: &KernelSource, t: f64) -> Result<(f64, f64, Option<f64>)> {
    match source {
        KernelSource::Mehler { alpha, dim } => {
            let a = *alpha;
            let r = 8.0 / a.sqrt();
            let tau = (0.5 * a * t).tanh();
            let c = (-(-2.0 * a * t).exp_m1()).powf(-0.5);
            let integrand = |y: f64| mehler_1d(t, y, y, a) * (a / PI).sqrt() * (-a * y * y).exp();
            let one = quad::integrate(integrand, -r, r, 256);
            let tail = c * libm::erfc(r * (a * tau).sqrt()) / tau.sqrt();
            let d = *dim as i32;
            let exact = 1.0 / (-(-a * t).exp_m1());
            // The d-dimensional trace factorises.
            let value = one.powi(d);
            let tail_d = (one + tail).powi(d) - value;
            Ok((value, tail_d, Some(exact.powi(d))))
        }
        KernelSource::Sine { length, sigma } => {
            let k = PI / length;
            let kappa = sigma * sigma * k * k * t / 2.0;
            let terms = KernelSource::sine_terms(kappa);
            let value = quad::integrate(
                |y| {
                    let w = 2.0 / length * (k * y).sin().powi(2);
                    if w == 0.0 {
                        0.0
                    } else {
                        sine_kernel(k * y, k * y, kappa, terms) * w
                    }
                },
                0.0,
                *length,
                64,
            );
            let exact: f64 = (1..=terms).map(|n| (-((n * n) as f64 - 1.0) * kappa).exp()).sum();
            let tail = gaussian_series_tail(terms, kappa) * kappa.exp();
            Ok((value, tail, Some(exact)))
        }
        KernelSource::Eigenbasis(b) => {
            let needed = b.modes_needed(t).min(b.values.len());
            let value: f64 = (0..needed).map(|k| (-(b.values[k] - b.values[0]) * t).exp()).sum();
            let rest = (b.dimension - needed) as f64;
            let next = if needed < b.values.len() { b.values[needed] } else { b.next_value };
            let tail = rest * (-(next - b.values[0]) * t).exp();
            Ok((value, tail, None))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AiuVerdict {
    Holds,
    Fails,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSup {
    /// Distance to the boundary (bounded domains) or window half-width.
    pub window: f64,
    pub sup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub t: f64,
    pub pairs: usize,
    /// Largest `|p^h(t,x,y) − 1| / (e^{−λ_h(t−t₁)} sqrt(ã(x)ã(y)))`.
    pub worst_ratio: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AiuReport {
    pub t1: f64,
    pub gap: f64,
    pub windows: Vec<WindowSup>,
    pub sup: f64,
    pub verdict: AiuVerdict,
    pub bound_checks: Vec<BoundCheck>,
    /// `|p^h(t,x,y) − 1| ≤ c₁ e^{−λ_h t}` with `c₁ = e^{λ_h t₁} sup ã_{t₁}`,
    /// checked only when the sup is finite.
    pub chain: Option<Vec<BoundCheck>>,
}

fn sup_on_window(source: &KernelSource, t: f64, lo: f64, hi: f64) -> Result<f64> {
    let mut best: f64 = 0.0;
    match source {
        KernelSource::Eigenbasis(b) => {
            for &x in b.grid.nodes.iter().filter(|&&x| x >= lo && x <= hi) {
                best = best.max(source.diagonal(t, x)?);
            }
        }
        _ => {
            let samples = 400;
            for i in 0..=samples {
                let x = lo + (hi - lo) * i as f64 / samples as f64;
                best = best.max(source.diagonal(t, x)?);
            }
        }
    }
    Ok(best)
}

/// Ultracontractivity at one time, `sup_y p^h(t₁, y, y) < ∞`, judged from
/// the sup over windows exhausting the state space, together with the
/// pairwise bound `|p^h(t,x,y) − 1| ≤ e^{−λ_h(t−t₁)} sqrt(ã_{t₁}(x)ã_{t₁}(y))`
/// at `t ∈ {t₁+0.5, t₁+1, t₁+3}`.
pub fn check_condition_aiu(source: &KernelSource, t1: f64, nodes: usize) -> Result<AiuReport> {
    if !(t1 > 0.0) {
        return Err(Error::Precondition(format!("t1 must be positive, got {t1}")));
    }
    let gap = source.gap();
    let mut windows = Vec::new();
    match source {
        KernelSource::Mehler { alpha, .. } => {
            for r in [1.0, 2.0, 4.0, 8.0] {
                let r = r / alpha.sqrt();
                windows.push(WindowSup { window: r, sup: sup_on_window(source, t1, -r, r)? });
            }
        }
        KernelSource::Sine { length, .. } => {
            for m in [8.0, 32.0, 128.0, 512.0] {
                let d = length / m;
                windows.push(WindowSup { window: d, sup: sup_on_window(source, t1, d, length - d)? });
            }
        }
        KernelSource::Eigenbasis(b) => {
            let width = b.grid.hi - b.grid.lo;
            let bounded = b.grid.boundary == Boundary::Dirichlet;
            for frac in [0.25, 0.125, 1.0 / 32.0, 0.0] {
                let d = (frac * width).max(b.grid.dx);
                let (lo, hi) = if bounded {
                    (b.grid.lo + d, b.grid.hi - d)
                } else {
                    let mid = 0.5 * (b.grid.lo + b.grid.hi);
                    let half = 0.5 * width - d;
                    (mid - half, mid + half)
                };
                windows.push(WindowSup { window: d, sup: sup_on_window(source, t1, lo, hi)? });
            }
        }
    }
    let s: Vec<f64> = windows.iter().map(|w| w.sup).collect();
    let k = s.len();
    let growing = s[k - 1] > 2.0 * s[k - 2] && s[k - 2] > 2.0 * s[k - 3];
    let settled = (s[k - 1] - s[k - 2]).abs() <= 0.05 * s[k - 2];
    let verdict = if !s[k - 1].is_finite() || growing {
        AiuVerdict::Fails
    } else if settled {
        AiuVerdict::Holds
    } else {
        AiuVerdict::Undetermined
    };
    let sup = s[k - 1];

    let base = kernel_table(source, t1, nodes)?;
    let mut bound_checks = Vec::new();
    let mut chain_checks = Vec::new();
    for dt in [0.5, 1.0, 3.0] {
        let t = t1 + dt;
        let table = kernel_table(source, t, nodes)?;
        let n = table.len();
        let decay = (-gap * dt).exp();
        let c1 = (gap * t1).exp() * sup;
        let mut worst: f64 = 0.0;
        let mut worst_chain: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let lhs = (table.get(i, j) - 1.0).abs();
                let rhs = decay * (base.diag[i] * base.diag[j]).sqrt();
                worst = worst.max(lhs / rhs);
                worst_chain = worst_chain.max(lhs / (c1 * (-gap * t).exp()));
            }
        }
        bound_checks.push(BoundCheck { t, pairs: n * n, worst_ratio: worst, holds: worst <= 1.0 + 1e-9 });
        chain_checks.push(BoundCheck { t, pairs: n * n, worst_ratio: worst_chain, holds: worst_chain <= 1.0 + 1e-9 });
    }
    let chain = (verdict == AiuVerdict::Holds).then_some(chain_checks);
    Ok(AiuReport { t1, gap, windows, sup, verdict, bound_checks, chain })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub s: f64,
    pub cases: Vec<BoundCheck>,
    pub passes: bool,
}

/// `|P^h_t g(x) − ⟨g,1⟩_{m̃}| ≤ e^{−λ_h(t−s)} ã_{2s}(x)^{1/2} ‖g‖_{L²(m̃)}` for
/// the table modes, seeded random vectors and an indicator.
pub fn check_decay_bound(source: &KernelSource, s: f64, times: &[f64], nodes: usize, seed: u64) -> Result<DecayReport> {
    let gap = source.gap();
    let doubled = kernel_table(source, 2.0 * s, nodes)?;
    let mut cases = Vec::new();
    for &t in times {
        if !(t > s) {
            return Err(Error::Precondition(format!("need t > s, got t = {t}, s = {s}")));
        }
        let table = kernel_table(source, t, nodes)?;
        let n = table.len();
        let mut tests: Vec<Vec<f64>> = table.modes.clone();
        tests.extend(random_vectors(n, 5, seed));
        tests.push((0..n).map(|i| if i < n / 3 { 1.0 } else { 0.0 }).collect());
        let decay = (-gap * (t - s)).exp();
        let mut worst: f64 = 0.0;
        for g in &tests {
            let mean = table.mean(g);
            let norm = table.norm(g);
            let pg = table.apply(g);
            for (p, d) in pg.iter().zip(&doubled.diag).take(n) {
                let lhs = (p - mean).abs();
                let rhs = decay * d.sqrt() * norm;
                worst = worst.max(lhs / rhs);
            }
        }
        cases.push(BoundCheck { t, pairs: n * tests.len(), worst_ratio: worst, holds: worst <= 1.0 + 1e-9 });
    }
    let passes = cases.iter().all(|c| c.holds);
    Ok(DecayReport { s, cases, passes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RichardsonReport {
    pub nodes: Vec<usize>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    /// `(λ(N) − λ(2N)) / (λ(2N) − λ(4N))` for `λ₁` and `λ₂`.
    pub ratio1: f64,
    pub ratio2: f64,
}

/// Grid refinement study with the spacing halved twice.
pub fn richardson_study(model: &ModelSpec, opts: &GridOptions) -> Result<RichardsonReport> {
    let mut nodes = Vec::new();
    let mut l1 = Vec::new();
    let mut l2 = Vec::new();
    for k in 0..3 {
        let n = (opts.n + 1) * (1 << k) - 1;
        let grid = grid_for(model, &GridOptions { n, ..*opts })?;
        let form = discretize(model, &grid)?;
        nodes.push(n);
        l1.push(form.eigenvalue(0));
        l2.push(form.eigenvalue(1));
    }
    let ratio = |v: &[f64]| (v[0] - v[1]) / (v[1] - v[2]);
    Ok(RichardsonReport { ratio1: ratio(&l1), ratio2: ratio(&l2), nodes, lambda1: l1, lambda2: l2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlogLReport {
    /// `∫ h² log⁺h dm`.
    pub first: f64,
    /// `∫ Σ k p_k h² log⁺(k h) dμ`.
    pub second: f64,
    pub value: f64,
    pub tail_bound: f64,
    pub verdict: Finiteness,
}

#[inline]
fn log_plus(v: f64) -> f64 {
    if v > 1.0 {
        v.ln()
    } else {
        0.0
    }
}

/// The L log L integral with quadrature and an explicit tail majorant.
pub fn llogl_value(model: &ModelSpec, spectral: &SpectralTriple) -> Result<LlogLReport> {
    require_one_dimensional(model)?;
    let h = &spectral.h;
    let m = |x: f64| log_reference_density(model, x).exp();
    let beta = |x: f64| model.rate.function.eval(x);
    let law = &model.offspring;
    let weighted = |x: f64, hx: f64| -> f64 {
        law.masses_at(x).iter().enumerate().map(|(k, p)| k as f64 * p * hx * hx * log_plus(k as f64 * hx)).sum()
    };
    let first_integrand = |x: f64| {
        let hx = h.eval(x);
        hx * hx * log_plus(hx) * m(x)
    };
    let second_integrand = |x: f64| weighted(x, h.eval(x)) * beta(x) * m(x);
    let mut breaks: Vec<f64> = law.breaks().to_vec();
    if let Some(pm) = model.rate.point_mass {
        breaks.push(pm.at);
    }
    let (lo, hi, tail_bound) = match (model.motion, h) {
        (Motion::IntervalBm { length, .. }, _) => (0.0, length, 0.0),
        (Motion::Ou { .. }, GroundState::Grid(g)) => (g.lo, g.hi, 0.0),
        (Motion::Ou { c, sigma, .. }, _) => {
            let k = c / (sigma * sigma);
            let r = 12.0 / k.sqrt();
            // Majorant beyond ±R: |log h| and log k bounded by their values
            // at the evaluation point, integrated over a long stretch.
            let qmax = law.max_count() as f64;
            let majorant = |x: f64| {
                let hx = h.eval(x);
                let lh = hx.ln().abs();
                hx * hx * m(x) * (lh + qmax * (qmax.ln() + lh) * beta(x))
            };
            let far = r + 10.0 / k.sqrt();
            let tail = quad::integrate(majorant, r, far, 256) + quad::integrate(majorant, -far, -r, 256);
            (-r, r, tail)
        }
    };
    let panels = 64;
    let first = quad::integrate_with_breaks(first_integrand, lo, hi, &breaks, panels);
    let mut second = quad::integrate_with_breaks(second_integrand, lo, hi, &breaks, panels);
    if let Some(pm) = model.rate.point_mass {
        second += pm.weight * weighted(pm.at, h.eval(pm.at));
    }
    let value = first + second;
    let verdict = if value.is_finite() && tail_bound.is_finite() {
        Finiteness::Finite
    } else if value.is_infinite() || tail_bound.is_infinite() {
        Finiteness::Infinite
    } else {
        Finiteness::Undetermined
    };
    Ok(LlogLReport { first, second, value, tail_bound, verdict })
}

/// `P^{(Q−1)μ}_t f(x) = e^{−λ₁t} h(x) ∫ p^h(t,x,y) f(y) h(y) m(dy)`.
pub fn many_to_one_quadrature(
    source: &KernelSource,
    spectral: &SpectralTriple,
    f: &TestFunction,
    t: f64,
    x: f64,
) -> Result<f64> {
    let h = &spectral.h;
    if !(t >= 0.0) {
        return Err(Error::Precondition(format!("time must be non-negative, got {t}")));
    }
    if t == 0.0 {
        return Ok(f.eval(x, h));
    }
    let breaks = f.breakpoints();
    match source {
        KernelSource::Mehler { alpha, dim } => {
            if *dim != 1 {
                return Err(Error::Unsupported("many-to-one quadrature is one-dimensional".into()));
            }
            let a = *alpha;
            let mean = x * (-a * t).exp();
            let var = -(-2.0 * a * t).exp_m1() / (2.0 * a);
            let sd = var.sqrt();
            let g = |y: f64| {
                let dens = (-(y - mean) * (y - mean) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
                f.eval(y, h) / h.eval(y) * dens
            };
            let e = quad::integrate_with_breaks(g, mean - 14.0 * sd, mean + 14.0 * sd, &breaks, 64);
            Ok((-spectral.lambda1 * t).exp() * h.eval(x) * e)
        }
        KernelSource::Sine { length, sigma } => {
            if !(x > 0.0 && x < *length) {
                return Ok(0.0);
            }
            let k = PI / length;
            let kappa = sigma * sigma * k * k * t / 2.0;
            let terms = KernelSource::sine_terms(kappa).max(64);
            let mut s = 0.0;
            for n in 1..=terms {
                let nf = n as f64;
                let coef =
                    quad::integrate_with_breaks(|y| (nf * k * y).sin() * f.eval(y, h), 0.0, *length, &breaks, 32);
                s += (-(nf * nf - 1.0) * kappa).exp() * 2.0 / length * (nf * k * x).sin() * coef;
            }
            Ok((-spectral.lambda1 * t).exp() * s)
        }
        KernelSource::Eigenbasis(b) => {
            let needed = b.modes_needed(t);
            if needed > b.values.len() {
                return Err(Error::InsufficientModes { required: needed, available: b.values.len() });
            }
            let mut s = 0.0;
            for k in 0..needed {
                let coef: f64 = b
                    .grid
                    .nodes
                    .iter()
                    .zip(&b.grid.weights)
                    .zip(&b.vectors[k])
                    .map(|((&y, w), u)| u * f.eval(y, h) * w)
                    .sum();
                s += (-b.values[k] * t).exp() * b.mode_at(k, x) * coef;
            }
            Ok(s)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{catalog_interval, catalog_ou, BranchingRate, OffspringLaw, PointMass, RateFunction};

    fn interval(beta: f64) -> ModelSpec {
        catalog_interval(beta, PI, None).unwrap().0
    }

    #[test]
    fn flat_model_gives_discrete_laplacian() {
        let model = ModelSpec {
            motion: Motion::IntervalBm { length: 1.0, sigma: 1.0 },
            rate: BranchingRate::function(RateFunction::Constant { a: 0.0 }),
            offspring: OffspringLaw::binary(),
            dt: 1e-3,
        };
        let grid = grid_for(&model, &GridOptions { n: 9, ..Default::default() }).unwrap();
        let form = discretize(&model, &grid).unwrap();
        let scale = 0.5 / (grid.dx * grid.dx);
        for d in &form.diag {
            assert!((d - 2.0 * scale).abs() < 1e-9 * scale);
        }
        for o in &form.off {
            assert!((o + scale).abs() < 1e-9 * scale);
        }
    }

    #[test]
    fn interval_spectrum() {
        let model = interval(1.0);
        let triple = grid_spectral_triple(&model, &GridOptions { n: 2000, ..Default::default() }).unwrap();
        assert!((triple.lambda1 + 0.5).abs() < 2e-3);
        assert!((triple.lambda2 - 1.0).abs() < 5e-3);
        assert!((triple.gap - 1.5).abs() < 5e-3);
        assert!((triple.h_norm_check - 1.0).abs() < 1e-10);
        let exact = GroundState::Sine { length: PI };
        for i in 1..100 {
            let x = PI * i as f64 / 100.0;
            assert!((triple.h(x) - exact.eval(x)).abs() < 1e-3);
        }
    }

    #[test]
    fn shift_moves_spectrum_rigidly() {
        let model = interval(1.0);
        let grid = grid_for(&model, &GridOptions { n: 300, ..Default::default() }).unwrap();
        let form = discretize(&model, &grid).unwrap();
        let shifted = form.shifted(0.75);
        let (a1, a2) = lowest_two_eigenpairs(&form).unwrap();
        let (b1, b2) = lowest_two_eigenpairs(&shifted).unwrap();
        assert!((b1.value - (a1.value - 0.75)).abs() < 1e-10);
        assert!((b2.value - (a2.value - 0.75)).abs() < 1e-10);
        for (u, v) in a1.vector.iter().zip(&b1.vector) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn eigenvectors_are_m_orthonormal() {
        let (model, _) = catalog_ou(2.0, 1.5, 0.1, 1).unwrap();
        let grid = grid_for(&model, &GridOptions { n: 500, truncation: Some(6.0), modes: 4 }).unwrap();
        let form = discretize(&model, &grid).unwrap();
        let pairs = eigenpairs(&form, 4).unwrap();
        for a in &pairs {
            for b in &pairs {
                let ip: f64 = a.vector.iter().zip(&b.vector).zip(&grid.weights).map(|((x, y), w)| x * y * w).sum();
                let expect = if std::ptr::eq(a, b) { 1.0 } else { 0.0 };
                assert!((ip - expect).abs() < 1e-9, "{ip}");
            }
        }
        for p in &pairs {
            assert!((form.rayleigh(&p.vector) - p.value).abs() < 1e-9);
        }
    }

    #[test]
    fn second_order_convergence() {
        let model = interval(1.0);
        let rep = richardson_study(&model, &GridOptions { n: 99, ..Default::default() }).unwrap();
        assert!((rep.ratio1 - 4.0).abs() < 0.8, "{rep:?}");
        assert!((rep.ratio2 - 4.0).abs() < 0.8, "{rep:?}");
    }

    #[test]
    fn sine_kernel_value_and_trace() {
        let src = KernelSource::Sine { length: PI, sigma: 1.0 };
        let v = src.density_h(1.0, PI / 2.0, PI / 2.0).unwrap();
        let series = 1.0 + (-4.0f64).exp() + (-12.0f64).exp() + (-24.0f64).exp();
        assert!((v - series).abs() < 1e-12);
        assert!((v - 1.018322).abs() < 1e-6);
        let w = check_condition_w(&src, 1.0).unwrap();
        let trace: f64 = (1..20).map(|n| (-((n * n) as f64 - 1.0) / 2.0).exp()).sum();
        assert!((w.value - trace).abs() < 1e-10, "{w:?}");
        assert_eq!(w.verdict, Finiteness::Finite);
    }

    #[test]
    fn mehler_trace_matches_closed_form() {
        let src = KernelSource::Mehler { alpha: 1.0, dim: 1 };
        let w = check_condition_w(&src, 1.0).unwrap();
        let exact = 1.0 / (1.0 - (-1.0f64).exp());
        assert!((w.value - exact).abs() < 1e-9, "{w:?}");
        assert!((w.closed_form.unwrap() - 1.581977).abs() < 1e-6);
        let small = check_condition_w(&src, 1e-4).unwrap();
        assert_eq!(small.verdict, Finiteness::Undetermined);
    }

    #[test]
    fn tables_are_consistent() {
        for (src, bounded) in [
            (KernelSource::Sine { length: PI, sigma: 1.0 }, true),
            (KernelSource::Mehler { alpha: 1.0, dim: 1 }, false),
        ] {
            let a = kernel_table(&src, 0.5, 201).unwrap();
            let ab = kernel_table(&src, 1.0, 201).unwrap();
            assert!(a.symmetry_defect() < 1e-12);
            assert!(a.row_defect() < 1e-6, "{}", a.row_defect());
            let inner = a.inner_indices(bounded);
            assert!(chapman_kolmogorov_defect(&a, &a, &ab, &inner, 10) < 1e-6);
            let far = kernel_table(&src, 30.0, 101).unwrap();
            assert!(far.values.iter().all(|v| (v - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn poincare_and_decay_hold() {
        for src in [KernelSource::Sine { length: PI, sigma: 1.0 }, KernelSource::Mehler { alpha: 1.0, dim: 1 }] {
            let rep = check_poincare(&src, &[0.5, 1.0, 2.0], 201, 7).unwrap();
            assert!(rep.passes, "{rep:?}");
            // The first mode saturates the inequality.
            let first = rep.cases.iter().find(|c| c.label == "mode 1" && c.t == 1.0).unwrap();
            assert!((first.ratio - first.bound).abs() < 1e-6, "{first:?}");
            let decay = check_decay_bound(&src, 0.5, &[1.0, 2.0], 201, 9).unwrap();
            assert!(decay.passes, "{decay:?}");
        }
    }

    #[test]
    fn aiu_split_between_models() {
        let sine = check_condition_aiu(&KernelSource::Sine { length: PI, sigma: 1.0 }, 0.5, 201).unwrap();
        assert_eq!(sine.verdict, AiuVerdict::Holds, "{sine:?}");
        let limit: f64 = (1..30).map(|n| ((n * n) as f64) * (-((n * n) as f64 - 1.0) * 0.25).exp()).sum();
        assert!((sine.sup - limit).abs() < 0.05 * limit);
        assert!(sine.bound_checks.iter().all(|b| b.holds));
        assert!(sine.chain.unwrap().iter().all(|b| b.holds));
        let ou = check_condition_aiu(&KernelSource::Mehler { alpha: 1.0, dim: 1 }, 0.5, 201).unwrap();
        assert_eq!(ou.verdict, AiuVerdict::Fails);
        assert!(ou.bound_checks.iter().all(|b| b.holds));
        assert!(ou.chain.is_none());
    }

    #[test]
    fn llogl_cases() {
        let (model, triple) = catalog_interval(1.0, PI, None).unwrap();
        let rep = llogl_value(&model, &triple).unwrap();
        assert_eq!(rep.first, 0.0);
        assert!(rep.second > 0.0 && rep.verdict == Finiteness::Finite);
        let (model, triple) = catalog_ou(2.0, 1.5, 0.1, 1).unwrap();
        let rep = llogl_value(&model, &triple).unwrap();
        assert_eq!(rep.verdict, Finiteness::Finite);
        assert!(rep.tail_bound < 1e-12);
        // h ≤ 1/2 everywhere, so 2h ≤ 1 and both terms vanish.
        let (model, mut triple) = catalog_interval(1.0, PI, None).unwrap();
        if let GroundState::Sine { .. } = triple.h {
            let nodes: Vec<f64> = (1..100).map(|i| PI * i as f64 / 100.0).collect();
            let values = nodes.iter().map(|x| 0.4 * x.sin()).collect();
            triple.h = GroundState::Grid(GridFunction { lo: 0.0, hi: PI, nodes, values });
        }
        let rep = llogl_value(&model, &triple).unwrap();
        assert_eq!(rep.value, 0.0);
    }

    #[test]
    fn many_to_one_sources_agree() {
        let (model, triple) = catalog_interval(1.0, PI, None).unwrap();
        let sine = KernelSource::Sine { length: PI, sigma: 1.0 };
        let one = many_to_one_quadrature(&sine, &triple, &TestFunction::One, 1.0, PI / 2.0).unwrap();
        let expect = 1.0f64.exp() * crate::motion::interval_survival(1.0, PI / 2.0, PI, 1.0);
        assert!((one - expect).abs() < 1e-9);
        assert!((one - 2.086).abs() < 1e-3);
        let hx = many_to_one_quadrature(&sine, &triple, &TestFunction::H, 0.7, 1.0).unwrap();
        assert!((hx - (0.5f64 * 0.7).exp() * triple.h(1.0)).abs() < 1e-10);
        assert_eq!(many_to_one_quadrature(&sine, &triple, &TestFunction::One, 0.0, 1.0).unwrap(), 1.0);
        let grid = KernelSource::eigenbasis(&model, &GridOptions { n: 1000, truncation: None, modes: 30 }).unwrap();
        let g = many_to_one_quadrature(&grid, &triple, &TestFunction::One, 1.0, PI / 2.0).unwrap();
        assert!((g - one).abs() < 1e-3, "{g} vs {one}");
    }

    #[test]
    fn point_mass_matches_matching_condition() {
        // Shooting oracle: on each side of π/2 the ground state solves
        // ½u'' + u = κu with u(0) = 0; the kink at π/2 carries the mass q.
        let q = 1.0;
        let pm = PointMass { at: PI / 2.0, weight: q };
        let (_, triple) = catalog_interval(1.0, PI, Some(pm)).unwrap();
        let mismatch = |s: f64| s / (s * PI / 2.0).tanh() - q;
        let (mut lo, mut hi) = (1e-6, 10.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mismatch(lo) * mismatch(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let s = 0.5 * (lo + hi);
        let lambda1 = -1.0 - 0.5 * s * s;
        assert!((triple.lambda1 - lambda1).abs() < 5e-3, "{} vs {lambda1}", triple.lambda1);
    }
}
