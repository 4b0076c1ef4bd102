//! Transition sampling, transition densities and additive functionals for
//! the catalog motions and their h-transforms.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PointMass, RateFunction};
use crate::quad;

/// Mean and variance of the OU transition `x → X_dt` for the generator
/// `½σ²Δ − c x·∇`.
#[inline]
pub fn ou_transition_moments(x: f64, dt: f64, c: f64, sigma: f64) -> (f64, f64) {
    let decay = (-c * dt).exp();
    // (1 − e^{−2c dt}) / (2c), written to stay accurate for small c·dt
    let var = sigma * sigma * (-(-2.0 * c * dt).exp_m1()) / (2.0 * c);
    (x * decay, var)
}

/// Exact OU transition sample.
pub fn ou_step<R: Rng + ?Sized>(x: f64, dt: f64, c: f64, sigma: f64, rng: &mut R) -> Result<f64> {
    if !(dt >= 0.0) {
        return Err(Error::Precondition(format!("time step must be non-negative, got {dt}")));
    }
    if dt == 0.0 {
        return Ok(x);
    }
    let (mean, var) = ou_transition_moments(x, dt, c, sigma);
    let z: f64 = rng.sample(StandardNormal);
    Ok(mean + var.sqrt() * z)
}

/// Exact transition of the h-transformed OU motion, generator
/// `½Δ − αx·∇`.
pub fn ou_h_step<R: Rng + ?Sized>(x: f64, dt: f64, alpha: f64, rng: &mut R) -> Result<f64> {
    ou_step(x, dt, alpha, 1.0, rng)
}

/// Mean and variance at time `s ∈ [0, dt]` of the OU bridge from `x0` to
/// `x1` over `[0, dt]`.
#[inline]
pub fn ou_bridge_moments(x0: f64, x1: f64, dt: f64, s: f64, c: f64, sigma: f64) -> (f64, f64) {
    let total = (c * dt).sinh();
    let a = (c * (dt - s)).sinh();
    let b = (c * s).sinh();
    let mean = (x0 * a + x1 * b) / total;
    let var = sigma * sigma * a * b / (c * total);
    (mean, var.max(0.0))
}

#[inline]
pub fn bm_bridge_moments(x0: f64, x1: f64, dt: f64, s: f64, sigma: f64) -> (f64, f64) {
    let frac = s / dt;
    (x0 + frac * (x1 - x0), (sigma * sigma * s * (1.0 - frac)).max(0.0))
}

const BRIDGE_NODES: [f64; 4] =
    [-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
const BRIDGE_WEIGHTS: [f64; 4] =
    [0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9];

/// Local dynamics used to condition an additive functional on the end
/// points of a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepLaw {
    Ou { c: f64, sigma: f64 },
    Brownian { sigma: f64 },
}

impl StepLaw {
    pub fn bridge_moments(&self, x0: f64, x1: f64, dt: f64, s: f64) -> (f64, f64) {
        match *self {
            StepLaw::Ou { c, sigma } => ou_bridge_moments(x0, x1, dt, s, c, sigma),
            StepLaw::Brownian { sigma } => bm_bridge_moments(x0, x1, dt, s, sigma),
        }
    }

    pub fn bridge_sample<R: Rng + ?Sized>(&self, x0: f64, x1: f64, dt: f64, s: f64, rng: &mut R) -> f64 {
        let (m, v) = self.bridge_moments(x0, x1, dt, s);
        let z: f64 = rng.sample(StandardNormal);
        m + v.sqrt() * z
    }

    /// Position of a fission at time `s` inside a step: the bridge point
    /// tilted by the rate density and conditioned to lie in `(lo, hi)`.
    /// Sampled by rejection from the bridge truncated at 8 standard
    /// deviations; falls back to linear interpolation if every proposal is
    /// rejected.
    #[allow(clippy::too_many_arguments)]
    pub fn fission_point<R: Rng + ?Sized>(
        &self,
        x0: f64,
        x1: f64,
        dt: f64,
        s: f64,
        rate: &RateFunction,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> f64 {
        let (m, v) = self.bridge_moments(x0, x1, dt, s);
        let sd = v.sqrt();
        let envelope = rate.eval(m.abs() + 8.0 * sd).max(rate.eval(m));
        for _ in 0..256 {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() > 8.0 {
                continue;
            }
            let y = m + sd * z;
            if !(y > lo && y < hi) {
                continue;
            }
            if envelope > 0.0 {
                let u: f64 = rng.random();
                if u * envelope > rate.eval(y) {
                    continue;
                }
            }
            return y;
        }
        x0 + (x1 - x0) * (s / dt)
    }
}

/// `E[∫₀^dt β(X_s) ds | X_0 = x0, X_dt = x1]` under the bridge of `law`.
pub fn rate_integral_given_ends(law: StepLaw, rate: &RateFunction, x0: f64, x1: f64, dt: f64) -> f64 {
    match *rate {
        RateFunction::Constant { a } => a * dt,
        RateFunction::Quadratic { b, a } => {
            let mut second_moment = 0.0;
            for (z, w) in BRIDGE_NODES.iter().zip(BRIDGE_WEIGHTS) {
                let s = 0.5 * dt * (1.0 + z);
                let (m, v) = law.bridge_moments(x0, x1, dt, s);
                second_moment += w * (m * m + v);
            }
            b * 0.5 * dt * second_moment + a * dt
        }
    }
}

/// `erfc(z) e^{z²}` for `z ≥ 0`.
fn erfcx(z: f64) -> f64 {
    if z < 25.0 {
        libm::erfc(z) * (z * z).exp()
    } else {
        // asymptotic series, relative error below 1e-12 at z = 25
        let inv2 = 1.0 / (2.0 * z * z);
        (1.0 - inv2 + 3.0 * inv2 * inv2 - 15.0 * inv2 * inv2 * inv2) / (z * PI.sqrt())
    }
}

/// Expected local time at `at` (occupation density with respect to Lebesgue
/// measure) accumulated by `σ·W` over `[0, dt]`, conditioned on going from
/// `x0` to `x1`.
///
/// For a standard Brownian bridge `P(L > l) = exp(−((D + l)² − Δ²)/(2dt))`
/// with `D = |x0 − a| + |x1 − a|` and `Δ = x1 − x0`.
pub fn bm_bridge_expected_local_time(x0: f64, x1: f64, dt: f64, at: f64, sigma: f64) -> f64 {
    if dt <= 0.0 {
        return 0.0;
    }
    let (u0, u1, a) = (x0 / sigma, x1 / sigma, at / sigma);
    let d = (u0 - a).abs() + (u1 - a).abs();
    let delta = u1 - u0;
    let z = d / (2.0 * dt).sqrt();
    let log_scale = (delta * delta - d * d) / (2.0 * dt);
    (2.0 * PI * dt).sqrt() * 0.5 * log_scale.exp() * erfcx(z) / sigma
}

/// Mehler transition density of the h-transformed OU motion with respect to
/// its invariant law `(α/π)^{d/2} e^{−α|y|²} dy`.
pub fn mehler_density_h(t: f64, x: &[f64], y: &[f64], alpha: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Precondition(format!("Mehler kernel needs t > 0, got {t}")));
    }
    if x.len() != y.len() {
        return Err(Error::Precondition("dimension mismatch".into()));
    }
    let d = x.len() as f64;
    let x2: f64 = x.iter().map(|v| v * v).sum();
    let y2: f64 = y.iter().map(|v| v * v).sum();
    let xy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let e = (alpha * t).exp();
    let denom = (2.0 * alpha * t).exp_m1();
    let prefactor = (-(-2.0 * alpha * t).exp_m1()).powf(-d / 2.0);
    Ok(prefactor * (-alpha / denom * (x2 + y2 - 2.0 * xy * e)).exp())
}

/// One-dimensional Mehler kernel.
#[inline]
pub fn mehler_1d(t: f64, x: f64, y: f64, alpha: f64) -> f64 {
    let e = (alpha * t).exp();
    let denom = (2.0 * alpha * t).exp_m1();
    let prefactor = (-(-2.0 * alpha * t).exp_m1()).powf(-0.5);
    prefactor * (-alpha / denom * (x * x + y * y - 2.0 * x * y * e)).exp()
}

/// A truncated series value together with a bound on the neglected tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesValue {
    pub value: f64,
    pub tail_bound: f64,
    pub terms: usize,
}

/// `Σ_{n > N} e^{−n² κ}` bounded by a geometric majorant.
pub fn gaussian_series_tail(n_terms: usize, kappa: f64) -> f64 {
    let n1 = (n_terms + 1) as f64;
    let first = (-n1 * n1 * kappa).exp();
    let ratio = (-(2.0 * n1 + 1.0) * kappa).exp();
    if ratio >= 1.0 {
        f64::INFINITY
    } else {
        first / (1.0 - ratio)
    }
}

/// Number of sine modes needed so that the tail bound of
/// [`interval_density`] stays below `tol`.
pub fn interval_terms_for(t: f64, beta: f64, length: f64, tol: f64) -> usize {
    let kappa = PI * PI * t / (2.0 * length * length);
    let scale = (beta * t).exp() * 2.0 / length;
    let mut n = 1;
    while scale * gaussian_series_tail(n, kappa) >= tol && n < 1_000_000 {
        n += 1;
    }
    n
}

/// Feynman-Kac density `p(t, x, y) = e^{βt} Σ_n e^{−λ_n t} φ_n(x) φ_n(y)` of
/// Brownian motion killed outside `(0, length)` with constant potential
/// `beta`, where `λ_n = (nπ/L)²/2` and `φ_n = sqrt(2/L) sin(nπx/L)`.
pub fn interval_density(t: f64, x: f64, y: f64, beta: f64, length: f64, n_terms: usize) -> Result<SeriesValue> {
    if !(t > 0.0) {
        return Err(Error::Precondition(format!("density needs t > 0, got {t}")));
    }
    for (what, v) in [("x", x), ("y", y)] {
        if !(v > 0.0 && v < length) {
            let _ = what;
            return Err(Error::OutOfDomain { what: "interval density argument", value: v });
        }
    }
    if n_terms == 0 {
        return Err(Error::Precondition("need at least one series term".into()));
    }
    let k = PI / length;
    let kappa = k * k * t / 2.0;
    let mut sum = 0.0;
    for n in 1..=n_terms {
        let nf = n as f64;
        sum += (-nf * nf * kappa).exp() * ((nf * k * x).sin() * (nf * k * y).sin());
    }
    let scale = (beta * t).exp() * 2.0 / length;
    Ok(SeriesValue { value: scale * sum, tail_bound: scale * gaussian_series_tail(n_terms, kappa), terms: n_terms })
}

/// [`interval_density`] with the truncation chosen so the tail bound is
/// below `1e-10`.
pub fn interval_density_auto(t: f64, x: f64, y: f64, beta: f64, length: f64) -> Result<SeriesValue> {
    let n = interval_terms_for(t, beta, length, 1e-10);
    interval_density(t, x, y, beta, length, n)
}

/// Probability that a Brownian bridge with diffusion `σ` over `dt` between
/// points at distances `d0` and `d1` from a boundary touches it.
#[inline]
pub fn crossing_probability(d0: f64, d1: f64, dt: f64, sigma: f64) -> f64 {
    (-2.0 * d0 * d1 / (sigma * sigma * dt)).exp()
}

/// Gaussian step of `σ·W` on `(0, length)` with absorption. Returns `None`
/// for the cemetery state.
///
/// When the end point stays inside, the step is still absorbed with the
/// Brownian-bridge crossing probability for the boundary nearest to the
/// path, provided that boundary is within `6σ sqrt(dt)`.
pub fn interval_step_with_absorption<R: Rng + ?Sized>(
    x: f64,
    dt: f64,
    length: f64,
    sigma: f64,
    rng: &mut R,
) -> Result<Option<f64>> {
    if !(x > 0.0 && x < length) {
        return Err(Error::OutOfDomain { what: "interval position", value: x });
    }
    if !(dt > 0.0) {
        return Err(Error::Precondition(format!("time step must be positive, got {dt}")));
    }
    let z: f64 = rng.sample(StandardNormal);
    let y = x + sigma * dt.sqrt() * z;
    if !(y > 0.0 && y < length) {
        return Ok(None);
    }
    let (d0, d1) = if x.min(y) <= length - x.max(y) { (x, y) } else { (length - x, length - y) };
    if d0.min(d1) < 6.0 * sigma * dt.sqrt() {
        let u: f64 = rng.random();
        if u < crossing_probability(d0, d1, dt, sigma) {
            return Ok(None);
        }
    }
    Ok(Some(y))
}

/// Discretised path of one particle. Absorption is permanent: once a point
/// is dead, every later point is dead.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PathSegment {
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    pub alive: Vec<bool>,
}

impl PathSegment {
    pub fn new(t0: f64, x0: f64) -> Self {
        PathSegment { times: vec![t0], positions: vec![x0], alive: vec![true] }
    }

    /// Builds a segment from samples, checking the invariants.
    pub fn from_samples(times: Vec<f64>, positions: Vec<f64>, alive: Vec<bool>) -> Result<Self> {
        if times.len() != positions.len() || times.len() != alive.len() || times.is_empty() {
            return Err(Error::Precondition("path arrays must be non-empty and equally long".into()));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Precondition("path times must be strictly increasing".into()));
        }
        if alive.windows(2).any(|w| !w[0] && w[1]) {
            return Err(Error::Precondition("absorbed path cannot come back to life".into()));
        }
        Ok(PathSegment { times, positions, alive })
    }

    pub fn push(&mut self, t: f64, x: Option<f64>) {
        debug_assert!(t > *self.times.last().unwrap());
        let still_alive = *self.alive.last().unwrap() && x.is_some();
        self.times.push(t);
        self.positions.push(if still_alive { x.unwrap() } else { f64::NAN });
        self.alive.push(still_alive);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start_time(&self) -> f64 {
        self.times[0]
    }

    pub fn end_time(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Appends `other`, which must start where `self` ends.
    pub fn concat(&self, other: &PathSegment) -> Result<PathSegment> {
        if other.start_time() != self.end_time() {
            return Err(Error::Precondition("segments are not contiguous".into()));
        }
        let mut out = self.clone();
        out.times.extend_from_slice(&other.times[1..]);
        out.positions.extend_from_slice(&other.positions[1..]);
        out.alive.extend_from_slice(&other.alive[1..]);
        Ok(out)
    }

    /// Trapezoid sum of `g` over consecutive live points.
    fn trapezoid<G: Fn(f64) -> f64>(&self, g: G) -> f64 {
        let mut total = 0.0;
        for i in 1..self.times.len() {
            if !(self.alive[i - 1] && self.alive[i]) {
                break;
            }
            let dt = self.times[i] - self.times[i - 1];
            total += 0.5 * dt * (g(self.positions[i - 1]) + g(self.positions[i]));
        }
        total
    }
}

/// `∫ β(X_s) ds` along the live part of the segment by the trapezoid rule.
pub fn pcaf_increment(segment: &PathSegment, rate: &RateFunction) -> f64 {
    segment.trapezoid(|x| rate.eval(x))
}

/// `q ε⁻¹ |{s : |X_s − x₀| < ε/2}|`, the window approximation of `q L^{x₀}`.
pub fn local_time_pcaf(segment: &PathSegment, point_mass: PointMass, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Precondition(format!("window width must be positive, got {eps}")));
    }
    let half = 0.5 * eps;
    let occupation = segment.trapezoid(|x| if (x - point_mass.at).abs() < half { 1.0 } else { 0.0 });
    Ok(point_mass.weight * occupation / eps)
}

/// `∫ Q(X_s) β(X_s) ds` style integrals for an arbitrary integrand, used by
/// the spine module.
pub fn path_integral<G: Fn(f64) -> f64>(segment: &PathSegment, g: G) -> f64 {
    segment.trapezoid(g)
}

/// Survival probability of standard Brownian motion in `(0, length)`
/// started at `x`, from the sine expansion.
pub fn interval_survival(t: f64, x: f64, length: f64, sigma: f64) -> f64 {
    let k = PI / length;
    let kappa = sigma * sigma * k * k * t / 2.0;
    let mut sum = 0.0;
    let mut n = 1usize;
    loop {
        let nf = n as f64;
        let term = 4.0 / (nf * PI) * (-nf * nf * kappa).exp() * (nf * k * x).sin();
        sum += term;
        if (-nf * nf * kappa).exp() < 1e-17 || n > 100_000 {
            break;
        }
        n += 2;
    }
    sum
}

/// Reference integral of a smooth function against the transition law of
/// OU started at `x`; used as an oracle in tests.
pub fn ou_expectation<G: Fn(f64) -> f64>(x: f64, t: f64, c: f64, sigma: f64, g: G) -> f64 {
    let (mean, var) = ou_transition_moments(x, t, c, sigma);
    let sd = var.sqrt();
    let dens = |y: f64| (-(y - mean) * (y - mean) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
    quad::integrate(|y| g(y) * dens(y), mean - 12.0 * sd, mean + 12.0 * sd, 64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use crate::stats::Estimate;

    #[test]
    fn zero_step_is_identity() {
        let mut rng = rng_from_seed(3);
        assert_eq!(ou_step(1.25, 0.0, 2.0, 1.0, &mut rng).unwrap(), 1.25);
        assert_eq!(ou_h_step(-0.5, 0.0, 1.0, &mut rng).unwrap(), -0.5);
        assert!(ou_step(0.0, -1.0, 2.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn ou_step_moments() {
        let mut rng = rng_from_seed(11);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| ou_step(1.0, 0.5, 2.0, 1.0, &mut rng).unwrap()).collect();
        let est = Estimate::from_samples(&xs);
        assert!(est.within((-1.0f64).exp(), 3.0), "{est:?}");
        let var_target = (1.0 - (-2.0f64).exp()) / 4.0;
        assert!((var_target - 0.21617).abs() < 1e-5);
        let sq: Vec<f64> = xs.iter().map(|x| (x - est.mean).powi(2)).collect();
        let var = Estimate::from_samples(&sq);
        assert!(var.within(var_target, 3.0), "{var:?}");
    }

    #[test]
    fn ou_stationary_laws() {
        let mut rng = rng_from_seed(12);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| ou_step(3.0, 20.0, 2.0, 1.0, &mut rng).unwrap()).collect();
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        assert!(Estimate::from_samples(&xs).within(0.0, 3.0));
        assert!(Estimate::from_samples(&sq).within(0.25, 3.0));
        // h-process with α = 1: invariant variance 1/2
        let ys: Vec<f64> = (0..n).map(|_| ou_h_step(-2.0, 30.0, 1.0, &mut rng).unwrap()).collect();
        let sq: Vec<f64> = ys.iter().map(|x| x * x).collect();
        assert!(Estimate::from_samples(&sq).within(0.5, 3.0));
        let ys: Vec<f64> = (0..n).map(|_| ou_h_step(1.0, 0.7, 1.0, &mut rng).unwrap()).collect();
        assert!(Estimate::from_samples(&ys).within((-0.7f64).exp(), 3.0));
    }

    #[test]
    fn mehler_examples() {
        let v = mehler_density_h(5.0, &[0.0], &[0.0], 1.0).unwrap();
        assert!((v - (1.0 - (-10.0f64).exp()).powf(-0.5)).abs() < 1e-15);
        assert!((v - 1.0000227).abs() < 1e-7);
        for &(t, x) in &[(0.3, 1.2), (1.0, -2.0), (4.0, 0.5)] {
            let diag = mehler_density_h(t, &[x], &[x], 1.3).unwrap();
            let e = (1.3f64 * t).exp();
            let closed = (1.0 - (-2.6f64 * t).exp()).powf(-0.5) * (2.0 * 1.3 / (e + 1.0) * x * x).exp();
            assert!((diag - closed).abs() <= 1e-12 * closed);
        }
        assert!(mehler_density_h(0.0, &[0.0], &[0.0], 1.0).is_err());
        let a = mehler_density_h(0.4, &[0.3, -1.0], &[1.1, 0.2], 1.0).unwrap();
        let b = mehler_density_h(0.4, &[1.1, 0.2], &[0.3, -1.0], 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mehler_is_conservative_and_mixes() {
        let alpha = 1.0;
        let inv = |y: f64| (alpha / PI).sqrt() * (-alpha * y * y).exp();
        for &(t, x) in &[(0.5, 0.0), (1.0, 1.0), (2.0, -1.5)] {
            let total = quad::integrate(|y| mehler_1d(t, x, y, alpha) * inv(y), -12.0, 12.0, 64);
            assert!((total - 1.0).abs() < 1e-6, "t={t} x={x} total={total}");
        }
        let mut worst: f64 = 0.0;
        for i in -20..=20 {
            for j in -20..=20 {
                let (x, y) = (i as f64 * 0.1, j as f64 * 0.1);
                worst = worst.max((mehler_1d(10.0, x, y, alpha) - 1.0).abs());
            }
        }
        assert!(worst <= 1e-3, "{worst}");
    }

    #[test]
    fn mehler_chapman_kolmogorov() {
        let alpha = 1.0;
        let inv = |y: f64| (alpha / PI).sqrt() * (-alpha * y * y).exp();
        for &(s, t, x, y) in &[(0.3, 0.7, 0.5, -0.2), (1.0, 0.5, 1.5, 1.0)] {
            let lhs =
                quad::integrate(|z| mehler_1d(s, x, z, alpha) * mehler_1d(t, z, y, alpha) * inv(z), -12.0, 12.0, 96);
            let rhs = mehler_1d(s + t, x, y, alpha);
            assert!((lhs - rhs).abs() < 1e-6 * rhs.max(1.0));
        }
    }

    #[test]
    fn interval_density_examples() {
        let v = interval_density(1.0, PI / 2.0, PI / 2.0, 1.0, PI, 10).unwrap();
        // oracle: e·(2/π)·Σ_{odd n} e^{−n²/2}, terms beyond n = 9 are < 1e-17
        let oracle =
            1f64.exp() * 2.0 / PI * [1.0f64, 3.0, 5.0, 7.0, 9.0].iter().map(|n| (-n * n / 2.0).exp()).sum::<f64>();
        assert!((v.value - oracle).abs() < 1e-14);
        assert!((v.value - 1.0689).abs() < 1e-3);
        assert!(v.tail_bound < 1e-20);
        let near = interval_density(1.0, 1e-9, PI / 3.0, 1.0, PI, 40).unwrap();
        assert!(near.value.abs() < 1e-8);
        assert!(interval_density(1.0, 0.0, 1.0, 1.0, PI, 10).is_err());
        assert!(interval_density(1.0, 1.0, 4.0, 1.0, PI, 10).is_err());
    }

    #[test]
    fn interval_density_chapman_kolmogorov_and_symmetry() {
        let (beta, l) = (1.0, PI);
        for &(s, t, x, y) in &[(0.2, 0.3, 0.4, 2.0), (0.5, 1.0, 1.5, 1.6)] {
            let lhs = quad::integrate(
                |z| {
                    interval_density_auto(s, x, z, beta, l).unwrap().value
                        * interval_density_auto(t, z, y, beta, l).unwrap().value
                },
                1e-12,
                l - 1e-12,
                64,
            );
            let rhs = interval_density_auto(s + t, x, y, beta, l).unwrap().value;
            assert!((lhs - rhs).abs() < 1e-8, "{lhs} vs {rhs}");
            let a = interval_density_auto(s, x, y, beta, l).unwrap().value;
            let b = interval_density_auto(s, y, x, beta, l).unwrap().value;
            assert_eq!(a, b);
        }
    }

    #[test]
    fn on_diagonal_blowup_is_visible_in_truncation() {
        let n = interval_terms_for(1e-4, 1.0, PI, 1e-10);
        assert!(n > 300);
        let small = interval_density_auto(1e-4, 1.0, 1.0, 1.0, PI).unwrap().value;
        let larger = interval_density_auto(1e-2, 1.0, 1.0, 1.0, PI).unwrap().value;
        assert!(small > 5.0 * larger);
    }

    #[test]
    fn absorption_vanishes_deep_inside_for_small_steps() {
        let mut rng = rng_from_seed(5);
        for _ in 0..10_000 {
            assert!(interval_step_with_absorption(PI / 2.0, 1e-6, PI, 1.0, &mut rng).unwrap().is_some());
        }
        assert!(crossing_probability(1.5, 1.5, 1e-6, 1.0) == 0.0);
    }

    #[test]
    fn bridge_local_time_matches_rayleigh_mean() {
        let dt = 0.3;
        let v = bm_bridge_expected_local_time(0.2, 0.2, dt, 0.2, 1.0);
        assert!((v - (PI * dt / 2.0).sqrt()).abs() < 1e-14);
        // far away on the same side: essentially no local time
        assert!(bm_bridge_expected_local_time(5.0, 5.1, 0.01, 0.0, 1.0) < 1e-300);
        // level between far apart end points: finite, no overflow
        let v = bm_bridge_expected_local_time(-3.0, 3.0, 0.01, 0.0, 1.0);
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn bridge_local_time_integrates_to_occupation() {
        // ∫ E[L^a | ends] da = dt for any bridge
        let (x0, x1, dt) = (0.1, 0.5, 0.2);
        let total = quad::integrate_with_breaks(
            |a| bm_bridge_expected_local_time(x0, x1, dt, a, 1.0),
            -4.0,
            4.0,
            &[x0, x1],
            64,
        );
        assert!((total - dt).abs() < 1e-10, "{total}");
        let total = quad::integrate_with_breaks(
            |a| bm_bridge_expected_local_time(x0, x1, dt, a, 0.5),
            -4.0,
            4.0,
            &[x0, x1],
            64,
        );
        assert!((total - dt).abs() < 1e-10, "{total}");
    }

    #[test]
    fn ou_bridge_integral_matches_quadrature() {
        let rate = RateFunction::Quadratic { b: 1.5, a: 0.1 };
        let law = StepLaw::Ou { c: 2.0, sigma: 1.0 };
        let (x0, x1, dt) = (0.3, -0.4, 0.05);
        let direct = quad::integrate(
            |s| {
                let (m, v) = law.bridge_moments(x0, x1, dt, s);
                1.5 * (m * m + v) + 0.1
            },
            0.0,
            dt,
            8,
        );
        assert!((rate_integral_given_ends(law, &rate, x0, x1, dt) - direct).abs() < 1e-14);
        // Brownian limit of the OU bridge
        let (m0, v0) = ou_bridge_moments(0.0, 1.0, 1.0, 0.25, 1e-8, 1.0);
        assert!((m0 - 0.25).abs() < 1e-8 && (v0 - 0.1875).abs() < 1e-8);
    }

    #[test]
    fn pcaf_examples() {
        let seg = PathSegment::from_samples(vec![0.0, 0.5, 2.0], vec![0.3, 0.3, 0.3], vec![true; 3]).unwrap();
        assert!((pcaf_increment(&seg, &RateFunction::Constant { a: 0.7 }) - 1.4).abs() < 1e-15);
        let q = pcaf_increment(&seg, &RateFunction::Quadratic { b: 2.0, a: 0.1 });
        assert!((q - (2.0 * 0.09 + 0.1) * 2.0).abs() < 1e-15);
        let pm = PointMass { at: 0.3, weight: 1.5 };
        assert!((local_time_pcaf(&seg, pm, 0.02).unwrap() - 1.5 * 2.0 / 0.02).abs() < 1e-9);
        let away = PointMass { at: 1.0, weight: 1.5 };
        assert_eq!(local_time_pcaf(&seg, away, 0.02).unwrap(), 0.0);
        let dead =
            PathSegment::from_samples(vec![0.0, 1.0, 2.0], vec![0.3, 0.3, f64::NAN], vec![true, true, false]).unwrap();
        assert!((pcaf_increment(&dead, &RateFunction::Constant { a: 1.0 }) - 1.0).abs() < 1e-15);
        assert!(PathSegment::from_samples(vec![0.0, 1.0], vec![0.0, 0.0], vec![false, true]).is_err());
    }

    #[test]
    fn pcaf_is_additive_over_concatenation() {
        let mut rng = rng_from_seed(9);
        let mut a = PathSegment::new(0.0, 0.1);
        let mut x = 0.1;
        for i in 1..=50 {
            x = ou_step(x, 0.01, 2.0, 1.0, &mut rng).unwrap();
            a.push(i as f64 * 0.01, Some(x));
        }
        let mut b = PathSegment::new(a.end_time(), x);
        for i in 51..=90 {
            x = ou_step(x, 0.01, 2.0, 1.0, &mut rng).unwrap();
            b.push(i as f64 * 0.01, Some(x));
        }
        let rate = RateFunction::Quadratic { b: 1.5, a: 0.1 };
        let whole = a.concat(&b).unwrap();
        let sum = pcaf_increment(&a, &rate) + pcaf_increment(&b, &rate);
        assert!((pcaf_increment(&whole, &rate) - sum).abs() < 1e-14);
    }

    #[test]
    fn survival_series_value() {
        let s = interval_survival(1.0, PI / 2.0, PI, 1.0);
        assert!((s - 0.7675).abs() < 1e-4, "{s}");
    }
}
