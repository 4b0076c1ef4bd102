//! Model descriptions: offspring laws, motions, branching rates and the
//! closed-form catalog with exact spectral data.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quad;

/// Largest offspring count an [`OffspringLaw`] may carry.
pub const MAX_OFFSPRING: usize = 64;

const MASS_TOLERANCE: f64 = 1e-12;

/// Offspring distribution `{p_k(x)}`, piecewise constant in position.
///
/// Cell `i` covers `(breaks[i-1], breaks[i]]` with the obvious conventions at
/// the ends; a law without breaks is spatially constant. `cells[i][k]` is
/// `p_k` on cell `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffspringLaw {
    #[serde(default)]
    breaks: Vec<f64>,
    cells: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LawViolation {
    /// Number of cells does not match the breaks.
    Shape {
        cells: usize,
        breaks: usize,
    },
    BreaksNotIncreasing,
    TooManyAtoms {
        cell: usize,
        max_count: usize,
    },
    NegativeMass {
        cell: usize,
        k: usize,
        mass: f64,
    },
    NonFiniteMass {
        cell: usize,
        k: usize,
    },
    /// `p_0(x) != 0` somewhere.
    ZeroChildren {
        cell: usize,
        mass: f64,
    },
    MassSum {
        cell: usize,
        sum: f64,
    },
    /// `p_1(x) == 1` at every position, so the system never branches.
    AlwaysOneChild,
}

impl LawViolation {
    /// Violations that make the law unusable, as opposed to the
    /// non-branching degeneracy which is reported but still evaluable.
    pub fn is_structural(&self) -> bool {
        !matches!(self, LawViolation::AlwaysOneChild)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<LawViolation>,
}

impl ValidationReport {
    pub fn passes(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn structurally_valid(&self) -> bool {
        self.violations.iter().all(|v| !v.is_structural())
    }
}

impl OffspringLaw {
    /// Spatially constant law from `p_0, p_1, ...`.
    pub fn constant(masses: Vec<f64>) -> Self {
        OffspringLaw { breaks: Vec::new(), cells: vec![masses] }
    }

    /// Spatially constant law from `(k, p_k)` atoms.
    pub fn from_atoms(atoms: &[(usize, f64)]) -> Self {
        let max = atoms.iter().map(|(k, _)| *k).max().unwrap_or(0);
        let mut masses = vec![0.0; max + 1];
        for &(k, p) in atoms {
            masses[k] += p;
        }
        Self::constant(masses)
    }

    /// Every particle splits into exactly two.
    pub fn binary() -> Self {
        Self::from_atoms(&[(2, 1.0)])
    }

    pub fn piecewise(breaks: Vec<f64>, cells: Vec<Vec<f64>>) -> Self {
        OffspringLaw { breaks, cells }
    }

    pub fn cells(&self) -> &[Vec<f64>] {
        &self.cells
    }

    pub fn breaks(&self) -> &[f64] {
        &self.breaks
    }

    /// Largest `k` with positive mass anywhere.
    pub fn max_count(&self) -> usize {
        self.cells.iter().filter_map(|c| c.iter().rposition(|&p| p > 0.0)).max().unwrap_or(0)
    }

    fn cell_index(&self, x: f64) -> usize {
        self.breaks.partition_point(|&b| b < x)
    }

    /// `p_k(x)` for all `k`.
    pub fn masses_at(&self, x: f64) -> &[f64] {
        let i = self.cell_index(x).min(self.cells.len().saturating_sub(1));
        &self.cells[i]
    }

    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        if self.cells.len() != self.breaks.len() + 1 {
            violations.push(LawViolation::Shape { cells: self.cells.len(), breaks: self.breaks.len() });
        }
        if self.breaks.windows(2).any(|w| !(w[0] < w[1])) {
            violations.push(LawViolation::BreaksNotIncreasing);
        }
        for (i, cell) in self.cells.iter().enumerate() {
            let max_count = cell.iter().rposition(|&p| p != 0.0).unwrap_or(0);
            if max_count > MAX_OFFSPRING {
                violations.push(LawViolation::TooManyAtoms { cell: i, max_count });
            }
            for (k, &p) in cell.iter().enumerate() {
                if !p.is_finite() {
                    violations.push(LawViolation::NonFiniteMass { cell: i, k });
                } else if p < 0.0 {
                    violations.push(LawViolation::NegativeMass { cell: i, k, mass: p });
                }
            }
            let p0 = cell.first().copied().unwrap_or(0.0);
            if p0 != 0.0 {
                violations.push(LawViolation::ZeroChildren { cell: i, mass: p0 });
            }
            let sum: f64 = cell.iter().sum();
            if !((sum - 1.0).abs() <= MASS_TOLERANCE) {
                violations.push(LawViolation::MassSum { cell: i, sum });
            }
        }
        if !self.cells.is_empty() && self.cells.iter().all(|c| c.get(1).copied().unwrap_or(0.0) == 1.0) {
            violations.push(LawViolation::AlwaysOneChild);
        }
        ValidationReport { violations }
    }

    fn ensure_usable(&self) -> Result<()> {
        let report = self.validate();
        if report.structurally_valid() {
            Ok(())
        } else {
            Err(Error::InvalidLaw(format!("{:?}", report.violations)))
        }
    }

    /// `Q(x) = Σ k p_k(x)`.
    pub fn mean_offspring(&self, x: f64) -> Result<f64> {
        self.ensure_usable()?;
        Ok(mean_of(self.masses_at(x)))
    }

    /// `sup_x Q(x)`.
    pub fn sup_mean(&self) -> f64 {
        self.cells.iter().map(|c| mean_of(c)).fold(0.0, f64::max)
    }

    /// The size-biased law `k p_k(x) / Q(x)` as a spatially constant law.
    pub fn size_biased(&self, x: f64) -> Result<OffspringLaw> {
        self.ensure_usable()?;
        let masses = self.masses_at(x);
        let q = mean_of(masses);
        if q <= 0.0 {
            return Err(Error::DegenerateLaw(x));
        }
        Ok(OffspringLaw::constant(size_bias(masses, q)))
    }

    /// Size-biases every cell; the result keeps the same breaks.
    pub fn size_biased_everywhere(&self) -> Result<OffspringLaw> {
        self.ensure_usable()?;
        let cells = self
            .cells
            .iter()
            .map(|c| {
                let q = mean_of(c);
                if q <= 0.0 {
                    Err(Error::DegenerateLaw(f64::NAN))
                } else {
                    Ok(size_bias(c, q))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OffspringLaw { breaks: self.breaks.clone(), cells })
    }

    /// Draws an offspring count at position `x` by inversion.
    pub fn sample<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> usize {
        let masses = self.masses_at(x);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, &p) in masses.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        masses.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// True when every cell puts all mass on two children.
    pub fn is_binary(&self) -> bool {
        self.cells.iter().all(|c| c.get(2).copied() == Some(1.0))
    }
}

fn mean_of(masses: &[f64]) -> f64 {
    masses.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
}

fn size_bias(masses: &[f64], q: f64) -> Vec<f64> {
    masses.iter().enumerate().map(|(k, p)| k as f64 * p / q).collect()
}

/// Free motion of a single particle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    /// Generator `½σ²Δ − c x·∇` on `R^dim`.
    Ou { c: f64, sigma: f64, dim: usize },
    /// `σ` times Brownian motion killed on leaving `(0, length)`.
    IntervalBm { length: f64, sigma: f64 },
}

/// Density of the branching rate measure with respect to the reference
/// measure `m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateFunction {
    Constant {
        a: f64,
    },
    /// `β(x) = b|x|² + a`.
    Quadratic {
        b: f64,
        a: f64,
    },
}

impl RateFunction {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            RateFunction::Constant { a } => a,
            RateFunction::Quadratic { b, a } => b * x * x + a,
        }
    }

    pub fn is_zero(&self) -> bool {
        match *self {
            RateFunction::Constant { a } => a == 0.0,
            RateFunction::Quadratic { b, a } => a == 0.0 && b == 0.0,
        }
    }
}

/// Singular part of the branching rate: `weight · δ_at`, realised through
/// the local time at `at`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointMass {
    pub at: f64,
    pub weight: f64,
}

/// Branching rate measure `μ = β·m + q δ_{x₀}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchingRate {
    pub function: RateFunction,
    #[serde(default)]
    pub point_mass: Option<PointMass>,
}

impl BranchingRate {
    pub fn function(function: RateFunction) -> Self {
        BranchingRate { function, point_mass: None }
    }

    pub fn is_zero(&self) -> bool {
        self.function.is_zero() && self.point_mass.is_none_or(|p| p.weight == 0.0)
    }
}

pub const DEFAULT_KILLED_DT: f64 = 1e-3;
pub const DEFAULT_OU_DT: f64 = 1e-2;

/// Complete description of one branching model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub motion: Motion,
    pub rate: BranchingRate,
    pub offspring: OffspringLaw,
    /// Time step used to accumulate additive functionals and check
    /// absorption.
    pub dt: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let report = self.offspring.validate();
        if !report.structurally_valid() {
            return Err(Error::InvalidLaw(format!("{:?}", report.violations)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Precondition(format!("time step must be positive, got {}", self.dt)));
        }
        match self.motion {
            Motion::Ou { c, sigma, dim } => {
                if !(c > 0.0 && sigma > 0.0) {
                    return Err(Error::Precondition("OU needs c > 0 and sigma > 0".into()));
                }
                if dim == 0 {
                    return Err(Error::Precondition("OU dimension must be at least 1".into()));
                }
                if let RateFunction::Quadratic { b, .. } = self.rate.function {
                    if !(c * c > 2.0 * b * sigma * sigma) {
                        return Err(Error::Precondition(format!(
                            "quadratic rate needs c > sqrt(2b) sigma, got c = {c}, b = {b}"
                        )));
                    }
                }
                if self.rate.point_mass.is_some() {
                    return Err(Error::Unsupported("point-mass rates are only modelled on the interval".into()));
                }
            }
            Motion::IntervalBm { length, sigma } => {
                if !(length > 0.0 && sigma > 0.0) {
                    return Err(Error::Precondition("interval needs length > 0 and sigma > 0".into()));
                }
                if let Some(pm) = self.rate.point_mass {
                    if !(pm.at > 0.0 && pm.at < length) || pm.weight < 0.0 {
                        return Err(Error::OutOfDomain { what: "point mass", value: pm.at });
                    }
                }
            }
        }
        let (b, a) = match self.rate.function {
            RateFunction::Constant { a } => (0.0, a),
            RateFunction::Quadratic { b, a } => (b, a),
        };
        if b < 0.0 || a < 0.0 {
            return Err(Error::Precondition("branching rate must be non-negative".into()));
        }
        Ok(())
    }

    /// Whether `x` lies in the state space `E` (not the cemetery).
    pub fn in_domain(&self, x: f64) -> bool {
        match self.motion {
            Motion::Ou { .. } => x.is_finite(),
            Motion::IntervalBm { length, .. } => x > 0.0 && x < length,
        }
    }

    /// Density of the symmetrising measure `m` with respect to Lebesgue
    /// measure (one dimension).
    pub fn reference_density(&self, x: f64) -> f64 {
        match self.motion {
            Motion::Ou { c, sigma, .. } => {
                let k = c / (sigma * sigma);
                (k / PI).sqrt() * (-k * x * x).exp()
            }
            Motion::IntervalBm { length, .. } => {
                if x > 0.0 && x < length {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn sigma(&self) -> f64 {
        match self.motion {
            Motion::Ou { sigma, .. } | Motion::IntervalBm { sigma, .. } => sigma,
        }
    }

    /// `Q(x)` on a validated law.
    #[inline]
    pub fn mean_offspring(&self, x: f64) -> f64 {
        mean_of(self.offspring.masses_at(x))
    }

    /// Density of the potential `(Q − 1)β` at `x`.
    #[inline]
    pub fn potential_density(&self, x: f64) -> f64 {
        (self.mean_offspring(x) - 1.0) * self.rate.function.eval(x)
    }
}

/// Ground state `h`, either in closed form or tabulated on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundState {
    /// `(α/c)^{d/4} exp(½(c − α)|x|²)`.
    OuGaussian { c: f64, alpha: f64, dim: usize },
    /// `sqrt(2/L) sin(πx/L)` on `(0, L)`.
    Sine { length: f64 },
    /// Linear interpolation of tabulated values, zero outside `(lo, hi)`
    /// (the values at `lo` and `hi` are taken to be zero).
    Grid(GridFunction),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub lo: f64,
    pub hi: f64,
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn eval(&self, x: f64) -> f64 {
        if !(x > self.lo && x < self.hi) {
            return 0.0;
        }
        let n = self.nodes.len();
        let i = self.nodes.partition_point(|&v| v <= x);
        let (x0, y0) = if i == 0 { (self.lo, 0.0) } else { (self.nodes[i - 1], self.values[i - 1]) };
        let (x1, y1) = if i == n { (self.hi, 0.0) } else { (self.nodes[i], self.values[i]) };
        if x1 == x0 {
            return y0;
        }
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    /// Derivative of `log` of the interpolant. Near the endpoints the
    /// tabulated function vanishes linearly, so the derivative there is the
    /// reciprocal distance to the endpoint.
    pub fn log_derivative(&self, x: f64) -> f64 {
        let n = self.nodes.len();
        let i = self.nodes.partition_point(|&v| v <= x);
        if i == 0 {
            return 1.0 / (x - self.lo);
        }
        if i == n {
            return -1.0 / (self.hi - x);
        }
        let (x0, y0, x1, y1) = (self.nodes[i - 1], self.values[i - 1], self.nodes[i], self.values[i]);
        let slope = (y1 - y0) / (x1 - x0);
        let y = y0 + slope * (x - x0);
        slope / y
    }
}

impl GroundState {
    /// `h(x)` for a one-dimensional position; zero in the cemetery.
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            GroundState::OuGaussian { c, alpha, dim } => {
                (alpha / c).powf(*dim as f64 / 4.0) * (0.5 * (c - alpha) * x * x).exp()
            }
            GroundState::Sine { length } => {
                if x > 0.0 && x < *length {
                    (2.0 / length).sqrt() * (PI * x / length).sin()
                } else {
                    0.0
                }
            }
            GroundState::Grid(g) => g.eval(x),
        }
    }

    /// `h` at a point of `R^d` (only meaningful for the OU ground state).
    pub fn eval_vec(&self, x: &[f64]) -> f64 {
        match self {
            GroundState::OuGaussian { c, alpha, dim } => {
                let r2: f64 = x.iter().map(|v| v * v).sum();
                (alpha / c).powf(*dim as f64 / 4.0) * (0.5 * (c - alpha) * r2).exp()
            }
            _ => self.eval(x[0]),
        }
    }

    /// `(log h)'(x)`, the drift of the h-transformed motion up to a `σ²`
    /// factor.
    pub fn log_derivative(&self, x: f64) -> f64 {
        match self {
            GroundState::OuGaussian { c, alpha, .. } => (c - alpha) * x,
            GroundState::Sine { length } => {
                let k = PI / length;
                k / (k * x).tan()
            }
            GroundState::Grid(g) => g.log_derivative(x),
        }
    }
}

/// `(λ₁, λ₂, λ_h, h)` for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralTriple {
    pub lambda1: f64,
    pub lambda2: f64,
    /// `λ_h = λ₂ − λ₁`.
    pub gap: f64,
    pub h: GroundState,
    /// `∫ h² dm`, computed independently of the construction of `h`.
    pub h_norm_check: f64,
}

impl SpectralTriple {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 < 0.0) {
            return Err(Error::Subcritical { lambda1: self.lambda1 });
        }
        if !(self.gap > 0.0) {
            return Err(Error::Precondition(format!("spectral gap must be positive, got {}", self.gap)));
        }
        if (self.h_norm_check - 1.0).abs() > 1e-8 {
            return Err(Error::Precondition(format!("ground state is not normalised: ∫h² dm = {}", self.h_norm_check)));
        }
        Ok(())
    }

    #[inline]
    pub fn h(&self, x: f64) -> f64 {
        self.h.eval(x)
    }
}

/// Model-free description of a test function `f` on `E`, extended by
/// `f(∂) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestFunction {
    One,
    H,
    /// `1_{[lo, hi]}`.
    Indicator {
        lo: f64,
        hi: f64,
    },
    /// `h · 1_{[lo, hi]}`.
    HIndicator {
        lo: f64,
        hi: f64,
    },
}

impl TestFunction {
    pub fn eval(&self, x: f64, h: &GroundState) -> f64 {
        match *self {
            TestFunction::One => 1.0,
            TestFunction::H => h.eval(x),
            TestFunction::Indicator { lo, hi } => {
                if x >= lo && x <= hi {
                    1.0
                } else {
                    0.0
                }
            }
            TestFunction::HIndicator { lo, hi } => {
                if x >= lo && x <= hi {
                    h.eval(x)
                } else {
                    0.0
                }
            }
        }
    }

    /// Points where the function may jump.
    pub fn breakpoints(&self) -> Vec<f64> {
        match *self {
            TestFunction::Indicator { lo, hi } | TestFunction::HIndicator { lo, hi } => vec![lo, hi],
            _ => Vec::new(),
        }
    }
}

/// Closed-form branching OU model with quadratic rate `b|x|² + a` and binary
/// branching.
pub fn catalog_ou(c: f64, b: f64, a: f64, dim: usize) -> Result<(ModelSpec, SpectralTriple)> {
    if !(b >= 0.0) || !(a > 0.0) {
        return Err(Error::Precondition(format!("need b >= 0 and a > 0, got b = {b}, a = {a}")));
    }
    if !(c > (2.0 * b).sqrt()) {
        return Err(Error::Precondition(format!("need c > sqrt(2b), got c = {c}, b = {b}")));
    }
    if dim == 0 {
        return Err(Error::Precondition("dimension must be at least 1".into()));
    }
    let alpha = (c * c - 2.0 * b).sqrt();
    let lambda1 = -(0.5 * (c - alpha) + a);
    let function = if b == 0.0 { RateFunction::Constant { a } } else { RateFunction::Quadratic { b, a } };
    let model = ModelSpec {
        motion: Motion::Ou { c, sigma: 1.0, dim },
        rate: BranchingRate::function(function),
        offspring: OffspringLaw::binary(),
        dt: DEFAULT_OU_DT,
    };
    let h = GroundState::OuGaussian { c, alpha, dim };
    // One-dimensional factor of ∫h² dm; the d-dimensional integral is its
    // d-th power.
    let one_d = {
        let h1 = GroundState::OuGaussian { c, alpha, dim: 1 };
        let width = 12.0 / alpha.sqrt();
        quad::integrate(
            |x| {
                let hv = h1.eval(x);
                hv * hv * (c / PI).sqrt() * (-c * x * x).exp()
            },
            -width,
            width,
            64,
        )
    };
    let triple =
        SpectralTriple { lambda1, lambda2: lambda1 + alpha, gap: alpha, h, h_norm_check: one_d.powi(dim as i32) };
    Ok((model, triple))
}

/// Branching killed Brownian motion on `(0, length)` with constant rate
/// `beta`, binary branching and optionally an extra point mass in the rate
/// measure.
///
/// Without a point mass the spectral data is exact. With one, it comes from
/// the grid solver in [`crate::spectral`].
pub fn catalog_interval(beta: f64, length: f64, point_mass: Option<PointMass>) -> Result<(ModelSpec, SpectralTriple)> {
    if !(beta >= 0.0) || !(length > 0.0) {
        return Err(Error::Precondition(format!(
            "need beta >= 0 and length > 0, got beta = {beta}, length = {length}"
        )));
    }
    let model = ModelSpec {
        motion: Motion::IntervalBm { length, sigma: 1.0 },
        rate: BranchingRate { function: RateFunction::Constant { a: beta }, point_mass },
        offspring: OffspringLaw::binary(),
        dt: DEFAULT_KILLED_DT,
    };
    model.validate()?;
    if point_mass.is_some() {
        let triple = crate::spectral::grid_spectral_triple(&model, &crate::spectral::GridOptions::default())?;
        if !(triple.lambda1 < 0.0) {
            return Err(Error::Subcritical { lambda1: triple.lambda1 });
        }
        return Ok((model, triple));
    }
    let k = PI / length;
    let lambda1 = 0.5 * k * k - beta;
    if !(lambda1 < 0.0) {
        return Err(Error::Subcritical { lambda1 });
    }
    let h = GroundState::Sine { length };
    let h_norm_check = quad::integrate(
        |x| {
            let v = h.eval(x);
            v * v
        },
        0.0,
        length,
        16,
    );
    let triple = SpectralTriple { lambda1, lambda2: 2.0 * k * k - beta, gap: 1.5 * k * k, h, h_norm_check };
    Ok((model, triple))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    #[test]
    fn mean_offspring_examples() {
        assert_eq!(OffspringLaw::binary().mean_offspring(0.0).unwrap(), 2.0);
        let one = OffspringLaw::from_atoms(&[(1, 1.0)]);
        assert_eq!(one.mean_offspring(0.0).unwrap(), 1.0);
        assert!(!one.validate().passes());
        assert!(one.validate().structurally_valid());
        let third = 1.0 / 3.0;
        let law = OffspringLaw::from_atoms(&[(1, third), (2, third), (3, third)]);
        assert!((law.mean_offspring(0.5).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn mean_offspring_rejects_broken_law() {
        let law = OffspringLaw::from_atoms(&[(0, 0.1), (2, 0.9)]);
        assert!(matches!(law.mean_offspring(0.0), Err(Error::InvalidLaw(_))));
    }

    #[test]
    fn size_biased_examples() {
        let sb = OffspringLaw::binary().size_biased(0.0).unwrap();
        assert_eq!(sb.masses_at(0.0)[2], 1.0);
        let law = OffspringLaw::from_atoms(&[(1, 0.5), (3, 0.5)]);
        let sb = law.size_biased(0.0).unwrap();
        assert!((sb.masses_at(0.0)[1] - 0.25).abs() < 1e-15);
        assert!((sb.masses_at(0.0)[3] - 0.75).abs() < 1e-15);
        let third = 1.0 / 3.0;
        let law = OffspringLaw::from_atoms(&[(1, third), (2, third), (3, third)]);
        let sb = law.size_biased(0.0).unwrap();
        for k in 1..=3 {
            assert!((sb.masses_at(0.0)[k] - k as f64 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn validation_examples() {
        assert!(OffspringLaw::binary().validate().passes());
        let r = OffspringLaw::from_atoms(&[(0, 0.1), (2, 0.9)]).validate();
        assert!(r.violations.iter().any(|v| matches!(v, LawViolation::ZeroChildren { .. })));
        let r = OffspringLaw::from_atoms(&[(1, 0.5), (2, 0.6)]).validate();
        assert!(r
            .violations
            .iter()
            .any(|v| matches!(v, LawViolation::MassSum { sum, .. } if (sum - 1.1).abs() < 1e-12)));
        let mut big = vec![0.0; 70];
        big[69] = 1.0;
        let r = OffspringLaw::constant(big).validate();
        assert!(r.violations.iter().any(|v| matches!(v, LawViolation::TooManyAtoms { .. })));
    }

    #[test]
    fn piecewise_law_follows_cells() {
        let law = OffspringLaw::piecewise(vec![0.0], vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 0.0, 1.0]]);
        assert!(law.validate().passes());
        assert_eq!(law.mean_offspring(-1.0).unwrap(), 2.0);
        assert_eq!(law.mean_offspring(0.0).unwrap(), 2.0);
        assert_eq!(law.mean_offspring(0.5).unwrap(), 3.0);
        assert_eq!(law.sup_mean(), 3.0);
        let mut rng = rng_from_seed(1);
        assert_eq!(law.sample(1.0, &mut rng), 3);
        assert_eq!(law.sample(-1.0, &mut rng), 2);
    }

    #[test]
    fn catalog_ou_examples() {
        let (model, s) = catalog_ou(2.0, 1.5, 0.1, 1).unwrap();
        model.validate().unwrap();
        s.validate().unwrap();
        assert!((s.lambda1 + 0.6).abs() < 1e-15);
        assert!((s.gap - 1.0).abs() < 1e-15);
        assert!((s.h(0.0) - 0.5f64.powf(0.25)).abs() < 1e-15);
        assert!((s.h(0.0) - 0.840896).abs() < 1e-6);
        assert!((s.h_norm_check - 1.0).abs() < 1e-12);

        let (_, s) = catalog_ou(2.0, 0.0, 0.1, 1).unwrap();
        assert!((s.gap - 2.0).abs() < 1e-15);
        assert!((s.lambda1 + 0.1).abs() < 1e-15);
        for x in [-3.0, 0.0, 1.7] {
            assert_eq!(s.h(x), 1.0);
        }

        assert!(matches!(catalog_ou(1.0, 0.6, 0.2, 1), Err(Error::Precondition(_))));
    }

    #[test]
    fn catalog_ou_higher_dimension_is_normalised() {
        let (_, s) = catalog_ou(2.0, 1.5, 0.1, 3).unwrap();
        assert!((s.h_norm_check - 1.0).abs() < 1e-12);
        assert!((s.h.eval_vec(&[0.0, 0.0, 0.0]) - 0.5f64.powf(0.75)).abs() < 1e-15);
    }

    #[test]
    fn catalog_interval_examples() {
        let (_, s) = catalog_interval(1.0, PI, None).unwrap();
        assert!((s.lambda1 + 0.5).abs() < 1e-15);
        assert!((s.gap - 1.5).abs() < 1e-15);
        assert!((s.h(PI / 2.0) - (2.0 / PI).sqrt()).abs() < 1e-15);
        assert!((s.h_norm_check - 1.0).abs() < 1e-10);
        assert!(matches!(catalog_interval(0.25, PI, None), Err(Error::Subcritical { .. })));
    }

    #[test]
    fn grid_function_interpolates_and_vanishes_outside() {
        let g = GridFunction { lo: 0.0, hi: 4.0, nodes: vec![1.0, 2.0, 3.0], values: vec![1.0, 2.0, 1.0] };
        assert_eq!(g.eval(0.5), 0.5);
        assert_eq!(g.eval(1.5), 1.5);
        assert_eq!(g.eval(3.5), 0.5);
        assert_eq!(g.eval(4.0), 0.0);
        assert!((g.log_derivative(0.5) - 2.0).abs() < 1e-15);
        assert!((g.log_derivative(1.5) - 1.0 / 1.5).abs() < 1e-15);
    }

    fn arb_law() -> impl Strategy<Value = OffspringLaw> {
        prop::collection::vec(0.0f64..1.0, 1..8).prop_filter_map("needs mass", |w| {
            let total: f64 = w.iter().sum();
            if total <= 1e-6 {
                return None;
            }
            let mut masses = vec![0.0];
            masses.extend(w.iter().map(|v| v / total));
            Some(OffspringLaw::constant(masses))
        })
    }

    proptest! {
        #[test]
        fn size_biased_law_sums_to_one(law in arb_law()) {
            let q = law.mean_offspring(0.0).unwrap();
            let sb = law.size_biased(0.0).unwrap();
            let m = sb.masses_at(0.0);
            let total: f64 = m.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let inv: f64 = m.iter().enumerate().skip(1).map(|(k, p)| p / k as f64).sum();
            prop_assert!((inv - 1.0 / q).abs() < 1e-12);
        }

        #[test]
        fn size_biasing_fixes_single_atoms(k in 1usize..=MAX_OFFSPRING) {
            let law = OffspringLaw::from_atoms(&[(k, 1.0)]);
            let once = law.size_biased(0.0).unwrap();
            let twice = once.size_biased(0.0).unwrap();
            prop_assert_eq!(once.masses_at(0.0), law.masses_at(0.0));
            prop_assert_eq!(twice.masses_at(0.0), law.masses_at(0.0));
        }
    }
}
