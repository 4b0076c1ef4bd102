//! Forward simulation of the branching system under `P_x`.
//!
//! Every particle carries an independent `Exp(1)` threshold and splits the
//! first time the branching clock `A^μ` accumulated along its own path
//! reaches it. Between checks the motion is sampled exactly (OU) or by
//! Gaussian steps with bridge-corrected absorption (killed Brownian motion);
//! the clock increment over a step is its conditional mean given the step's
//! end points.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::{self, Write};

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Motion, RateFunction, SpectralTriple, TestFunction};
use crate::motion::{self, PathSegment, StepLaw};

pub const DEFAULT_POPULATION_CAP: usize = 1_000_000;

/// Ulam-Harris label: the sequence of child indices from the root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct UlamLabel(pub Vec<u32>);

impl UlamLabel {
    pub fn root() -> Self {
        UlamLabel(Vec::new())
    }

    pub fn child(&self, index: u32) -> Self {
        let mut v = Vec::with_capacity(self.0.len() + 1);
        v.extend_from_slice(&self.0);
        v.push(index);
        UlamLabel(v)
    }

    pub fn parent(&self) -> Option<UlamLabel> {
        if self.0.is_empty() {
            None
        } else {
            Some(UlamLabel(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    pub fn generation(&self) -> usize {
        self.0.len()
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    /// Whether `self` is a strict ancestor of `other`.
    pub fn is_ancestor_of(&self, other: &UlamLabel) -> bool {
        self.0.len() < other.0.len() && other.0.starts_with(&self.0)
    }
}

impl fmt::Display for UlamLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "root");
        }
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ".")?;
            }
            write!(f, "{k}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndCause {
    Fission,
    Absorbed,
    Horizon,
}

impl fmt::Display for EndCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EndCause::Fission => "fission",
            EndCause::Absorbed => "absorbed",
            EndCause::Horizon => "horizon",
        })
    }
}

/// One particle: its mark `(path, lifetime, offspring count)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub label: UlamLabel,
    pub birth_time: f64,
    /// `ζ_u`, or the horizon for particles still alive then.
    pub end_time: f64,
    pub birth_position: f64,
    /// `X_u(ζ_u−)`; `None` when the particle was absorbed.
    pub end_position: Option<f64>,
    /// `A_u`; zero unless the particle split.
    pub offspring: usize,
    pub cause: EndCause,
    /// Positions at the requested observation times in `[b_u, ζ_u)`.
    pub observations: Vec<(f64, f64)>,
    pub path: Option<PathSegment>,
    pub spine: bool,
}

impl Node {
    /// Whether the particle belongs to `Z_t`.
    pub fn alive_at(&self, t: f64) -> bool {
        (self.birth_time <= t && t < self.end_time) || (self.cause == EndCause::Horizon && t == self.end_time)
    }

    /// Position at time `t` if it was recorded.
    pub fn position_at(&self, t: f64) -> Option<f64> {
        if !self.alive_at(t) {
            return None;
        }
        if t == self.birth_time {
            return Some(self.birth_position);
        }
        if t == self.end_time {
            return self.end_position;
        }
        if let Ok(i) = self.observations.binary_search_by(|(s, _)| s.partial_cmp(&t).unwrap()) {
            return Some(self.observations[i].1);
        }
        if let Some(path) = &self.path {
            if let Ok(i) = path.times.binary_search_by(|s| s.partial_cmp(&t).unwrap()) {
                if path.alive[i] {
                    return Some(path.positions[i]);
                }
            }
        }
        None
    }

    pub fn lifetime(&self) -> f64 {
        self.end_time - self.birth_time
    }
}

/// Options controlling what a simulation records.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    /// Times at which every live particle's position is stored.
    pub observe: Vec<f64>,
    /// Store full paths at step resolution.
    pub record_paths: bool,
    pub population_cap: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { observe: Vec::new(), record_paths: false, population_cap: DEFAULT_POPULATION_CAP }
    }
}

impl SimOptions {
    pub fn observing(times: &[f64]) -> Self {
        SimOptions { observe: times.to_vec(), ..Default::default() }
    }

    fn sorted_observations(&self, horizon: f64) -> Vec<f64> {
        let mut obs: Vec<f64> = self.observe.iter().copied().filter(|&t| t >= 0.0 && t <= horizon).collect();
        obs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        obs.dedup();
        obs
    }
}

/// Ulam-Harris labelled forest of one realisation on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    /// Nodes in breadth-first creation order; the root is first.
    pub nodes: Vec<Node>,
    pub horizon: f64,
    pub start: f64,
    pub seed: Option<u64>,
}

/// The point measure `X_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub particles: Vec<(UlamLabel, f64)>,
}

impl Snapshot {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn positions(&self) -> impl Iterator<Item = f64> + '_ {
        self.particles.iter().map(|(_, x)| *x)
    }
}

/// `X_t(f) = Σ_{u ∈ Z_t} f(X_u(t))`.
pub fn weigh<F: Fn(f64) -> f64>(snapshot: &Snapshot, f: F) -> f64 {
    snapshot.positions().map(f).sum()
}

/// Branching-clock and motion pieces of a model, resolved once per run.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Dynamics {
    pub law: StepLaw,
    pub killing: Option<f64>,
    pub function: RateFunction,
    pub point_mass: Option<crate::model::PointMass>,
    pub dt: f64,
}

impl Dynamics {
    pub fn of(model: &ModelSpec) -> Result<Self> {
        let (law, killing) = match model.motion {
            Motion::Ou { c, sigma, dim } => {
                if dim != 1 {
                    return Err(Error::Unsupported(format!(
                        "particle simulation is one-dimensional, model has dimension {dim}"
                    )));
                }
                (StepLaw::Ou { c, sigma }, None)
            }
            Motion::IntervalBm { length, sigma } => (StepLaw::Brownian { sigma }, Some(length)),
        };
        Ok(Dynamics { law, killing, function: model.rate.function, point_mass: model.rate.point_mass, dt: model.dt })
    }

    /// True when the clock is `a·t` and the motion needs no time grid, so
    /// fission times can be drawn exactly.
    fn exact_clock(&self) -> Option<f64> {
        match (self.killing, self.point_mass, self.function) {
            (None, None, RateFunction::Constant { a }) => Some(a),
            _ => None,
        }
    }

    pub fn step<R: Rng + ?Sized>(&self, x: f64, h: f64, rng: &mut R) -> Option<f64> {
        match (self.law, self.killing) {
            (StepLaw::Ou { c, sigma }, _) => Some(motion::ou_step(x, h, c, sigma, rng).expect("h >= 0")),
            (StepLaw::Brownian { sigma }, Some(length)) => {
                motion::interval_step_with_absorption(x, h, length, sigma, rng).expect("valid step")
            }
            (StepLaw::Brownian { sigma }, None) => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                Some(x + sigma * h.sqrt() * z)
            }
        }
    }

    /// Conditional mean of the clock increments over a step, split into the
    /// absolutely continuous part and the local-time part.
    pub fn clock_parts(&self, x0: f64, x1: f64, h: f64) -> (f64, f64) {
        let smooth = motion::rate_integral_given_ends(self.law, &self.function, x0, x1, h);
        let singular = match self.point_mass {
            Some(pm) if pm.weight > 0.0 => {
                let sigma = match self.law {
                    StepLaw::Ou { sigma, .. } | StepLaw::Brownian { sigma } => sigma,
                };
                pm.weight * motion::bm_bridge_expected_local_time(x0, x1, h, pm.at, sigma)
            }
            _ => 0.0,
        };
        (smooth, singular)
    }
}

struct Pending {
    label: UlamLabel,
    birth_time: f64,
    x: f64,
}

/// Simulates descendants of the given roots up to `horizon`, appending
/// nodes to `out` in breadth-first order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn grow<R: Rng + ?Sized>(
    model: &ModelSpec,
    dynamics: &Dynamics,
    roots: Vec<(UlamLabel, f64, f64)>,
    horizon: f64,
    opts: &SimOptions,
    rng: &mut R,
    out: &mut Vec<Node>,
    population: &mut usize,
) -> Result<()> {
    let observe = opts.sorted_observations(horizon);
    let mut queue: VecDeque<Pending> =
        roots.into_iter().map(|(label, birth_time, x)| Pending { label, birth_time, x }).collect();
    while let Some(p) = queue.pop_front() {
        let node = run_particle(model, dynamics, p, horizon, &observe, opts.record_paths, rng);
        if node.cause == EndCause::Fission {
            *population += node.offspring;
            if *population > opts.population_cap {
                return Err(Error::Capacity { cap: opts.population_cap });
            }
            let x = node.end_position.expect("fission happens inside E");
            for k in 1..=node.offspring {
                queue.push_back(Pending { label: node.label.child(k as u32), birth_time: node.end_time, x });
            }
        }
        out.push(node);
    }
    Ok(())
}

fn run_particle<R: Rng + ?Sized>(
    model: &ModelSpec,
    dynamics: &Dynamics,
    p: Pending,
    horizon: f64,
    observe: &[f64],
    record_path: bool,
    rng: &mut R,
) -> Node {
    let threshold: f64 = rng.sample(Exp1);
    let mut clock = 0.0;
    let mut t = p.birth_time;
    let mut x = p.x;
    let mut next_obs = observe.partition_point(|&s| s < t);
    let mut observations = Vec::new();
    let mut path = record_path.then(|| PathSegment::new(t, x));
    let exact_rate = dynamics.exact_clock();

    let finish = |end_time: f64,
                  end_position: Option<f64>,
                  offspring: usize,
                  cause: EndCause,
                  observations: Vec<(f64, f64)>,
                  path: Option<PathSegment>| Node {
        label: p.label.clone(),
        birth_time: p.birth_time,
        end_time,
        birth_position: p.x,
        end_position,
        offspring,
        cause,
        observations,
        path,
        spine: false,
    };

    loop {
        while next_obs < observe.len() && observe[next_obs] == t {
            if t < horizon {
                observations.push((t, x));
            }
            next_obs += 1;
        }
        if t >= horizon {
            return finish(horizon, Some(x), 0, EndCause::Horizon, observations, path);
        }
        let obs_stop = observe.get(next_obs).copied().unwrap_or(f64::INFINITY);
        let mut stop = horizon.min(obs_stop);
        let mut fission_now = false;
        match exact_rate {
            Some(a) => {
                if a > 0.0 {
                    let tau = t + (threshold - clock) / a;
                    if tau <= stop {
                        stop = tau;
                        fission_now = true;
                    }
                }
            }
            None => stop = stop.min(t + dynamics.dt),
        }
        let h = stop - t;
        let x1 = match dynamics.step(x, h, rng) {
            Some(v) => v,
            None => {
                if let Some(path) = path.as_mut() {
                    path.push(stop, None);
                }
                return finish(stop, None, 0, EndCause::Absorbed, observations, path);
            }
        };
        if let Some(rate) = exact_rate {
            clock += rate * h;
            t = stop;
            x = x1;
            if let Some(path) = path.as_mut() {
                path.push(t, Some(x));
            }
            if fission_now {
                let k = model.offspring.sample(x, rng);
                return finish(t, Some(x), k, EndCause::Fission, observations, path);
            }
            continue;
        }
        let (smooth, singular) = dynamics.clock_parts(x, x1, h);
        let inc = smooth + singular;
        if clock + inc >= threshold && inc > 0.0 {
            let frac = ((threshold - clock) / inc).clamp(0.0, 1.0);
            let s = frac * h;
            let u: f64 = rng.random();
            let pos = match dynamics.point_mass {
                Some(pm) if u * inc < singular => pm.at,
                _ => {
                    let (lo, hi) = dynamics.killing.map_or((f64::NEG_INFINITY, f64::INFINITY), |l| (0.0, l));
                    dynamics.law.fission_point(x, x1, h, s, &dynamics.function, lo, hi, rng)
                }
            };
            let tau = t + s;
            if let Some(path) = path.as_mut() {
                if tau > t {
                    path.push(tau, Some(pos));
                }
            }
            let k = model.offspring.sample(pos, rng);
            return finish(tau, Some(pos), k, EndCause::Fission, observations, path);
        }
        clock += inc;
        t = stop;
        x = x1;
        if let Some(path) = path.as_mut() {
            path.push(t, Some(x));
        }
    }
}

/// Simulates the branching system started from one particle at `x`.
pub fn simulate_forest<R: Rng + ?Sized>(
    model: &ModelSpec,
    x: f64,
    horizon: f64,
    opts: &SimOptions,
    rng: &mut R,
) -> Result<Forest> {
    model.validate()?;
    if !(horizon > 0.0) {
        return Err(Error::Precondition(format!("horizon must be positive, got {horizon}")));
    }
    if !model.in_domain(x) {
        return Err(Error::OutOfDomain { what: "initial position", value: x });
    }
    let dynamics = Dynamics::of(model)?;
    let mut nodes = Vec::new();
    let mut population = 1;
    grow(model, &dynamics, vec![(UlamLabel::root(), 0.0, x)], horizon, opts, rng, &mut nodes, &mut population)?;
    Ok(Forest { nodes, horizon, start: x, seed: None })
}

impl Forest {
    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Particles alive at `t` with their positions.
    pub fn snapshot(&self, t: f64) -> Result<Snapshot> {
        if !(t >= 0.0 && t <= self.horizon) {
            return Err(Error::TimeNotObserved { t });
        }
        let mut particles = Vec::new();
        for node in &self.nodes {
            if node.alive_at(t) {
                match node.position_at(t) {
                    Some(x) => particles.push((node.label.clone(), x)),
                    None => return Err(Error::TimeNotObserved { t }),
                }
            }
        }
        Ok(Snapshot { t, particles })
    }

    /// `e^{λ₁t} X_t(h)`.
    pub fn martingale_value(&self, t: f64, spectral: &SpectralTriple) -> Result<f64> {
        let snap = self.snapshot(t)?;
        Ok((spectral.lambda1 * t).exp() * weigh(&snap, |x| spectral.h(x)))
    }

    /// `X_t(f)` for a described test function.
    pub fn functional(&self, t: f64, f: &TestFunction, spectral: &SpectralTriple) -> Result<f64> {
        let snap = self.snapshot(t)?;
        Ok(weigh(&snap, |x| f.eval(x, &spectral.h)))
    }

    /// Checks prefix closure, offspring counts, time ordering and position
    /// continuity at fission.
    pub fn check_invariants(&self) -> Result<()> {
        let index: HashMap<&UlamLabel, &Node> = self.nodes.iter().map(|n| (&n.label, n)).collect();
        if index.len() != self.nodes.len() {
            return Err(Error::Precondition("duplicate labels".into()));
        }
        let mut children: HashMap<&UlamLabel, usize> = HashMap::new();
        for node in &self.nodes {
            if !(node.birth_time < node.end_time
                || (node.birth_time == node.end_time && node.cause != EndCause::Horizon))
            {
                return Err(Error::Precondition(format!("node {} has bad lifetime", node.label)));
            }
            if node.end_time > self.horizon {
                return Err(Error::Precondition(format!("node {} outlives the horizon", node.label)));
            }
            if let Some(parent_label) = node.label.parent() {
                let parent = index
                    .get(&parent_label)
                    .ok_or_else(|| Error::Precondition(format!("node {} has no parent", node.label)))?;
                if parent.cause != EndCause::Fission {
                    return Err(Error::Precondition(format!("parent of {} did not split", node.label)));
                }
                if parent.end_time != node.birth_time || parent.end_position != Some(node.birth_position) {
                    return Err(Error::Precondition(format!("{} does not start where its parent split", node.label)));
                }
                let idx = *node.label.0.last().unwrap() as usize;
                if idx == 0 || idx > parent.offspring {
                    return Err(Error::Precondition(format!("{} has child index out of range", node.label)));
                }
                *children.entry(index.get(&parent_label).map(|p| &p.label).unwrap()).or_default() += 1;
            }
        }
        for node in &self.nodes {
            let n = children.get(&node.label).copied().unwrap_or(0);
            let expected = if node.cause == EndCause::Fission { node.offspring } else { 0 };
            if n != expected {
                return Err(Error::Precondition(format!("{} has {n} children, expected {expected}", node.label)));
            }
        }
        Ok(())
    }

    /// Writes one tab-separated record per node. Reals use 17 significant
    /// digits; the cemetery position is written as `cemetery`.
    pub fn write_records<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# label\tbirth_time\tend_time\toffspring\tcause\tbirth_position\tend_position\tspine")?;
        for node in &self.nodes {
            write_node(&mut w, node)?;
        }
        Ok(())
    }
}

/// 17-significant-digit rendering used by every file output.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_node<W: Write>(w: &mut W, node: &Node) -> io::Result<()> {
    let end = node.end_position.map(fmt_real).unwrap_or_else(|| "cemetery".to_string());
    writeln!(
        w,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        node.label,
        fmt_real(node.birth_time),
        fmt_real(node.end_time),
        node.offspring,
        node.cause,
        fmt_real(node.birth_position),
        end,
        u8::from(node.spine)
    )
}
