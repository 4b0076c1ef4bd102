//! Browser bindings for the demo page in `www/`.
//!
//! Three operations, each returning a JSON document:
//! [`ground_state`] solves the grid eigenproblem, [`kernel_row`] evaluates
//! `y ↦ p^h(t, x, y)` and [`forest`] simulates one realisation. Models are
//! the two catalog families, selected by `kind` (`"ou"` or `"interval"`)
//! with parameters `[c, b, a]` or `[beta, length]`.

use bhp_core::forest::{simulate_forest, SimOptions};
use bhp_core::model::{catalog_interval, catalog_ou, ModelSpec, Motion, SpectralTriple};
use bhp_core::rng::rng_from_seed;
use bhp_core::spectral::{grid_for, grid_spectral_triple, GridOptions, KernelSource};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Largest forest the page will draw.
const MAX_PARTICLES: usize = 20_000;

fn model(kind: &str, params: &[f64]) -> Result<(ModelSpec, SpectralTriple), String> {
    let r = match (kind, params) {
        ("ou", [c, b, a]) => catalog_ou(*c, *b, *a, 1),
        ("interval", [beta, length]) => catalog_interval(*beta, *length, None),
        _ => {
            return Err(format!(
            "expected kind \"ou\" with [c, b, a] or \"interval\" with [beta, length], got {kind} with {} parameters",
            params.len()
        ))
        }
    };
    r.map_err(|e| e.to_string())
}

fn json<T: Serialize>(v: &T) -> Result<String, String> {
    serde_json::to_string(v).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct GroundState {
    lambda1: f64,
    gap: f64,
    exact_lambda1: f64,
    exact_gap: f64,
    x: Vec<f64>,
    h_grid: Vec<f64>,
    h_exact: Vec<f64>,
}

pub fn ground_state_json(kind: &str, params: &[f64], n: usize) -> Result<String, String> {
    let (spec, exact) = model(kind, params)?;
    let opts = GridOptions { n: n.clamp(50, 20_000), ..GridOptions::default() };
    let grid_tri = grid_spectral_triple(&spec, &opts).map_err(|e| e.to_string())?;
    let grid = grid_for(&spec, &opts).map_err(|e| e.to_string())?;
    let stride = (grid.nodes.len() / 400).max(1);
    let x: Vec<f64> = grid.nodes.iter().copied().step_by(stride).collect();
    json(&GroundState {
        lambda1: grid_tri.lambda1,
        gap: grid_tri.gap,
        exact_lambda1: exact.lambda1,
        exact_gap: exact.gap,
        h_grid: x.iter().map(|&v| grid_tri.h(v)).collect(),
        h_exact: x.iter().map(|&v| exact.h(v)).collect(),
        x,
    })
}

#[derive(Serialize)]
struct KernelRow {
    t: f64,
    x: f64,
    y: Vec<f64>,
    density: Vec<f64>,
}

fn window(spec: &ModelSpec) -> (f64, f64) {
    match spec.motion {
        Motion::IntervalBm { length, .. } => (0.0, length),
        Motion::Ou { c, .. } => {
            let r = 4.0 / c.sqrt();
            (-r, r)
        }
    }
}

pub fn kernel_row_json(kind: &str, params: &[f64], t: f64, x: f64, points: usize) -> Result<String, String> {
    let (spec, exact) = model(kind, params)?;
    let source = KernelSource::for_model(&spec, &exact, &GridOptions::default()).map_err(|e| e.to_string())?;
    let (lo, hi) = window(&spec);
    let points = points.clamp(10, 2000);
    let y: Vec<f64> = (1..points).map(|i| lo + (hi - lo) * i as f64 / points as f64).collect();
    let density =
        y.iter().map(|&v| source.density_h(t, x, v)).collect::<Result<Vec<_>, _>>().map_err(|e| e.to_string())?;
    json(&KernelRow { t, x, y, density })
}

#[derive(Serialize)]
struct Branch {
    label: String,
    t0: f64,
    x0: f64,
    t1: f64,
    x1: Option<f64>,
    cause: String,
}

#[derive(Serialize)]
struct ForestView {
    horizon: f64,
    lo: f64,
    hi: f64,
    population: usize,
    martingale: f64,
    branches: Vec<Branch>,
    /// Coarse paths: one polyline per node, `[t, x]` pairs.
    paths: Vec<Vec<[f64; 2]>>,
}

pub fn forest_json(kind: &str, params: &[f64], x: f64, horizon: f64, seed: u64) -> Result<String, String> {
    let (spec, exact) = model(kind, params)?;
    let opts = SimOptions { record_paths: true, population_cap: MAX_PARTICLES, ..SimOptions::default() };
    let forest = simulate_forest(&spec, x, horizon, &opts, &mut rng_from_seed(seed)).map_err(|e| e.to_string())?;
    let population = forest.snapshot(horizon).map_err(|e| e.to_string())?.len();
    let martingale = forest.martingale_value(horizon, &exact).map_err(|e| e.to_string())?;
    let branches = forest
        .nodes
        .iter()
        .map(|n| Branch {
            label: n.label.to_string(),
            t0: n.birth_time,
            x0: n.birth_position,
            t1: n.end_time,
            x1: n.end_position,
            cause: n.cause.to_string(),
        })
        .collect();
    let paths = forest
        .nodes
        .iter()
        .map(|n| match &n.path {
            Some(p) => {
                let live: Vec<[f64; 2]> =
                    (0..p.times.len()).filter(|&i| p.alive[i]).map(|i| [p.times[i], p.positions[i]]).collect();
                let stride = (live.len() / 60).max(1);
                let mut line: Vec<[f64; 2]> = live.iter().copied().step_by(stride).collect();
                if let Some(&last) = live.last() {
                    if line.last() != Some(&last) {
                        line.push(last);
                    }
                }
                line
            }
            None => Vec::new(),
        })
        .collect();
    let (lo, hi) = window(&spec);
    json(&ForestView { horizon, lo, hi, population, martingale, branches, paths })
}

/// Grid ground state next to the closed form.
#[wasm_bindgen]
pub fn ground_state(kind: &str, params: &[f64], n: usize) -> Result<String, JsError> {
    ground_state_json(kind, params, n).map_err(|e| JsError::new(&e))
}

/// `p^h(t, x, ·)` on a uniform grid of the displayed window.
#[wasm_bindgen]
pub fn kernel_row(kind: &str, params: &[f64], t: f64, x: f64, points: usize) -> Result<String, JsError> {
    kernel_row_json(kind, params, t, x, points).map_err(|e| JsError::new(&e))
}

/// One simulated forest with coarse particle paths.
#[wasm_bindgen]
pub fn forest(kind: &str, params: &[f64], x: f64, horizon: f64, seed: u64) -> Result<String, JsError> {
    forest_json(kind, params, x, horizon, seed).map_err(|e| JsError::new(&e))
}
