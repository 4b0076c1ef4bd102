//! The eleven acceptance criteria, run at their stated sizes and
//! tolerances. Prints one `PASS`/`FAIL` line per criterion.
//!
//! A criterion listed in `KNOWN_RED` is expected to fail at desk scale; it
//! is still run and reported, and the test fails if it unexpectedly
//! passes so the list stays honest.

use std::f64::consts::{E, FRAC_PI_2, PI};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use bhp_core::forest::{simulate_forest, SimOptions};
use bhp_core::model::{catalog_interval, catalog_ou, TestFunction};
use bhp_core::replicas::{default_workers, run_replicas};
use bhp_core::spectral::{
    self, chapman_kolmogorov_defect, grid_spectral_triple, kernel_table, AiuVerdict, Finiteness, GridOptions,
    KernelSource,
};
use bhp_core::stats::Estimate;
use bhp_core::verify::{
    martingale_and_llogl_experiment, slln_experiment, spine_consistency_experiment, spine_decomposition_experiment,
    wlln_experiment, ExperimentReport, MartingaleParams, RunContext, SllnParams, SpineParams, Verdict, WllnParams,
};
use bhp_lab::{ground_state_error, BuiltModel};

/// Criteria that fail for reasons documented in the decisions ledger.
const KNOWN_RED: &[usize] = &[10];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn workers() -> usize {
    default_workers()
}

fn failing_rows(rep: &ExperimentReport) -> String {
    let bad: Vec<String> = rep
        .rows
        .iter()
        .filter(|r| r.verdict == Verdict::Fail)
        .map(|r| format!("{} est={:.6} oracle={:?}", r.experiment, r.estimate, r.oracle))
        .collect();
    if bad.is_empty() {
        "all rows pass".into()
    } else {
        bad.join("; ")
    }
}

fn survival_oracle(x: f64, t: f64) -> f64 {
    (0..200)
        .map(|j| {
            let k = (2 * j + 1) as f64;
            4.0 / (PI * k) * (k * x).sin() * (-0.5 * k * k * t).exp()
        })
        .sum()
}

fn c1_interval_spectrum() -> Outcome {
    let (model, exact) = catalog_interval(1.0, PI, None).unwrap();
    let opts = GridOptions { n: 2000, ..GridOptions::default() };
    let tri = grid_spectral_triple(&model, &opts).unwrap();
    let built = BuiltModel { id: "interval", spec: model, spectral: exact, exact: true };
    let h_err = ground_state_error(&built, &tri, &opts).unwrap();
    let (d1, d2) = ((tri.lambda1 + 0.5).abs(), (tri.gap - 1.5).abs());
    outcome(
        d1 <= 2e-3 && d2 <= 5e-3 && h_err <= 1e-3,
        format!("lambda1 = {:.6}, gap = {:.6}, sup|h - h*| = {h_err:.2e}", tri.lambda1, tri.gap),
    )
}

fn c2_ou_spectrum() -> Outcome {
    let (model, exact) = catalog_ou(2.0, 1.5, 0.1, 1).unwrap();
    let opts = GridOptions { n: 3000, truncation: Some(6.0), ..GridOptions::default() };
    let tri = grid_spectral_triple(&model, &opts).unwrap();
    let built = BuiltModel { id: "ou", spec: model, spectral: exact, exact: true };
    let h_err = ground_state_error(&built, &tri, &opts).unwrap();
    let d1 = (tri.lambda1 + 0.6).abs();
    outcome(
        d1 <= 1e-2 && h_err <= 1e-2,
        format!("lambda1 = {:.6}, max rel h error on [-3,3] = {h_err:.2e}", tri.lambda1),
    )
}

fn c3_many_to_one() -> Outcome {
    let (model, spectral) = catalog_interval(1.0, PI, None).unwrap();
    let xs: Vec<f64> = run_replicas(50_000, 3, workers(), |_, rng| {
        let f = simulate_forest(&model, FRAC_PI_2, 1.0, &SimOptions::default(), rng).unwrap();
        f.functional(1.0, &TestFunction::One, &spectral).unwrap()
    });
    let est = Estimate::from_samples(&xs);
    let oracle = E * survival_oracle(FRAC_PI_2, 1.0);
    outcome(
        est.within(oracle, 3.0),
        format!("mean = {:.5} +- {:.5}, oracle = {oracle:.5}, z = {:.2}", est.mean, est.stderr, est.z_score(oracle)),
    )
}

fn c4_martingale_mean() -> Outcome {
    let (model, spectral) = catalog_ou(2.0, 1.5, 0.1, 1).unwrap();
    let p = MartingaleParams { x: 0.0, times: vec![1.0, 2.0], replicas: 50_000, delta: 0.01, z: 3.0 };
    let rep = martingale_and_llogl_experiment(
        &model,
        "ou",
        &spectral,
        &p,
        &RunContext { seed: 4, workers: workers(), z: 3.0 },
    )
    .unwrap();
    let means: Vec<String> = rep
        .rows
        .iter()
        .filter(|r| r.experiment == "martingale/mean")
        .map(|r| format!("t={}: {:.5} +- {:.5}", r.t.unwrap(), r.estimate, r.stderr))
        .collect();
    let target_ok = (spectral.h(0.0) - 0.840896).abs() < 1e-6;
    outcome(
        rep.verdict == Verdict::Pass && target_ok,
        format!("{} (target 0.840896); {}", means.join(", "), failing_rows(&rep)),
    )
}

fn c5_spine_consistency() -> Outcome {
    let (model, spectral) = catalog_interval(1.0, PI, None).unwrap();
    let source = KernelSource::for_model(&model, &spectral, &GridOptions::default()).unwrap();
    let p = SpineParams { x: FRAC_PI_2, horizon: 1.0, replicas: 20_000, f: TestFunction::H, z: 3.0 };
    let rep = spine_consistency_experiment(
        &model,
        "interval",
        &spectral,
        &source,
        &p,
        &RunContext { seed: 5, workers: workers(), z: 3.0 },
    )
    .unwrap();
    let z: Vec<String> = rep
        .rows
        .iter()
        .filter(|r| r.verdict != Verdict::Info)
        .map(|r| format!("{}: {:.2}", r.experiment.trim_start_matches("spine_consistency/"), r.deviation))
        .collect();
    outcome(rep.verdict == Verdict::Pass, format!("|z| by check: {}", z.join(", ")))
}

fn c6_spine_decomposition() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    let p = |x| SpineParams { x, horizon: 1.0, replicas: 20_000, f: TestFunction::H, z: 3.0 };
    let ctx = RunContext { seed: 6, workers: workers(), z: 3.0 };
    let (m, s) = catalog_interval(1.0, PI, None).unwrap();
    let a = spine_decomposition_experiment(&m, "interval", &s, &p(FRAC_PI_2), &ctx).unwrap();
    let (m, s) = catalog_ou(2.0, 1.5, 0.1, 1).unwrap();
    let b = spine_decomposition_experiment(&m, "ou", &s, &p(0.0), &ctx).unwrap();
    for rep in [a, b] {
        pass &= rep.verdict == Verdict::Pass;
        let d = rep.rows.iter().find(|r| r.experiment.ends_with("/difference")).unwrap();
        parts.push(format!("{}: diff = {:.2e} +- {:.2e}", rep.model, d.estimate, d.stderr));
    }
    outcome(pass, parts.join(", "))
}

fn c7_kernel_analytics() -> Outcome {
    let mut pass = true;
    let mut worst = [0f64; 3];
    for (src, bounded) in
        [(KernelSource::Mehler { alpha: 1.0, dim: 1 }, false), (KernelSource::Sine { length: PI, sigma: 1.0 }, true)]
    {
        for t in [0.5, 1.0, 2.0] {
            let a = kernel_table(&src, t, 201).unwrap();
            let ab = kernel_table(&src, 2.0 * t, 201).unwrap();
            let sym = a.symmetry_defect();
            let row = a.row_defect();
            let ck = chapman_kolmogorov_defect(&a, &a, &ab, &a.inner_indices(bounded), 10);
            worst = [worst[0].max(sym), worst[1].max(row), worst[2].max(ck)];
            pass &= sym <= 1e-9 && row <= 1e-6 && ck <= 1e-6;
        }
        let poincare = spectral::check_poincare(&src, &[0.5, 1.0, 2.0], 201, 7).unwrap();
        pass &= poincare.passes && poincare.slack == 1e-9;
        let aiu = spectral::check_condition_aiu(&src, 0.5, 201).unwrap();
        let times: Vec<f64> = aiu.bound_checks.iter().map(|b| b.t).collect();
        pass &= times == [1.0, 1.5, 3.5] && aiu.bound_checks.iter().all(|b| b.holds);
    }
    outcome(
        pass,
        format!(
            "max symmetry {:.1e}, row {:.1e}, Chapman-Kolmogorov {:.1e}; Poincare and mixing bound hold",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn c8_condition_checkers() -> Outcome {
    let ou = KernelSource::Mehler { alpha: 1.0, dim: 1 };
    let int = KernelSource::Sine { length: PI, sigma: 1.0 };
    let w_ou = spectral::check_condition_w(&ou, 1.0).unwrap();
    let w_int = spectral::check_condition_w(&int, 1.0).unwrap();
    let a_ou = spectral::check_condition_aiu(&ou, 0.5, 201).unwrap();
    let a_int = spectral::check_condition_aiu(&int, 0.5, 201).unwrap();
    let pass = w_ou.verdict == Finiteness::Finite
        && w_int.verdict == Finiteness::Finite
        && a_int.verdict == AiuVerdict::Holds
        && a_ou.verdict == AiuVerdict::Fails;
    outcome(
        pass,
        format!(
            "trace ou = {:.6}, interval = {:.6}; diagonal sup interval = {:.3} ({:?}), ou = {:.3e} ({:?})",
            w_ou.value, w_int.value, a_int.sup, a_int.verdict, a_ou.sup, a_ou.verdict
        ),
    )
}

fn c9_wlln() -> Outcome {
    let (model, spectral) = catalog_ou(2.0, 1.5, 0.1, 1).unwrap();
    let source = KernelSource::for_model(&model, &spectral, &GridOptions::default()).unwrap();
    let p = WllnParams {
        x: 0.0,
        f: TestFunction::HIndicator { lo: -1.0, hi: 1.0 },
        t_grid: vec![4.0, 5.0, 6.0, 7.0, 8.0],
        t_max: None,
        replicas: 20_000,
        w_time: 1.0,
    };
    let rep = wlln_experiment(
        &model,
        "ou",
        &spectral,
        &source,
        &p,
        &RunContext { seed: 20240601, workers: workers(), z: 3.0 },
    )
    .unwrap();
    let d = |t: f64| rep.rows.iter().find(|r| r.experiment == "wlln/D" && r.t == Some(t)).unwrap().estimate;
    let (d4, d8) = (d(4.0), d(8.0));
    outcome(
        d8 < 0.5 * d4 && rep.verdict == Verdict::Pass,
        format!("D(4) = {d4:.5}, D(8) = {d8:.5}, ratio = {:.3}", d8 / d4),
    )
}

fn c10_slln() -> Outcome {
    let (model, spectral) = catalog_interval(1.0, PI, None).unwrap();
    let source = KernelSource::for_model(&model, &spectral, &GridOptions::default()).unwrap();
    let p = SllnParams {
        x: FRAC_PI_2,
        f: TestFunction::HIndicator { lo: 0.0, hi: FRAC_PI_2 },
        sigma: 0.5,
        n_max: 16,
        paths: 200,
        t1: 0.5,
        share: 0.9,
        tolerance: 0.2,
    };
    let rep = slln_experiment(
        &model,
        "interval",
        &spectral,
        &source,
        &p,
        &RunContext { seed: 10, workers: workers(), z: 3.0 },
    )
    .unwrap();
    let share = rep.rows.iter().find(|r| r.experiment == "slln/share").unwrap();
    let survivors = rep.samples.iter().find(|s| s.label == "surviving paths").map_or(0, |s| s.n);
    outcome(
        rep.verdict == Verdict::Pass,
        format!("{survivors} of 200 paths survive; share within 0.2 = {:.3} (need >= 0.9)", share.estimate),
    )
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_bhp-lab")
}

fn run_cli(args: &[&str]) -> i32 {
    let status = Command::new(bin()).args(args).env_remove("BHP_LAB_WORKERS").output().unwrap();
    status.status.code().unwrap_or(-1)
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timing.json" {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn c11_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("config.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"kind": "interval", "beta": 1, "length": 3.141592653589793},
            "experiment": {"name": "spine_consistency", "x": 1.5707963267948966, "horizon": 1, "replicas": 400},
            "simulate": {"horizon": 1.5, "replicas": 8},
            "seed": 77}"#,
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let mut pass = true;
    let mut checked = 0;
    for cmd in [vec!["verify", "spine_consistency"], vec!["simulate"], vec!["spine"]] {
        let name = cmd.join("_");
        let dirs: Vec<_> = ["w1", "w8", "replay"].iter().map(|w| root.join(format!("{name}_{w}"))).collect();
        let mut args = cmd.clone();
        args.extend(["--config", cfg, "--workers", "1", "--out", dirs[0].to_str().unwrap()]);
        pass &= run_cli(&args) == 0;
        let mut args = cmd.clone();
        args.extend(["--config", cfg, "--workers", "8", "--out", dirs[1].to_str().unwrap()]);
        pass &= run_cli(&args) == 0;
        let manifest = dirs[0].join("manifest.json");
        let mut args = cmd.clone();
        args.extend(["--config", manifest.to_str().unwrap(), "--workers", "3", "--out", dirs[2].to_str().unwrap()]);
        pass &= run_cli(&args) == 0;
        let a = tree_bytes(&dirs[0]);
        pass &= !a.is_empty() && a == tree_bytes(&dirs[1]) && a == tree_bytes(&dirs[2]);
        checked += a.len();
    }
    outcome(pass, format!("{checked} files byte-identical across workers 1, 8 and a manifest replay"))
}

#[test]
fn acceptance_criteria() {
    type Check = fn() -> Outcome;
    let criteria: [(usize, &str, Duration, Check); 11] = [
        (1, "spectral oracle, interval model", Duration::from_secs(10), c1_interval_spectrum),
        (2, "spectral oracle, OU model", Duration::from_secs(20), c2_ou_spectrum),
        (3, "many-to-one first moment", Duration::from_secs(120), c3_many_to_one),
        (4, "martingale mean", Duration::from_secs(180), c4_martingale_mean),
        (5, "spine measure consistency", Duration::from_secs(180), c5_spine_consistency),
        (6, "spine decomposition tower identity", Duration::from_secs(180), c6_spine_decomposition),
        (7, "kernel analytics", Duration::from_secs(60), c7_kernel_analytics),
        (8, "condition checkers", Duration::from_secs(60), c8_condition_checkers),
        (9, "weak law halving", Duration::from_secs(600), c9_wlln),
        (10, "strong law on lattice times", Duration::from_secs(600), c10_slln),
        (11, "determinism", Duration::from_secs(600), c11_determinism),
    ];
    let mut unexpected = Vec::new();
    for (id, name, budget, check) in criteria {
        let start = Instant::now();
        let out = check();
        let took = start.elapsed();
        let pass = out.pass && took <= budget;
        let known = KNOWN_RED.contains(&id);
        // Written to the raw handle so the line shows without --nocapture.
        let _ = writeln!(
            std::io::stderr(),
            "criterion {id:>2} {}: {name} [{:.1}s of {}s] {}{}",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64(),
            budget.as_secs(),
            out.detail,
            if known && !pass { " (known red, see README)" } else { "" }
        );
        if pass == known {
            unexpected.push(id);
        }
    }
    assert!(unexpected.is_empty(), "criteria with unexpected outcome: {unexpected:?}");
}
