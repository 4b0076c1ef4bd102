use bhp_wasm::{forest_json, ground_state_json, kernel_row_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn ground_state_matches_closed_form() {
    let v = parse(&ground_state_json("interval", &[1.0, std::f64::consts::PI], 2000).unwrap());
    assert!((v["lambda1"].as_f64().unwrap() + 0.5).abs() < 2e-3);
    let g = v["h_grid"].as_array().unwrap();
    let e = v["h_exact"].as_array().unwrap();
    assert_eq!(g.len(), e.len());
    assert!(g.iter().zip(e).all(|(a, b)| (a.as_f64().unwrap() - b.as_f64().unwrap()).abs() < 1e-3));
}

#[test]
fn kernel_row_integrates_to_one_against_h_squared() {
    let v = parse(&kernel_row_json("ou", &[2.0, 1.5, 0.1], 1.0, 0.3, 800).unwrap());
    let y: Vec<f64> = v["y"].as_array().unwrap().iter().map(|a| a.as_f64().unwrap()).collect();
    let d: Vec<f64> = v["density"].as_array().unwrap().iter().map(|a| a.as_f64().unwrap()).collect();
    // h²m for the catalog OU model with alpha = 1 is N(0, 1/2).
    let dy = y[1] - y[0];
    let mass: f64 = y.iter().zip(&d).map(|(&y, &p)| p * (-y * y).exp() / std::f64::consts::PI.sqrt() * dy).sum();
    assert!((mass - 1.0).abs() < 1e-3, "{mass}");
}

#[test]
fn forest_is_reproducible_and_bounded() {
    let a = forest_json("interval", &[1.0, std::f64::consts::PI], 1.5, 2.0, 9).unwrap();
    let b = forest_json("interval", &[1.0, std::f64::consts::PI], 1.5, 2.0, 9).unwrap();
    assert_eq!(a, b);
    let v = parse(&a);
    assert_eq!(v["branches"].as_array().unwrap().len(), v["paths"].as_array().unwrap().len());
    assert!(v["paths"].as_array().unwrap().iter().flat_map(|p| p.as_array().unwrap()).all(|pt| {
        let x = pt[1].as_f64().unwrap();
        x > 0.0 && x < std::f64::consts::PI
    }));
}

#[test]
fn bad_parameters_are_reported() {
    assert!(ground_state_json("ou", &[1.0], 100).is_err());
    assert!(forest_json("interval", &[0.1, std::f64::consts::PI], 1.0, 1.0, 1).is_err());
}
