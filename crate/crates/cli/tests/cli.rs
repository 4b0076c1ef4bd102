use std::path::Path;
use std::process::{Command, Output};

fn lab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bhp-lab")).current_dir(dir).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn spectral_defaults_pass_for_both_catalog_models() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "ou.json", r#"{"model":{"kind":"ou","c":2.0,"b":1.5,"a":0.1},"seed":1}"#);
    write(d, "iv.json", r#"{"model":{"kind":"interval","beta":1.0,"length":3.141592653589793},"seed":1}"#);
    for (cfg, out) in [("ou.json", "a"), ("iv.json", "b")] {
        let o = lab(d, &["--config", cfg, "--out", out, "spectral"]);
        assert!(o.status.success(), "{cfg}: {}{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
        for f in ["report.json", "report.csv", "manifest.json", "timing.json"] {
            assert!(d.join(out).join(f).is_file(), "{out}/{f}");
        }
    }
    let csv = std::fs::read_to_string(d.join("a/report.csv")).unwrap();
    assert!(!csv.lines().skip(1).any(|l| l.ends_with(",fail")), "{csv}");
}

#[test]
fn small_martingale_run_and_report_table() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(
        d,
        "m.json",
        r#"{"model":{"kind":"interval","beta":1.0,"length":3.141592653589793},
            "experiment":{"name":"martingale","x":1.5707963267948966,"times":[0.5],"replicas":2000},
            "seed":3,"output":"runs/m"}"#,
    );
    let o = lab(d, &["--config", "m.json", "verify", "martingale"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("martingale"));
    let r = lab(d, &["report", "runs"]);
    assert!(r.status.success());
    assert!(stdout(&r).contains("martingale"), "{}", stdout(&r));
}

#[test]
fn config_errors_exit_with_status_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "none.json", r#"{"seed":1}"#);
    write(d, "extra.json", r#"{"model":{"kind":"ou","c":2.0,"b":1.5,"a":0.1},"seed":1,"colour":"red"}"#);
    write(d, "bad.json", r#"{"model":{"kind":"interval","beta":-1.0,"length":1.0},"seed":1}"#);
    let missing = lab(d, &["--config", "none.json", "spectral"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("model"));
    for cfg in ["extra.json", "bad.json"] {
        assert_eq!(lab(d, &["--config", cfg, "spectral"]).status.code(), Some(1), "{cfg}");
    }
    assert_eq!(lab(d, &["report", "nowhere"]).status.code(), Some(1));
    assert_eq!(lab(d, &["verify", "nonsense"]).status.code(), Some(1));
}

#[test]
fn manifest_must_be_replayed_with_its_own_command() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "iv.json", r#"{"model":{"kind":"interval","beta":1.0,"length":3.141592653589793},"seed":5}"#);
    assert!(lab(d, &["--config", "iv.json", "--out", "s", "spectral"]).status.success());
    assert!(lab(d, &["--config", "s/manifest.json", "--out", "s2", "spectral"]).status.success());
    assert_eq!(lab(d, &["--config", "s/manifest.json", "simulate"]).status.code(), Some(1));
    for f in ["report.json", "report.csv", "manifest.json"] {
        assert_eq!(std::fs::read(d.join("s").join(f)).unwrap(), std::fs::read(d.join("s2").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn custom_model_with_point_mass_runs_spectral_and_simulate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(
        d,
        "cu.json",
        r#"{"model":{"kind":"custom",
                     "motion":{"kind":"interval_bm","length":3.0,"sigma":1.0},
                     "rate":{"function":{"kind":"constant","a":0.8},"point_mass":{"at":1.0,"weight":0.5}},
                     "offspring":{"cells":[[0.0,0.0,0.7,0.3]]},
                     "dt":0.005},
            "spectral":{"n":1500},
            "simulate":{"horizon":1.0,"replicas":20},
            "seed":2}"#,
    );
    let s = lab(d, &["--config", "cu.json", "--out", "s", "spectral"]);
    assert!(s.status.success(), "{}", stdout(&s));
    let f = lab(d, &["--config", "cu.json", "--out", "f", "simulate"]);
    assert!(f.status.success(), "{}", stdout(&f));
    assert_eq!(std::fs::read_dir(d.join("f/forests")).unwrap().count(), 20);
}
