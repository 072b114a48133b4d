use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn asdinv(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asdinv"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn summary(out: &Path, scenario: &str, command: &str) -> Value {
    let text = std::fs::read_to_string(out.join(scenario).join(command).join("summary.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn design_reports_reference_gain_and_output_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let o = asdinv(&["design", "--scenario", "siso"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = summary(dir.path(), "siso", "design");
    let k: Vec<f64> = s["k"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r[0].as_f64().unwrap())
        .collect();
    for (got, want) in k.iter().zip([-5.0, -8.0, -5.0]) {
        assert!((got - want).abs() < 1e-10);
    }
    let c: Vec<f64> = s["c"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r[0].as_f64().unwrap())
        .collect();
    let r = c[0] / 6.0;
    assert!((c[1] - 5.0 * r).abs() < 1e-12 && (c[2] - r).abs() < 1e-12);
    assert_eq!(s["structure"]["passed"], true);
    assert!(s["pi_gains"]["kp"].is_array());

    let o = asdinv(&["design", "--scenario", "quadrotor"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let s = summary(dir.path(), "quadrotor", "design");
    let col0: Vec<f64> = (0..3).map(|i| s["c"][i][0].as_f64().unwrap().abs()).collect();
    for (got, want) in col0.iter().zip([0.9283, 0.3713, 0.0206]) {
        assert!((got - want).abs() < 1e-3, "{col0:?}");
    }
}

#[test]
fn malformed_config_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let text = include_str!("../scenarios/siso.json").replace("\"epsilon\": 0.1", "\"epsilon\": \"small\"");
    std::fs::write(&bad, text).unwrap();
    let o = asdinv(&["design", "--scenario", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epsilon"), "{}", stderr(&o));

    let o = asdinv(&["simulate", "--scenario", "siso", "--set", "sim.dtt=0.1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dtt"), "{}", stderr(&o));

    let o = asdinv(&["simulate", "--scenario", "no_such_scenario"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_writes_trace_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let o = asdinv(&["simulate", "--scenario", "siso"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("siso/simulate/trace.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "t,x1,x2,x3,u1,y1,dhat1,sat");
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first.len(), 8);
    assert_eq!(csv.lines().count(), 20_002);
    let s = summary(dir.path(), "siso", "simulate");
    let m = &s["metrics"];
    assert!(m["sup_tail"].as_f64().unwrap() < 1e-2);
    assert!(m["energy"].as_f64().unwrap().is_finite());
    assert!(m["max_abs_u"][0].as_f64().unwrap() <= 5.0);
    assert!(m["saturation_fraction"].as_f64().is_some());
    assert!(s["timestamp"].is_u64());
}

#[test]
fn large_epsilon_degrades_without_crashing() {
    let dir = tempfile::tempdir().unwrap();
    let o = asdinv(&["simulate", "--scenario", "siso", "--set", "epsilon=10"], dir.path());
    assert!(matches!(o.status.code(), Some(0) | Some(3)), "{}", stderr(&o));
    let s = summary(dir.path(), "siso", "simulate");
    assert_eq!(s["epsilon"], 10.0);
    if s["diverged"] == false {
        assert!(s["metrics"]["sup_tail"].as_f64().unwrap() > 1e-2);
    }
}

#[test]
fn payload_inertia_stays_stable() {
    let dir = tempfile::tempdir().unwrap();
    let o = asdinv(
        &["simulate", "--scenario", "quadrotor", "--set", "J_scale=1.3"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = summary(dir.path(), "quadrotor", "simulate");
    assert_eq!(s["diverged"], false);
    assert!(s["metrics"]["sup_tail"].as_f64().unwrap() < 1e-2);
}

#[test]
fn divergence_exits_3_with_blowup_time() {
    let dir = tempfile::tempdir().unwrap();
    let o = asdinv(
        &["simulate", "--scenario", "delay_demo", "--set", "epsilon=0.01"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let s = summary(dir.path(), "delay_demo", "simulate");
    assert_eq!(s["diverged"], true);
    assert!(s["blowup_time"].as_f64().unwrap() > 0.0);
    assert_eq!(s["exit_code"], 3);
}

#[test]
fn verify_passes_on_reference_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let o = asdinv(
        &[
            "verify",
            "--scenario",
            "siso",
            "--scenario",
            "f16",
            "--scenario",
            "quadrotor",
            "--jobs",
            "3",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for name in ["siso", "f16", "quadrotor"] {
        let s = summary(dir.path(), name, "verify");
        assert_eq!(s["passed"], true, "{name}");
        for check in [
            "structure",
            "decomposition",
            "realization_frequency",
            "realization_trajectory",
        ] {
            assert_eq!(s["checks"][check]["passed"], true, "{name}: {check}");
        }
    }
}

#[test]
fn verify_failure_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let o = asdinv(
        &["verify", "--scenario", "delay_demo", "--set", "epsilon=0.01"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    let s = summary(dir.path(), "delay_demo", "verify");
    assert_eq!(s["passed"], false);
    assert_eq!(s["checks"]["structure"]["passed"], true);
}

#[test]
fn bound_on_synthetic_and_missing_constants() {
    let dir = tempfile::tempdir().unwrap();
    let o = asdinv(&["bound", "--scenario", "synthetic"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = summary(dir.path(), "synthetic", "bound");
    let rep = &s["report"];
    let eps_max = rep["epsilon_max"].as_f64().unwrap();
    assert!(eps_max > 0.0);
    assert!((s["epsilon"].as_f64().unwrap() - eps_max / 2.0).abs() < 1e-12 * eps_max);
    assert!(rep["bound"]["eta"].as_f64().unwrap() > 0.0);
    let (app, stmt) = (
        rep["bound"]["full"].as_f64().unwrap(),
        rep["bound"]["compact"].as_f64().unwrap(),
    );
    let p_min = rep["p_min"].as_f64().unwrap();
    assert!(stmt > 0.0 && (app - stmt / p_min.sqrt()).abs() <= 1e-12 * app);
    assert_eq!(rep["eta_grid"].as_array().unwrap().len(), 41);

    let o = asdinv(&["bound", "--scenario", "f16"], dir.path());
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("constants"), "{}", stderr(&o));
    assert!(!dir.path().join("f16").exists());
}

#[test]
fn user_supplied_constants_enable_bound() {
    let dir = tempfile::tempdir().unwrap();
    let consts = r#"constants={"l_ht":0,"l_hu_lower":1,"l_hu_upper":1,"k_sigma":0,"delta_sigma":0,"l_sigma_x":0,"l_sigma_t":0,"d_sigma":0}"#;
    let o = asdinv(&["bound", "--scenario", "siso", "--set", consts], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep = &summary(dir.path(), "siso", "bound")["report"];
    assert!(rep["gamma0"].as_f64().unwrap() > 0.0);
    // zero forcing: the bound collapses to the origin
    if rep["bound"].is_object() {
        assert_eq!(rep["bound"]["full"].as_f64().unwrap(), 0.0);
    }
}

#[test]
fn outputs_are_byte_identical_without_timestamp() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let o = asdinv(
            &[
                "simulate",
                "--scenario",
                "f16",
                "--scenario",
                "deadzone",
                "--jobs",
                "2",
                "--no-timestamp",
            ],
            dir.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for name in ["f16", "deadzone"] {
        for file in ["trace.csv", "summary.json"] {
            let pa = std::fs::read(a.path().join(name).join("simulate").join(file)).unwrap();
            let pb = std::fs::read(b.path().join(name).join("simulate").join(file)).unwrap();
            assert!(pa == pb, "{name}/{file} differs");
        }
        assert!(summary(a.path(), name, "simulate").get("timestamp").is_none());
    }
}
