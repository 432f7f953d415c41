use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_bintern");

const SMALL: &str = "grid.nx = 5\ngrid.nv = 5\ngrid.nt = 5\ngrid.t_max = 1\nquadrature.n_mc = 8\n";

fn run(dir: &Path, args: &[&str], config: &str) -> Output {
    let cfg = dir.join("run.cfg");
    std::fs::write(&cfg, config).unwrap();
    Command::new(BIN).args(args).arg("--config").arg(&cfg).output().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn invalid_config_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["constants"], "dim = 2\nkernel.gamma2 = -2\nkernel.b2 = zero\nkernel.b3 = zero\n");
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("kernel.gamma2 = -2 outside (-1, 1]"), "{err}");
    assert!(err.contains("at least one of b2, b3"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn constants_match_formula() {
    let dir = tempfile::tempdir().unwrap();
    let pi = std::f64::consts::PI;
    // ||b2|| = c |S^1| = 1, ||b3|| = c |S^3| = 1, C_d = 1
    let cfg = format!(
        "constants.c_d_mode = normalized\nkernel.b2 = constant:{}\nkernel.b3 = constant:{}\n",
        1.0 / (2.0 * pi),
        1.0 / (2.0 * pi * pi)
    );
    let out = run(dir.path(), &["constants"], &cfg);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&dir.path().join("out/constants.json"));
    let k = v["constants"]["k_beta"].as_f64().unwrap();
    assert!((k - 2.75).abs() < 1e-12, "{k}");
    let threshold = 1.0 / (48.0 * 2.75 * (1.0 + 1.0 / (2.0 * (6.0f64 * 2.75).sqrt())));
    assert!((v["constants"]["threshold"].as_f64().unwrap() / threshold - 1.0).abs() < 1e-12);
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);

    // shipped constant, hard sphere + derived ternary
    let out = run(dir.path(), &["constants"], "dim = 2\n");
    assert!(out.status.success());
    let c = &json(&dir.path().join("out/constants.json"))["constants"];
    let c_d = 2.0 * pi * pi * (3.0 * pi).sqrt();
    let (b2, b3) = (c["norm_b2"].as_f64().unwrap(), c["norm_b3"].as_f64().unwrap());
    assert!((b2 - 2.0).abs() < 1e-12);
    let want = c_d * (b2 * (1.0 + 1.0 / 2.0) + b3 * (1.0 + 1.0 / 4.0));
    assert!((c["k_beta"].as_f64().unwrap() / want - 1.0).abs() < 1e-12);
}

#[test]
fn zero_data_converges_at_first_step() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["solve"], &format!("{SMALL}initial.factor = 0\n"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json(&dir.path().join("out/summary.json"));
    assert_eq!(s["converged"], true);
    assert_eq!(s["iterations"], 1);
    assert_eq!(s["final_gap"], 0.0);
    assert_eq!(s["residual_max"], 0.0);
    let trace = std::fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert!(lines[0].starts_with("# config_hash="));
    assert_eq!(lines[1], "n,gap,max_mono_violation,residual_L1");
    assert_eq!(lines[2], "1,0e0,0e0,0e0");
}

#[test]
fn smallness_refusal_and_override() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["solve"], &format!("{SMALL}initial.factor = 0.99\nstop.n_max = 1\nstop.eps_gap = 0\n"));
    assert_eq!(out.status.code(), Some(4), "one step cannot close the bracket exactly");
    assert_eq!(json(&dir.path().join("out/summary.json"))["converged"], false);
    // the factor key is capped below 1, so a table is used to exceed the threshold
    let table = dir.path().join("f0.csv");
    std::fs::write(&table, "x1,x2,v1,v2,value\n0,0,0,0,1\n").unwrap();
    let cfg = format!("{SMALL}initial.preset = table\ninitial.path = f0.csv\n");
    let out = run(dir.path(), &["solve"], &cfg);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("smallness"));
    let out = run(dir.path(), &["solve", "--override-smallness"], &cfg);
    assert_eq!(out.status.code(), Some(3), "discriminant negative: no C_out to start from");
}

#[test]
fn table_off_grid_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("f0.csv"), "x1,x2,v1,v2,value\n0.1,0,0,0,1e-6\n").unwrap();
    let out = run(dir.path(), &["solve"], &format!("{SMALL}initial.preset = table\ninitial.path = f0.csv\n"));
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not a grid node"));
}

#[test]
fn resume_continues_and_refuses_other_configs() {
    let dir = tempfile::tempdir().unwrap();
    let base = format!("{SMALL}stop.eps_gap = 1e-15\n");
    let out = run(dir.path(), &["solve"], &base);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let full = std::fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    let ckpt = dir.path().join("out/checkpoints/iter_0001.ckpt");
    let saved = dir.path().join("iter_0001.ckpt");
    std::fs::copy(&ckpt, &saved).unwrap();

    let out = run(dir.path(), &["solve", "--resume", saved.to_str().unwrap()], &base);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let resumed = std::fs::read_to_string(dir.path().join("out/trace.csv")).unwrap();
    assert_eq!(full, resumed);

    let out = run(dir.path(), &["solve", "--resume", saved.to_str().unwrap()], &format!("{base}seed = 3\n"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("resume refused"));
}

#[test]
fn kernels_and_verify_write_hashed_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL}kernels.frames = 3\nverify.frames = 200\nverify.speeds = 20\nverify.points = 4\nverify.time_samples = 50\n");
    let out = run(dir.path(), &["kernels"], &cfg);
    assert!(out.status.success());
    let frames = std::fs::read_to_string(dir.path().join("out/frames.csv")).unwrap();
    assert_eq!(frames.lines().count(), 2 + 6);
    let out = run(dir.path(), &["verify"], &cfg);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let certs = std::fs::read_to_string(dir.path().join("out/certificates.csv")).unwrap();
    let hash = certs.lines().next().unwrap();
    assert!(frames.starts_with(hash));
    assert!(certs.lines().skip(2).all(|l| l.ends_with("true,true") || l.ends_with(",false")));
}
