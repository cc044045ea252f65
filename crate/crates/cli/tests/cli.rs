//! End-to-end runs of the `steer` binary: artifact schemas, exit codes,
//! determinism, and the failure contract (manifest on solver failure,
//! nothing on config errors).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_steer"))
}

fn shipped_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn read_lines(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    text.lines().map(str::to_string).collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    let bytes = std::fs::read(dir.join("manifest.json")).expect("manifest.json");
    serde_json::from_slice(&bytes).expect("manifest parses")
}

fn fields(line: &str) -> Vec<f64> {
    line.split(',')
        .map(|f| f.parse::<f64>().expect("float field"))
        .collect()
}

const MANIFEST_KEYS: [&str; 11] = [
    "config_sha256",
    "method",
    "n",
    "m",
    "N",
    "tol",
    "iterations",
    "residuals",
    "objective",
    "wall_ms",
    "status",
];

#[test]
fn reference_sdp_run_chains_into_simulate() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().join("sdp");
    let cfg = shipped_config("inertial_s1.toml");
    let res = run(&[
        "steer-sdp",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 0, "stderr: {}", String::from_utf8_lossy(&res.stderr));

    let gains = read_lines(&out.join("gains.csv"));
    assert_eq!(gains[0], "t,k1,k2");
    assert_eq!(gains.len(), 101, "header plus one row per interval");
    let covariance = read_lines(&out.join("covariance.csv"));
    assert_eq!(covariance[0], "t,sigma11,sigma12,sigma22");
    assert_eq!(covariance.len(), 102, "header plus one row per grid time");

    let first = fields(&covariance[1]);
    assert_eq!(first[0], 0.0);
    for (got, want) in first[1..].iter().zip([2.0, 0.0, 2.0]) {
        assert!((got - want).abs() < 1e-9, "initial covariance row {first:?}");
    }
    let last = fields(&covariance[101]);
    assert_eq!(last[0], 1.0);
    for (got, want) in last[1..].iter().zip([0.25, 0.0, 0.25]) {
        assert!(
            (got - want).abs() < 1e-9,
            "terminal covariance row {last:?}"
        );
    }

    let m = manifest(&out);
    let obj = m.as_object().expect("object");
    let mut keys: Vec<&str> = obj.keys().map(|s| s.as_str()).collect();
    keys.sort_unstable();
    let mut want = MANIFEST_KEYS.to_vec();
    want.sort_unstable();
    assert_eq!(keys, want);
    assert_eq!(m["status"], "converged");
    assert_eq!(m["method"], "sdp");
    assert_eq!(m["n"], 2);
    assert_eq!(m["m"], 1);
    assert_eq!(m["N"], 100);
    assert!(m["residuals"]["primal"].as_f64().unwrap() < 1e-5);
    assert!(m["residuals"]["dual"].as_f64().unwrap() < 1e-5);
    let sdp_cost = m["objective"].as_f64().expect("objective");

    // Feed the emitted gain table straight back into the sampler.
    let sim_out = dir.path().join("sim");
    let res = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--gains",
        out.join("gains.csv").to_str().unwrap(),
        "--paths",
        "400",
        "--seed",
        "11",
        "--out",
        sim_out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 0, "stderr: {}", String::from_utf8_lossy(&res.stderr));

    let paths = read_lines(&sim_out.join("paths.csv"));
    assert_eq!(paths[0], "path_id,t,x1,x2,u1");
    assert_eq!(paths.len(), 1 + 400 * 101);
    let m = manifest(&sim_out);
    assert_eq!(m["N"], 100, "grid adopted from the gain table");
    let mc_cost = m["objective"].as_f64().expect("cost estimate");
    let stderr = m["residuals"]["cost_stderr"].as_f64().expect("stderr");
    assert!(stderr > 0.0);
    assert!(
        (mc_cost - sdp_cost).abs() < 2.0,
        "Monte Carlo cost {mc_cost} far from the solver objective {sdp_cost}"
    );
    // Empirical covariance table shares the solver's schema.
    let emp = read_lines(&sim_out.join("covariance.csv"));
    assert_eq!(emp[0], "t,sigma11,sigma12,sigma22");
    assert_eq!(emp.len(), 102);
}

/// The no-state-weight scalar run has a closed-form optimal gain
/// `-pi(0) x` with `pi(0)` the root of the endpoint matching condition;
/// solve for it here by bisection and hold the emitted table to it.
#[test]
fn riccati_bridge_matches_the_closed_form_slope() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().join("ric");
    let res = run(&[
        "steer-riccati",
        "--config",
        shipped_config("scalar_bridge.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 0, "stderr: {}", String::from_utf8_lossy(&res.stderr));

    // sigma0 = 2, sigma_T = 1/4, T = 1: the slope p solves
    // p/(1-p) + (1/2 - p)/(3/2 - p) = 1/sigma_T = 4 on (0, 1).
    let balance = |p: f64| p / (1.0 - p) + (0.5 - p) / (1.5 - p) - 4.0;
    let (mut lo, mut hi) = (0.0, 0.999);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if balance(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let p = 0.5 * (lo + hi);

    let gains = read_lines(&out.join("gains.csv"));
    assert_eq!(gains[0], "t,k1");
    assert_eq!(gains.len(), 401);
    let first = fields(&gains[1]);
    assert!(
        (first[1] - p).abs() < 1e-6,
        "initial gain {} vs closed form {p}",
        first[1]
    );

    let factors = read_lines(&out.join("factors.csv"));
    assert_eq!(factors[0], "t,pi11,h11,c,chat");
    assert_eq!(factors.len(), 402);
    let row0 = fields(&factors[1]);
    assert!((row0[1] - p).abs() < 1e-6, "pi(0) is the slope itself");
    assert_eq!(row0[3], 1.0, "normalizers start at exactly one");
    assert_eq!(row0[4], 1.0);

    let m = manifest(&out);
    assert_eq!(m["status"], "converged");
    assert!(m["residuals"]["boundary"].as_f64().unwrap() < 1e-6);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().expect("tempdir");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let res = run(&[
            "steer-riccati",
            "--config",
            shipped_config("scalar_bridge.toml").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&res), 0);
    }
    for table in ["gains.csv", "covariance.csv", "factors.csv"] {
        let lhs = std::fs::read(a.join(table)).expect("first run");
        let rhs = std::fs::read(b.join(table)).expect("second run");
        assert_eq!(lhs, rhs, "{table} differs between identical runs");
    }
}

#[test]
fn pde_bridge_controls_the_density_to_its_target() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().join("pde");
    let res = run(&[
        "steer-pde",
        "--config",
        shipped_config("gaussian_1d_pde.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 0, "stderr: {}", String::from_utf8_lossy(&res.stderr));

    let m = manifest(&out);
    assert_eq!(m["status"], "converged");
    assert!(m["residuals"]["fixed_point"].as_f64().unwrap() <= 1e-8);
    assert!(
        m["residuals"]["terminal_l1"].as_f64().unwrap() < 0.06,
        "controlled density should land near the target at this mesh"
    );
    assert!(m["objective"].is_null(), "no scalar objective for the grid run");

    let control = read_lines(&out.join("control.csv"));
    assert_eq!(control[0], "t,x,u");
    assert_eq!(control.len(), 1 + 201 * 200, "one row per (time, node)");
    let density = read_lines(&out.join("density.csv"));
    assert_eq!(density.len(), 1 + 201 * 200);
}

#[test]
fn iteration_cap_exits_two_but_still_writes_the_manifest() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = dir.path().join("lowcap.toml");
    std::fs::write(
        &cfg,
        r#"
[problem]
a = [[0.0, 1.0], [0.0, 0.0]]
b = [[0.0], [1.0]]
s = [[1.0, 0.0], [0.0, 1.0]]
sigma0 = [[2.0, 0.0], [0.0, 2.0]]
sigma_t = [[0.25, 0.0], [0.0, 0.25]]
horizon = 1.0

[numeric]
steps = 50
max_iters = 40
"#,
    )
    .expect("write config");
    let out = dir.path().join("capped");
    let res = run(&[
        "steer-sdp",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 2);
    let m = manifest(&out);
    assert_eq!(m["status"], "iteration_cap");
    assert_eq!(m["iterations"], 40);
    assert!(
        m["residuals"]["dual"].as_f64().unwrap() > 1e-6,
        "failure manifest records how far the run got"
    );
    assert!(
        out.join("gains.csv").exists(),
        "best-effort tables accompany the failure manifest"
    );
}

#[test]
fn config_errors_exit_one_and_write_nothing() {
    let dir = tempfile::tempdir().expect("tempdir");

    let bad_dims = dir.path().join("bad_dims.toml");
    std::fs::write(
        &bad_dims,
        r#"
[problem]
a = [[0.0, 1.0], [0.0, 0.0]]
b = [[0.0], [1.0], [3.0]]
s = [[1.0, 0.0], [0.0, 1.0]]
sigma0 = [[2.0, 0.0], [0.0, 2.0]]
sigma_t = [[0.25, 0.0], [0.0, 0.25]]
horizon = 1.0
"#,
    )
    .expect("write config");
    let out = dir.path().join("never");
    for cmd in ["validate", "steer-sdp", "steer-riccati", "simulate"] {
        let res = run(&[
            cmd,
            "--config",
            bad_dims.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&res), 1, "{cmd} must reject the shape mismatch");
        assert!(!res.stderr.is_empty(), "{cmd} must explain itself on stderr");
        assert!(!out.exists(), "{cmd} must not create an output directory");
    }

    let typo = dir.path().join("typo.toml");
    let good = std::fs::read_to_string(shipped_config("scalar_bridge.toml")).unwrap();
    std::fs::write(&typo, format!("{good}\n[numeric.extra]\nknob = 1\n")).unwrap();
    let res = run(&["validate", "--config", typo.to_str().unwrap()]);
    assert_eq!(exit_code(&res), 1, "unknown keys are config errors");

    let res = run(&["validate", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(exit_code(&res), 1);
}

#[test]
fn validate_passes_every_shipped_config() {
    for name in [
        "inertial_s1.toml",
        "inertial_s10.toml",
        "scalar_bridge.toml",
        "gaussian_1d_pde.toml",
    ] {
        let res = run(&["validate", "--config", shipped_config(name).to_str().unwrap()]);
        assert_eq!(
            exit_code(&res),
            0,
            "{name}: {}",
            String::from_utf8_lossy(&res.stderr)
        );
        let stdout = String::from_utf8_lossy(&res.stdout);
        assert!(stdout.contains("controllability: pass"), "{name}: {stdout}");
        assert!(stdout.contains("problem: ok"));
    }
}

#[test]
fn thread_count_never_changes_the_samples() {
    let dir = tempfile::tempdir().expect("tempdir");
    let cfg = shipped_config("scalar_bridge.toml");
    let outputs: Vec<PathBuf> = ["one", "five"]
        .iter()
        .map(|tag| dir.path().join(tag))
        .collect();
    for (threads, out) in ["1", "5"].iter().zip(&outputs) {
        let res = bin()
            .args([
                "simulate",
                "--config",
                cfg.to_str().unwrap(),
                "--paths",
                "150",
                "--seed",
                "9",
                "--out",
                out.to_str().unwrap(),
            ])
            .env("STEER_THREADS", threads)
            .output()
            .expect("binary runs");
        assert_eq!(exit_code(&res), 0);
    }
    let lhs = std::fs::read(outputs[0].join("paths.csv")).expect("paths");
    let rhs = std::fs::read(outputs[1].join("paths.csv")).expect("paths");
    assert_eq!(lhs, rhs, "sampling must not depend on the thread split");

    let res = bin()
        .args(["simulate", "--config", cfg.to_str().unwrap()])
        .env("STEER_THREADS", "zero please")
        .output()
        .expect("binary runs");
    assert_eq!(exit_code(&res), 1, "junk STEER_THREADS is a config error");
}

#[test]
fn flag_overrides_beat_the_config_file() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().join("coarse");
    let res = run(&[
        "steer-riccati",
        "--config",
        shipped_config("scalar_bridge.toml").to_str().unwrap(),
        "--steps",
        "50",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 0);
    let m = manifest(&out);
    assert_eq!(m["N"], 50);
    assert_eq!(read_lines(&out.join("gains.csv")).len(), 51);

    let res = run(&[
        "steer-riccati",
        "--config",
        shipped_config("scalar_bridge.toml").to_str().unwrap(),
        "--steps",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&res), 1, "flag values get the same validation");
}
