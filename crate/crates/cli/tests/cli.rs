use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn tuncbf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tuncbf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Numeric columns of a CSV, keyed by header name.
fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], rows: &[Vec<f64>], name: &str) -> Vec<f64> {
    let i = header.iter().position(|h| h == name).unwrap();
    rows.iter().map(|r| r[i]).collect()
}

#[test]
fn arm_simulation_writes_the_full_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("arm_velocity.toml");
    let out = tuncbf(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("trajectory.csv"));
    assert_eq!(header.join(","), "t,x0,x1,u0,u1,h,residual,kappa,margin");
    assert_eq!(rows.len(), 10_001);
    let min_h = column(&header, &rows, "h")
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    assert!(min_h >= -1e-4, "{min_h}");
    let text = fs::read(dir.path().join("trajectory.csv")).unwrap();
    assert!(!text.contains(&b'\r'));
}

#[test]
fn missing_barrier_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(config("single_integrator.toml")).unwrap();
    let start = text.find("[barrier]").unwrap();
    let end = text.find("[controller]").unwrap();
    let cut = format!("{}{}", &text[..start], &text[end..]);
    let path = dir.path().join("no_barrier.toml");
    fs::write(&path, cut).unwrap();
    let out = tuncbf(&[
        "simulate",
        "--config",
        path.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("barrier"), "{}", stderr(&out));
    assert!(!dir.path().join("trajectory.csv").exists());
}

#[test]
fn unknown_keys_and_unsupported_systems_are_rejected() {
    let cfg = config("single_integrator.toml");
    for set in ["sim.step=0.1", "system.kind=scripted", "controller.eta=1.5"] {
        let dir = tempfile::tempdir().unwrap();
        let out = tuncbf(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            set,
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 1, "{set}: {}", stderr(&out));
    }
}

#[test]
fn strict_range_rejects_small_eta_before_simulating() {
    let cfg = config("arm_velocity.toml");
    let dir = tempfile::tempdir().unwrap();
    let args = |strict: bool| {
        let mut a = vec![
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "controller.eta=0.4",
            "--out",
            dir.path().to_str().unwrap(),
        ];
        if strict {
            a.push("--strict-range");
        }
        a.into_iter().map(String::from).collect::<Vec<_>>()
    };
    let strict = tuncbf(&args(true).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&strict), 1, "{}", stderr(&strict));
    assert!(stderr(&strict).contains("initial state"));
    assert!(!dir.path().join("trajectory.csv").exists());

    let loose = tuncbf(&args(false).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&loose), 2, "{}", stderr(&loose));
}

#[test]
fn eta_sweep_orders_the_corrections() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("arm_velocity.toml");
    let out = tuncbf(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--param",
        "eta",
        "--values",
        "0.5,0.6,0.7,0.8,0.9,1.0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (header, rows) = read_csv(&dir.path().join("summary.csv"));
    assert_eq!(
        header.join(","),
        "eta,min_h,max_input_norm,max_deriv_jump,margin_min"
    );
    assert_eq!(rows.len(), 6);
    let norms = column(&header, &rows, "max_input_norm");
    assert!(norms.windows(2).all(|w| w[1] > w[0]), "{norms:?}");
    let min_h = column(&header, &rows, "min_h");
    assert!(min_h.windows(2).all(|w| w[1] >= w[0]), "{min_h:?}");

    // eta = 1 reproduces the Sontag filter
    let stg_dir = tempfile::tempdir().unwrap();
    let out = tuncbf(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "controller.kind=sontag",
        "--out",
        stg_dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let (_, a) = read_csv(&dir.path().join("eta_1.csv"));
    let (_, b) = read_csv(&stg_dir.path().join("trajectory.csv"));
    assert_eq!(a.len(), b.len());
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
}

#[test]
fn sweep_records_failed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("arm_velocity.toml");
    let out = tuncbf(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "sim.horizon=1",
        "--param",
        "eta",
        "--values",
        "0.4,0.7",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let status = fs::read_to_string(dir.path().join("summary_status.csv")).unwrap();
    let lines: Vec<&str> = status.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains(",failed,"), "{status}");
    assert!(lines[2].contains(",ok,"), "{status}");
    let (_, rows) = read_csv(&dir.path().join("summary.csv"));
    assert_eq!(rows.len(), 2);
}

fn check_bounded(eta: &str, gamma: &str) -> Output {
    let cfg = config("arm_velocity.toml");
    tuncbf(&[
        "check",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "controller.kind=bounded_input",
        "--set",
        &format!("controller.eta={eta}"),
        "--set",
        &format!("controller.gamma={gamma}"),
        "--set",
        &format!("check.gamma={gamma}"),
        "--set",
        "check.stride=5",
    ])
}

#[test]
fn arm_check_passes_exactly_for_small_eta() {
    for eta in ["0.5", "0.6", "0.7"] {
        let out = check_bounded(eta, "2.3");
        assert_eq!(code(&out), 0, "eta {eta}: {}", stderr(&out));
        assert!(String::from_utf8_lossy(&out.stdout).contains("status"));
    }
    for eta in ["0.8", "0.9", "1.0"] {
        let out = check_bounded(eta, "2.3");
        assert_eq!(code(&out), 3, "eta {eta}");
        assert!(stderr(&out).contains("upper bound"), "{}", stderr(&out));
    }
}

#[test]
fn tiny_bound_fails_with_deficits() {
    let out = check_bounded("0.7", "0.1");
    assert_eq!(code(&out), 3);
    let err = stderr(&out);
    assert!(err.contains("deficit"), "{err}");
    assert!(err.contains("x = ["), "{err}");
}

#[test]
fn empty_grid_is_a_config_error() {
    let cfg = config("single_integrator.toml");
    let out = tuncbf(&[
        "check",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "check.points=0",
    ]);
    assert_eq!(code(&out), 1);
    let out = tuncbf(&["check", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn margin_reports_a_sample_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("single_integrator.toml");
    let out = tuncbf(&[
        "margin",
        "--config",
        cfg.to_str().unwrap(),
        "--set",
        "controller.kind=sontag",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let estimate = summary["xi_bar_estimate"].as_f64().unwrap();
    assert!(estimate < -0.5, "{estimate}");
    let lines = fs::read_to_string(dir.path().join("margin.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 21 * 21);
    assert_eq!(
        summary["sample_count"].as_u64().unwrap() + summary["degenerate_count"].as_u64().unwrap(),
        21 * 21
    );
}

#[test]
fn seeded_runs_are_byte_identical() {
    let cfg = config("single_integrator.toml");
    let run = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let out = tuncbf(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--set",
            "sim.horizon=1",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::read(dir.path().join("trajectory.csv")).unwrap()
    };
    assert_eq!(run("11"), run("11"));
    assert_ne!(run("11"), run("12"));
}

#[test]
fn torque_level_and_double_integrator_configs_run() {
    for (name, rows) in [("arm_torque.toml", 1001), ("double_integrator.toml", 1001)] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(name);
        let out = tuncbf(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "sim.horizon=1",
            "--zoh",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "{name}: {}", stderr(&out));
        let (header, data) = read_csv(&dir.path().join("trajectory.csv"));
        assert_eq!(data.len(), rows);
        assert!(column(&header, &data, "h").iter().all(|h| *h >= -1e-4));
    }
}
