use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn eightport(dir: &Path, args: &[&str]) -> (i32, Value) {
    eightport_env(dir, args, &[])
}

fn eightport_env(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> (i32, Value) {
    let out = Command::new(env!("CARGO_BIN_EXE_eightport"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .envs(env.iter().copied())
        .output()
        .expect("binary runs");
    let stdout = String::from_utf8_lossy(&out.stdout);
    let report = serde_json::from_str(&stdout).unwrap_or(Value::Null);
    (out.status.code().unwrap_or(-1), report)
}

/// Data rows of a CSV written by the tool, after the version line and header.
fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# eightport "));
    lines.next().unwrap();
    lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn num(v: &Value) -> f64 {
    v.as_f64().unwrap()
}

#[test]
fn povm_ideal_detector_gives_identity_diagonals() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = eightport(dir.path(), &["povm", "--eps", "1.0", "--n-max", "5"]);
    assert_eq!(code, 0);
    assert_eq!(num(&report["completeness_defect"]), 0.0);
    for row in csv_rows(&dir.path().join("povm.csv")) {
        let expected = if row[0] == row[1] { 1.0 } else { 0.0 };
        assert_eq!(row[2], expected);
    }
}

#[test]
fn povm_completeness_at_half_efficiency() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = eightport(
        dir.path(),
        &["povm", "--eps", "0.5", "--n-max", "64", "--cutoff", "64"],
    );
    assert_eq!(code, 0);
    assert!(num(&report["completeness_defect"]) < 1e-12);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        eightport(dir.path(), &["povm", "--eps", "0", "--n-max", "3"]).0,
        1
    );
    assert_eq!(eightport(dir.path(), &["povm", "--bogus"]).0, 1);
    assert_eq!(
        eightport(dir.path(), &["homodyne", "--state", "squeezed(1)"]).0,
        1
    );
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"eps": [0.5]}"#).unwrap();
    assert_eq!(
        eightport(dir.path(), &["povm", "--config", cfg.to_str().unwrap()]).0,
        1
    );
    assert_eq!(
        eightport_env(
            dir.path(),
            &["povm", "--eps", "1", "--n-max", "2"],
            &[("EIGHTPORT_THREADS", "zero")]
        )
        .0,
        1
    );
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"efficiencies": [0.3], "n_max": 4, "cutoff": 10}"#).unwrap();
    let (code, report) = eightport(
        dir.path(),
        &["povm", "--config", cfg.to_str().unwrap(), "--n-max", "10"],
    );
    assert_eq!(code, 0);
    assert_eq!(num(&report["efficiency"]), 0.3);
    assert_eq!(report["n_max"], 10);
    assert_eq!(report["cutoff"], 10);
}

fn poisson(mean: f64, n: usize) -> f64 {
    (1..=n).fold((-mean).exp(), |p, k| p * mean / k as f64)
}

#[test]
fn homodyne_vacuum_matches_poisson_difference() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = eightport(
        dir.path(),
        &[
            "homodyne",
            "--state",
            "vacuum",
            "--r",
            "3",
            "--eps",
            "1,1",
            "--interval",
            "2,1",
        ],
    );
    assert_eq!(code, 0);
    assert_eq!(num(&report["interval_probability"]), 0.0);
    // each counter sees |3/sqrt2>: independent Poisson(4.5) counts
    let mu = 4.5;
    for row in csv_rows(&dir.path().join("homodyne_distribution.csv")) {
        let k = (row[0] * 3.0 * 2f64.sqrt()).round() as i64;
        let skellam: f64 = (0..80usize)
            .filter(|&m| m as i64 + k >= 0)
            .map(|m| poisson(mu, m) * poisson(mu, (m as i64 + k) as usize))
            .sum();
        assert!((row[1] - skellam).abs() < 1e-12, "k = {k}");
    }
}

#[test]
fn homodyne_char_fn_is_transform_of_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = eightport(
        dir.path(),
        &[
            "homodyne",
            "--state",
            "cat(1.2,0.3)",
            "--r",
            "4",
            "--eps",
            "0.7,0.9",
            "--t-grid=-4,4,33",
        ],
    );
    assert_eq!(code, 0);
    let atoms = csv_rows(&dir.path().join("homodyne_distribution.csv"));
    let cf = csv_rows(&dir.path().join("homodyne_char_fn.csv"));
    assert_eq!(cf.len(), 33);
    for row in cf {
        let (re, im) = atoms.iter().fold((0.0, 0.0), |(a, b), x| {
            (
                a + x[1] * (row[0] * x[0]).cos(),
                b + x[1] * (row[0] * x[0]).sin(),
            )
        });
        assert!((re - row[1]).abs() < 1e-9 && (im - row[2]).abs() < 1e-9);
    }
}

#[test]
fn converge_gate_and_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = eightport(
        dir.path(),
        &[
            "converge",
            "--state",
            "vacuum",
            "--eps",
            "0.7,0.9",
            "--r-schedule",
            "25,50,100,200",
        ],
    );
    assert_eq!(code, 0);
    assert_eq!(report["decay_gate_passed"], true);
    let rows = csv_rows(&dir.path().join("converge.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows[2][1] < 0.02);
    let (code, _) = eightport(
        dir.path(),
        &[
            "converge",
            "--state",
            "vacuum",
            "--eps",
            "1",
            "--r-schedule",
            "10",
        ],
    );
    assert_eq!(code, 0);
    assert_eq!(csv_rows(&dir.path().join("converge.csv")).len(), 1);
    let (code, _) = eightport(
        dir.path(),
        &["converge", "--state", "vacuum", "--r-schedule", "50,20"],
    );
    assert_eq!(code, 1);
}

#[test]
fn eightport_vacuum_smoke_and_limit_variance() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = eightport(
        dir.path(),
        &[
            "eightport",
            "--state",
            "vacuum",
            "--eps",
            "1",
            "--r",
            "3",
            "--grid",
            "8,64",
        ],
    );
    assert_eq!(code, 0);
    assert_eq!(report["joint_written"], true);
    let joint = csv_rows(&dir.path().join("eightport_joint.csv"));
    let total: f64 = joint.iter().map(|r| r[4]).sum();
    assert!((total - 1.0).abs() < 1e-9);

    let (code, report) = eightport(
        dir.path(),
        &[
            "eightport",
            "--state",
            "coherent(0.5,-0.3)",
            "--eps",
            "0.5",
            "--r",
            "10",
            "--grid",
            "10,80",
        ],
    );
    assert_eq!(code, 0);
    for axis in 0..2 {
        assert!((num(&report["limit_variance"][axis]) - 2.0).abs() < 1e-6);
    }
    assert!((num(&report["limit_mean"][0]) - 0.5 * 2f64.sqrt()).abs() < 1e-6);
}

#[test]
fn eightport_ks_decreases_in_r() {
    let dir = tempfile::tempdir().unwrap();
    let ks: Vec<f64> = ["25", "50", "100"]
        .iter()
        .map(|r| {
            let (code, report) = eightport(
                dir.path(),
                &[
                    "eightport",
                    "--state",
                    "coherent(0.7,0.3)",
                    "--eps",
                    "0.6,0.7,0.8,0.9",
                    "--r",
                    r,
                    "--grid",
                    "6,64",
                    "--no-joint",
                ],
            );
            assert_eq!(code, 0);
            num(&report["ks_distance"])
        })
        .collect();
    assert!(ks[1] < ks[0] && ks[2] < ks[1], "{ks:?}");
}

#[test]
fn sampling_is_seeded_and_thread_independent() {
    let args = [
        "eightport",
        "--state",
        "coherent(0.4,0.1)",
        "--eps",
        "0.8",
        "--r",
        "4",
        "--grid",
        "8,32",
        "--no-joint",
        "--shots",
        "20000",
        "--seed",
        "11",
    ];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(
        eightport_env(a.path(), &args, &[("EIGHTPORT_THREADS", "1")]).0,
        0
    );
    assert_eq!(
        eightport_env(b.path(), &args, &[("EIGHTPORT_THREADS", "4")]).0,
        0
    );
    for f in [
        "eightport_samples.csv",
        "eightport_limit.csv",
        "eightport_report.json",
    ] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let c = tempfile::tempdir().unwrap();
    assert_eq!(eightport(c.path(), &args[..args.len() - 2]).0, 1);
    assert_eq!(std::fs::read_dir(c.path()).unwrap().count(), 0);
}

#[test]
fn genop_vacuum_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = eightport(
        dir.path(),
        &[
            "genop",
            "--parameter-field",
            "vacuum",
            "--eps",
            "0.5",
            "--cutoff",
            "40",
        ],
    );
    assert_eq!(code, 0);
    assert_eq!(report["purity"]["is_pure"], false);
    let op: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("genop_operator.json")).unwrap(),
    )
    .unwrap();
    let entries = op["entries"].as_array().unwrap();
    for n in 0..=40usize {
        let diag = num(&entries[n * 41 + n][0]);
        assert!((diag - 0.5f64.powi(n as i32 + 1)).abs() < 1e-12);
    }
    let (code, report) = eightport(
        dir.path(),
        &[
            "genop",
            "--parameter-field",
            "coherent(0.3,0.2)",
            "--eps",
            "1",
            "--cutoff",
            "30",
        ],
    );
    assert_eq!(code, 0);
    assert_eq!(report["purity"]["is_pure"], true);
}

#[test]
fn truncation_failure_exits_three_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = eightport(
        dir.path(),
        &[
            "genop",
            "--parameter-field",
            "vacuum",
            "--eps",
            "0.5",
            "--cutoff",
            "8",
        ],
    );
    assert_eq!(code, 3);
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

/// Husimi density of `|alpha>`: `e^{-|alpha - (q + ip)/sqrt2|^2} / 2pi`.
fn husimi(alpha: (f64, f64), q: f64, p: f64) -> f64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    (-((alpha.0 - q * s).powi(2) + (alpha.1 - p * s).powi(2))).exp() / std::f64::consts::TAU
}

#[test]
fn deconvolution_roundtrip_and_dirac_passthrough() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = eightport(
        dir.path(),
        &[
            "eightport",
            "--state",
            "coherent(0.6,0.4)",
            "--eps",
            "0.6,0.7,0.8,0.9",
            "--r",
            "5",
            "--no-joint",
            "--binary",
        ],
    );
    assert_eq!(code, 0);
    let h = dir.path().join("eightport_limit.bin");
    let (code, report) = eightport(
        dir.path(),
        &[
            "deconvolve",
            "--input",
            h.to_str().unwrap(),
            "--eps",
            "0.6,0.7,0.8,0.9",
        ],
    );
    assert_eq!(code, 0);
    assert!(num(&report["roundtrip_relative_l2"]) < 1e-6);
    let g = csv_rows(&dir.path().join("deconvolved.csv"));
    let (num_sq, den_sq) = g.iter().fold((0.0, 0.0), |(a, b), r| {
        let exact = husimi((0.6, 0.4), r[0], r[1]);
        (a + (r[2] - exact).powi(2), b + exact * exact)
    });
    let rel = (num_sq / den_sq).sqrt();
    assert!(rel < 1e-3, "{rel}");

    let out = dir.path().join("ideal");
    let (code, _) = eightport(
        &out,
        &["deconvolve", "--input", h.to_str().unwrap(), "--eps", "1"],
    );
    assert_eq!(code, 0);
    let (code, _) = eightport(
        dir.path(),
        &[
            "deconvolve",
            "--input",
            out.join("deconvolved.csv").to_str().unwrap(),
            "--eps",
            "1",
            "--emit-plot-data",
        ],
    );
    assert_eq!(code, 0);
    assert!(dir.path().join("deconvolved.dat").exists());
    let before = csv_rows(&out.join("deconvolved.csv"));
    let after = csv_rows(&dir.path().join("deconvolved.csv"));
    assert_eq!(before, after);
}

#[test]
fn coarse_grid_is_a_resolution_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _) = eightport(
        dir.path(),
        &[
            "reconstruct",
            "--state",
            "vacuum",
            "--eps",
            "0.6",
            "--grid",
            "8,32",
            "--cutoff",
            "5",
        ],
    );
    assert_eq!(code, 3);
}

#[test]
fn reconstruct_noiseless_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (code, report) = eightport(
        dir.path(),
        &[
            "reconstruct",
            "--state",
            "coherent(0.6,0.4)",
            "--eps",
            "0.6,0.7,0.8,0.9",
            "--cutoff",
            "20",
        ],
    );
    assert_eq!(code, 0);
    assert!(num(&report["fidelity"]) > 0.999);
    assert!(report["deconvolution"]["policy"]["mode"] == "thresholded");
    let smeared = dir.path().join("reconstruct_smeared.csv");
    let (code, again) = eightport(
        &dir.path().join("again"),
        &[
            "reconstruct",
            "--input",
            smeared.to_str().unwrap(),
            "--smeared",
            "--state",
            "coherent(0.6,0.4)",
            "--eps",
            "0.6,0.7,0.8,0.9",
            "--cutoff",
            "20",
        ],
    );
    assert_eq!(code, 0);
    assert!((num(&again["fidelity"]) - num(&report["fidelity"])).abs() < 1e-9);
    assert_eq!(
        eightport(
            dir.path(),
            &["reconstruct", "--state", "vacuum", "--shots", "100"]
        )
        .0,
        1
    );
}
