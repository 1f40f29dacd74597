use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use symctl::config::{Config, PLANE_SCENARIO};
use symctl::geometry::{AxisBox, BoxUnion};
use tempfile::TempDir;

fn symctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_symctl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn plane() -> Config {
    Config::from_toml_str(PLANE_SCENARIO).unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &Config) -> PathBuf {
    let path = dir.join(name);
    cfg.save(&path).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs abstract and synth into `out`; returns the config path.
fn pipeline(dir: &Path, out: &Path, cfg: &Config, workers: &str) -> PathBuf {
    let config = write_config(dir, "plane.toml", cfg);
    let r = symctl(&[
        "--workers",
        workers,
        "abstract",
        "--config",
        s(&config),
        "--out",
        s(out),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let r = symctl(&[
        "--workers",
        workers,
        "synth",
        "--config",
        s(&config),
        "--out",
        s(out),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    config
}

#[test]
fn full_pipeline_on_the_plane() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let config = pipeline(dir.path(), &out, &plane(), "2");
    assert!(out.join("system.bin").exists());
    let ctrl = fs::read_to_string(out.join("controller.txt")).unwrap();
    assert!(ctrl.starts_with("symctl-controller 1\n"));

    let r = symctl(&["simulate", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", stdout(&r));
    assert!(stdout(&r).contains("3 of 3 trajectories satisfied"));
    for i in 0..3 {
        let csv = fs::read_to_string(out.join(format!("trajectory_{i}.csv"))).unwrap();
        assert!(csv.starts_with("t,x1,x2,state_index,input_index,u1,u2\n"));
        assert!(out.join(format!("trajectory_{i}.gp")).exists());
    }

    let r = symctl(&[
        "verify",
        "--config",
        s(&config),
        "--out",
        s(&out),
        "--trials",
        "500",
        "--bound-trials",
        "100",
    ]);
    assert_eq!(code(&r), 0, "{}", stdout(&r));
}

#[test]
fn artifacts_are_byte_identical_across_runs_and_workers() {
    let dir = TempDir::new().unwrap();
    let runs: Vec<(Vec<u8>, Vec<u8>)> = ["1", "4", "4"]
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let out = dir.path().join(format!("run{i}"));
            pipeline(dir.path(), &out, &plane(), w);
            (
                fs::read(out.join("system.bin")).unwrap(),
                fs::read(out.join("controller.txt")).unwrap(),
            )
        })
        .collect();
    assert!(runs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn invalid_quantization_is_a_parameter_error() {
    let dir = TempDir::new().unwrap();
    let mut cfg = plane();
    cfg.quantization.eta = 0.3;
    let path = write_config(dir.path(), "eta.toml", &cfg);
    let r = symctl(&["abstract", "--config", s(&path), "--out", s(dir.path())]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("exceeds epsilon"));

    let mut cfg = plane();
    cfg.quantization.mu = 2.5;
    let path = write_config(dir.path(), "mu.toml", &cfg);
    let r = symctl(&["abstract", "--config", s(&path), "--out", s(dir.path())]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("minimum input box width"));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("typo.toml");
    fs::write(&path, PLANE_SCENARIO.replace("stay_horizon", "stay_horizn")).unwrap();
    let r = symctl(&["abstract", "--config", s(&path)]);
    assert_eq!(code(&r), 1);
}

#[test]
fn obstacle_over_the_target_is_rejected() {
    let dir = TempDir::new().unwrap();
    let mut cfg = plane();
    cfg.sets.obstacles = vec![AxisBox::new(vec![0.0, 0.0], vec![6.0, 6.0]).unwrap()];
    let path = write_config(dir.path(), "covered.toml", &cfg);
    let r = symctl(&["abstract", "--config", s(&path), "--out", s(dir.path())]);
    assert_eq!(code(&r), 1);
}

#[test]
fn unwinnable_specification_exits_with_three() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let mut cfg = plane();
    cfg.sets.target = BoxUnion::single(vec![4.0, 4.0], vec![4.5, 4.5]).unwrap();
    let config = write_config(dir.path(), "small.toml", &cfg);
    assert_eq!(
        code(&symctl(&[
            "abstract",
            "--config",
            s(&config),
            "--out",
            s(&out)
        ])),
        0
    );
    let r = symctl(&["synth", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code(&r), 3);
    assert!(stdout(&r).contains("winning 0 of"));
}

#[test]
fn initial_state_outside_the_winning_set_fails_its_run() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let mut cfg = plane();
    pipeline(dir.path(), &out, &cfg, "2");
    // Inside the wall, so never winning.
    cfg.simulation.initial_conditions = vec![vec![0.4, 0.4], vec![2.2, 1.0]];
    let config = write_config(dir.path(), "wall.toml", &cfg);
    let r = symctl(&["simulate", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code(&r), 3);
    let text = stdout(&r);
    assert!(
        text.contains("trajectory 1 from [2.2, 1.0]: not-winning"),
        "{text}"
    );
    assert!(text.contains("1 of 2 trajectories satisfied"));
}

#[test]
fn batch_writes_one_csv_per_initial_state() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let mut cfg = plane();
    pipeline(dir.path(), &out, &cfg, "2");
    cfg.simulation.initial_conditions = (0..10).map(|i| vec![0.4 + 0.1 * i as f64, 0.4]).collect();
    let config = write_config(dir.path(), "batch.toml", &cfg);
    let r = symctl(&["simulate", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", stdout(&r));
    for i in 0..10 {
        assert!(out.join(format!("trajectory_{i}.csv")).exists());
    }
}

#[test]
fn controller_for_another_system_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    pipeline(dir.path(), &out, &plane(), "2");
    let other = dir.path().join("other");
    let mut cfg = plane();
    cfg.sets.target = BoxUnion::single(vec![3.5, 3.5], vec![5.5, 5.5]).unwrap();
    pipeline(dir.path(), &other, &cfg, "2");
    // Same system, controller for a different target.
    let config = write_config(dir.path(), "orig.toml", &plane());
    let ctrl = other.join("controller.txt");
    let r = symctl(&[
        "simulate",
        "--config",
        s(&config),
        "--out",
        s(&out),
        "--controller",
        s(&ctrl),
    ]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("different specification"));

    // Same spec, controller file pointing at a different abstraction.
    let mut cfg = plane();
    cfg.system.params.b_matrix = Some(vec![vec![2.0, 0.0], vec![0.0, 2.0]]);
    let third = dir.path().join("third");
    let config = pipeline(dir.path(), &third, &cfg, "2");
    let ctrl = out.join("controller.txt");
    let r = symctl(&[
        "simulate",
        "--config",
        s(&config),
        "--out",
        s(&third),
        "--controller",
        s(&ctrl),
    ]);
    assert_eq!(code(&r), 1);
    assert!(String::from_utf8_lossy(&r.stderr).contains("different system"));
}

#[test]
fn verify_catches_the_injected_radius_bug() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let config = pipeline(dir.path(), &out, &plane(), "2");
    let r = symctl(&[
        "verify",
        "--config",
        s(&config),
        "--out",
        s(&out),
        "--inject-radius-bug",
        "--trials",
        "2000",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&r), 3, "{}", stdout(&r));
    assert!(stdout(&r).contains("violation"));

    let r = symctl(&[
        "verify",
        "--config",
        s(&config),
        "--out",
        s(&out),
        "--trials",
        "0",
    ]);
    assert_eq!(code(&r), 1);
}

#[test]
fn verify_reports_are_reproducible() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let config = pipeline(dir.path(), &out, &plane(), "2");
    let args = [
        "verify",
        "--config",
        s(&config),
        "--out",
        s(&out),
        "--trials",
        "300",
        "--bound-trials",
        "50",
        "--seed",
        "9",
    ];
    assert_eq!(stdout(&symctl(&args)), stdout(&symctl(&args)));
}

#[test]
fn relation_between_system_files() {
    let dir = TempDir::new().unwrap();
    let fine = dir.path().join("fine");
    pipeline(dir.path(), &fine, &plane(), "2");
    let fine_sys = fine.join("system.bin");

    let r = symctl(&[
        "relation",
        "--system",
        s(&fine_sys),
        s(&fine_sys),
        "--epsilon",
        "0",
        "--mode",
        "alt",
    ]);
    assert_eq!(code(&r), 0);
    let text = stdout(&r);
    let pairs: Vec<&str> = text.lines().skip(6).collect();
    assert!(!pairs.is_empty());
    assert!(pairs.iter().all(|p| {
        let (a, b) = p.split_once(',').unwrap();
        a == b
    }));
    assert!(String::from_utf8_lossy(&r.stderr).contains("total yes"));

    let mut cfg = plane();
    cfg.quantization.eta = 0.4;
    cfg.quantization.epsilon = 0.4;
    cfg.quantization.theta = 0.4;
    let coarse = dir.path().join("coarse");
    let config = write_config(dir.path(), "coarse.toml", &cfg);
    assert_eq!(
        code(&symctl(&[
            "abstract",
            "--config",
            s(&config),
            "--out",
            s(&coarse)
        ])),
        0
    );
    let dump = dir.path().join("rel.txt");
    let r = symctl(&[
        "relation",
        "--system",
        s(&fine_sys),
        s(&coarse.join("system.bin")),
        "--epsilon",
        "0.4",
        "--mode",
        "sim",
        "--out",
        s(&dump),
    ]);
    assert_eq!(code(&r), 0);
    let dumped = fs::read_to_string(&dump).unwrap();
    assert!(dumped.starts_with("symctl-relation 1\nmode sim\n"));
    assert!(!dumped.contains("pairs 0\n"));
    assert!(String::from_utf8_lossy(&r.stderr).contains("total yes"));

    let r = symctl(&[
        "relation",
        "--system",
        s(&fine_sys),
        s(&fine_sys),
        "--epsilon",
        "-0.1",
    ]);
    assert_eq!(code(&r), 1);
}

#[test]
fn mismatched_system_file_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    pipeline(dir.path(), &out, &plane(), "2");
    let mut cfg = plane();
    cfg.quantization.theta = 0.3;
    let config = write_config(dir.path(), "theta.toml", &cfg);
    let r = symctl(&["synth", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code(&r), 1);
}
