use std::path::Path;
use std::process::{Command, Output};

fn csiloop(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_csiloop"));
    cmd.arg("--output").arg(dir).args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "seeds=[3]",
    "--set",
    "model.epochs=1",
    "--set",
    "model.hidden_dim=8",
    "--set",
    "generator.train_sessions=2",
    "--set",
    "adaptation.epochs=1",
];

#[test]
fn unknown_key_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let o = csiloop(
        d.path(),
        &["--set", "model.hiden_dim=4", "show-config"],
        &[],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hiden_dim"));
}

#[test]
fn bad_env_value_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let o = csiloop(
        d.path(),
        &["show-config"],
        &[("CSILOOP_MODEL__EPOCHS", "many")],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn env_then_set_precedence() {
    let d = tempfile::tempdir().unwrap();
    let o = csiloop(
        d.path(),
        &["show-config"],
        &[("CSILOOP_MODEL__EPOCHS", "7")],
    );
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("epochs = 7"));
    let o = csiloop(
        d.path(),
        &["--set", "model.epochs=9", "show-config"],
        &[("CSILOOP_MODEL__EPOCHS", "7")],
    );
    assert!(stdout(&o).contains("epochs = 9"));
}

#[test]
fn config_file_is_read() {
    let d = tempfile::tempdir().unwrap();
    let file = d.path().join("c.toml");
    std::fs::write(&file, "seeds = [11]\n[teacher]\nprecision = 0.8\n").unwrap();
    let o = csiloop(
        d.path(),
        &["--config", file.to_str().unwrap(), "show-config"],
        &[],
    );
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(
        out.contains("seeds = [11]") && out.contains("precision = 0.8"),
        "{out}"
    );
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let d = tempfile::tempdir().unwrap();
    let ok = csiloop(d.path(), &["gradcheck", "--instances", "2"], &[]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(d.path().join("checks/gradcheck.json").exists());
    let bad = csiloop(
        d.path(),
        &["gradcheck", "--instances", "2", "--inject-fault", "0.01"],
        &[],
    );
    assert_eq!(code(&bad), 1);
    assert!(stdout(&bad).contains("FAIL"));
}

#[test]
fn sync_and_protocol_checks_pass() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&csiloop(d.path(), &["synccheck", "--cases", "20"], &[])),
        0
    );
    assert_eq!(
        code(&csiloop(d.path(), &["protofuzz", "--cases", "500"], &[])),
        0
    );
}

#[test]
fn closed_loop_without_baselines_is_a_setup_error() {
    let d = tempfile::tempdir().unwrap();
    let o = csiloop(d.path(), &["run-closed-loop"], &[]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&csiloop(d.path(), &["report"], &[])), 2);
}

#[test]
fn tiny_pipeline_writes_metrics_and_report_flags_missed_targets() {
    let d = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let all: Vec<&str> = TINY.iter().chain(args).copied().collect();
        csiloop(d.path(), &all, &[])
    };
    assert_eq!(code(&run(&["train-baseline"])), 0);
    assert!(d.path().join("checkpoints/baseline-seed3.ckpt").exists());
    assert_eq!(code(&run(&["inject-shift"])), 0);
    let o = run(&[
        "run-closed-loop",
        "--precision",
        "1.0",
        "--precision",
        "0.6",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.path().join("closed_loop.csv")).unwrap();
    assert!(csv.starts_with("seed,phase,teacher_precision,"));
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(d
        .path()
        .join("events/closed_loop-seed3-p0.600.jsonl")
        .exists());
    let e = run(&["eval", "--shifted"]);
    assert_eq!(code(&e), 0);
    assert!(stdout(&e).contains("mean overall"));
    // One epoch cannot reach the accuracy targets.
    let r = run(&["report"]);
    assert_eq!(code(&r), 1);
    assert!(stdout(&r).contains("FAIL baseline-mean>=90"));
    assert!(d.path().join("report.md").exists());
}

#[test]
fn bad_precision_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let all: Vec<&str> = TINY.iter().copied().chain(["train-baseline"]).collect();
    assert_eq!(code(&csiloop(d.path(), &all, &[])), 0);
    let all: Vec<&str> = TINY
        .iter()
        .copied()
        .chain(["run-closed-loop", "--precision", "1.5"])
        .collect();
    assert_eq!(code(&csiloop(d.path(), &all, &[])), 2);
}

#[test]
fn parallel_seeds_match_serial_run() {
    let serial = tempfile::tempdir().unwrap();
    let parallel = tempfile::tempdir().unwrap();
    let mut args: Vec<&str> = TINY.to_vec();
    args[1] = "seeds=[3, 4]";
    args.push("train-baseline");
    assert_eq!(code(&csiloop(serial.path(), &args, &[])), 0);
    args.insert(0, "--parallel-seeds");
    assert_eq!(code(&csiloop(parallel.path(), &args, &[])), 0);
    for f in [
        "baseline.csv",
        "baseline.json",
        "checkpoints/baseline-seed4.ckpt",
    ] {
        assert_eq!(
            std::fs::read(serial.path().join(f)).unwrap(),
            std::fs::read(parallel.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn tcp_transport_matches_memory_transport() {
    let d = tempfile::tempdir().unwrap();
    let run = |extra: &[&str]| {
        let all: Vec<&str> = TINY.iter().chain(extra).copied().collect();
        let o = csiloop(d.path(), &all, &[]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(d.path().join("closed_loop.csv")).unwrap()
    };
    let all: Vec<&str> = TINY.iter().copied().chain(["train-baseline"]).collect();
    assert_eq!(code(&csiloop(d.path(), &all, &[])), 0);
    let memory = run(&["run-closed-loop"]);
    let tcp = run(&[
        "--set",
        "net.transport=tcp",
        "--set",
        "net.nodes=2",
        "run-closed-loop",
    ]);
    assert_eq!(memory, tcp);
    let runs = std::fs::read_to_string(d.path().join("closed_loop_runs.json")).unwrap();
    assert!(runs.contains("\"completed\""), "{runs}");
}
