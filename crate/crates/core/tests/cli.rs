//! End-to-end tests of the `ncsim` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ncsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncsim"))
        .args(args)
        .env_remove("NCSIM_CONFIG")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn no_arguments_is_a_usage_error() {
    assert_eq!(code(&ncsim(&[])), 1);
    assert_eq!(code(&ncsim(&["frobnicate"])), 1);
    assert_eq!(code(&ncsim(&["--help"])), 0);
}

#[test]
fn run_hlt_only_program() {
    let dir = tempfile::tempdir().unwrap();
    let prog = dir.path().join("hlt.s");
    fs::write(&prog, "HLT\n").unwrap();
    let out = dir.path().join("out");
    let o = ncsim(&["run", path(&prog), "--out", path(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = fs::read_to_string(out.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 1);
    assert!(trace.contains("\"HLT\""));
    assert_eq!(fs::read_to_string(out.join("faults.json")).unwrap(), "[]\n");
    let signal = fs::read_to_string(out.join("signal.csv")).unwrap();
    assert_eq!(signal.lines().count(), 257);
    assert!(signal.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn run_listing2_leaks_the_secret() {
    let dir = tempfile::tempdir().unwrap();
    let listing = ncsim(&["listing2", "--secret", "0x77"]);
    assert_eq!(code(&listing), 0);
    let prog = dir.path().join("l2.s");
    fs::write(&prog, stdout(&listing)).unwrap();
    let o = ncsim(&["run", path(&prog), "--out", path(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("hot slots [119]"), "{}", stdout(&o));
    let faults: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("faults.json")).unwrap()).unwrap();
    assert_eq!(faults[0]["kind"], "non_canonical");
}

#[test]
fn malformed_program_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let prog = dir.path().join("bad.s");
    fs::write(&prog, "LD r1, r2\n").unwrap();
    let o = ncsim(&["run", path(&prog), "--out", path(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bad.s"));
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "preset = \"zen\"\nwindow_cycles = -4\n").unwrap();
    let o = ncsim(&["calibrate", "--config", path(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("window_cycles"), "{}", stderr(&o));
    fs::write(&cfg, "bogus_key = 1\n").unwrap();
    assert_eq!(code(&ncsim(&["calibrate", "--config", path(&cfg)])), 2);
}

#[test]
fn config_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[cache]\nhit_latency = 10\nmiss_latency = 90\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ncsim"))
        .arg("calibrate")
        .env("NCSIM_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "50");
    assert_eq!(stdout(&ncsim(&["calibrate"])).trim(), "27");
}

#[test]
fn scenarios_filter_and_summary() {
    let o = ncsim(&["scenarios", "--filter", "noncanon_stlf*", "--seeds", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = stdout(&o);
    assert!(s.contains("4 scenario run(s), 4 passed, 0 failed"), "{s}");
    assert!(s.contains("noncanon_stlf_flushed"));

    let o = ncsim(&["scenarios", "--filter", "nothing_*"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("0 scenarios match"));
}

#[test]
fn scenario_override_errors() {
    let o = ncsim(&[
        "scenarios",
        "--filter",
        "noncanon_l1d",
        "--seeds",
        "1",
        "--set",
        "NOPE=1",
    ]);
    assert_eq!(code(&o), 2);
    let o = ncsim(&["scenarios", "--set", "SECRET"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn scenario_artifacts_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = ncsim(&[
            "scenarios",
            "--filter",
            "sandbox_gadget",
            "--seeds",
            "3",
            "--out",
            path(d.path()),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 6);
    for n in names {
        assert_eq!(
            fs::read(a.path().join(&n)).unwrap(),
            fs::read(b.path().join(&n)).unwrap()
        );
    }
}

#[test]
fn covert_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let payload = dir.path().join("p.bin");
    fs::write(&payload, b"hello").unwrap();
    let o = ncsim(&["covert", "--payload", path(&payload)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["errors"], 0);
    assert_eq!(report["payload_bytes"], 5);

    fs::write(&payload, b"").unwrap();
    assert_eq!(code(&ncsim(&["covert", "--payload", path(&payload)])), 1);

    fs::write(&payload, b"abc").unwrap();
    let cfg = dir.path().join("mds.toml");
    fs::write(&cfg, "preset = \"mds_resistant\"\n").unwrap();
    let o = ncsim(&[
        "covert",
        "--payload",
        path(&payload),
        "--config",
        path(&cfg),
    ]);
    assert_eq!(code(&o), 3);
}

#[test]
fn truth_table_prints_sixteen_rows() {
    let o = ncsim(&["truth-table"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let s = stdout(&o);
    assert_eq!(s.lines().count(), 17);
    assert!(s.contains("1,1,1,0,1,1"));
}

#[test]
fn shipped_configs_and_programs_run() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let out = tempfile::tempdir().unwrap();
    let program = root.join("programs/listing2.s");
    let mut seen = 0;
    for entry in fs::read_dir(root.join("configs")).unwrap() {
        let cfg = entry.unwrap().path();
        let o = ncsim(&[
            "run",
            path(&program),
            "--config",
            path(&cfg),
            "--out",
            path(out.path()),
        ]);
        assert_eq!(code(&o), 0, "{}: {}", cfg.display(), stderr(&o));
        let leaked = stdout(&o).contains("hot slots [42]");
        assert_eq!(
            leaked,
            !cfg.ends_with("mds_resistant.toml"),
            "{}",
            cfg.display()
        );
        seen += 1;
    }
    assert!(seen >= 3);
}
