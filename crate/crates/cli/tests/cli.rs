use std::fs;
use std::process::Command;

use rhc_cli::{run, RunManifest, Stage};

fn rhc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rhc"))
}

#[test]
fn unknown_scenario_exits_2_and_lists_builtins() {
    let dir = tempfile::tempdir().unwrap();
    let out = rhc()
        .args(["run", "--scenario", "nope", "--out"])
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["lq", "integrator-indicator", "integrator-exponential", "ortho-rotation"] {
        assert!(err.contains(name), "{err}");
    }
    assert!(!dir.path().join("o").exists());
}

#[test]
fn bad_stage_is_a_usage_error() {
    let out = rhc().args(["run", "--scenario", "lq", "--stages", "warp"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn list_and_show() {
    let out = rhc().arg("list").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("integrator-indicator"));
    let out = rhc().args(["show", "lq"]).output().unwrap();
    assert!(out.status.success());
    let t: toml::Table = String::from_utf8_lossy(&out.stdout).parse().unwrap();
    assert!(!t.is_empty());
}

#[test]
fn indicator_certify_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("ind");
    let out = rhc()
        .args(["run", "--scenario", "integrator-indicator", "--stages", "synth,certify", "--out"])
        .arg(&target)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("geometric_from_costs"), "{stdout}");
    assert!(stdout.contains("fail (expected)"), "{stdout}");
    for f in ["manifest.toml", "scenario.toml", "synthesis.csv", "certificates.csv", "report.txt"] {
        assert!(target.join(f).is_file(), "{f} missing");
    }
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.contains("partial"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut outs = Vec::new();
    for rep in 0..2 {
        let mut m = RunManifest::new("lq", dir.path().join(format!("r{rep}")));
        m.stages = vec![Stage::Synth, Stage::Certify, Stage::Simulate];
        m.paths = Some(100);
        m.steps = Some(500);
        m.seed = Some(9);
        let o = run(&m).unwrap();
        assert_eq!(o.exit_code, 0, "{:?}", o.unexpected_failures);
        outs.push(m.out);
    }
    for f in ["certificates.csv", "ensemble_summary.csv", "synthesis.csv", "manifest.toml"] {
        assert_eq!(fs::read(outs[0].join(f)).unwrap(), fs::read(outs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn overrides_reach_the_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = RunManifest::new("lq", dir.path().join("o"));
    m.stages = vec![Stage::Synth];
    m.overrides.push(("horizon".into(), "5".into()));
    run(&m).unwrap();
    let echoed = fs::read_to_string(m.out.join("scenario.toml")).unwrap();
    let t: toml::Table = echoed.parse().unwrap();
    assert_eq!(t["horizon"].as_integer(), Some(5));
}
