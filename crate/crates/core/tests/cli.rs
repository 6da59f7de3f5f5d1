use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fourcnet"))
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn bad_usage_exits_one() {
    assert_eq!(bin().arg("no-such-command").status().unwrap().code(), Some(1));
    let st = bin().args(["explore", "--seed", "1", "--out", "/nonexistent/x", "--predictor", "bogus"]).status().unwrap();
    assert_eq!(st.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let st = bin()
        .args(["train-cn", "--seed", "1", "--data"])
        .arg(dir.path().join("absent"))
        .arg("--dpm")
        .arg(dir.path().join("absent"))
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&st.stderr).contains("error:"));
}

#[test]
fn data_generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let st = bin().args(["gen-data", "--seed", "6", "--count", "4", "--out"]).arg(&out).status().unwrap();
        assert!(st.success());
        read_tree(&out)
    };
    let a = run("a");
    assert!(a.iter().any(|(n, _)| n == "index.json"));
    assert_eq!(a, run("b"));

    // An existing directory is kept unless asked.
    let st = bin().args(["gen-data", "--seed", "6", "--count", "4", "--out"]).arg(dir.path().join("a")).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
}

#[test]
fn explore_on_a_tiny_world() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.pgm");
    fs::write(&world, "P2\n3 3\n65535\n20000 20000 20000\n20000 20000 20000\n20000 20000 20000\n").unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 2, "sim": {"area_m2": 9.0, "sensing_m": 5.0, "n_robots": 1}}"#).unwrap();
    let out = dir.path().join("ep");
    let st = bin()
        .args(["explore", "--predictor", "npe", "--config"])
        .arg(&cfg)
        .arg("--world")
        .arg(&world)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(st.success());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["final_coverage"], 100.0);
    let steps = fs::read_to_string(out.join("steps.csv")).unwrap();
    let first = steps.lines().nth(1).unwrap();
    assert!(first.starts_with("0,"), "{first}");
    assert!(first.ends_with(",100.000000"), "{first}");
}
