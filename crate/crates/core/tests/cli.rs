use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[experiment]
seed = "0x11"
firmware_count = 2
severities = [1.0]
traces_per_mutation = 10
twin_traces = 40

[experiment.pipeline]
safe_traces = 200

[experiment.pipeline.train]
epochs = 3
"#;

fn liteatt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liteatt"))
        .current_dir(dir)
        .env_remove("LITEATT_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn help_and_version_exit_zero() {
    let dir = setup();
    let h = liteatt(dir.path(), &["--help"]);
    assert_eq!(h.status.code(), Some(0));
    for sub in ["gen", "train", "quantize", "calibrate", "attest", "handshake", "eval"] {
        assert!(stdout(&h).contains(sub), "help lists {sub}");
    }
    assert_eq!(liteatt(dir.path(), &["--version"]).status.code(), Some(0));
}

#[test]
fn usage_and_config_errors_exit_two() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.toml"), "[experiment]\nfirmware_cuont = 3\n").unwrap();
    std::fs::write(dir.path().join("bad.script"), "record 1\n5 drop\n").unwrap();
    let cases: &[&[&str]] = &[
        &["frobnicate"],
        &["--seed", "0xzz", "gen"],
        &["--config", "missing.toml", "gen"],
        &["--config", "bad.toml", "gen"],
        &["--config", "small.toml", "handshake", "--game", "nonsense"],
        &["--config", "small.toml", "handshake", "--adversary", "bad.script"],
        &["--config", "small.toml", "handshake", "--game", "replay", "--adversary", "bad.script"],
    ];
    for args in cases {
        let o = liteatt(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn missing_model_is_a_runtime_failure() {
    let dir = setup();
    let o = liteatt(dir.path(), &["--config", "small.toml", "--out", "o", "quantize", "--model", "nope.lam"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn replayed_session_is_not_a_win() {
    let dir = setup();
    std::fs::write(dir.path().join("replay.script"), "record 1\n1 replay 0\n2 replay 1\n3 replay 2\n4 replay 3\n").unwrap();
    let o = liteatt(dir.path(), &["--config", "small.toml", "--out", "o", "handshake", "--adversary", "replay.script"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("adversary_wins=0"), "{out}");
    assert!(out.contains("verdict=no-win"), "{out}");

    let transcripts: Vec<_> = std::fs::read_dir(dir.path().join("o/transcripts")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(transcripts.len(), 1);
    let text = std::fs::read_to_string(&transcripts[0]).unwrap();
    let rows: Vec<serde_json::Value> = text.lines().filter(|l| !l.starts_with('#')).map(|l| serde_json::from_str(l).unwrap()).collect();
    let replayed: Vec<_> = rows.iter().filter(|r| r["adversary_action"].as_str().unwrap().starts_with("replay")).collect();
    assert!(!replayed.is_empty());
    for r in &rows {
        for key in ["session_id", "step", "direction", "sender_id", "payload_hex", "tag_hex", "adversary_action", "verdict"] {
            assert!(r.get(key).is_some(), "missing {key} in {r}");
        }
    }
    // Only the initiator message of a replayed session may be accepted.
    for r in replayed {
        if r["verdict"] == "accepted" {
            assert_eq!(r["step"], 1);
        }
    }
}

#[test]
fn out_dir_precedence() {
    let dir = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_liteatt"))
        .current_dir(dir.path())
        .env("LITEATT_OUT", "from-env")
        .args(["--config", "small.toml", "gen", "--firmware", "1"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("from-env/traces").is_dir());
    let o = Command::new(env!("CARGO_BIN_EXE_liteatt"))
        .current_dir(dir.path())
        .env("LITEATT_OUT", "from-env")
        .args(["--config", "small.toml", "--out", "from-flag", "gen", "--firmware", "1"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("from-flag/traces").is_dir());
}
