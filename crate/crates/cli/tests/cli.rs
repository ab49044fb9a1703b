use std::process::Command;

fn boss() -> Command {
    Command::new(env!("CARGO_BIN_EXE_boss"))
}

fn small(dir: &std::path::Path) -> Vec<String> {
    [
        "data.synthetic_count=160",
        "data.splits.nas_train=48",
        "data.splits.nas_val=16",
        "data.splits.oracle_train=48",
        "data.splits.oracle_test=32",
        "trainer.epochs=1",
        "trainer.batch_size=16",
        "trainer.paths_per_step=2",
        "evaluator.val_subset=16",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([format!("output_dir=\"{}\"", dir.display())])
    .flat_map(|s| ["--set".to_string(), s])
    .collect()
}

#[test]
fn train_then_search_print_artifact_paths() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["train", "search"] {
        let out = boss().arg(cmd).args(small(dir.path())).output().unwrap();
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let stdout = String::from_utf8(out.stdout).unwrap();
        assert!(stdout.lines().count() >= 2);
        assert!(
            stdout.lines().all(|l| std::path::Path::new(l).exists()),
            "{stdout}"
        );
    }
}

#[test]
fn errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = boss()
        .arg("search")
        .args(small(dir.path()))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "missing-artifact");
    assert!(err["message"].as_str().unwrap().contains("epoch_001"));

    let out = boss()
        .args(["train", "--set", "trainer.epoks=3"])
        .output()
        .unwrap();
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("trainer.epoks"));
}

#[test]
fn overrides_win_over_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seed = 3\n[trainer]\nepochs = 5\n").unwrap();
    let out = boss()
        .arg("train")
        .arg("--config")
        .arg(&path)
        .args(small(dir.path()))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("epoch_001"));
    assert!(!stdout.contains("epoch_005"));
    let written = stdout.lines().find(|l| l.contains("config-")).unwrap();
    assert!(std::fs::read_to_string(written)
        .unwrap()
        .contains("seed = 3"));
}
