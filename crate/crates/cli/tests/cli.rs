use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "tasks.num_tasks=2",
    "--set",
    "tasks.samples_per_split=[64, 32, 32]",
    "--set",
    "pretrain.steps=40",
    "--set",
    "optimizer.steps=30",
    "--set",
    "optimizer.schedule.warmup_steps=5",
];

fn unmerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unmerge")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn run_small(out: &Path, args: &[&str]) -> Output {
    let mut all: Vec<&str> = SMALL.to_vec();
    all.extend(["--out", out.to_str().unwrap()]);
    all.extend(args);
    let o = unmerge(&all);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn exit_codes_for_usage_and_config_errors() {
    assert_eq!(unmerge(&["--help"]).status.code(), Some(0));
    assert_eq!(unmerge(&["--no-such-flag", "show-config"]).status.code(), Some(1));
    assert_eq!(unmerge(&["merge"]).status.code(), Some(1));
    assert_eq!(unmerge(&["--set", "adapter.rank=0", "show-config"]).status.code(), Some(1));
    assert_eq!(unmerge(&["--set", "no_such_section.x=1", "show-config"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[adapter\nrank = ").unwrap();
    assert_eq!(unmerge(&["--config", bad.to_str().unwrap(), "show-config"]).status.code(), Some(1));
    let missing = dir.path().join("missing.toml");
    assert_eq!(unmerge(&["--config", missing.to_str().unwrap(), "show-config"]).status.code(), Some(1));
}

#[test]
fn show_config_reflects_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    std::fs::write(&cfg, "[adapter]\nrank = 4\n").unwrap();
    let o = unmerge(&["--config", cfg.to_str().unwrap(), "--set", "optimizer.steps=7", "show-config"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let table: toml::Table = text.parse().unwrap();
    assert_eq!(table["adapter"]["rank"].as_integer(), Some(4));
    assert_eq!(table["adapter"]["alpha"].as_float(), Some(16.0));
    assert_eq!(table["optimizer"]["steps"].as_integer(), Some(7));
}

#[test]
fn pretrain_train_merge_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let base_dir = dir.path().join("base");
    run_small(&base_dir, &["pretrain"]);
    let base = base_dir.join("base.json");
    assert!(base.exists() && base_dir.join("data/t0_train.csv").exists());

    let mut adapters = Vec::new();
    for (task, protected) in [(0, false), (1, true)] {
        let out = dir.path().join(format!("train{task}"));
        let mut args = vec!["train", "--task", if task == 0 { "0" } else { "1" }, "--base", base.to_str().unwrap()];
        if protected {
            args.extend(["--protected", "--lambda", "0.01"]);
        }
        run_small(&out, &args);
        let tag = if protected { "trap2" } else { "none" };
        let file = out.join(format!("t{task}-{tag}.json"));
        assert!(file.exists());
        adapters.push(file);
    }

    let merged = dir.path().join("merge");
    let mut args = vec!["merge", "--operator", "ties", "--trim-keep", "0.5", "--coefficient", "0.8", "--base"];
    args.push(base.to_str().unwrap());
    for a in &adapters {
        args.extend(["--adapter", a.to_str().unwrap()]);
    }
    run_small(&merged, &args);
    assert!(merged.join("manifest.toml").exists());
    assert!(std::fs::read_dir(&merged).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "csv")));
}

#[test]
fn rerun_detects_tampered_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    run_small(&first, &["pretrain"]);
    let manifest = first.join("manifest.toml");

    let again = dir.path().join("again");
    let o = unmerge(&["--out", again.to_str().unwrap(), "rerun", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let text = std::fs::read_to_string(&manifest).unwrap();
    let mut m: toml::Table = text.parse().unwrap();
    let outputs = m.get_mut("outputs").unwrap().as_table_mut().unwrap();
    let key = outputs.keys().next().unwrap().clone();
    outputs.insert(key, toml::Value::String("0".repeat(64)));
    std::fs::write(&manifest, toml::to_string(&m).unwrap()).unwrap();
    let third = dir.path().join("third");
    let o = unmerge(&["--out", third.to_str().unwrap(), "rerun", "--manifest", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
