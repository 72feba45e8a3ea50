use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
examples = 40
max_len = 4

[pretrain]
examples = 30
epochs = 1
max_context = 4

[train]
pet_epochs = 1
finetune_epochs = 1
batch_size = 8
sft_epochs = 1

[adapter]
kind = "soft_prompt"
length = 2

[eval]
max_len = 8
"#;

fn ctrlgen(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctrlgen"))
        .args(args)
        .env("CTRLGEN_OUT", out)
        .env("NO_COLOR", "1")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ctrlgen(&["frobnicate"], dir.path()).status.code(), Some(1));
    assert_eq!(ctrlgen(&["train", "--no-such-flag"], dir.path()).status.code(), Some(1));
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nlearning_rate = 1.0\n").unwrap();
    let o = ctrlgen(&["gen-data", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    assert_eq!(ctrlgen(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctrlgen(&["generate", "--checkpoint", "/nonexistent/ckpt.bin"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_data_uses_env_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctrlgen(&["gen-data", "--task", "upper", "--examples", "50", "--seed", "3"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["train.jsonl", "validation.jsonl", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["counts"]["train"], 45);
    assert_eq!(m["task"], "upper");
}

#[test]
fn train_generate_eval_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = ctrlgen(&["train", "--config", &cfg, "--kind", "meet", "--seed", "2"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("meet-seed2");
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["kind"], "meet");
    assert_eq!(manifest["stages"].as_array().unwrap().len(), 2);
    let ckpt = run.join("checkpoint.bin");

    let dump = |name: &str| {
        let path = dir.path().join(name);
        let o = ctrlgen(
            &["generate", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--seed", "2", "--dump", path.to_str().unwrap()],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        path
    };
    let (a, b) = (dump("a.jsonl"), dump("b.jsonl"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let csv = dir.path().join("report.csv");
    let o = ctrlgen(&["eval", "--a", a.to_str().unwrap(), "--b", b.to_str().unwrap(), "--rewarder", "sort", "--csv", csv.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(&csv).unwrap();
    let row: Vec<&str> = report.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[row.len() - 1].parse::<f64>().unwrap(), 0.0);
    assert!(stdout(&o).contains("sha256"));

    let o = ctrlgen(
        &["sweep-temp", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--baseline", a.to_str().unwrap(), "--temps", "0,0.5,1.0"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = std::fs::read_to_string(dir.path().join("sweep_temp.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 3);

    let o = ctrlgen(&["generate", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--adapter", "level7"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_writes_five_manifests_and_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = ctrlgen(&["ablate", "--config", &cfg, "--task", "sort", "--seed", "7"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let root = dir.path().join("ablate-sort-seed7");
    for kind in ["meet", "first_only", "second_only", "coh", "dpo"] {
        assert!(root.join(kind).join("manifest.json").exists(), "{kind}");
    }
    let csv = std::fs::read_to_string(root.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(stdout(&o).contains("first_only"));
}

#[test]
fn sweep_capacity_emits_delta_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = ctrlgen(&["sweep-capacity", "--config", &cfg, "--lengths", "1,2", "--ranks", "1"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("capacity-sort").join("capacity.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("adapter,size,seed,delta"));
    assert_eq!(csv.lines().count(), 1 + 3);
}
