use std::path::Path;
use std::process::{Command, Output};

use fairpref::eval::{BonReport, EvalReport, Report};

fn fairpref(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairpref"))
        .args(args)
        .env("FAIRPREF_WORKERS", "2")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write(path: &Path, text: &str) -> String {
    std::fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const SMALL: &str = "[world]\npairs_per_group = 300\n[train]\nepochs = 2\n[eval]\nheldout_pairs_per_group = 200\nnum_pools = 100\npool_size = 16\nn_values = [1, 4, 16]\n";

fn default_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/default.toml")
        .to_str()
        .unwrap()
        .to_string()
}

#[test]
fn usage_errors_exit_one() {
    let out = fairpref(&["frobnicate"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&fairpref(&[])), 1);
    assert_eq!(code(&fairpref(&["train", "--bogus"])), 1);
    assert_eq!(code(&fairpref(&["eval", "--checkpoint", "x", "--format", "xml"])), 1);
    assert_eq!(code(&fairpref(&["--help"])), 0);
}

#[test]
fn shipped_config_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let cfg = default_config();
    assert_eq!(code(&fairpref(&["gen", "--config", &cfg, "--out", &p("pairs.jsonl"), "--heldout", &p("held.jsonl")])), 0);
    let small = write(&dir.path().join("short.toml"), &std::fs::read_to_string(&cfg).unwrap().replace("epochs = 50", "epochs = 2"));
    let out = fairpref(&["train", "--config", &small, "--data", &p("pairs.jsonl"), "--out", &p("run")]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/trace.csv").is_file());
    let ck = p("run/checkpoint.json");
    assert_eq!(code(&fairpref(&["eval", "--config", &cfg, "--checkpoint", &ck, "--data", &p("held.jsonl"), "--out", &p("eval.json")])), 0);
    let report = EvalReport::from_json(&std::fs::read_to_string(p("eval.json")).unwrap()).unwrap();
    assert_eq!(report.n_pairs, 4000);
    assert_eq!(report.per_group.len(), 2);
    assert!(report.pairwise_accuracy > 0.5);
    assert!(report.group_fairness_index > 0.0 && report.group_fairness_index <= 1.0);
    assert!(report.length_correlation.is_some());

    let out = fairpref(&["bon", "--quiet", "--config", &cfg, "--checkpoint", &ck, "--format", "csv"]);
    assert_eq!(code(&out), 0);
    let bon = BonReport::from_csv(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(bon.rows.iter().map(|r| r.n).collect::<Vec<_>>(), vec![1, 8, 16, 32, 64]);
}

#[test]
fn train_resume_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let cfg_a = write(&dir.path().join("a.toml"), &SMALL.replace("epochs = 2", "epochs = 2\nmax_steps = 3"));
    let cfg_b = write(&dir.path().join("b.toml"), &SMALL.replace("epochs = 2", "epochs = 2\nmax_steps = 6"));
    assert_eq!(code(&fairpref(&["train", "--quiet", "--config", &cfg_a, "--out", &p("a")])), 0);
    assert_eq!(code(&fairpref(&["train", "--quiet", "--config", &cfg_b, "--resume", &p("a/checkpoint.json"), "--out", &p("ab")])), 0);
    assert_eq!(code(&fairpref(&["train", "--quiet", "--config", &cfg_b, "--out", &p("b")])), 0);
    assert_eq!(std::fs::read(p("ab/checkpoint.json")).unwrap(), std::fs::read(p("b/checkpoint.json")).unwrap());

    let other = write(&dir.path().join("o.toml"), &SMALL.replace("epochs = 2", "epochs = 2\nlearning_rate = 0.5"));
    let out = fairpref(&["train", "--quiet", "--config", &other, "--resume", &p("a/checkpoint.json"), "--out", &p("bad")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
    assert!(!dir.path().join("bad/checkpoint.json").exists());
}

#[test]
fn validation_errors_exit_two_and_name_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();

    let out = fairpref(&["eval", "--checkpoint", &p("missing.json"), "--out", &p("r.json")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
    assert!(!dir.path().join("r.json").exists());

    let bad = write(&dir.path().join("bad.toml"), "[train.fairness]\ntau = 0.0\n");
    let out = fairpref(&["gen", "--config", &bad, "--out", &p("x.jsonl")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("fairness.tau"));
    assert!(!dir.path().join("x.jsonl").exists());

    let out = fairpref(&["audit", "--scores", &p("none.jsonl")]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--scores"));

    let broken = write(&dir.path().join("s.jsonl"), "{\"group_id\":0,\"chosen_score\":1}\n");
    let out = fairpref(&["audit", "--scores", &broken]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rejected_score"));
}

#[test]
fn divergence_exits_three_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("hot.toml"),
        "[world]\npairs_per_group = 50\n[train]\nepochs = 20\nlearning_rate = 1e307\nclip_norm = 1e300\n[train.optimizer]\nkind = \"sgd\"\n",
    );
    let run = dir.path().join("run");
    let out = fairpref(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divergence"));
    assert!(!run.join("checkpoint.json").exists());
    assert!(!run.join("trace.csv").exists());
}

#[test]
fn audit_reads_external_scores() {
    let dir = tempfile::tempdir().unwrap();
    let scores = write(
        &dir.path().join("s.jsonl"),
        "{\"group_id\":0,\"chosen_score\":-1.39,\"rejected_score\":-2.26}\n{\"group_id\":1,\"chosen_score\":-4.15,\"rejected_score\":-5.23,\"source\":\"table\"}\n",
    );
    let out = fairpref(&["audit", "--scores", &scores, "--format", "csv"]);
    assert_eq!(code(&out), 0);
    let report = EvalReport::from_csv(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert!((report.per_group[0].mean_gap - 0.87).abs() < 1e-12);
    assert!((report.per_group[1].mean_gap - 1.08).abs() < 1e-12);
    assert!(report.length_correlation.is_none());
}

#[test]
fn sweep_over_tau_writes_one_trace_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        &dir.path().join("sweep.toml"),
        "[world]\npairs_per_group = 200\n[train]\nobjective = \"fr_rm\"\nepochs = 2\n[sweep]\ntaus = [-5.0, -1.0, 0.5, 2.0, 10.0]\nalphas = [0.1]\ngammas = [0.5]\n",
    );
    let out_dir = dir.path().join("sweep");
    let out = fairpref(&["sweep", "--quiet", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mut columns = Vec::new();
    for tau in ["-5", "-1", "0.5", "2", "10"] {
        let text = std::fs::read_to_string(out_dir.join(format!("trace_tau{tau}_alpha0.1_gamma0.5.csv"))).unwrap();
        let col: Vec<f64> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(3).unwrap().parse().unwrap())
            .collect();
        assert!(!col.is_empty() && col.iter().all(|v| v.is_finite()));
        columns.push(col);
    }
    for i in 0..columns.len() {
        for j in i + 1..columns.len() {
            assert_ne!(columns[i], columns[j]);
        }
    }
    let summary = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(summary.lines().count(), 6);

    // Worker count does not change results.
    let serial = dir.path().join("serial");
    let out = Command::new(env!("CARGO_BIN_EXE_fairpref"))
        .args(["sweep", "--quiet", "--config", &cfg, "--out", serial.to_str().unwrap()])
        .env("FAIRPREF_WORKERS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read(serial.join("sweep.csv")).unwrap(), summary.as_bytes());

    let out = Command::new(env!("CARGO_BIN_EXE_fairpref"))
        .args(["sweep", "--config", &cfg, "--out", serial.to_str().unwrap()])
        .env("FAIRPREF_WORKERS", "none")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAIRPREF_WORKERS"));
}

#[test]
fn seed_override_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let cfg = write(&dir.path().join("c.toml"), SMALL);
    for (name, seed) in [("a", "1"), ("b", "1"), ("c", "2")] {
        assert_eq!(code(&fairpref(&["gen", "--quiet", "--config", &cfg, "--seed", seed, "--out", &p(name)])), 0);
    }
    let read = |n: &str| std::fs::read(p(n)).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}
