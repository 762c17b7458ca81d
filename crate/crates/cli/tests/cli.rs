use std::path::Path;
use std::process::{Command, Output};

use metacon::app::{LOCK_FILE, METRICS_FILE, TRACE_FILE};

const SMALL: &str = r#"
seed = 5
[generator]
num_domains = 3
samples_per_domain = 48
[model]
embed_dim = 8
domain_dim = 4
[model.image]
hidden_dims = [8]
[model.text]
hidden_dims = [8]
[meta]
iterations = 4
meta_batch_size = 2
inner_steps = 1
support_size = 8
query_size = 8
align_per_domain = 8
[eval]
holdout_domains = [2]
ks = [0, 1]
num_tasks = 2
support_size = 8
query_size = 8
[io]
out_dir = "run"
checkpoint_every = 2
"#;

fn metacon(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metacon"))
        .args(args)
        .current_dir(root)
        .env("METACON_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup(extra: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), format!("{SMALL}{extra}")).unwrap();
    dir
}

#[test]
fn generate_reports_every_domain() {
    let dir = setup("");
    let o = metacon(dir.path(), &["generate", "c.toml"]);
    assert!(o.status.success(), "{o:?}");
    let out = stdout(&o);
    assert!(out.contains("3 domains"));
    assert_eq!(out.matches(": 48 samples").count(), 3);
    let first = std::fs::read(dir.path().join("dataset.bin")).unwrap();
    assert!(metacon(dir.path(), &["generate", "c.toml"]).status.success());
    assert_eq!(first, std::fs::read(dir.path().join("dataset.bin")).unwrap());
}

#[test]
fn train_writes_a_complete_run_directory() {
    let dir = setup("");
    let o = metacon(dir.path(), &["train", "c.toml"]);
    assert!(o.status.success(), "{o:?}");
    let run = dir.path().join("run");
    for f in ["config.toml", "metrics.tsv", "timing.tsv", "final.ckpt", "trace.tsv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    assert!(run.join("checkpoints/iter-000002.ckpt").exists());
    assert!(run.join("checkpoints/iter-000004.ckpt").exists());
    assert!(!run.join(LOCK_FILE).exists());
    // dataset generated on demand
    assert!(dir.path().join("dataset.bin").exists());
    let metrics = std::fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 5);
    let echoed = metacon::config::TrainConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(echoed.meta.iterations, 4);
}

#[test]
fn cli_resume_continues_the_metrics_table() {
    let dir = setup("");
    assert!(metacon(dir.path(), &["train", "c.toml"]).status.success());
    let run = dir.path().join("run");
    let full = std::fs::read_to_string(run.join(METRICS_FILE)).unwrap();
    let o = metacon(dir.path(), &["train", "c.toml", "--resume", "run/checkpoints/iter-000002.ckpt"]);
    assert!(o.status.success(), "{o:?}");
    assert_eq!(std::fs::read_to_string(run.join(METRICS_FILE)).unwrap(), full);
}

#[test]
fn resume_with_another_config_needs_force() {
    let dir = setup("");
    assert!(metacon(dir.path(), &["train", "c.toml"]).status.success());
    let o = metacon(
        dir.path(),
        &["train", "c.toml", "--mode", "baseline", "--resume", "run/checkpoints/iter-000002.ckpt"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash"));
    let o = metacon(
        dir.path(),
        &["train", "c.toml", "--mode", "baseline", "--force", "--resume", "run/checkpoints/iter-000002.ckpt"],
    );
    assert!(o.status.success(), "{o:?}");
}

#[test]
fn baseline_mode_records_no_inner_loop() {
    let dir = setup("");
    assert!(metacon(dir.path(), &["train", "c.toml", "--mode", "baseline"]).status.success());
    let trace = std::fs::read_to_string(dir.path().join("run").join(TRACE_FILE)).unwrap();
    assert!(trace.contains("mode\tbaseline"));
    assert!(trace.contains("inner_adapt_calls\t0"));
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = setup("");
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(LOCK_FILE), "1").unwrap();
    let o = metacon(dir.path(), &["train", "c.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!run.join(METRICS_FILE).exists());
}

#[test]
fn invalid_config_fails_without_writing() {
    let dir = setup("");
    std::fs::write(dir.path().join("bad.toml"), "[meta]\ninner_learning_rate = 0.1\n").unwrap();
    let o = metacon(dir.path(), &["train", "bad.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("inner_learning_rate"));
    assert!(!dir.path().join("runs").exists());
    assert!(!dir.path().join("dataset.bin").exists());
}

#[test]
fn diverging_training_exits_with_code_2() {
    let dir = setup("");
    let cfg = std::fs::read_to_string(dir.path().join("c.toml"))
        .unwrap()
        .replace("inner_steps = 1", "inner_steps = 2\ninner_lr = 1e300");
    std::fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let o = metacon(dir.path(), &["train", "c.toml"]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");
}

#[test]
fn eval_writes_reports_and_rejects_unknown_domains() {
    let dir = setup("");
    assert!(metacon(dir.path(), &["train", "c.toml"]).status.success());
    let o = metacon(dir.path(), &["eval", "run/final.ckpt", "dataset.bin", "--holdout-domains", "9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("run/eval").exists());

    let o = metacon(
        dir.path(),
        &["eval", "run/final.ckpt", "dataset.bin", "--compare", "run/checkpoints/iter-000002.ckpt"],
    );
    assert!(o.status.success(), "{o:?}");
    let eval = dir.path().join("run/eval");
    let report = std::fs::read_to_string(eval.join("report.tsv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 2 * 2);
    let cmp = std::fs::read_to_string(eval.join("comparison.tsv")).unwrap();
    assert!(cmp.starts_with("metric\tdomain\tk\tprimary\tcompare"));
    assert!(cmp.lines().any(|l| l.starts_with("recall@1\t2\t0\t")));
    assert!(cmp.lines().any(|l| l.starts_with("domain_gap")));
    assert!(std::fs::read_to_string(eval.join("summary.txt")).unwrap().contains("held-out domain 2"));

    // same inputs, same report
    let again = dir.path().join("again");
    let o = metacon(
        dir.path(),
        &["eval", "run/final.ckpt", "dataset.bin", "--compare", "run/checkpoints/iter-000002.ckpt", "--out", "again"],
    );
    assert!(o.status.success());
    assert_eq!(report, std::fs::read_to_string(again.join("report.tsv")).unwrap());
}

#[test]
fn eval_at_k0_equals_direct_retrieval() {
    use metacon::data::sample_task;
    use metacon::eval::{retrieval_eval, RetrievalDirection, RetrievalReport};
    use metacon::meta::init_unseen_domains;
    use metacon::persist::{load_dataset, Checkpoint};
    use rand::SeedableRng;

    let dir = setup("");
    assert!(metacon(dir.path(), &["train", "c.toml"]).status.success());
    let o = metacon(dir.path(), &["eval", "run/final.ckpt", "dataset.bin", "--ks", "0"]);
    assert!(o.status.success(), "{o:?}");
    let report = std::fs::read_to_string(dir.path().join("run/eval/report.tsv")).unwrap();
    let row: Vec<&str> = report.lines().nth(1).unwrap().split('\t').collect();
    let recall1: f64 = row[3].parse().unwrap();

    let ck: Checkpoint<f64> = Checkpoint::load(&dir.path().join("run/final.ckpt")).unwrap();
    let cfg = ck.config().unwrap();
    let data = load_dataset::<f64>(&dir.path().join("dataset.bin")).unwrap();
    let theta = init_unseen_domains(&ck.params, &[2], &cfg.train_domains()).unwrap();
    let model = cfg.model().unwrap();
    let reports: Vec<RetrievalReport> = (0..cfg.eval.num_tasks)
        .map(|i| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ (2u64 << 32));
            rng.set_stream(i as u64);
            let task = sample_task(&data, 2, 8, 8, &mut rng).unwrap();
            retrieval_eval(&model, &theta, &task.query, RetrievalDirection::I2t).unwrap()
        })
        .collect();
    let direct = RetrievalReport::mean(&reports).unwrap();
    assert_eq!(recall1, direct.recall(1));
}

#[test]
fn gradcheck_rejects_ops_without_a_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let o = metacon(dir.path(), &["gradcheck", "--inject-fault", "step"]);
    assert_eq!(o.status.code(), Some(1));
    let o = metacon(dir.path(), &["gradcheck", "--inject-fault", "nonsense"]);
    assert_eq!(o.status.code(), Some(1));
}
