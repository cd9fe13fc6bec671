use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = r#"
[dataset]
classes = 4
dim = 8
per_class = 30
[network]
layer_widths = [8, 12, 6, 4]
[train]
steps = 40
log_every = 10
batch_size = 16
"#;

fn run(dir: &Path, cmd: &str, config: &str, extra: &[&str]) -> Output {
    let path = dir.join("config.toml");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_geocollapse"))
        .arg(cmd)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

fn jsonl(path: &Path) -> Vec<serde_json::Map<String, serde_json::Value>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap().as_object().unwrap().clone())
        .collect()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn zero_steps_logs_exactly_one_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("steps = 40", "steps = 0");
    let out = run(dir.path(), "train", &cfg, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = jsonl(&dir.path().join("out/run.jsonl"));
    assert_eq!(records.len(), 1);
    assert_eq!(records[0]["step"], 0);
}

#[test]
fn jsonl_keys_are_record_fields() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), "train", BASE, &[]).status.success());
    let records = jsonl(&dir.path().join("out/run.jsonl"));
    assert_eq!(records.len(), 5);
    let keys: Vec<&str> = records[0].keys().map(String::as_str).collect();
    for k in ["step", "train_loss", "embedding_gc", "nc", "geometric_collapse", "gen_bound_rhs"] {
        assert!(keys.contains(&k), "{k} missing");
    }
    assert!(!keys.iter().any(|k| k.starts_with("target_")));
}

#[test]
fn identical_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(run(a.path(), "train", BASE, &["--seed", "3"]).status.success());
    assert!(run(b.path(), "train", BASE, &["--seed", "3"]).status.success());
    let read = |d: &Path| std::fs::read(d.join("out/run.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let c = tempfile::tempdir().unwrap();
    assert!(run(c.path(), "train", BASE, &["--seed", "4"]).status.success());
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn l2_sweep_summary_matches_final_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "{BASE}\n[sweep]\naxis = \"l2\"\nvalues = [0.0, 0.00025, 0.0005, 0.001, 0.0025]\nseeds = [0, 1]\nmax_parallel = 2\n"
    );
    let out = run(dir.path(), "sweep", &cfg, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let (header, rows) = csv_rows(&dir.path().join("out/run_summary.csv"));
    assert_eq!(rows.len(), 10);
    for row in &rows {
        let records = jsonl(&dir.path().join("out").join(format!("{}.jsonl", row[0])));
        let last = records.last().unwrap();
        for (name, value) in header.iter().zip(row) {
            if let Some(v) = last.get(name) {
                let logged = match v {
                    serde_json::Value::Null => "null".to_string(),
                    serde_json::Value::Number(n) => n.to_string(),
                    other => panic!("unexpected value {other}"),
                };
                if v.is_null() || value.parse::<f64>().is_err() {
                    assert_eq!(&logged, value, "{name}");
                } else {
                    assert_eq!(value.parse::<f64>().unwrap().to_bits(), v.as_f64().unwrap().to_bits(), "{name}");
                }
            }
        }
    }
    let axis_col = header.iter().position(|h| h == "value").unwrap();
    assert_eq!(rows[0][axis_col], "0.0");
    assert_eq!(rows[9][axis_col], "0.0025");
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "train", &BASE.replace("batch_size = 16", "batch_size = 16\nlearning_rate = 0.1"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learning_rate"));
}

#[test]
fn mismatched_widths_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), "train", &BASE.replace("[8, 12, 6, 4]", "[9, 12, 6, 4]"), &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("network.layer_widths"));
}

#[test]
fn divergence_exits_three_with_valid_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("steps = 40", "steps = 40\nlr = 1e6");
    let out = run(dir.path(), "train", &cfg, &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let records = jsonl(&dir.path().join("out/run.jsonl"));
    assert!(!records.is_empty());
    assert_eq!(records[0]["step"], 0);
    let (_, rows) = csv_rows(&dir.path().join("out/run_summary.csv"));
    assert!(!rows[0][2].is_empty());
}

#[test]
fn transfer_logs_target_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[dataset]
classes = 6
dim = 8
per_class = 30
source_classes = [0, 1, 2, 3]
target_classes = [4, 5]
[network]
layer_widths = [8, 12, 6, 4]
[train]
steps = 20
log_every = 10
batch_size = 16
[transfer]
n_way = 2
n_shot = 3
n_query = 5
n_episodes = 8
"#;
    let out = run(dir.path(), "transfer", cfg, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = jsonl(&dir.path().join("out/run.jsonl"));
    assert!(records.iter().all(|r| r.contains_key("target_ridge_acc") && r.contains_key("target_nc")));
    let (_, episodes) = csv_rows(&dir.path().join("out/run_episodes.csv"));
    assert_eq!(episodes.len(), 8);
}

#[test]
fn verify_passes_without_config() {
    let out = Command::new(env!("CARGO_BIN_EXE_geocollapse")).arg("verify").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().count() >= 8 && !text.contains("FAIL"));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_geocollapse"))
        .args(["train", "--config", "/nonexistent/config.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let cfg = geocollapse_cli::load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(cfg.sweep.axis.is_some());
    }
}
