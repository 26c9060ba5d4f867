use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_watchanxiety"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"
[dataset.synth]
n_participants = 12
n_days = 2
emas_per_day = 4

[pipeline]
windows = [{ length_s = 3600.0, min_samples = 50 }, { length_s = 7200.0, min_samples = 50 }]
plot_side = 16

[pipeline.backbone]
input_side = 16

[pipeline.base.phase1]
optimizer = { kind = "sgd", learning_rate = 0.01 }
max_epochs = 1

[pipeline.base.phase2]
optimizer = { kind = "sgd", learning_rate = 0.001 }
max_epochs = 1

[pipeline.head]
max_epochs = 1
"#;

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn missing_config_is_an_input_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let missing = missing.to_str().unwrap();
    for cmd in ["synth", "featurize", "run"] {
        let o = bin(&[cmd, "--config", missing]);
        assert_eq!(o.status.code(), Some(2), "{cmd}: {}", stderr(&o));
        assert!(stderr(&o).contains(missing), "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn missing_dataset_directory_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("absent-data");
    let cfg = write_config(dir.path(), &format!("[dataset]\ndir = {:?}\n", data.to_str().unwrap()));
    let o = bin(&["featurize", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("absent-data"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[pipeline]\nplot_sidee = 16\n");
    let o = bin(&["synth", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("plot_sidee"), "{}", stderr(&o));
}

#[test]
fn report_on_missing_directory_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("no-report");
    let o = bin(&["report", "--dir", target.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no-report"));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = bin(&["synth", "--config", &cfg, "--seed", "5", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["hr.csv", "ema.csv", "traits.csv", "scales.csv", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let manifest = fs::read_to_string(a.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 5"), "{manifest}");
}

#[test]
fn featurize_writes_one_plot_per_window_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("features");
    let o = bin(&["featurize", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut counts = Vec::new();
    for w in ["1h", "2h"] {
        let text = fs::read_to_string(out.join(w).join("windows.jsonl")).unwrap();
        let rows: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        for r in &rows {
            let plot = r["plot"].as_str().unwrap();
            assert!(out.join(w).join(plot).is_file(), "{plot}");
        }
        counts.push(rows.len());
    }
    assert!(counts[0] <= counts[1], "{counts:?}");
    assert!(counts[0] > 0);
}

#[test]
fn run_then_report_rerenders_markdown() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = bin(&["run", "--config", &cfg, "--seed", "9", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["pipeline"]["seed"], 9);
    assert!(report["seeds"].as_object().unwrap().values().all(|v| v.as_u64().is_some()));
    assert_eq!(report["audit_passed"], true);

    let before = fs::read_to_string(out.join("report.md")).unwrap();
    fs::remove_file(out.join("report.md")).unwrap();
    let o = bin(&["report", "--dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("report.md")).unwrap(), before);
}

#[test]
fn verify_with_injected_fault_exits_one() {
    let o = bin(&["verify", "--inject-fault", "focal-gradient"]);
    assert_eq!(o.status.code(), Some(1));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.starts_with("FAIL") && l.contains("focal")), "{text}");
}

#[test]
fn shipped_desk_config_loads() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["synth", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("hr.csv").is_file());
}
