use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo")
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let name = entry.file_name();
        if name == "runs" || name == "cache" {
            continue;
        }
        let target = to.join(&name);
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// A private copy of the demo workspace, so runs and caches stay out of the repo.
fn workspace() -> (TempDir, PathBuf) {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().join("demo");
    copy_tree(&demo_dir(), &root);
    let config = root.join("request.toml");
    (tmp, config)
}

fn harness(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_request-harness"))
        .args(args)
        .env_remove("REQUEST_LOG")
        .env("SOURCE_DATE_EPOCH", "1704164705")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Relative path to contents for every file below `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, String> {
    fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, String>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(base, &path, out);
            } else {
                let rel = path.strip_prefix(base).unwrap().to_path_buf();
                out.insert(rel, fs::read_to_string(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn assert_same_tree(left: &Path, right: &Path) {
    let (l, r) = (snapshot(left), snapshot(right));
    assert_eq!(l.keys().collect::<Vec<_>>(), r.keys().collect::<Vec<_>>());
    for (path, text) in &l {
        assert_eq!(text, &r[path], "{} differs", path.display());
    }
}

fn cfg(config: &Path) -> String {
    config.to_str().unwrap().to_string()
}

#[test]
fn validate_config_accepts_the_demo() {
    let out = harness(&[
        "validate-config",
        "-c",
        demo_dir().join("request.toml").to_str().unwrap(),
    ]);
    let text = ok(&out);
    assert!(
        text.contains("config OK: 2 backends, 5 tasks, 5 matrix jobs"),
        "{text}"
    );
}

#[test]
fn config_errors_exit_2() {
    let (_tmp, config) = workspace();
    let out = harness(&["validate-config", "-c", "/nonexistent/request.toml"]);
    assert_eq!(out.status.code(), Some(2));

    let out = harness(&[
        "matrix",
        "-c",
        &cfg(&config),
        "--backend",
        "mock1",
        "--backend",
        "nope",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("unknown backend `nope`"));

    let out = harness(&["matrix", "-c", &cfg(&config), "--backend", "mock1"]);
    assert_eq!(out.status.code(), Some(2));

    let text = fs::read_to_string(&config).unwrap();
    fs::write(
        &config,
        text.replace("kind = \"mock\"", "kind = \"carrier-pigeon\""),
    )
    .unwrap();
    let out = harness(&["validate-config", "-c", &cfg(&config)]);
    assert_eq!(out.status.code(), Some(2));

    let out = harness(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unparsable_source_date_epoch_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_request-harness"))
        .args(["validate-config", "-c"])
        .arg(demo_dir().join("request.toml"))
        .env("SOURCE_DATE_EPOCH", "yesterday")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("SOURCE_DATE_EPOCH"));
}

#[test]
fn missing_dataset_is_a_config_error() {
    let (tmp, config) = workspace();
    fs::remove_dir_all(tmp.path().join("demo/datasets/statute")).unwrap();
    let out = harness(&["validate-config", "-c", &cfg(&config)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn matrix_writes_tables_and_is_idempotent() {
    let (tmp, config) = workspace();
    let args = [
        "matrix",
        "-c",
        &cfg(&config),
        "--backend",
        "mock1",
        "--backend",
        "mock2",
        "--task",
        "statute-fixture",
    ];
    let first = ok(&harness(&args));
    assert!(first.contains("### Reproducibility: statute (X = mock1-rules, Y = mock2-rules)"));
    assert!(first.contains("| Baseline (GPT-3.5) | MacroF1_X | MacroF1_XA_X | PerRR_XP_X |"));

    let task_dir = tmp.path().join("demo/runs/default/statute-fixture");
    for file in [
        "matrix__mock1__mock2.json",
        "matrix__mock2__mock1.json",
        "report__mock1__mock2.md",
        "report__mock1__mock2.csv",
        "task__mock1/outcomes.jsonl",
        "robust__mock1__on__mock2/algorithm.txt",
        "algorithms/mock2.json",
    ] {
        assert!(task_dir.join(file).is_file(), "missing {file}");
    }
    let before = snapshot(&tmp.path().join("demo/runs"));

    let again = harness(&args);
    let second = ok(&again);
    assert_eq!(first, second);
    assert!(
        stderr(&again).contains("statute-fixture: provider calls: mock1 0, mock2 0"),
        "{}",
        stderr(&again)
    );
    assert_eq!(before, snapshot(&tmp.path().join("demo/runs")));
}

#[test]
fn offline_rescore_reproduces_tables() {
    let (tmp, config) = workspace();
    ok(&harness(&[
        "matrix",
        "-c",
        &cfg(&config),
        "--task",
        "hr-fixture",
    ]));
    let out = harness(&[
        "matrix",
        "-c",
        &cfg(&config),
        "--task",
        "hr-fixture",
        "--run-set",
        "replay",
        "--offline",
    ]);
    ok(&out);
    let runs = tmp.path().join("demo/runs");
    assert_same_tree(&runs.join("default"), &runs.join("replay"));

    // Offline with an empty cache fails as a job error.
    let (_tmp2, cold) = workspace();
    let out = harness(&[
        "matrix",
        "-c",
        &cfg(&cold),
        "--task",
        "hr-fixture",
        "--offline",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn score_recomputes_the_saved_matrix() {
    let (tmp, config) = workspace();
    ok(&harness(&[
        "matrix",
        "-c",
        &cfg(&config),
        "--task",
        "severity-fixture",
    ]));
    let task_dir = tmp.path().join("demo/runs/default/severity-fixture");
    let saved = fs::read(task_dir.join("matrix__mock2__mock1.json")).unwrap();
    fs::remove_file(task_dir.join("matrix__mock2__mock1.json")).unwrap();
    ok(&harness(&[
        "score",
        "-c",
        &cfg(&config),
        "--task",
        "severity-fixture",
        "--reference",
        "mock2",
        "--other",
        "mock1",
    ]));
    assert_eq!(
        saved,
        fs::read(task_dir.join("matrix__mock2__mock1.json")).unwrap()
    );
}

#[test]
fn interrupted_task_run_resumes_to_the_same_artifacts() {
    let (tmp, config) = workspace();
    let run = |run_set: &str, stop: Option<&str>| {
        let mut args = vec![
            "run-task",
            "-c",
            config.to_str().unwrap(),
            "--backend",
            "mock2",
            "--task",
            "suicide-fixture",
            "--run-set",
            run_set,
        ];
        if let Some(n) = stop {
            args.extend(["--stop-after", n]);
        }
        ok(&harness(&args))
    };
    run("straight", None);
    run("resumed", Some("3"));
    let partial = tmp
        .path()
        .join("demo/runs/resumed/suicide-fixture/task__mock2");
    assert!(!partial.join("manifest.json").exists());
    run("resumed", None);
    let runs = tmp.path().join("demo/runs");
    assert_same_tree(
        &runs.join("straight/suicide-fixture/task__mock2"),
        &runs.join("resumed/suicide-fixture/task__mock2"),
    );
}

#[test]
fn stepwise_commands_match_the_matrix_workflow() {
    let (tmp, config) = workspace();
    let c = cfg(&config);
    ok(&harness(&["matrix", "-c", &c, "--task", "stock-fixture"]));
    for (backend, from) in [("mock1", "mock1"), ("mock2", "mock1")] {
        ok(&harness(&[
            "run-task",
            "-c",
            &c,
            "--backend",
            from,
            "--task",
            "stock-fixture",
            "--run-set",
            "steps",
        ]));
        ok(&harness(&[
            "elicit",
            "-c",
            &c,
            "--backend",
            from,
            "--task",
            "stock-fixture",
            "--run-set",
            "steps",
        ]));
        ok(&harness(&[
            "run-robustness",
            "-c",
            &c,
            "--backend",
            backend,
            "--algorithm-from",
            from,
            "--task",
            "stock-fixture",
            "--run-set",
            "steps",
        ]));
    }
    ok(&harness(&[
        "score",
        "-c",
        &c,
        "--task",
        "stock-fixture",
        "--reference",
        "mock1",
        "--other",
        "mock2",
        "--run-set",
        "steps",
    ]));
    let runs = tmp.path().join("demo/runs");
    let name = "stock-fixture/matrix__mock1__mock2.json";
    assert_eq!(
        fs::read(runs.join("default").join(name)).unwrap(),
        fs::read(runs.join("steps").join(name)).unwrap()
    );
}

#[test]
fn report_collects_every_matrix() {
    let (tmp, config) = workspace();
    ok(&harness(&["matrix", "-c", &cfg(&config)]));
    let md = ok(&harness(&["report", "-c", &cfg(&config)]));
    assert_eq!(md.matches("### Reproducibility:").count(), 10);
    let csv = ok(&harness(&[
        "report",
        "-c",
        &cfg(&config),
        "--format",
        "csv",
    ]));
    assert!(csv.starts_with("task_id,reference,other,"));
    let set = tmp.path().join("demo/runs/default");
    let summary = fs::read_to_string(set.join("perrr_summary.csv")).unwrap();
    assert_eq!(
        summary.lines().next(),
        Some("task_id,reference,other,metric,perrr")
    );
    // 5 tasks, 2 directions, 3 PerRR columns.
    assert_eq!(summary.lines().count(), 1 + 5 * 2 * 3);
    assert_eq!(fs::read_to_string(set.join("report.md")).unwrap(), md);

    let out = harness(&["report", "-c", &cfg(&config), "--format", "yaml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn analyze_binary_histogram_totals_64() {
    let out = harness(&[
        "analyze",
        "--binary",
        "--gold",
        "1,0,1,0,1,0",
        "--reference",
        "1,1,1,1,0,0",
    ]);
    let csv = ok(&out);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("macro_f1,count"));
    let total: u64 = lines
        .map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 64);
    let err = stderr(&out);
    assert!(
        err.contains("18 including the reference, 17 excluding it"),
        "{err}"
    );
}

#[test]
fn analyze_writes_the_histogram_file() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("hist.csv");
    let out = harness(&[
        "analyze",
        "--classes",
        "a,b,c",
        "--gold",
        "a,b,c,a,b,c",
        "--out",
        path.to_str().unwrap(),
    ]);
    assert!(ok(&out).is_empty());
    let csv = fs::read_to_string(&path).unwrap();
    let total: u64 = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 729);

    let out = harness(&["analyze", "--binary", "--gold", "1,0,2"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn import_reproduces_the_demo_datasets() {
    let tmp = TempDir::new().unwrap();
    let raw = demo_dir().join("raw");
    let out = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    let p = |rel: &str| raw.join(rel).to_str().unwrap().to_string();
    let jobs: Vec<(&str, Vec<String>)> = vec![
        (
            "statute",
            vec![
                "--format".into(),
                "statute".into(),
                "--input".into(),
                p("statute/facts.jsonl"),
                "--catalog".into(),
                p("statute/catalog.json"),
                "--task-id".into(),
                "statute".into(),
            ],
        ),
        (
            "human-rights",
            vec![
                "--format".into(),
                "echr_binary".into(),
                "--input".into(),
                p("echr/cases.jsonl"),
            ],
        ),
        (
            "suicide-watch",
            vec![
                "--format".into(),
                "reddit_class".into(),
                "--input".into(),
                p("suicide_watch.csv"),
                "--labels".into(),
                "SuicideWatch,Depression,Anxiety,Bipolar,OffMyChest".into(),
                "--task-id".into(),
                "suicide-watch".into(),
            ],
        ),
        (
            "depression-severity",
            vec![
                "--format".into(),
                "reddit_class".into(),
                "--input".into(),
                p("severity.csv"),
                "--labels".into(),
                "Minimum,Mild,Moderate,Severe".into(),
                "--task-id".into(),
                "depression-severity".into(),
            ],
        ),
        (
            "stock-AAPL",
            vec![
                "--format".into(),
                "stock_window".into(),
                "--input".into(),
                p("stock"),
                "--tickers".into(),
                "AAPL".into(),
                "--min-mentions".into(),
                "3".into(),
                "--task-id".into(),
                "stock-AAPL".into(),
            ],
        ),
    ];
    for (name, mut args) in jobs {
        args.splice(0..0, ["import".to_string()]);
        args.extend(["--out".to_string(), out(name)]);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(&harness(&refs));
        assert_same_tree(
            &tmp.path().join(name),
            &demo_dir().join("datasets").join(name),
        );
    }
}

#[test]
fn import_rejects_unknown_formats() {
    let tmp = TempDir::new().unwrap();
    let out = harness(&[
        "import",
        "--format",
        "xml",
        "--input",
        "x",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
