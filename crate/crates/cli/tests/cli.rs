//! End-to-end tests that drive the compiled binary the way a user would.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_spheregate")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("binary launches")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("temp paths are valid UTF-8")
}

/// Writes a small bundle and trains a deliberately tiny model on it.
fn make_and_train(root: &Path) -> (String, String) {
    let data = root.join("data");
    let out = root.join("run");
    assert_ok(&run(&[
        "make-synthetic",
        "--out",
        path_str(&data),
        "--n-seen",
        "4",
        "--n-unseen",
        "2",
        "--attr-dim",
        "8",
        "--feat-dim",
        "16",
        "--samples-per-class",
        "30",
        "--seed",
        "3",
    ]));
    assert_ok(&run(&[
        "train",
        "--data",
        path_str(&data),
        "--out",
        path_str(&out),
        "--epochs",
        "3",
        "--latent-dim",
        "4",
        "--hidden-dim",
        "8",
        "--batch-size",
        "32",
        "--samples-per-posterior",
        "2",
        "--seed",
        "5",
    ]));
    (
        data.display().to_string(),
        out.display().to_string(),
    )
}

#[test]
fn pipeline_from_synthetic_data_to_both_evaluations() {
    let tmp = TempDir::new().unwrap();
    let (data, run_dir) = make_and_train(tmp.path());
    let run_dir = Path::new(&run_dir);
    let checkpoint = run_dir.join("checkpoint.bin");
    assert!(checkpoint.exists());

    let log = fs::read_to_string(run_dir.join("training_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,step,l_f_svae,l_a_svae,l_cr,l_cls,l_overall,seconds"
    );
    // 96 training rows in batches of 32 over 3 epochs.
    assert_eq!(lines.count(), 9);

    let report = fs::read_to_string(run_dir.join("train_report.txt")).unwrap();
    assert!(report.contains("command = train"));
    assert!(report.contains("epochs = 3"));
    assert!(report.contains("config_digest = "));
    assert!(report.contains("final_l_overall = "));

    let ood_out = tmp.path().join("ood");
    assert_ok(&run(&[
        "eval-ood",
        "--data",
        &data,
        "--checkpoint",
        path_str(&checkpoint),
        "--out",
        path_str(&ood_out),
        "--gamma",
        "0.9",
    ]));
    let ood = fs::read_to_string(ood_out.join("ood_report.txt")).unwrap();
    assert!(ood.contains("auc = "));
    assert!(ood.contains("fpr_at_95tpr = "));
    assert!(ood.contains("gamma = 0.9"));
    let roc = fs::read_to_string(ood_out.join("roc.csv")).unwrap();
    assert!(roc.starts_with("fpr,tpr\n"));
    assert!(ood_out.join("boundaries.txt").exists());

    let gzsl_out = tmp.path().join("gzsl");
    assert_ok(&run(&[
        "eval-gzsl",
        "--data",
        &data,
        "--checkpoint",
        path_str(&checkpoint),
        "--out",
        path_str(&gzsl_out),
        "--gamma",
        "0.9",
    ]));
    let gzsl = fs::read_to_string(gzsl_out.join("gzsl_report.txt")).unwrap();
    let grab = |key: &str| -> f64 {
        gzsl.lines()
            .find_map(|l| l.strip_prefix(&format!("{key} = ")))
            .unwrap_or_else(|| panic!("report lacks {key}"))
            .parse()
            .unwrap()
    };
    let (ts, tr, h) = (grab("ts"), grab("tr"), grab("h"));
    // The reported triple must satisfy the harmonic identity up to its own
    // four-decimal rounding.
    let expect = if ts + tr == 0.0 {
        0.0
    } else {
        2.0 * ts * tr / (ts + tr)
    };
    assert!((h - expect).abs() < 1e-3, "ts {ts}, tr {tr}, h {h}");

    // Every test row appears exactly once in the prediction export:
    // 4 seen classes contribute 6 test rows each, 2 unseen classes 30 each.
    let preds = fs::read_to_string(gzsl_out.join("predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 1 + 24 + 60);
}

#[test]
fn same_seed_reproduces_checkpoint_bytes() {
    let tmp = TempDir::new().unwrap();
    let (data, first_run) = make_and_train(tmp.path());
    let second_out = tmp.path().join("rerun");
    assert_ok(&run(&[
        "train",
        "--data",
        &data,
        "--out",
        path_str(&second_out),
        "--epochs",
        "3",
        "--latent-dim",
        "4",
        "--hidden-dim",
        "8",
        "--batch-size",
        "32",
        "--samples-per-posterior",
        "2",
        "--seed",
        "5",
    ]));
    let a = fs::read(Path::new(&first_run).join("checkpoint.bin")).unwrap();
    let b = fs::read(second_out.join("checkpoint.bin")).unwrap();
    assert_eq!(a, b, "same data and seed must give identical checkpoints");
    let ra = fs::read(Path::new(&first_run).join("train_report.txt")).unwrap();
    let rb = fs::read(second_out.join("train_report.txt")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn missing_dataset_exits_with_data_code_and_no_outputs() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let absent = tmp.path().join("no-such-bundle");
    let result = run(&[
        "train",
        "--data",
        path_str(&absent),
        "--out",
        path_str(&out),
        "--epochs",
        "1",
    ]);
    assert_eq!(result.status.code(), Some(3));
    assert!(!out.exists(), "a failed run must not leave outputs behind");
}

#[test]
fn flags_override_config_file_entries() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert_ok(&run(&[
        "make-synthetic",
        "--out",
        path_str(&data),
        "--n-seen",
        "4",
        "--n-unseen",
        "2",
        "--attr-dim",
        "8",
        "--feat-dim",
        "16",
        "--samples-per-class",
        "30",
        "--seed",
        "3",
    ]));
    let config = tmp.path().join("run.cfg");
    fs::write(
        &config,
        "# small smoke settings\nepochs = 4\nlatent_dim = 4\nhidden_dim = 8\n\
         batch_size = 32\nsamples_per_posterior = 2\nseed = 5\n",
    )
    .unwrap();
    let out = tmp.path().join("run");
    assert_ok(&run(&[
        "train",
        "--data",
        path_str(&data),
        "--out",
        path_str(&out),
        "--config",
        path_str(&config),
        "--epochs",
        "2",
    ]));
    let report = fs::read_to_string(out.join("train_report.txt")).unwrap();
    assert!(report.contains("epochs = 2"), "flag must beat the file");
    assert!(report.contains("latent_dim = 4"), "file must beat the default");

    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "epocs = 4\n").unwrap();
    let result = run(&[
        "train",
        "--data",
        path_str(&data),
        "--out",
        path_str(&tmp.path().join("run2")),
        "--config",
        path_str(&bad),
    ]);
    assert_eq!(result.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("unknown setting"), "stderr: {stderr}");
}

#[test]
fn gamma_grid_emits_one_row_and_one_roc_file_per_value() {
    let tmp = TempDir::new().unwrap();
    let (data, run_dir) = make_and_train(tmp.path());
    let out = tmp.path().join("sweep");
    assert_ok(&run(&[
        "eval-ood",
        "--data",
        &data,
        "--checkpoint",
        path_str(&Path::new(&run_dir).join("checkpoint.bin")),
        "--out",
        path_str(&out),
        "--gamma-grid",
        "0.8,0.9,0.95",
    ]));
    let report = fs::read_to_string(out.join("ood_report.txt")).unwrap();
    let rows: Vec<&str> = report
        .lines()
        .filter(|l| l.starts_with("row = gamma="))
        .collect();
    assert_eq!(rows.len(), 3, "report: {report}");
    for g in ["0.8", "0.9", "0.95"] {
        assert!(report.contains(&format!("row = gamma={g} ")));
        assert!(out.join(format!("roc_gamma_{g}.csv")).exists());
        assert!(out.join(format!("boundaries_gamma_{g}.txt")).exists());
    }
}

#[test]
fn partial_prediction_file_fails_listing_missing_indices() {
    let tmp = TempDir::new().unwrap();
    let (data, run_dir) = make_and_train(tmp.path());
    // Covers a single row (a training row at that), so every required test
    // index is missing.
    let preds = tmp.path().join("partial.txt");
    fs::write(&preds, "0, 4\n").unwrap();
    let out = tmp.path().join("gzsl");
    let result = run(&[
        "eval-gzsl",
        "--data",
        &data,
        "--checkpoint",
        path_str(&Path::new(&run_dir).join("checkpoint.bin")),
        "--out",
        path_str(&out),
        "--expert",
        &format!("file:{}", preds.display()),
    ]);
    assert_eq!(result.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("missing test indices"), "stderr: {stderr}");
    assert!(!out.exists(), "a failed run must not leave outputs behind");
}

#[test]
fn complete_prediction_file_drives_the_unseen_route() {
    let tmp = TempDir::new().unwrap();
    let (data, run_dir) = make_and_train(tmp.path());
    let checkpoint = Path::new(&run_dir).join("checkpoint.bin");

    // Run the baseline first to learn the test indices, then hand every one
    // of them to a file expert that always answers the same unseen class.
    let baseline_out = tmp.path().join("baseline");
    assert_ok(&run(&[
        "eval-gzsl",
        "--data",
        &data,
        "--checkpoint",
        path_str(&checkpoint),
        "--out",
        path_str(&baseline_out),
    ]));
    let exported = fs::read_to_string(baseline_out.join("predictions.csv")).unwrap();
    let mut file_expert = String::new();
    for line in exported.lines().skip(1) {
        let idx = line.split(',').next().unwrap();
        file_expert.push_str(&format!("{idx}, 4\n"));
    }
    let preds = tmp.path().join("full.txt");
    fs::write(&preds, file_expert).unwrap();

    let out = tmp.path().join("file-expert");
    assert_ok(&run(&[
        "eval-gzsl",
        "--data",
        &data,
        "--checkpoint",
        path_str(&checkpoint),
        "--out",
        path_str(&out),
        "--expert",
        &format!("file:{}", preds.display()),
    ]));
    let report = fs::read_to_string(out.join("gzsl_report.txt")).unwrap();
    assert!(report.contains(&format!("expert = file:{}", preds.display())));
    // Every unseen-routed row now answers class 4, so rows of class 5 can
    // never be right and unseen accuracy cannot exceed one half.
    let ts: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("ts = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(ts <= 50.0 + 1e-9, "ts {ts}");
}

#[test]
fn rerunning_evaluation_reproduces_report_bytes() {
    let tmp = TempDir::new().unwrap();
    let (data, run_dir) = make_and_train(tmp.path());
    let checkpoint = Path::new(&run_dir).join("checkpoint.bin");
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    for out in [&out_a, &out_b] {
        assert_ok(&run(&[
            "eval-ood",
            "--data",
            &data,
            "--checkpoint",
            path_str(&checkpoint),
            "--out",
            path_str(out),
        ]));
    }
    assert_eq!(
        fs::read(out_a.join("ood_report.txt")).unwrap(),
        fs::read(out_b.join("ood_report.txt")).unwrap()
    );
    assert_eq!(
        fs::read(out_a.join("roc.csv")).unwrap(),
        fs::read(out_b.join("roc.csv")).unwrap()
    );
}

#[test]
fn bundle_without_unseen_test_rows_exits_with_numeric_code() {
    let tmp = TempDir::new().unwrap();
    let (data, run_dir) = make_and_train(tmp.path());
    // Rewrite the bundle with the unseen test split emptied.
    let mut bundle = spheregate_core::data::load_bundle(Path::new(&data)).unwrap();
    bundle.test_unseen_idx.clear();
    let degenerate = tmp.path().join("degenerate");
    spheregate_core::data::save_bundle(&degenerate, &bundle).unwrap();

    let out = tmp.path().join("ood");
    let result = run(&[
        "eval-ood",
        "--data",
        path_str(&degenerate),
        "--checkpoint",
        path_str(&Path::new(&run_dir).join("checkpoint.bin")),
        "--out",
        path_str(&out),
    ]);
    assert_eq!(result.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("undefined metric"), "stderr: {stderr}");
}
