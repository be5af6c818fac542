//! Harness-level behaviour: deterministic sweep tables, append-only run
//! directories, report aggregation, prune-point protocol.

use std::collections::BTreeMap;
use std::path::Path;

use earlycrop_cli::harness::{cmd_prunepoint, cmd_report, cmd_sweep, cmd_train};
use earlycrop_cli::ExperimentConfig;
use earlycrop_core::metrics::MetricsRecord;

fn cfg(pairs: &[(&str, &str)]) -> ExperimentConfig {
    let mut map = BTreeMap::new();
    for (k, v) in pairs {
        map.insert(k.to_string(), v.to_string());
    }
    ExperimentConfig::from_map(map).unwrap()
}

fn quick_pairs(out: &str) -> Vec<(&'static str, &str)> {
    vec![
        ("dataset", "two_moons"),
        ("dataset.n", "300"),
        ("epochs", "6"),
        ("optimizer", "sgd"),
        ("lr", "0.3"),
        ("model.hidden", "16,16"),
        ("out", out),
    ]
}

#[test]
fn train_writes_run_files_and_never_overwrites() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut pairs = quick_pairs(out);
    pairs.push(("rho", "0.5"));
    pairs.push(("seed", "1"));
    let config = cfg(&pairs);

    let first = cmd_train(&config).unwrap();
    let second = cmd_train(&config).unwrap();
    assert!(first.dir.ends_with("run-0001"));
    assert!(second.dir.ends_with("run-0002"), "reruns allocate new dirs");
    for d in [&first.dir, &second.dir] {
        assert!(d.join("run.json").exists());
        assert!(d.join("metrics.csv").exists());
        assert!(d.join("model.ckpt").exists());
        assert!(d.join("model.mask").exists());
    }

    // Per-run CSV columns mirror the record's field order exactly.
    let csv = std::fs::read_to_string(first.dir.join("metrics.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header, MetricsRecord::csv_header());
    assert_eq!(
        header.split(',').collect::<Vec<_>>(),
        MetricsRecord::COLUMNS.to_vec()
    );
}

#[test]
fn sweep_rows_and_medians_counted() {
    // 2 rho x 2 modes x 3 seeds = 12 runs + 4 median rows.
    let dir = tempfile::tempdir().unwrap();
    let mut pairs = quick_pairs(dir.path().to_str().unwrap());
    pairs.push(("rho_list", "0.5,0.9"));
    pairs.push(("seeds", "1,2,3"));
    pairs.push(("modes", "crop-u,earlycrop-u"));
    pairs.push(("jobs", "4"));
    let config = cfg(&pairs);
    let out = cmd_sweep(&config).unwrap();
    assert_eq!(out.rows, 12);
    let csv = std::fs::read_to_string(out.dir.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 12 + 4, "header + runs + medians");
    let medians = lines.iter().filter(|l| l.contains(",median,")).count();
    assert_eq!(medians, 4);
    assert!(out.dir.join("plotdata/sparsity_accuracy.tsv").exists());
}

#[test]
fn sweep_results_are_byte_identical_on_rerun() {
    let run = |out: &Path| {
        let mut pairs = quick_pairs(out.to_str().unwrap());
        pairs.push(("rho_list", "0.5,0.8"));
        pairs.push(("seeds", "1,2"));
        pairs.push(("modes", "crop-u,earlycrop-u"));
        pairs.push(("jobs", "3"));
        let config = cfg(&pairs);
        let sweep = cmd_sweep(&config).unwrap();
        (
            std::fs::read(sweep.dir.join("results.csv")).unwrap(),
            std::fs::read(sweep.dir.join("plotdata/sparsity_accuracy.tsv")).unwrap(),
        )
    };
    let dir = tempfile::tempdir().unwrap();
    let (csv_a, tsv_a) = run(dir.path());
    let (csv_b, tsv_b) = run(dir.path());
    assert_eq!(csv_a, csv_b, "sweep results must be byte-identical");
    assert_eq!(tsv_a, tsv_b);
}

#[test]
fn report_renders_dash_for_unstructured_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let mut pairs = quick_pairs(dir.path().to_str().unwrap());
    pairs.push(("rho_list", "0.5"));
    pairs.push(("seeds", "1,2"));
    pairs.push(("modes", "crop-u,crop-s"));
    let config = cfg(&pairs);
    let sweep = cmd_sweep(&config).unwrap();

    let a = cmd_report(&sweep.dir).unwrap();
    // -U rows have no node sparsity: em dash; -S rows have a number.
    let crop_u_line = a.table.lines().find(|l| l.starts_with("crop-u")).unwrap();
    assert!(crop_u_line.contains('\u{2014}'), "{crop_u_line}");
    let crop_s_line = a.table.lines().find(|l| l.starts_with("crop-s")).unwrap();
    assert!(!crop_s_line.contains('\u{2014}'), "{crop_s_line}");

    let b = cmd_report(&sweep.dir).unwrap();
    assert_eq!(a.table, b.table, "report is idempotent");
}

#[test]
fn report_single_run_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut pairs = quick_pairs(dir.path().to_str().unwrap());
    pairs.push(("rho", "0.5"));
    let config = cfg(&pairs);
    cmd_train(&config).unwrap();
    let report = cmd_report(dir.path()).unwrap();
    assert_eq!(report.table.lines().count(), 2, "header + one group row");
}

#[test]
fn report_rejects_mixed_schema_versions() {
    let dir = tempfile::tempdir().unwrap();
    let mut pairs = quick_pairs(dir.path().to_str().unwrap());
    pairs.push(("rho", "0.5"));
    let config = cfg(&pairs);
    let run = cmd_train(&config).unwrap();
    // Forge a second run with a different schema version.
    let forged_dir = dir.path().join("forged");
    std::fs::create_dir_all(&forged_dir).unwrap();
    let text = std::fs::read_to_string(run.dir.join("run.json")).unwrap();
    let forged = text.replacen("\"schema_version\": 1", "\"schema_version\": 2", 1);
    std::fs::write(forged_dir.join("run.json"), forged).unwrap();
    assert!(cmd_report(dir.path()).is_err());
}

#[test]
fn prunepoint_records_scores_and_positive_rank_correlation() {
    // Pinned desk-scale analog: pruning later in training correlates with
    // higher final accuracy; forced prune points with a fixed post-prune
    // budget, pooled over seeds. Deterministic for fixed seeds.
    let dir = tempfile::tempdir().unwrap();
    let config = cfg(&[
        ("dataset", "two_moons"),
        ("dataset.n", "1000"),
        ("dataset.noise", "0.25"),
        ("mode", "earlycrop-u"),
        ("rho", "0.98"),
        ("optimizer", "sgd"),
        ("lr", "0.3"),
        ("prune_epochs", "2,4,6,8,12,16"),
        ("post_epochs", "12"),
        ("seeds", "0,1,2,3,4,5,6,7"),
        ("out", dir.path().to_str().unwrap()),
    ]);
    let out = cmd_prunepoint(&config).unwrap();
    assert!(
        out.spearman_neg_score_vs_metric > 0.0,
        "spearman {}",
        out.spearman_neg_score_vs_metric
    );

    let csv = std::fs::read_to_string(out.dir.join("results.csv")).unwrap();
    let forced = csv.lines().filter(|l| l.starts_with("forced,")).count();
    assert_eq!(forced, 6 * 8);
    let detector = csv.lines().filter(|l| l.starts_with("detector,")).count();
    assert_eq!(detector, 8);
    // Every forced row carries the score at its prune point.
    for line in csv.lines().filter(|l| l.starts_with("forced,")) {
        let score = line.split(',').nth(3).unwrap();
        assert!(!score.is_empty(), "missing delta score in {line}");
    }
    assert!(out.dir.join("plotdata/prunepoint.tsv").exists());
    assert!(out.dir.join("summary.json").exists());
}

#[test]
fn detector_chosen_beats_prune_at_zero_on_median() {
    // Epoch-0 pruning vs the detector's choice, same budget, 10 seeds.
    // Noise 0.2 keeps the task off its ceiling so the timing matters.
    let dir = tempfile::tempdir().unwrap();
    let base: Vec<(&str, &str)> = vec![
        ("dataset", "two_moons"),
        ("dataset.n", "1000"),
        ("dataset.noise", "0.2"),
        ("rho", "0.95"),
        ("optimizer", "sgd"),
        ("lr", "0.3"),
        ("epochs", "40"),
        ("out", dir.path().to_str().unwrap()),
    ];
    let median = |xs: &mut Vec<f64>| {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        (xs[xs.len() / 2 - (1 - xs.len() % 2)] + xs[xs.len() / 2]) / 2.0
    };
    let mut at_zero = vec![];
    let mut detector = vec![];
    for seed in 0..10u64 {
        let seed_s = seed.to_string();
        for (mode, sink) in [("crop-u", &mut at_zero), ("earlycrop-u", &mut detector)] {
            let mut pairs = base.clone();
            pairs.push(("mode", mode));
            pairs.push(("seed", &seed_s));
            let out = cmd_train(&cfg(&pairs)).unwrap();
            sink.push(out.record.test_metric);
        }
    }
    let m0 = median(&mut at_zero);
    let md = median(&mut detector);
    assert!(md >= m0, "detector median {md} < epoch-0 median {m0}");
}

#[test]
fn sweep_records_failures_and_continues() {
    // cropit with rho < 0.5 cannot build its ratio ladder; the sweep logs
    // the failure and completes the remaining runs.
    let dir = tempfile::tempdir().unwrap();
    let mut pairs = quick_pairs(dir.path().to_str().unwrap());
    pairs.push(("rho_list", "0.4,0.9"));
    pairs.push(("seeds", "1"));
    pairs.push(("modes", "cropit-u"));
    pairs.push(("it", "3"));
    let config = cfg(&pairs);
    let out = cmd_sweep(&config).unwrap();
    assert_eq!(out.rows, 1, "the feasible run still completes");
    let failures = std::fs::read_to_string(out.dir.join("failures.txt")).unwrap();
    assert!(failures.contains("schedule error"), "{failures}");
}
