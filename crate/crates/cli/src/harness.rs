//! Experiment orchestration: run directories, result files, sweeps,
//! prune-point studies, aggregation, and checkpoint diagnostics.
//!
//! Every invocation gets a fresh numbered directory under the output root;
//! nothing is ever overwritten. Sweep result tables contain only
//! deterministic columns, so a rerun with the same seeds reproduces the
//! bytes exactly; wall-clock figures live in each run's own files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use earlycrop_core::checkpoint::{load_checkpoint, save_checkpoint, save_masks};
use earlycrop_core::data::Dataset;
use earlycrop_core::diagnostics::{self, spearman};
use earlycrop_core::error::{CoreError, Result};
use earlycrop_core::lifecycle::{run_pipeline, PipelineConfig, PipelineOutcome};
use earlycrop_core::metrics::MetricsRecord;
use earlycrop_core::model::Batch;

use crate::config::ExperimentConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Create `base/prefix-NNNN`, taking the first free number. Run
/// directories are append-only: reruns allocate a new one.
pub fn next_run_dir(base: &Path, prefix: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(base)?;
    for n in 1..100_000u32 {
        let candidate = base.join(format!("{prefix}-{n:04}"));
        match std::fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(CoreError::Io(std::io::Error::other("run directory space exhausted")))
}

fn run_json(
    config: &ExperimentConfig,
    pipeline: &PipelineConfig,
    record: &MetricsRecord,
) -> serde_json::Value {
    serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "mode": pipeline.mode,
        "criterion": pipeline.criterion.as_str(),
        "rho": pipeline.rho,
        "seed": pipeline.seed,
        "config": config.raw,
        "pipeline": pipeline,
        "record": record,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Persist one run: run.json, metrics.csv, checkpoint, mask sidecar.
pub fn write_run(
    dir: &Path,
    config: &ExperimentConfig,
    pipeline: &PipelineConfig,
    outcome: &PipelineOutcome,
) -> Result<()> {
    let json = run_json(config, pipeline, &outcome.record);
    write_file(
        &dir.join("run.json"),
        serde_json::to_string_pretty(&json)
            .map_err(|e| CoreError::Data(format!("serializing run.json: {e}")))?
            .as_bytes(),
    )?;
    let csv = format!("{}\n{}\n", MetricsRecord::csv_header(), outcome.record.csv_row());
    write_file(&dir.join("metrics.csv"), csv.as_bytes())?;
    if outcome.record.diverged.is_none() {
        save_checkpoint(&outcome.model, None, &dir.join("model.ckpt"))?;
        save_masks(&outcome.model, &dir.join("model.mask"))?;
    }
    Ok(())
}

pub struct TrainOutput {
    pub dir: PathBuf,
    pub record: MetricsRecord,
}

/// Single training run; timing covers scoring and detection phases.
pub fn cmd_train(config: &ExperimentConfig) -> Result<TrainOutput> {
    let dataset = config.build_dataset()?;
    let model = config.build_model(&dataset, config.pipeline.seed)?;
    let outcome = run_pipeline(model, &dataset, &config.pipeline)?;
    let dir = next_run_dir(&config.out, "run")?;
    write_run(&dir, config, &config.pipeline, &outcome)?;
    Ok(TrainOutput {
        dir,
        record: outcome.record,
    })
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

struct SweepRow {
    mode: String,
    criterion: String,
    rho: f64,
    seed: u64,
    record: MetricsRecord,
}

pub struct SweepOutput {
    pub dir: PathBuf,
    pub rows: usize,
}

/// Cross product of (mode, rho, seed) runs. Per-run failures are recorded
/// and the sweep continues. `jobs` worker threads execute runs in
/// parallel; results are sorted before writing so output is stable.
pub fn cmd_sweep(config: &ExperimentConfig) -> Result<SweepOutput> {
    if config.rho_list.is_empty() || config.seeds.is_empty() {
        return Err(CoreError::Config("sweep needs rho_list and seeds".into()));
    }
    let dir = next_run_dir(&config.out, "sweep")?;

    let mut tasks = Vec::new();
    for mode in &config.modes {
        for &rho in &config.rho_list {
            for &seed in &config.seeds {
                tasks.push((mode.clone(), rho, seed));
            }
        }
    }

    let config = Arc::new(config.clone());
    let dir_arc = Arc::new(dir.clone());
    let queue = Arc::new(Mutex::new(tasks.into_iter().enumerate().collect::<Vec<_>>()));
    let (tx, rx) = mpsc::channel::<(usize, Result<SweepRow>)>();
    let workers = config.jobs.max(1);
    let mut handles = Vec::new();
    for _ in 0..workers {
        let queue = Arc::clone(&queue);
        let tx = tx.clone();
        let config = Arc::clone(&config);
        let dir = Arc::clone(&dir_arc);
        handles.push(std::thread::spawn(move || loop {
            let task = { queue.lock().expect("queue lock").pop() };
            let Some((i, (mode, rho, seed))) = task else { break };
            let result = sweep_one(&config, &dir, &mode, rho, seed);
            if tx.send((i, result)).is_err() {
                break;
            }
        }));
    }
    drop(tx);

    let mut rows: Vec<SweepRow> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    for (_, result) in rx {
        match result {
            Ok(row) => rows.push(row),
            Err(e) => failures.push(e.to_string()),
        }
    }
    for h in handles {
        let _ = h.join();
    }

    rows.sort_by(|a, b| {
        (&a.mode, &a.criterion)
            .cmp(&(&b.mode, &b.criterion))
            .then(a.rho.partial_cmp(&b.rho).expect("finite rho"))
            .then(a.seed.cmp(&b.seed))
    });

    // results.csv: deterministic columns only, then per-(mode, rho) medians.
    let mut csv = String::new();
    csv.push_str("mode,criterion,rho,seed,");
    csv.push_str(&MetricsRecord::STABLE_COLUMNS.join(","));
    csv.push('\n');
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.mode,
            row.criterion,
            row.rho,
            row.seed,
            row.record.stable_values().join(",")
        ));
    }
    let mut groups: BTreeMap<(String, String, String), Vec<&SweepRow>> = BTreeMap::new();
    for row in &rows {
        groups
            .entry((row.mode.clone(), row.criterion.clone(), format!("{}", row.rho)))
            .or_default()
            .push(row);
    }
    for ((mode, criterion, rho), group) in &groups {
        let med = |f: &dyn Fn(&SweepRow) -> f64| {
            let vals: Vec<f64> = group.iter().map(|r| f(r)).filter(|v| !v.is_nan()).collect();
            median(vals)
        };
        let metric = med(&|r| r.record.test_metric);
        let wsp = med(&|r| r.record.weight_sparsity);
        let nsp = med(&|r| r.record.node_sparsity.unwrap_or(f64::NAN));
        let params = med(&|r| r.record.param_count as f64);
        let disk = med(&|r| r.record.csr_disk_bytes as f64);
        let trig = med(&|r| r.record.trigger_epoch.map(|e| e as f64).unwrap_or(f64::NAN));
        let kind = group[0].record.metric_kind.as_str();
        csv.push_str(&format!(
            "{mode},{criterion},{rho},median,{kind},{},{},{},{},{},{}\n",
            fmt(metric),
            fmt(wsp),
            fmt(nsp),
            fmt(params),
            fmt(disk),
            fmt(trig),
        ));
    }
    write_file(&dir.join("results.csv"), csv.as_bytes())?;

    // Plot data: sparsity vs metric, one series per mode.
    let plot_dir = dir.join("plotdata");
    std::fs::create_dir_all(&plot_dir)?;
    let mut tsv = String::from("x\ty\tseries\n");
    for ((mode, _criterion, _rho), group) in &groups {
        let xs: Vec<f64> = group.iter().map(|r| r.record.weight_sparsity).collect();
        let ys: Vec<f64> = group.iter().map(|r| r.record.test_metric).collect();
        tsv.push_str(&format!("{}\t{}\t{mode}\n", fmt(median(xs)), fmt(median(ys))));
    }
    write_file(&plot_dir.join("sparsity_accuracy.tsv"), tsv.as_bytes())?;

    if !failures.is_empty() {
        let report = failures.join("\n") + "\n";
        write_file(&dir.join("failures.txt"), report.as_bytes())?;
    }
    Ok(SweepOutput { dir, rows: rows.len() })
}

fn sweep_one(
    config: &ExperimentConfig,
    sweep_dir: &Path,
    mode: &str,
    rho: f64,
    seed: u64,
) -> Result<SweepRow> {
    let mut pipeline = config.pipeline.clone();
    pipeline.mode = mode.to_string();
    pipeline.rho = rho;
    pipeline.seed = seed;
    pipeline.validate()?;

    let mut sub = config.clone();
    sub.pipeline = pipeline.clone();
    let dataset = sub.build_dataset()?;
    let model = sub.build_model(&dataset, seed)?;
    let outcome = run_pipeline(model, &dataset, &pipeline)?;

    let run_dir = sweep_dir.join(format!("runs/{mode}-rho{rho}-seed{seed}"));
    std::fs::create_dir_all(&run_dir)?;
    write_run(&run_dir, &sub, &pipeline, &outcome)?;
    Ok(SweepRow {
        mode: mode.to_string(),
        criterion: pipeline.criterion.as_str().to_string(),
        rho,
        seed,
        record: outcome.record,
    })
}

pub struct PrunePointOutput {
    pub dir: PathBuf,
    pub spearman_neg_score_vs_metric: f64,
}

/// Prune at each forced epoch with a fixed post-prune budget; record the
/// detection score at prune time next to the final metric, plus one
/// detector-chosen run per seed for comparison.
pub fn cmd_prunepoint(config: &ExperimentConfig) -> Result<PrunePointOutput> {
    if config.prune_epochs.is_empty() {
        return Err(CoreError::Config("prunepoint needs prune_epochs".into()));
    }
    if config.seeds.is_empty() {
        return Err(CoreError::Config("prunepoint needs seeds".into()));
    }
    let budget_cap = config.prune_epochs.iter().max().unwrap() + config.post_epochs;
    let dir = next_run_dir(&config.out, "prunepoint")?;

    let mut csv = String::from("kind,prune_epoch,seed,delta_score,metric_kind,test_metric\n");
    let mut pooled_neg = Vec::new();
    let mut pooled_metric = Vec::new();
    let mut by_epoch: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();

    for &seed in &config.seeds {
        let dataset = config.build_dataset()?;
        for &pe in &config.prune_epochs {
            let mut pipeline = config.pipeline.clone();
            pipeline.seed = seed;
            pipeline.forced_prune_epoch = Some(pe);
            pipeline.epochs = pe + config.post_epochs;
            pipeline.validate()?;
            let model = config.build_model(&dataset, seed)?;
            let outcome = run_pipeline(model, &dataset, &pipeline)?;
            // Score at prune time; pruning before training has none.
            let score = if pe >= 1 {
                outcome.record.delta_scores.get(pe - 1).copied().unwrap_or(f64::NAN)
            } else {
                f64::NAN
            };
            csv.push_str(&format!(
                "forced,{pe},{seed},{},{},{}\n",
                fmt(score),
                outcome.record.metric_kind.as_str(),
                fmt(outcome.record.test_metric)
            ));
            if pe >= 1 && !score.is_nan() {
                pooled_neg.push(-score);
                pooled_metric.push(outcome.record.test_metric);
                let slot = by_epoch.entry(pe).or_default();
                slot.0.push(score);
                slot.1.push(outcome.record.test_metric);
            }
        }
        // Detector-chosen run with the same total budget.
        let mut pipeline = config.pipeline.clone();
        pipeline.seed = seed;
        pipeline.forced_prune_epoch = None;
        pipeline.epochs = budget_cap;
        let model = config.build_model(&dataset, seed)?;
        let outcome = run_pipeline(model, &dataset, &pipeline)?;
        let trig = outcome.record.trigger_epoch.unwrap_or(0);
        let score = if trig >= 1 {
            outcome.record.delta_scores.get(trig - 1).copied().unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        csv.push_str(&format!(
            "detector,{trig},{seed},{},{},{}\n",
            fmt(score),
            outcome.record.metric_kind.as_str(),
            fmt(outcome.record.test_metric)
        ));
    }

    let corr = spearman(&pooled_neg, &pooled_metric);
    write_file(&dir.join("results.csv"), csv.as_bytes())?;

    let plot_dir = dir.join("plotdata");
    std::fs::create_dir_all(&plot_dir)?;
    let mut tsv = String::from("x\ty\tseries\n");
    for (pe, (scores, metrics)) in &by_epoch {
        tsv.push_str(&format!("{pe}\t{}\taccuracy\n", fmt(median(metrics.clone()))));
        tsv.push_str(&format!("{pe}\t{}\tdelta_score\n", fmt(median(scores.clone()))));
    }
    write_file(&plot_dir.join("prunepoint.tsv"), tsv.as_bytes())?;

    let summary = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "spearman_neg_score_vs_metric": corr,
        "prune_epochs": config.prune_epochs,
        "post_epochs": config.post_epochs,
        "seeds": config.seeds,
    });
    write_file(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)
            .map_err(|e| CoreError::Data(format!("serializing summary: {e}")))?
            .as_bytes(),
    )?;
    Ok(PrunePointOutput {
        dir,
        spearman_neg_score_vs_metric: corr,
    })
}

fn collect_run_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_run_files(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "run.json") {
            out.push(path);
        }
    }
    Ok(())
}

pub struct ReportOutput {
    pub summary_path: PathBuf,
    pub table: String,
}

/// Aggregate every run.json under a results directory into a comparison
/// table (method x metrics), medians per (mode, criterion, rho).
pub fn cmd_report(results_dir: &Path) -> Result<ReportOutput> {
    let mut files = Vec::new();
    collect_run_files(results_dir, &mut files)?;
    if files.is_empty() {
        return Err(CoreError::Data(format!(
            "no run.json files under {results_dir:?}"
        )));
    }
    files.sort();

    struct Entry {
        mode: String,
        criterion: String,
        rho: f64,
        metric_kind: String,
        test_metric: f64,
        weight_sparsity: f64,
        node_sparsity: Option<f64>,
        total_time_s: f64,
        median_batch_ms: f64,
        param_count: f64,
        csr_disk_bytes: f64,
    }

    let mut entries = Vec::new();
    let mut schema: Option<u64> = None;
    for path in &files {
        let text = std::fs::read_to_string(path)?;
        let v: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CoreError::Format {
                offset: 0,
                reason: format!("{path:?}: {e}"),
            })?;
        let this_schema = v["schema_version"].as_u64().unwrap_or(0);
        match schema {
            None => schema = Some(this_schema),
            Some(s) if s != this_schema => {
                return Err(CoreError::Version {
                    found: this_schema as u16,
                    expected: s as u16,
                })
            }
            _ => {}
        }
        let rec = &v["record"];
        entries.push(Entry {
            mode: v["mode"].as_str().unwrap_or("?").to_string(),
            criterion: v["criterion"].as_str().unwrap_or("?").to_string(),
            rho: v["rho"].as_f64().unwrap_or(f64::NAN),
            metric_kind: rec["metric_kind"].as_str().unwrap_or("?").to_string(),
            test_metric: rec["test_metric"].as_f64().unwrap_or(f64::NAN),
            weight_sparsity: rec["weight_sparsity"].as_f64().unwrap_or(f64::NAN),
            node_sparsity: rec["node_sparsity"].as_f64(),
            total_time_s: rec["total_time_s"].as_f64().unwrap_or(f64::NAN),
            median_batch_ms: rec["median_batch_ms"].as_f64().unwrap_or(f64::NAN),
            param_count: rec["param_count"].as_f64().unwrap_or(f64::NAN),
            csr_disk_bytes: rec["csr_disk_bytes"].as_f64().unwrap_or(f64::NAN),
        });
    }

    let mut groups: BTreeMap<(String, String, String), Vec<&Entry>> = BTreeMap::new();
    for e in &entries {
        groups
            .entry((e.mode.clone(), e.criterion.clone(), format!("{}", e.rho)))
            .or_default()
            .push(e);
    }

    let mut table = String::new();
    table.push_str(
        "mode\tcriterion\trho\truns\tmetric_kind\ttest_metric\tweight_sparsity\tnode_sparsity\ttotal_time_s\tmedian_batch_ms\tparam_count\tcsr_disk_bytes\n",
    );
    for ((mode, criterion, rho), group) in &groups {
        let med = |f: &dyn Fn(&Entry) -> f64| {
            let vals: Vec<f64> = group.iter().map(|e| f(e)).filter(|v| !v.is_nan()).collect();
            median(vals)
        };
        // Unstructured runs have no node sparsity: render an em dash, as
        // comparison tables conventionally do.
        let node = if group.iter().all(|e| e.node_sparsity.is_none()) {
            "\u{2014}".to_string()
        } else {
            fmt(med(&|e| e.node_sparsity.unwrap_or(f64::NAN)))
        };
        table.push_str(&format!(
            "{mode}\t{criterion}\t{rho}\t{}\t{}\t{}\t{}\t{node}\t{}\t{}\t{}\t{}\n",
            group.len(),
            group[0].metric_kind,
            fmt(med(&|e| e.test_metric)),
            fmt(med(&|e| e.weight_sparsity)),
            fmt(med(&|e| e.total_time_s)),
            fmt(med(&|e| e.median_batch_ms)),
            fmt(med(&|e| e.param_count)),
            fmt(med(&|e| e.csr_disk_bytes)),
        ));
    }

    let summary_path = results_dir.join("summary.tsv");
    write_file(&summary_path, table.as_bytes())?;
    Ok(ReportOutput { summary_path, table })
}

pub struct DiagnoseOutput {
    pub dir: PathBuf,
    pub report: diagnostics::DiagnosticsReport,
}

/// Run the diagnostics pass (gradient flow, NTK identity, Taylor errors)
/// on a checkpointed model against the configured dataset.
pub fn cmd_diagnose(checkpoint: &Path, config: &ExperimentConfig) -> Result<DiagnoseOutput> {
    let (model, _detector) = load_checkpoint(checkpoint)?;
    let dataset: Dataset = config.build_dataset()?;
    if dataset.features() != model.input_features() {
        return Err(CoreError::Config(format!(
            "checkpoint expects {} input features, dataset provides {}",
            model.input_features(),
            dataset.features()
        )));
    }
    let probe = config.pipeline.scoring_batch.min(diagnostics::DEFAULT_NTK_CAP);
    let (inputs, targets) = dataset.scoring_batch(probe);
    let batch = Batch { inputs: &inputs, targets: &targets };
    let report = diagnostics::full_report(
        &model,
        &batch,
        diagnostics::DEFAULT_NTK_CAP,
        3,
        config.pipeline.seed,
    )?;
    let dir = next_run_dir(&config.out, "diagnose")?;
    write_file(
        &dir.join("diagnostics.json"),
        serde_json::to_string_pretty(&report)
            .map_err(|e| CoreError::Data(format!("serializing diagnostics: {e}")))?
            .as_bytes(),
    )?;
    Ok(DiagnoseOutput { dir, report })
}
