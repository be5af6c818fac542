//! Per-run metrics record and its CSV projection.
//!
//! Column order in every CSV mirrors the struct field order. Wall-clock
//! fields are measured and therefore vary between reruns; the sweep
//! results table uses [`MetricsRecord::STABLE_COLUMNS`], the deterministic
//! subset (same order, timing fields removed), so rerunning a sweep with
//! fixed seeds reproduces the file byte for byte.

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Accuracy,
    Rmse,
}

impl MetricKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Accuracy => "accuracy",
            MetricKind::Rmse => "rmse",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsRecord {
    pub metric_kind: MetricKind,
    /// Test accuracy (classification) or test RMSE (regression).
    pub test_metric: f64,
    pub weight_sparsity: f64,
    /// None for unstructured runs.
    pub node_sparsity: Option<f64>,
    pub total_time_s: f64,
    pub median_batch_ms: f64,
    /// Parameters surviving masks (equals the full count after compaction).
    pub param_count: u64,
    pub csr_disk_bytes: u64,
    pub trigger_epoch: Option<usize>,
    /// Mean training loss per epoch, one entry per epoch run.
    pub epoch_loss: Vec<f64>,
    /// Detection score per epoch, one entry per epoch run (zeros once the
    /// run stops tracking, e.g. for before-training modes).
    pub delta_scores: Vec<f64>,
    pub dense_phase_s: f64,
    pub scoring_s: f64,
    pub sparse_phase_s: f64,
    pub warnings: Vec<String>,
    /// Set when training aborted on a non-finite value; the record holds
    /// whatever was measured up to that point.
    pub diverged: Option<String>,
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_series(xs: &[f64]) -> String {
    xs.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";")
}

impl MetricsRecord {
    pub const COLUMNS: &'static [&'static str] = &[
        "metric_kind",
        "test_metric",
        "weight_sparsity",
        "node_sparsity",
        "total_time_s",
        "median_batch_ms",
        "param_count",
        "csr_disk_bytes",
        "trigger_epoch",
        "epoch_loss",
        "delta_scores",
        "dense_phase_s",
        "scoring_s",
        "sparse_phase_s",
        "warnings",
        "diverged",
    ];

    /// Deterministic subset used by sweep tables: field order preserved,
    /// wall-clock columns removed.
    pub const STABLE_COLUMNS: &'static [&'static str] = &[
        "metric_kind",
        "test_metric",
        "weight_sparsity",
        "node_sparsity",
        "param_count",
        "csr_disk_bytes",
        "trigger_epoch",
    ];

    pub fn csv_header() -> String {
        Self::COLUMNS.join(",")
    }

    pub fn csv_row(&self) -> String {
        [
            self.metric_kind.as_str().to_string(),
            fmt_f64(self.test_metric),
            fmt_f64(self.weight_sparsity),
            self.node_sparsity.map(fmt_f64).unwrap_or_default(),
            fmt_f64(self.total_time_s),
            fmt_f64(self.median_batch_ms),
            self.param_count.to_string(),
            self.csr_disk_bytes.to_string(),
            self.trigger_epoch.map(|e| e.to_string()).unwrap_or_default(),
            fmt_series(&self.epoch_loss),
            fmt_series(&self.delta_scores),
            fmt_f64(self.dense_phase_s),
            fmt_f64(self.scoring_s),
            fmt_f64(self.sparse_phase_s),
            self.warnings.join(";"),
            self.diverged.clone().unwrap_or_default(),
        ]
        .join(",")
    }

    /// Values for [`MetricsRecord::STABLE_COLUMNS`].
    pub fn stable_values(&self) -> Vec<String> {
        vec![
            self.metric_kind.as_str().to_string(),
            fmt_f64(self.test_metric),
            fmt_f64(self.weight_sparsity),
            self.node_sparsity.map(fmt_f64).unwrap_or_default(),
            self.param_count.to_string(),
            self.csr_disk_bytes.to_string(),
            self.trigger_epoch.map(|e| e.to_string()).unwrap_or_default(),
        ]
    }

    /// Phase accounting: the reported total covers every recorded phase.
    pub fn phases_covered(&self) -> bool {
        self.total_time_s >= self.dense_phase_s + self.scoring_s + self.sparse_phase_s
    }

    pub fn validate(&self, epochs_run: usize) -> crate::error::Result<()> {
        use crate::error::CoreError;
        if !(0.0..=1.0).contains(&self.weight_sparsity) {
            return Err(CoreError::Contract(format!(
                "weight sparsity {} out of [0,1]",
                self.weight_sparsity
            )));
        }
        if let Some(ns) = self.node_sparsity {
            if !(0.0..=1.0).contains(&ns) {
                return Err(CoreError::Contract(format!("node sparsity {ns} out of [0,1]")));
            }
        }
        if self.diverged.is_none()
            && (self.epoch_loss.len() != epochs_run || self.delta_scores.len() != epochs_run)
        {
            return Err(CoreError::Contract(format!(
                "series lengths ({}, {}) do not match epochs run ({epochs_run})",
                self.epoch_loss.len(),
                self.delta_scores.len()
            )));
        }
        if !self.phases_covered() {
            return Err(CoreError::Contract(
                "total time does not cover recorded phases".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> MetricsRecord {
        MetricsRecord {
            metric_kind: MetricKind::Accuracy,
            test_metric: 0.97,
            weight_sparsity: 0.9,
            node_sparsity: None,
            total_time_s: 1.5,
            median_batch_ms: 2.25,
            param_count: 123,
            csr_disk_bytes: 456,
            trigger_epoch: Some(4),
            epoch_loss: vec![0.7, 0.3],
            delta_scores: vec![1.0, 0.2],
            dense_phase_s: 0.5,
            scoring_s: 0.25,
            sparse_phase_s: 0.5,
            warnings: vec![],
            diverged: None,
        }
    }

    #[test]
    fn header_matches_field_count() {
        let row = sample().csv_row();
        assert_eq!(
            row.split(',').count(),
            MetricsRecord::COLUMNS.len(),
            "row: {row}"
        );
    }

    #[test]
    fn stable_columns_are_a_subsequence_of_columns() {
        let mut it = MetricsRecord::COLUMNS.iter();
        for want in MetricsRecord::STABLE_COLUMNS {
            assert!(
                it.any(|c| c == want),
                "{want} missing or out of order in COLUMNS"
            );
        }
    }

    #[test]
    fn validation_checks_series_and_ranges() {
        let r = sample();
        assert!(r.validate(2).is_ok());
        assert!(r.validate(3).is_err());
        let mut bad = sample();
        bad.weight_sparsity = 1.5;
        assert!(bad.validate(2).is_err());
    }
}
