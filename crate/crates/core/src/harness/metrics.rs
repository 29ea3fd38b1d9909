use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::{AccuracyTable, StageTimings};
use crate::error::{Error, Result};
use crate::sim::ActivityClass;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricsPhase {
    Baseline,
    Shifted,
    Recovered,
}

impl MetricsPhase {
    pub fn name(self) -> &'static str {
        match self {
            MetricsPhase::Baseline => "baseline",
            MetricsPhase::Shifted => "shifted",
            MetricsPhase::Recovered => "recovered",
        }
    }
}

/// Accuracy of one model on one test set, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub phase: MetricsPhase,
    /// Oracle precision of the teacher, for recovered rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_precision: Option<f64>,
    pub per_class: Vec<f64>,
    pub overall: f64,
}

impl MetricsRow {
    pub fn new(seed: u64, phase: MetricsPhase, table: &AccuracyTable) -> Self {
        Self {
            seed,
            phase,
            teacher_precision: None,
            per_class: table.per_class.clone(),
            overall: table.overall,
        }
    }

    pub fn with_precision(mut self, p: f64) -> Self {
        self.teacher_precision = Some(p);
        self
    }
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    /// Rows in a canonical order so that output never depends on the
    /// order in which seeds finished.
    pub fn sorted(&self) -> Vec<&MetricsRow> {
        let mut rows: Vec<&MetricsRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            (a.seed, a.phase).cmp(&(b.seed, b.phase)).then(
                a.teacher_precision
                    .unwrap_or(-1.0)
                    .total_cmp(&b.teacher_precision.unwrap_or(-1.0)),
            )
        });
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,phase,teacher_precision");
        for c in ActivityClass::ALL {
            out.push(',');
            out.push_str(c.name());
        }
        out.push_str(",overall\n");
        for r in self.sorted() {
            let p = r
                .teacher_precision
                .map(|p| format!("{p:.3}"))
                .unwrap_or_default();
            let _ = write!(out, "{},{},{}", r.seed, r.phase.name(), p);
            for v in &r.per_class {
                let _ = write!(out, ",{v:.2}");
            }
            let _ = writeln!(out, ",{:.2}", r.overall);
        }
        out
    }

    /// JSON with every accuracy rounded to two decimals.
    pub fn to_json(&self) -> String {
        let rows: Vec<MetricsRow> = self
            .sorted()
            .into_iter()
            .map(|r| MetricsRow {
                per_class: r.per_class.iter().map(|&v| round2(v)).collect(),
                overall: round2(r.overall),
                ..r.clone()
            })
            .collect();
        let mut s =
            serde_json::to_string_pretty(&MetricsTable { rows }).expect("metrics serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("metrics file: {e}")))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv())?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json())?;
        Ok(())
    }

    pub fn mean_overall(&self, phase: MetricsPhase, precision: Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.phase == phase && r.teacher_precision == precision)
            .map(|r| r.overall)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Per-stage latency of the sensing path in milliseconds per unit of work:
/// per CSI frame, per teacher frame, per pairing pass, per student window.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyReport {
    pub csi_processing_ms: f64,
    pub teacher_inference_ms: f64,
    pub pairing_ms: f64,
    pub student_inference_ms: f64,
    pub total_ms: f64,
    /// Reported against, not enforced.
    pub budget_ms: f64,
    pub within_budget: bool,
}

pub const LATENCY_BUDGET_MS: f64 = 50.0;

impl LatencyReport {
    pub fn new(timings: &StageTimings, student_total_ms: f64, student_windows: usize) -> Self {
        let per = |d: std::time::Duration, n: usize| {
            if n == 0 {
                0.0
            } else {
                d.as_secs_f64() * 1e3 / n as f64
            }
        };
        let csi = per(timings.csi_processing, timings.csi_frames);
        let teacher = per(timings.teacher_inference, timings.teacher_frames);
        let pairing = timings.pairing.as_secs_f64() * 1e3;
        let student = if student_windows == 0 {
            0.0
        } else {
            student_total_ms / student_windows as f64
        };
        let total = csi + teacher + pairing + student;
        Self {
            csi_processing_ms: csi,
            teacher_inference_ms: teacher,
            pairing_ms: pairing,
            student_inference_ms: student,
            total_ms: total,
            budget_ms: LATENCY_BUDGET_MS,
            within_budget: total <= LATENCY_BUDGET_MS,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(v: f64) -> AccuracyTable {
        AccuracyTable {
            per_class: vec![v; 8],
            totals: vec![1; 8],
            correct: vec![1; 8],
            overall: v,
        }
    }

    #[test]
    fn csv_has_two_decimals_and_canonical_order() {
        let mut t = MetricsTable::default();
        t.push(MetricsRow::new(2, MetricsPhase::Shifted, &table(40.0)));
        t.push(MetricsRow::new(1, MetricsPhase::Recovered, &table(88.123)).with_precision(1.0));
        t.push(MetricsRow::new(
            1,
            MetricsPhase::Baseline,
            &table(97.0 + 1.0 / 3.0),
        ));
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("seed,phase,teacher_precision,lie-down"));
        assert!(lines[1].starts_with("1,baseline,,97.33"));
        assert!(lines[2].starts_with("1,recovered,1.000,88.12"));
        assert!(lines[3].ends_with(",40.00"));
        let back = MetricsTable::from_json(&t.to_json()).unwrap();
        assert_eq!(back.rows[0].overall, 97.33);
        assert_eq!(
            back.mean_overall(MetricsPhase::Recovered, Some(1.0)),
            Some(88.12)
        );
    }

    #[test]
    fn latency_total_is_sum_of_stages() {
        let timings = StageTimings {
            csi_processing: std::time::Duration::from_millis(600),
            teacher_inference: std::time::Duration::from_millis(90),
            pairing: std::time::Duration::from_millis(3),
            csi_frames: 6000,
            teacher_frames: 1800,
        };
        let r = LatencyReport::new(&timings, 40.0, 20);
        let sum =
            r.csi_processing_ms + r.teacher_inference_ms + r.pairing_ms + r.student_inference_ms;
        assert!((r.total_ms - sum).abs() < 1e-12);
        assert!((r.csi_processing_ms - 0.1).abs() < 1e-12);
        assert!(r.within_budget);
    }
}
