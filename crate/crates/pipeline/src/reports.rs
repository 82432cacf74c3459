//! Machine-readable reports: one JSON document plus a flat CSV per report.

use std::path::{Path, PathBuf};

use serde::Serialize;
use stratpred_core::harness::{FairnessReport, GroupAccuracy, StageTimes, SweepResult};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupRow {
    pub grouping: &'static str,
    pub group: String,
    pub students: usize,
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FairnessDoc {
    pub command: String,
    pub config: String,
    pub seed: u64,
    pub method: String,
    pub ablation: String,
    pub performance_disparity: f64,
    pub variance_disparity: f64,
    pub variance_edges: Vec<f64>,
    pub groups: Vec<GroupRow>,
}

impl FairnessDoc {
    pub fn new(r: &FairnessReport, command: &str, config: &str, seed: u64, method: &str, ablation: &str) -> Self {
        let rows = |grouping: &'static str, gs: &[GroupAccuracy]| {
            gs.iter().map(move |g| GroupRow { grouping, group: g.label.clone(), students: g.students, accuracy: g.accuracy }).collect::<Vec<_>>()
        };
        let mut groups = rows("performance", &r.performance);
        groups.extend(rows("variance", &r.variance));
        FairnessDoc {
            command: command.into(),
            config: config.into(),
            seed,
            method: method.into(),
            ablation: ablation.into(),
            performance_disparity: r.performance_disparity,
            variance_disparity: r.variance_disparity,
            variance_edges: r.variance_edges.clone(),
            groups,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationDoc {
    pub command: String,
    pub config: String,
    pub seed: u64,
    pub method: String,
    pub ablation: String,
    pub budget: usize,
    pub test_traces: usize,
    pub skipped_test: usize,
    pub step_accuracy: f64,
    pub exact_match: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRowDoc {
    pub method: &'static str,
    pub ablation: &'static str,
    pub budget: usize,
    pub accuracy: f64,
    pub seed_accuracies: Vec<f64>,
    pub seconds_mastery: f64,
    pub seconds_embed: f64,
    pub seconds_cluster: f64,
    pub seconds_sample: f64,
    pub seconds_train: f64,
    pub seconds_evaluate: f64,
    pub seconds_total: f64,
}

/// A sweep row for CSV, with per-seed accuracies joined by `;`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCsvRow {
    pub method: &'static str,
    pub ablation: &'static str,
    pub budget: usize,
    pub accuracy: f64,
    pub seed_accuracies: String,
    pub seconds_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepDoc {
    pub command: String,
    pub config: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRowDoc>,
}

impl SweepDoc {
    pub fn new(r: &SweepResult, command: &str, config: &str) -> Self {
        let rows = r
            .rows
            .iter()
            .map(|row| {
                let StageTimes { mastery, embed, cluster, sample, train, evaluate } = row.times;
                SweepRowDoc {
                    method: row.method.name(),
                    ablation: row.ablation.name(),
                    budget: row.budget,
                    accuracy: row.accuracy,
                    seed_accuracies: row.seed_accuracies.clone(),
                    seconds_mastery: mastery,
                    seconds_embed: embed,
                    seconds_cluster: cluster,
                    seconds_sample: sample,
                    seconds_train: train,
                    seconds_evaluate: evaluate,
                    seconds_total: row.times.total(),
                }
            })
            .collect();
        SweepDoc { command: command.into(), config: config.into(), seeds: r.seeds.clone(), rows }
    }

    pub fn csv_rows(&self) -> Vec<SweepCsvRow> {
        self.rows
            .iter()
            .map(|r| SweepCsvRow {
                method: r.method,
                ablation: r.ablation,
                budget: r.budget,
                accuracy: r.accuracy,
                seed_accuracies: r.seed_accuracies.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";"),
                seconds_total: r.seconds_total,
            })
            .collect()
    }
}

fn csv_rows<T: Serialize>(rows: &[T]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Writes `<stem>.json` and `<stem>.csv` under `dir`, returning both paths.
pub fn write_report<D: Serialize, R: Serialize>(dir: &Path, stem: &str, doc: &D, rows: &[R]) -> std::io::Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let json = dir.join(format!("{stem}.json"));
    let csv_path = dir.join(format!("{stem}.csv"));
    let mut text = serde_json::to_string_pretty(doc).map_err(std::io::Error::other)?;
    text.push('\n');
    std::fs::write(&json, text)?;
    std::fs::write(&csv_path, csv_rows(rows).map_err(std::io::Error::other)?)?;
    Ok((json, csv_path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use stratpred_core::harness::{Ablation, SamplingMethod, SweepRow};

    #[test]
    fn sweep_report_has_one_csv_row_per_cell() {
        let r = SweepResult {
            seeds: vec![0, 1],
            rows: vec![SweepRow {
                method: SamplingMethod::As,
                ablation: Ablation::SsMs,
                budget: 10,
                accuracy: 0.5,
                seed_accuracies: vec![0.4, 0.6],
                times: StageTimes { train: 2.0, ..Default::default() },
            }],
        };
        let doc = SweepDoc::new(&r, "ablate", "abc");
        let dir = tempfile::tempdir().unwrap();
        let (json, csv_path) = write_report(dir.path(), "sweep", &doc, &doc.csv_rows()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
        assert_eq!(v["rows"][0]["method"], "as");
        let csv_text = std::fs::read_to_string(csv_path).unwrap();
        assert_eq!(csv_text.lines().count(), 2);
        assert!(csv_text.starts_with("method,ablation,budget,accuracy"));
    }

    #[test]
    fn fairness_rows_cover_both_groupings() {
        let g = |l: &str| GroupAccuracy { label: l.into(), accuracy: Some(0.5), students: 1 };
        let r = FairnessReport {
            performance: vec![g("a"), g("b")],
            variance: vec![g("c")],
            variance_edges: vec![1.0],
            performance_disparity: 0.0,
            variance_disparity: 0.0,
        };
        let doc = FairnessDoc::new(&r, "fairness", "h", 0, "as", "ssms");
        assert_eq!(doc.groups.len(), 3);
        assert_eq!(doc.groups[2].grouping, "variance");
    }
}
