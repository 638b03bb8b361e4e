//! Evaluation: exact match, judge aggregation, and per-fold reports.

pub mod judge;
pub mod stats;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FoldPlan, Task};
use crate::normalize::normalized_eq;
use judge::Verdict;
use stats::{wilcoxon_signed_rank, StatsError, WilcoxonResult};

/// Exact match under the repo-wide normalization rule. The same predicate
/// partitions generations during mining.
pub fn exact_match(generated: &str, ground_truth: &str) -> bool {
    normalized_eq(generated, ground_truth)
}

/// One generation scored against its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mcq_id: String,
    pub task: Task,
    pub generated: String,
    pub ground_truth: String,
    pub exact_match: bool,
    /// Error-generation records only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub judge_rationale: String,
}

impl EvalRecord {
    pub fn new(mcq_id: &str, task: Task, generated: &str, ground_truth: &str) -> Self {
        EvalRecord {
            mcq_id: mcq_id.to_string(),
            task,
            generated: generated.to_string(),
            ground_truth: ground_truth.to_string(),
            exact_match: exact_match(generated, ground_truth),
            judge_verdict: None,
            judge_rationale: String::new(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("record for unknown question id '{0}'")]
    UnknownId(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("stats error: {0}")]
    Stats(#[from] StatsError),
    #[error("no records")]
    Empty,
}

/// Scores for one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldScores {
    pub fold: usize,
    pub n_distractor: usize,
    /// Exact-match percentage over distractor-generation records.
    pub exact_match_pct: f64,
    pub n_error: usize,
    /// Judge-Equivalent percentage; Unparsed counts as NotEquivalent.
    pub judge_equivalent_pct: f64,
    pub unparsed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub per_fold: Vec<FoldScores>,
    pub mean_exact_match_pct: f64,
    pub mean_judge_equivalent_pct: f64,
    pub unparsed_total: usize,
}

fn pct(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        100.0 * hits as f64 / n as f64
    }
}

/// Per-fold and mean scores. Every record's id must belong to the fold
/// plan. Aggregation happens in deterministic (fold, id) order.
pub fn aggregate_report(records: &[EvalRecord], folds: &FoldPlan) -> Result<Report, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut by_fold: BTreeMap<usize, Vec<&EvalRecord>> = BTreeMap::new();
    for fold in 0..folds.k {
        by_fold.insert(fold, Vec::new());
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.mcq_id.cmp(&b.mcq_id));
    for record in sorted {
        let fold = folds
            .assignments
            .get(&record.mcq_id)
            .copied()
            .ok_or_else(|| EvalError::UnknownId(record.mcq_id.clone()))?;
        by_fold.get_mut(&fold).expect("fold index in range").push(record);
    }
    let mut per_fold = Vec::with_capacity(folds.k);
    let mut unparsed_total = 0;
    for (fold, fold_records) in &by_fold {
        let distractor: Vec<_> = fold_records
            .iter()
            .filter(|r| r.task == Task::DistractorGen)
            .collect();
        let errors: Vec<_> = fold_records
            .iter()
            .filter(|r| r.task == Task::ErrorGen)
            .collect();
        let em_hits = distractor.iter().filter(|r| r.exact_match).count();
        let judge_hits = errors
            .iter()
            .filter(|r| r.judge_verdict == Some(Verdict::Equivalent))
            .count();
        let unparsed = errors
            .iter()
            .filter(|r| r.judge_verdict == Some(Verdict::Unparsed))
            .count();
        unparsed_total += unparsed;
        per_fold.push(FoldScores {
            fold: *fold,
            n_distractor: distractor.len(),
            exact_match_pct: pct(em_hits, distractor.len()),
            n_error: errors.len(),
            judge_equivalent_pct: pct(judge_hits, errors.len()),
            unparsed,
        });
    }
    let folds_with_distractors: Vec<&FoldScores> =
        per_fold.iter().filter(|f| f.n_distractor > 0).collect();
    let folds_with_errors: Vec<&FoldScores> = per_fold.iter().filter(|f| f.n_error > 0).collect();
    let mean_em = if folds_with_distractors.is_empty() {
        0.0
    } else {
        folds_with_distractors.iter().map(|f| f.exact_match_pct).sum::<f64>()
            / folds_with_distractors.len() as f64
    };
    let mean_judge = if folds_with_errors.is_empty() {
        0.0
    } else {
        folds_with_errors.iter().map(|f| f.judge_equivalent_pct).sum::<f64>()
            / folds_with_errors.len() as f64
    };
    if unparsed_total > 0 {
        log::warn!("{unparsed_total} judge response(s) unparsed, scored as NotEquivalent");
    }
    Ok(Report {
        per_fold,
        mean_exact_match_pct: mean_em,
        mean_judge_equivalent_pct: mean_judge,
        unparsed_total,
    })
}

/// Paired per-fold exact-match differences (system a minus system b) fed
/// to the Wilcoxon test.
pub fn compare_exact_match(a: &Report, b: &Report) -> Result<WilcoxonResult, EvalError> {
    let diffs: Vec<f64> = a
        .per_fold
        .iter()
        .zip(&b.per_fold)
        .map(|(x, y)| x.exact_match_pct - y.exact_match_pct)
        .collect();
    Ok(wilcoxon_signed_rank(&diffs)?)
}

pub fn save_records(path: &Path, records: &[EvalRecord]) -> Result<(), EvalError> {
    let io_err = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serialization cannot fail");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn load_records(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let file = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: EvalRecord = serde_json::from_str(&line).map_err(|e| EvalError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

/// Plain-text report table, one row per (method, task) column pair.
pub fn format_report(name: &str, report: &Report) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{name}\n{:<6} {:>12} {:>12} {:>14} {:>10}\n",
        "fold", "n_distractor", "exact_match%", "judge_equiv%", "unparsed"
    ));
    for f in &report.per_fold {
        out.push_str(&format!(
            "{:<6} {:>12} {:>12.2} {:>14.2} {:>10}\n",
            f.fold, f.n_distractor, f.exact_match_pct, f.judge_equivalent_pct, f.unparsed
        ));
    }
    out.push_str(&format!(
        "{:<6} {:>12} {:>12.2} {:>14.2} {:>10}\n",
        "mean",
        "",
        report.mean_exact_match_pct,
        report.mean_judge_equivalent_pct,
        report.unparsed_total
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_fold_plan(ids: &[&str], folds: &[usize]) -> FoldPlan {
        FoldPlan {
            k: 2,
            assignments: ids
                .iter()
                .zip(folds)
                .map(|(id, f)| (id.to_string(), *f))
                .collect(),
        }
    }

    #[test]
    fn exact_match_examples() {
        assert!(exact_match("170", "170"));
        assert!(!exact_match("12", "5.2"));
        assert!(exact_match("  170 ", "170"));
        // symmetric, case-sensitive
        assert!(exact_match("a b", " a  b"));
        assert!(!exact_match("Abc", "abc"));
    }

    #[test]
    fn record_constructor_sets_match_flag() {
        let r = EvalRecord::new("q1", Task::DistractorGen, " 170", "170");
        assert!(r.exact_match);
        let r = EvalRecord::new("q1", Task::DistractorGen, "12", "5.2");
        assert!(!r.exact_match);
    }

    #[test]
    fn two_folds_mean_is_75_percent() {
        let plan = two_fold_plan(&["a", "b", "c", "d"], &[0, 0, 1, 1]);
        let records = vec![
            EvalRecord::new("a", Task::DistractorGen, "1", "1"),
            EvalRecord::new("b", Task::DistractorGen, "2", "9"),
            EvalRecord::new("c", Task::DistractorGen, "3", "3"),
            EvalRecord::new("d", Task::DistractorGen, "4", "4"),
        ];
        let report = aggregate_report(&records, &plan).unwrap();
        assert_eq!(report.per_fold[0].exact_match_pct, 50.0);
        assert_eq!(report.per_fold[1].exact_match_pct, 100.0);
        assert_eq!(report.mean_exact_match_pct, 75.0);
    }

    #[test]
    fn all_unparsed_scores_zero_and_is_counted() {
        let plan = two_fold_plan(&["a", "b"], &[0, 1]);
        let mut records = vec![
            EvalRecord::new("a", Task::ErrorGen, "x", "y"),
            EvalRecord::new("b", Task::ErrorGen, "x", "y"),
        ];
        for r in &mut records {
            r.judge_verdict = Some(Verdict::Unparsed);
        }
        let report = aggregate_report(&records, &plan).unwrap();
        assert_eq!(report.mean_judge_equivalent_pct, 0.0);
        assert_eq!(report.unparsed_total, 2);
    }

    #[test]
    fn unknown_id_is_error() {
        let plan = two_fold_plan(&["a"], &[0]);
        let records = vec![EvalRecord::new("zz", Task::DistractorGen, "1", "1")];
        assert!(matches!(
            aggregate_report(&records, &plan),
            Err(EvalError::UnknownId(id)) if id == "zz"
        ));
    }

    #[test]
    fn dominant_system_gives_p_half_pow_k() {
        let ids = ["a", "b", "c", "d", "e"];
        let plan = FoldPlan {
            k: 5,
            assignments: ids.iter().enumerate().map(|(i, id)| (id.to_string(), i)).collect(),
        };
        let wins: Vec<EvalRecord> = ids
            .iter()
            .map(|id| EvalRecord::new(id, Task::DistractorGen, "1", "1"))
            .collect();
        let losses: Vec<EvalRecord> = ids
            .iter()
            .map(|id| EvalRecord::new(id, Task::DistractorGen, "1", "2"))
            .collect();
        let a = aggregate_report(&wins, &plan).unwrap();
        let b = aggregate_report(&losses, &plan).unwrap();
        let w = compare_exact_match(&a, &b).unwrap();
        assert!((w.p_one_sided - 1.0 / 32.0).abs() < 1e-12);
    }

    #[test]
    fn judge_verdicts_aggregate_conservatively() {
        let plan = two_fold_plan(&["a", "b", "c"], &[0, 0, 0]);
        let mut r1 = EvalRecord::new("a", Task::ErrorGen, "x", "y");
        r1.judge_verdict = Some(Verdict::Equivalent);
        let mut r2 = EvalRecord::new("b", Task::ErrorGen, "x", "y");
        r2.judge_verdict = Some(Verdict::NotEquivalent);
        let mut r3 = EvalRecord::new("c", Task::ErrorGen, "x", "y");
        r3.judge_verdict = Some(Verdict::Unparsed);
        let report = aggregate_report(&[r1, r2, r3], &plan).unwrap();
        assert!((report.per_fold[0].judge_equivalent_pct - 100.0 / 3.0).abs() < 1e-9);
        assert_eq!(report.per_fold[0].unparsed, 1);
    }

    #[test]
    fn records_file_round_trip() {
        let mut r1 = EvalRecord::new("a", Task::ErrorGen, "gen", "truth");
        r1.judge_verdict = Some(Verdict::NotEquivalent);
        r1.judge_rationale = "different idea".into();
        let r2 = EvalRecord::new("b", Task::DistractorGen, "5.2", "5.2");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        save_records(&path, &[r1.clone(), r2.clone()]).unwrap();
        let loaded = load_records(&path).unwrap();
        assert_eq!(loaded, vec![r1, r2]);
    }

    #[test]
    fn report_formatting_contains_all_folds() {
        let plan = two_fold_plan(&["a", "b"], &[0, 1]);
        let records = vec![
            EvalRecord::new("a", Task::DistractorGen, "1", "1"),
            EvalRecord::new("b", Task::DistractorGen, "1", "2"),
        ];
        let report = aggregate_report(&records, &plan).unwrap();
        let text = format_report("test", &report);
        assert!(text.contains("mean"));
        assert!(text.lines().count() >= 4);
    }
}
