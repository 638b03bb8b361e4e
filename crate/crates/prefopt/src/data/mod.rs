//! MCQ data model, JSONL ingestion/validation, question-level splitting,
//! cross-validation folds, and the synthetic dataset generator.

mod split;
mod synthetic;

pub use split::{make_folds, split_by_question, FoldPlan, SplitPlan};
pub use synthetic::{generate_synthetic_dataset, ErrorRule};

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::normalize::normalized_eq;

/// A distractor and the (possibly absent) error description behind it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDistractor {
    pub distractor: String,
    #[serde(default)]
    pub error: String,
}

impl ErrorDistractor {
    pub fn has_error(&self) -> bool {
        !self.error.trim().is_empty()
    }
}

/// A multiple-choice question: stem, key, key explanation, topic tags and
/// the distractor/error options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mcq {
    pub id: String,
    pub stem: String,
    pub key: String,
    #[serde(default)]
    pub explanation: String,
    #[serde(default)]
    pub topics: Vec<String>,
    pub options: Vec<ErrorDistractor>,
}

/// Which of the two generation directions a prompt or pair belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Given a distractor, generate the error description behind it.
    #[serde(rename = "error")]
    ErrorGen,
    /// Given an error description, generate the resulting distractor.
    #[serde(rename = "distractor")]
    DistractorGen,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::ErrorGen => write!(f, "error"),
            Task::DistractorGen => write!(f, "distractor"),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "error" => Ok(Task::ErrorGen),
            "distractor" => Ok(Task::DistractorGen),
            other => Err(format!("unknown task '{other}' (expected error|distractor)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("line {line}: duplicate id '{id}'")]
    DuplicateId { line: usize, id: String },
    #[error("invalid split proportions: {0}")]
    BadProportions(String),
    #[error("fold count {k} out of range for {n} questions")]
    BadFoldCount { k: usize, n: usize },
    #[error("{0}")]
    Other(String),
}

/// Validate a single MCQ's invariants. `line` is used for error reporting.
pub fn validate_mcq(mcq: &Mcq, line: usize) -> Result<(), DataError> {
    if mcq.id.trim().is_empty() {
        return Err(DataError::Invalid {
            line,
            message: "empty \"id\"".into(),
        });
    }
    if mcq.stem.trim().is_empty() {
        return Err(DataError::Invalid {
            line,
            message: format!("empty \"stem\" in question '{}'", mcq.id),
        });
    }
    if mcq.options.is_empty() {
        return Err(DataError::Invalid {
            line,
            message: format!("question '{}' has no options", mcq.id),
        });
    }
    for (i, opt) in mcq.options.iter().enumerate() {
        if opt.distractor.trim().is_empty() {
            return Err(DataError::Invalid {
                line,
                message: format!("question '{}' option {} has empty distractor", mcq.id, i),
            });
        }
        if normalized_eq(&opt.distractor, &mcq.key) {
            return Err(DataError::Invalid {
                line,
                message: format!(
                    "question '{}' option {} distractor equals the key after normalization",
                    mcq.id, i
                ),
            });
        }
    }
    Ok(())
}

/// Load a line-oriented JSON dataset. Each line is one record; every MCQ
/// invariant is checked and violations name the offending line (1-based).
pub fn load_dataset(path: &Path) -> Result<Vec<Mcq>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mcq: Mcq = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        validate_mcq(&mcq, lineno)?;
        if !seen.insert(mcq.id.clone()) {
            return Err(DataError::DuplicateId {
                line: lineno,
                id: mcq.id,
            });
        }
        out.push(mcq);
    }
    Ok(out)
}

/// Write a dataset in the same line-oriented format `load_dataset` reads.
pub fn save_dataset(path: &Path, mcqs: &[Mcq]) -> Result<(), DataError> {
    let mut file = std::fs::File::create(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    for mcq in mcqs {
        let line = serde_json::to_string(mcq).map_err(|e| DataError::Other(e.to_string()))?;
        writeln!(file, "{line}").map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}
