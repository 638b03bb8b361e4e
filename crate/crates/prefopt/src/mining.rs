//! Preference pair construction.
//!
//! Two sources: cross-pairing of ground-truth options within a question,
//! and inconsistency mining, where the model overgenerates and every
//! generation that fails exact match against the ground truth becomes the
//! dispreferred side of a pair. The preferred side of a mined pair is
//! always the ground-truth text.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use crate::data::{Mcq, Task};
use crate::lm::{
    beam_search, diverse_beam_search, render_prompt, target_text, LmError, ModelParams,
    Vocabulary, EOS,
};
use crate::losses::{PairSource, PreferencePair};
use crate::normalize::{normalize, normalized_eq};

#[derive(Debug, Clone)]
pub struct MiningConfig {
    /// Overgeneration count per prompt (beam width).
    pub n_generations: usize,
    /// Diverse beam groups for error generation. Must divide `n_generations`.
    pub groups: usize,
    pub diversity_penalty: f64,
    pub max_len: usize,
    /// Cap on mined pairs per (question, option, task) sample.
    pub max_pairs_per_sample: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            n_generations: 4,
            groups: 2,
            diversity_penalty: 0.5,
            max_len: 40,
            max_pairs_per_sample: 3,
        }
    }
}

/// A set of pairs plus the epoch whose model produced them (0 for pure
/// ground-truth sets).
#[derive(Debug, Clone, Default)]
pub struct PreferenceDataset {
    pub pairs: Vec<PreferencePair>,
    pub epoch: u64,
}

/// Per-run mining counters, logged after every regeneration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MiningReport {
    pub samples_processed: usize,
    pub samples_skipped: usize,
    pub generations_total: usize,
    pub inconsistent_generations: usize,
    pub pairs_emitted: usize,
    pub pairs_deduped: usize,
    pub pairs_capped: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum MiningError {
    #[error("model error: {0}")]
    Lm(#[from] LmError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid mining config: {0}")]
    InvalidConfig(String),
    #[error("epoch must increase on regeneration: {prev} -> {next}")]
    EpochNotIncreasing { prev: u64, next: u64 },
}

fn usable_options(mcq: &Mcq, task: Task) -> Vec<usize> {
    (0..mcq.options.len())
        .filter(|&i| {
            let o = &mcq.options[i];
            match task {
                // an empty error leaves nothing to generate or condition on
                Task::ErrorGen => !o.error.trim().is_empty(),
                Task::DistractorGen => !o.distractor.trim().is_empty(),
            }
        })
        .collect()
}

fn dedup_key(pair: &PreferencePair) -> (String, String, String) {
    (
        normalize(&pair.prompt),
        normalize(&pair.preferred),
        normalize(&pair.dispreferred),
    )
}

/// Cross-pair the ground-truth options of each question: for every option
/// the correct completion of its own prompt is preferred over the other
/// options' completions. A question with m usable options yields
/// m * (m - 1) pairs per task. Questions with fewer than two usable
/// options are skipped with a warning.
pub fn build_gt_pairs(mcqs: &[Mcq], tasks: &[Task]) -> PreferenceDataset {
    let mut pairs = Vec::new();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    for mcq in mcqs {
        for &task in tasks {
            let usable = usable_options(mcq, task);
            if usable.len() < 2 {
                log::warn!(
                    "gt pairing: question '{}' has {} usable option(s) for task {}, skipping",
                    mcq.id,
                    usable.len(),
                    task
                );
                continue;
            }
            for &i in &usable {
                let prompt = render_prompt(mcq, task, i);
                let preferred = target_text(mcq, task, i);
                for &j in &usable {
                    if j == i {
                        continue;
                    }
                    let dispreferred = target_text(mcq, task, j);
                    if normalized_eq(preferred, dispreferred) {
                        continue;
                    }
                    let pair = PreferencePair {
                        task,
                        prompt: prompt.clone(),
                        preferred: preferred.to_string(),
                        dispreferred: dispreferred.to_string(),
                        source: PairSource::GroundTruth,
                        epoch_created: 0,
                        rank_of_dispreferred: 0,
                    };
                    if seen.insert(dedup_key(&pair)) {
                        pairs.push(pair);
                    }
                }
            }
        }
    }
    PreferenceDataset { pairs, epoch: 0 }
}

/// Overgenerate for every (question, option, task) sample and emit one
/// pair per generation that fails exact match against the ground truth.
/// Distractor generation decodes with plain beam search, error generation
/// with diverse beam search. At most `max_pairs_per_sample` pairs per
/// sample survive, keeping the highest-ranked dispreferred generations.
pub fn mine_inconsistency_pairs(
    params: &ModelParams,
    vocab: &Vocabulary,
    mcqs: &[Mcq],
    tasks: &[Task],
    epoch: u64,
    cfg: &MiningConfig,
) -> Result<(PreferenceDataset, MiningReport), MiningError> {
    if cfg.n_generations < 1 || cfg.max_len < 1 {
        return Err(MiningError::InvalidConfig(
            "n_generations and max_len must be >= 1".into(),
        ));
    }
    if cfg.groups < 1 || cfg.n_generations % cfg.groups != 0 {
        return Err(MiningError::InvalidConfig(format!(
            "groups ({}) must divide n_generations ({})",
            cfg.groups, cfg.n_generations
        )));
    }
    let mut report = MiningReport::default();
    let mut pairs = Vec::new();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    for mcq in mcqs {
        for &task in tasks {
            for i in usable_options(mcq, task) {
                let gt = target_text(mcq, task, i);
                let prompt_text = render_prompt(mcq, task, i);
                let prompt = match vocab.encode(&prompt_text) {
                    Ok(p) => p,
                    Err(e) => {
                        log::warn!(
                            "mining: question '{}' option {i} task {task}: {e}, skipping",
                            mcq.id
                        );
                        report.samples_skipped += 1;
                        continue;
                    }
                };
                let gens = match task {
                    Task::DistractorGen => {
                        beam_search(params, &prompt, cfg.n_generations, cfg.max_len)?
                    }
                    Task::ErrorGen => diverse_beam_search(
                        params,
                        &prompt,
                        cfg.n_generations,
                        cfg.groups,
                        cfg.diversity_penalty,
                        cfg.max_len,
                    )?,
                };
                report.samples_processed += 1;
                report.generations_total += gens.len();
                let mut sample_pairs = Vec::new();
                for gen in &gens {
                    let body = &gen.tokens[..gen.tokens.len() - 1];
                    debug_assert_eq!(*gen.tokens.last().unwrap(), EOS);
                    let text = vocab.decode(body);
                    if text.trim().is_empty() || normalized_eq(&text, gt) {
                        continue;
                    }
                    report.inconsistent_generations += 1;
                    let pair = PreferencePair {
                        task,
                        prompt: prompt_text.clone(),
                        preferred: gt.to_string(),
                        dispreferred: text,
                        source: PairSource::Mined,
                        epoch_created: epoch,
                        rank_of_dispreferred: gen.rank as u32,
                    };
                    if seen.insert(dedup_key(&pair)) {
                        sample_pairs.push(pair);
                    } else {
                        report.pairs_deduped += 1;
                    }
                }
                // generations arrive rank-ordered, so truncation keeps the
                // highest-ranked dispreferred completions
                if sample_pairs.len() > cfg.max_pairs_per_sample {
                    report.pairs_capped += sample_pairs.len() - cfg.max_pairs_per_sample;
                    sample_pairs.truncate(cfg.max_pairs_per_sample);
                }
                report.pairs_emitted += sample_pairs.len();
                pairs.append(&mut sample_pairs);
            }
        }
    }
    Ok((PreferenceDataset { pairs, epoch }, report))
}

/// Fresh mining pass for a later epoch. The epoch must strictly increase
/// over the previous dataset's.
pub fn regenerate(
    params: &ModelParams,
    vocab: &Vocabulary,
    mcqs: &[Mcq],
    tasks: &[Task],
    prev: &PreferenceDataset,
    epoch: u64,
    cfg: &MiningConfig,
) -> Result<(PreferenceDataset, MiningReport), MiningError> {
    if epoch <= prev.epoch {
        return Err(MiningError::EpochNotIncreasing {
            prev: prev.epoch,
            next: epoch,
        });
    }
    mine_inconsistency_pairs(params, vocab, mcqs, tasks, epoch, cfg)
}

/// Write pairs as JSON Lines, one object per pair.
pub fn save_pairs(path: &std::path::Path, ds: &PreferenceDataset) -> Result<(), MiningError> {
    let io_err = |source| MiningError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = std::io::BufWriter::new(file);
    for pair in &ds.pairs {
        let line = serde_json::to_string(pair).expect("pair serialization cannot fail");
        writeln!(w, "{line}").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Load a JSONL pair file. The dataset epoch is the maximum pair epoch.
pub fn load_pairs(path: &std::path::Path) -> Result<PreferenceDataset, MiningError> {
    let file = std::fs::File::open(path).map_err(|source| MiningError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut pairs: Vec<PreferencePair> = Vec::new();
    for (idx, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| MiningError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair =
            serde_json::from_str(&line).map_err(|e| MiningError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        pair.validate().map_err(|e| MiningError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        pairs.push(pair);
    }
    let epoch = pairs.iter().map(|p| p.epoch_created).max().unwrap_or(0);
    Ok(PreferenceDataset { pairs, epoch })
}
