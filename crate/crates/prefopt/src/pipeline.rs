//! End-to-end orchestration shared by the CLI and the acceptance suite:
//! fold-wise SFT warm start, the mined alternating pipeline, the
//! unregularized DPO ablation, and exact-match evaluation.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{make_folds, DataError, Mcq, Task};
use crate::eval::stats::{wilcoxon_signed_rank, StatsError};
use crate::eval::EvalRecord;
use crate::lm::{
    beam_search, render_prompt, target_text, LmError, ModelParams, Vocabulary,
};
use crate::losses::LossKind;
use crate::mining::MiningError;
use crate::trainer::{
    train_preference, train_sft, PairProvider, Schedule, SftExample, TrainError, TrainState,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("model error: {0}")]
    Lm(#[from] LmError),
    #[error("training error: {0}")]
    Train(#[from] TrainError),
    #[error("mining error: {0}")]
    Mining(#[from] MiningError),
    #[error("stats error: {0}")]
    Stats(#[from] StatsError),
    #[error("{0}")]
    Invalid(String),
}

/// Shared vocabulary covering every prompt and target in the dataset,
/// independent of the split.
pub fn build_vocab(mcqs: &[Mcq]) -> Vocabulary {
    let mut texts = Vec::new();
    for mcq in mcqs {
        for task in [Task::ErrorGen, Task::DistractorGen] {
            for i in 0..mcq.options.len() {
                texts.push(render_prompt(mcq, task, i));
                texts.push(target_text(mcq, task, i).to_string());
            }
        }
    }
    Vocabulary::from_texts(texts.iter().map(|s| s.as_str()))
}

/// SFT examples for one task over a set of questions.
pub fn sft_examples(mcqs: &[Mcq], tasks: &[Task]) -> Vec<SftExample> {
    let mut out = Vec::new();
    for mcq in mcqs {
        for &task in tasks {
            for i in 0..mcq.options.len() {
                let target = target_text(mcq, task, i);
                if target.trim().is_empty() {
                    continue;
                }
                out.push(SftExample {
                    prompt: render_prompt(mcq, task, i),
                    target: target.to_string(),
                });
            }
        }
    }
    out
}

/// Top-beam generation for every (question, option) of a task, scored by
/// exact match.
pub fn evaluate_exact_match(
    params: &ModelParams,
    vocab: &Vocabulary,
    mcqs: &[Mcq],
    task: Task,
    beams: usize,
    max_len: usize,
) -> Result<(Vec<EvalRecord>, f64), PipelineError> {
    let mut records = Vec::new();
    for mcq in mcqs {
        for i in 0..mcq.options.len() {
            let gt = target_text(mcq, task, i);
            if gt.trim().is_empty() {
                continue;
            }
            let prompt = vocab.encode(&render_prompt(mcq, task, i))?;
            let generations = beam_search(params, &prompt, beams, max_len)?;
            let generated = match generations.first() {
                Some(g) => vocab.decode(&g.tokens[..g.tokens.len() - 1]),
                None => String::new(),
            };
            records.push(EvalRecord::new(&mcq.id, task, &generated, gt));
        }
    }
    let hits = records.iter().filter(|r| r.exact_match).count();
    let pct = if records.is_empty() {
        0.0
    } else {
        100.0 * hits as f64 / records.len() as f64
    };
    Ok((records, pct))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub n_test_samples: usize,
    /// Distractor exact-match percentages per system.
    pub sft_em: f64,
    pub lookalike_em: f64,
    pub dpo_em: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub folds: Vec<FoldOutcome>,
    pub mean_sft_em: f64,
    pub mean_lookalike_em: f64,
    pub mean_dpo_em: f64,
    /// Folds where LookAlike strictly beats SFT-only.
    pub lookalike_improved_folds: usize,
    /// One-sided Wilcoxon p over (lookalike - sft) fold differences.
    pub p_lookalike_vs_sft: f64,
    /// One-sided Wilcoxon p over (lookalike - dpo) fold differences.
    pub p_lookalike_vs_dpo: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// K-fold cross-validation comparing three systems on distractor exact
/// match: SFT-only, the mined alternating pipeline (LookAlike), and
/// unregularized DPO from the same warm start. Fully deterministic given
/// the config.
pub fn crossval(mcqs: &[Mcq], cfg: &RunConfig) -> Result<CrossvalReport, PipelineError> {
    if mcqs.len() < cfg.folds {
        return Err(PipelineError::Invalid(format!(
            "need at least {} questions for {}-fold cross-validation",
            cfg.folds, cfg.folds
        )));
    }
    let task = Task::DistractorGen;
    let vocab = build_vocab(mcqs);
    let hp = cfg.hyperparams(vocab.size());
    let plan = make_folds(mcqs, cfg.folds, cfg.stage_seed("folds")).map_err(PipelineError::Data)?;
    let mut folds = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let test_ids = plan.ids_in_fold(fold);
        let train_mcqs: Vec<Mcq> = mcqs
            .iter()
            .filter(|m| !test_ids.contains(&m.id))
            .cloned()
            .collect();
        let test_mcqs: Vec<Mcq> = mcqs
            .iter()
            .filter(|m| test_ids.contains(&m.id))
            .cloned()
            .collect();
        let train_examples = sft_examples(&train_mcqs, &[task]);
        let init = ModelParams::init(hp, cfg.stage_seed("init") ^ fold as u64);

        // shared SFT warm start
        let mut warm = TrainState::new(init);
        let sft_cfg = cfg.train_config(Schedule::SftOnly, LossKind::Dpo, &format!("sft.f{fold}"));
        train_sft(&mut warm, &vocab, &train_examples, &[], &sft_cfg)?;
        let (_, sft_em) =
            evaluate_exact_match(&warm.params, &vocab, &test_mcqs, task, cfg.eval_beams, cfg.decode_max_len)?;

        // LookAlike: per-epoch mined pairs, alternating SFT/DPO epochs
        let provider = PairProvider::Mined {
            mcqs: &train_mcqs,
            tasks: &[task],
            mining: cfg.mining_config(),
            // Mined pairs only: ground-truth cross pairs add little here
            // and dominate the runtime of the preference epochs.
            include_gt: false,
        };
        let mut lookalike = TrainState::new(warm.params.clone());
        let la_cfg = cfg.train_config(
            Schedule::AlternatePerEpoch,
            LossKind::Dpo,
            &format!("lookalike.f{fold}"),
        );
        train_preference(&mut lookalike, &vocab, &train_examples, &[], &provider, &la_cfg)?;
        let (_, lookalike_em) = evaluate_exact_match(
            &lookalike.params,
            &vocab,
            &test_mcqs,
            task,
            cfg.eval_beams,
            cfg.decode_max_len,
        )?;

        // ablation: unregularized DPO from the same warm start
        let mut dpo = TrainState::new(warm.params.clone());
        let dpo_cfg =
            cfg.train_config(Schedule::DpoOnly, LossKind::Dpo, &format!("dpo.f{fold}"));
        train_preference(&mut dpo, &vocab, &train_examples, &[], &provider, &dpo_cfg)?;
        let (records, dpo_em) = evaluate_exact_match(
            &dpo.params,
            &vocab,
            &test_mcqs,
            task,
            cfg.eval_beams,
            cfg.decode_max_len,
        )?;

        log::info!(
            "fold {fold}: sft_em={sft_em:.2} lookalike_em={lookalike_em:.2} dpo_em={dpo_em:.2}"
        );
        folds.push(FoldOutcome {
            fold,
            n_test_samples: records.len(),
            sft_em,
            lookalike_em,
            dpo_em,
        });
    }
    let diffs_sft: Vec<f64> = folds.iter().map(|f| f.lookalike_em - f.sft_em).collect();
    let diffs_dpo: Vec<f64> = folds.iter().map(|f| f.lookalike_em - f.dpo_em).collect();
    let p_sft = match wilcoxon_signed_rank(&diffs_sft) {
        Ok(r) => r.p_one_sided,
        Err(StatsError::AllZero) => 1.0,
        Err(e) => return Err(PipelineError::Stats(e)),
    };
    let p_dpo = match wilcoxon_signed_rank(&diffs_dpo) {
        Ok(r) => r.p_one_sided,
        Err(StatsError::AllZero) => 1.0,
        Err(e) => return Err(PipelineError::Stats(e)),
    };
    Ok(CrossvalReport {
        lookalike_improved_folds: folds
            .iter()
            .filter(|f| f.lookalike_em > f.sft_em)
            .count(),
        mean_sft_em: mean(folds.iter().map(|f| f.sft_em)),
        mean_lookalike_em: mean(folds.iter().map(|f| f.lookalike_em)),
        mean_dpo_em: mean(folds.iter().map(|f| f.dpo_em)),
        p_lookalike_vs_sft: p_sft,
        p_lookalike_vs_dpo: p_dpo,
        folds,
    })
}

/// Method-by-score table over the cross-validation folds.
pub fn format_crossval_report(report: &CrossvalReport) -> String {
    let mut out = String::new();
    out.push_str("Cross-validation: distractor generation (exact match %)\n\n");
    out.push_str(&format!("{:<14}", "method"));
    for f in &report.folds {
        out.push_str(&format!("{:>9}", format!("fold {}", f.fold)));
    }
    out.push_str(&format!("{:>9}\n", "mean"));
    let rows: [(&str, Box<dyn Fn(&FoldOutcome) -> f64>, f64); 3] = [
        ("SFT", Box::new(|f: &FoldOutcome| f.sft_em), report.mean_sft_em),
        (
            "DPO",
            Box::new(|f: &FoldOutcome| f.dpo_em),
            report.mean_dpo_em,
        ),
        (
            "LookAlike",
            Box::new(|f: &FoldOutcome| f.lookalike_em),
            report.mean_lookalike_em,
        ),
    ];
    for (name, get, mean_val) in rows {
        out.push_str(&format!("{:<14}", name));
        for f in &report.folds {
            out.push_str(&format!("{:>9.2}", get(f)));
        }
        out.push_str(&format!("{:>9.2}\n", mean_val));
    }
    out.push_str(&format!(
        "\nLookAlike > SFT in {}/{} folds; one-sided Wilcoxon p = {:.5}\n\
         LookAlike vs DPO one-sided Wilcoxon p = {:.5}\n",
        report.lookalike_improved_folds,
        report.folds.len(),
        report.p_lookalike_vs_sft,
        report.p_lookalike_vs_dpo
    ));
    out
}

/// Ranked generations for one prompt; used by the `generate` subcommand.
pub fn generate_for_option(
    params: &ModelParams,
    vocab: &Vocabulary,
    mcq: &Mcq,
    task: Task,
    option_index: usize,
    beams: usize,
    max_len: usize,
) -> Result<Vec<(String, f64)>, PipelineError> {
    let prompt = vocab.encode(&render_prompt(mcq, task, option_index))?;
    let generations = beam_search(params, &prompt, beams, max_len)?;
    Ok(generations
        .iter()
        .map(|g| (vocab.decode(&g.tokens[..g.tokens.len() - 1]), g.total_logprob))
        .collect())
}
