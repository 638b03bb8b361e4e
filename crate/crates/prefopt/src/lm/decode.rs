//! Beam search and diverse beam search decoding.
//!
//! Both decoders are deterministic: candidate ranking breaks score ties
//! lexicographically on the token index sequence.

use std::cmp::Ordering;
use std::collections::HashMap;

use super::model::next_token_log_probs;
use super::{LmError, ModelParams, TokenId, EOS};

/// One finished decode: tokens ending in EOS, the total natural-log
/// probability, and the 0-based rank within the returned list.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub total_logprob: f64,
    pub rank: usize,
}

#[derive(Debug, Clone)]
struct Hypothesis {
    tokens: Vec<TokenId>,
    logprob: f64,
}

/// Descending score, ties broken lexicographically on token indices.
fn rank_cmp(a: &(Vec<TokenId>, f64), b: &(Vec<TokenId>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

fn finish(mut done: Vec<(Vec<TokenId>, f64)>, width: usize) -> Vec<Generation> {
    done.sort_by(rank_cmp);
    done.truncate(width);
    done.into_iter()
        .enumerate()
        .map(|(rank, (tokens, total_logprob))| Generation {
            tokens,
            total_logprob,
            rank,
        })
        .collect()
}

/// Standard beam search. Returns up to `width` finished generations ranked
/// by total log-probability. Hypotheses still alive at `max_len` tokens are
/// force-terminated with EOS (the EOS log-probability is included).
pub fn beam_search(
    params: &ModelParams,
    prompt: &[TokenId],
    width: usize,
    max_len: usize,
) -> Result<Vec<Generation>, LmError> {
    if width < 1 || max_len < 1 {
        return Err(LmError::BadDecodeSettings(
            "width and max_len must be >= 1".into(),
        ));
    }
    beam_search_grouped(params, prompt, width, 1, 0.0, max_len)
}

/// Diverse beam search with Hamming diversity: group g penalizes a
/// candidate token by `penalty` times the number of times earlier groups
/// already chose that token at the same step. With penalty 0 this is
/// exactly `beam_search`.
pub fn diverse_beam_search(
    params: &ModelParams,
    prompt: &[TokenId],
    width: usize,
    groups: usize,
    diversity_penalty: f64,
    max_len: usize,
) -> Result<Vec<Generation>, LmError> {
    if width < 1 || max_len < 1 || groups < 1 {
        return Err(LmError::BadDecodeSettings(
            "width, groups and max_len must be >= 1".into(),
        ));
    }
    if width % groups != 0 {
        return Err(LmError::GroupsDontDivide { groups, width });
    }
    if diversity_penalty < 0.0 {
        return Err(LmError::BadDecodeSettings(
            "diversity_penalty must be >= 0".into(),
        ));
    }
    beam_search_grouped(params, prompt, width, groups, diversity_penalty, max_len)
}

fn beam_search_grouped(
    params: &ModelParams,
    prompt: &[TokenId],
    width: usize,
    groups: usize,
    penalty: f64,
    max_len: usize,
) -> Result<Vec<Generation>, LmError> {
    let group_width = width / groups;
    let candidates: Vec<TokenId> = {
        // every non-reserved token plus EOS
        let mut v = vec![EOS];
        v.extend(4..params.hp.vocab_size);
        v
    };

    // per group: live hypotheses and finished pool
    let mut live: Vec<Vec<Hypothesis>> = vec![
        vec![Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
        }];
        groups
    ];
    let mut done: Vec<Vec<(Vec<TokenId>, f64)>> = vec![Vec::new(); groups];

    for step in 0..max_len {
        // token counts chosen by earlier groups at this step
        let mut chosen_at_step: HashMap<TokenId, usize> = HashMap::new();
        for g in 0..groups {
            if live[g].is_empty() {
                continue;
            }
            // expand every live hypothesis over every candidate token
            let mut expanded: Vec<(Vec<TokenId>, f64, f64)> = Vec::new(); // (tokens, logprob, score)
            for hyp in &live[g] {
                let mut ctx = Vec::with_capacity(prompt.len() + hyp.tokens.len());
                ctx.extend_from_slice(prompt);
                ctx.extend_from_slice(&hyp.tokens);
                let dist = next_token_log_probs(params, &ctx)?;
                for &tok in &candidates {
                    let lp = hyp.logprob + dist[tok];
                    let div = *chosen_at_step.get(&tok).unwrap_or(&0) as f64;
                    let mut tokens = hyp.tokens.clone();
                    tokens.push(tok);
                    expanded.push((tokens, lp, lp - penalty * div));
                }
            }
            // keep top group_width by penalized score
            expanded.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| a.0.cmp(&b.0))
            });
            expanded.truncate(group_width);
            let mut next_live = Vec::new();
            for (tokens, lp, _) in expanded {
                let last = *tokens.last().unwrap();
                if groups > 1 {
                    *chosen_at_step.entry(last).or_insert(0) += 1;
                }
                if last == EOS {
                    done[g].push((tokens, lp));
                } else if step + 1 == max_len {
                    // length-complete: force-terminate with EOS
                    let mut ctx = Vec::with_capacity(prompt.len() + tokens.len());
                    ctx.extend_from_slice(prompt);
                    ctx.extend_from_slice(&tokens);
                    let dist = next_token_log_probs(params, &ctx)?;
                    let mut tokens = tokens;
                    tokens.push(EOS);
                    done[g].push((tokens, lp + dist[EOS]));
                } else {
                    next_live.push(Hypothesis {
                        tokens,
                        logprob: lp,
                    });
                }
            }
            live[g] = next_live;
        }
        if live.iter().all(|l| l.is_empty()) {
            break;
        }
    }

    let mut all: Vec<(Vec<TokenId>, f64)> = done.into_iter().flatten().collect();
    // the same sequence can finish in several groups
    all.sort_by(rank_cmp);
    all.dedup_by(|a, b| a.0 == b.0);
    Ok(finish(all, width))
}
