//! The four training objectives: SFT, DPO, DPOP and RPO.
//!
//! Every loss is a scalar function of a handful of sequence
//! log-probabilities. A [`LossGraph`] records the loss value together with
//! the analytic coefficient of each policy log-probability term, so the
//! backward pass is a weighted sum of per-sequence gradients. Reference
//! log-probabilities are constants and carry no term.
//!
//! Sequence log-probabilities in the preference losses are token sums;
//! the SFT loss is a token mean.

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::lm::{
    grad_sequence_logprob, sequence_logprob, LmError, ModelParams, ReferenceSnapshot, TokenId,
    Vocabulary,
};
use crate::normalize::normalized_eq;

/// Where a preference pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairSource {
    #[serde(rename = "gt")]
    GroundTruth,
    Mined,
}

/// A (prompt, preferred, dispreferred) training example for DPO-family
/// losses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub task: Task,
    pub prompt: String,
    pub preferred: String,
    pub dispreferred: String,
    pub source: PairSource,
    #[serde(rename = "epoch")]
    pub epoch_created: u64,
    pub rank_of_dispreferred: u32,
}

impl PreferencePair {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.preferred.trim().is_empty() || self.dispreferred.trim().is_empty() {
            return Err(LossError::InvalidPair("empty completion".into()));
        }
        if normalized_eq(&self.preferred, &self.dispreferred) {
            return Err(LossError::InvalidPair(
                "preferred equals dispreferred after normalization".into(),
            ));
        }
        Ok(())
    }
}

/// Which sign the DPOP penalty carries. `Subtracted` takes the penalty off
/// the DPO term; `Canonical` adds it, so the loss grows when the preferred
/// likelihood drops below the reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DpopSign {
    #[default]
    Subtracted,
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub beta: f64,
    pub lambda_rpo: f64,
    pub lambda_dpop: f64,
    pub dpop_sign: DpopSign,
}

impl Default for LossConfig {
    fn default() -> Self {
        // beta and lambdas follow the reference hyperparameter settings
        LossConfig {
            beta: 0.5,
            lambda_rpo: 0.005,
            lambda_dpop: 0.1,
            dpop_sign: DpopSign::Subtracted,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.beta <= 0.0 {
            return Err(LossError::InvalidConfig("beta must be > 0".into()));
        }
        if self.lambda_rpo < 0.0 || self.lambda_dpop < 0.0 {
            return Err(LossError::InvalidConfig("lambdas must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("model error: {0}")]
    Lm(#[from] LmError),
    #[error("empty target")]
    EmptyTarget,
    #[error("invalid preference pair: {0}")]
    InvalidPair(String),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone)]
struct SeqTerm {
    prompt: Vec<TokenId>,
    completion: Vec<TokenId>,
    coeff: f64,
}

/// A differentiable scalar: the loss value plus the coefficient of each
/// policy sequence log-probability. Valid only for the parameters it was
/// built with.
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub value: f64,
    terms: Vec<SeqTerm>,
}

impl LossGraph {
    fn constant(value: f64) -> Self {
        LossGraph {
            value,
            terms: Vec::new(),
        }
    }

    /// Arithmetic mean of several loss graphs (batched pair loss).
    pub fn mean(graphs: Vec<LossGraph>) -> LossGraph {
        assert!(!graphs.is_empty());
        let n = graphs.len() as f64;
        let mut value = 0.0;
        let mut terms = Vec::new();
        for g in graphs {
            value += g.value;
            for mut t in g.terms {
                t.coeff /= n;
                terms.push(t);
            }
        }
        LossGraph {
            value: value / n,
            terms,
        }
    }
}

/// Gradient of a loss graph with respect to the model parameters.
/// Identical (prompt, completion) terms are coalesced so each sequence is
/// backpropagated once.
pub fn backward(params: &ModelParams, graph: &LossGraph) -> Result<ModelParams, LossError> {
    let mut grad = params.zeros_like();
    let mut merged: Vec<SeqTerm> = Vec::new();
    for term in &graph.terms {
        match merged
            .iter_mut()
            .find(|m| m.prompt == term.prompt && m.completion == term.completion)
        {
            Some(m) => m.coeff += term.coeff,
            None => merged.push(term.clone()),
        }
    }
    for term in merged {
        if term.coeff == 0.0 {
            continue;
        }
        let (_, g) = grad_sequence_logprob(params, &term.prompt, &term.completion)?;
        let mut g = g;
        g.for_each_tensor_mut(|_, t| t.scale(term.coeff));
        let acc = |name: &str, t: &mut crate::lm::Tensor| {
            g.for_each_tensor(|n, src| {
                if n == name {
                    t.add_assign(src);
                }
            });
        };
        // O(n^2) over tensor names; tensor counts are tiny
        grad.for_each_tensor_mut(|name, t| acc(name, t));
    }
    Ok(grad)
}

fn encode_pair_texts(
    vocab: &Vocabulary,
    prompt: &str,
    completion: &str,
) -> Result<(Vec<TokenId>, Vec<TokenId>), LossError> {
    let p = vocab.encode(prompt)?;
    let c = vocab.encode_completion(completion)?;
    Ok((p, c))
}

/// Token-mean negative log-likelihood of `target` given `prompt`. Prompt
/// tokens contribute nothing; the mean runs over completion tokens
/// (including EOS).
pub fn sft_loss(
    params: &ModelParams,
    vocab: &Vocabulary,
    prompt: &str,
    target: &str,
) -> Result<LossGraph, LossError> {
    if target.trim().is_empty() {
        return Err(LossError::EmptyTarget);
    }
    let (p, c) = encode_pair_texts(vocab, prompt, target)?;
    let lp = sequence_logprob(params, &p, &c)?;
    let n = c.len() as f64;
    Ok(LossGraph {
        value: -lp / n,
        terms: vec![SeqTerm {
            prompt: p,
            completion: c,
            coeff: -1.0 / n,
        }],
    })
}

/// Numerically stable -log(sigmoid(x)) = softplus(-x).
fn neg_log_sigmoid(x: f64) -> f64 {
    (-x).max(0.0) + (1.0 + (-x.abs()).exp()).ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct PairLogps {
    prompt: Vec<TokenId>,
    preferred: Vec<TokenId>,
    dispreferred: Vec<TokenId>,
    lp_w: f64,
    lp_l: f64,
    ref_w: f64,
    ref_l: f64,
}

fn pair_logps(
    params: &ModelParams,
    reference: &ReferenceSnapshot,
    vocab: &Vocabulary,
    pair: &PreferencePair,
) -> Result<PairLogps, LossError> {
    pair.validate()?;
    let prompt = vocab.encode(&pair.prompt)?;
    let preferred = vocab.encode_completion(&pair.preferred)?;
    let dispreferred = vocab.encode_completion(&pair.dispreferred)?;
    // reference logprobs flow through the same sequence_logprob path
    let lp_w = sequence_logprob(params, &prompt, &preferred)?;
    let lp_l = sequence_logprob(params, &prompt, &dispreferred)?;
    let ref_w = sequence_logprob(reference.params(), &prompt, &preferred)?;
    let ref_l = sequence_logprob(reference.params(), &prompt, &dispreferred)?;
    Ok(PairLogps {
        prompt,
        preferred,
        dispreferred,
        lp_w,
        lp_l,
        ref_w,
        ref_l,
    })
}

/// Scalar DPO loss and the margin derivative, from raw log-probabilities.
/// Split out so tests can probe the closed form directly.
pub fn dpo_scalar(lp_w: f64, ref_w: f64, lp_l: f64, ref_l: f64, beta: f64) -> (f64, f64) {
    let margin = beta * ((lp_w - ref_w) - (lp_l - ref_l));
    let value = neg_log_sigmoid(margin);
    // d value / d margin
    let dmargin = sigmoid(margin) - 1.0;
    (value, dmargin)
}

/// -log sigma(beta * [(log pi(y_w) - log pi_ref(y_w)) - (log pi(y_l) - log pi_ref(y_l))])
pub fn dpo_loss(
    params: &ModelParams,
    reference: &ReferenceSnapshot,
    vocab: &Vocabulary,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<LossGraph, LossError> {
    cfg.validate()?;
    let lps = pair_logps(params, reference, vocab, pair)?;
    let (value, dmargin) = dpo_scalar(lps.lp_w, lps.ref_w, lps.lp_l, lps.ref_l, cfg.beta);
    Ok(LossGraph {
        value,
        terms: vec![
            SeqTerm {
                prompt: lps.prompt.clone(),
                completion: lps.preferred,
                coeff: dmargin * cfg.beta,
            },
            SeqTerm {
                prompt: lps.prompt,
                completion: lps.dispreferred,
                coeff: -dmargin * cfg.beta,
            },
        ],
    })
}

/// DPO plus the preferred-likelihood penalty term
/// `lambda * max(0, log pi_ref(y_w) - log pi(y_w))`, subtracted under the
/// `Subtracted` sign and added under `Canonical`.
pub fn dpop_loss(
    params: &ModelParams,
    reference: &ReferenceSnapshot,
    vocab: &Vocabulary,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<LossGraph, LossError> {
    cfg.validate()?;
    let lps = pair_logps(params, reference, vocab, pair)?;
    let (dpo_value, dmargin) = dpo_scalar(lps.lp_w, lps.ref_w, lps.lp_l, lps.ref_l, cfg.beta);
    let gap = lps.ref_w - lps.lp_w;
    let sign = match cfg.dpop_sign {
        DpopSign::Subtracted => -1.0,
        DpopSign::Canonical => 1.0,
    };
    let (penalty, dpenalty_dlpw) = if gap > 0.0 {
        (gap, -1.0)
    } else {
        (0.0, 0.0)
    };
    Ok(LossGraph {
        value: dpo_value + sign * cfg.lambda_dpop * penalty,
        terms: vec![
            SeqTerm {
                prompt: lps.prompt.clone(),
                completion: lps.preferred,
                coeff: dmargin * cfg.beta + sign * cfg.lambda_dpop * dpenalty_dlpw,
            },
            SeqTerm {
                prompt: lps.prompt,
                completion: lps.dispreferred,
                coeff: -dmargin * cfg.beta,
            },
        ],
    })
}

/// DPO plus a jointly optimized SFT anchor on the preferred response:
/// `L_DPO + lambda * beta * L_SFT(prompt, preferred)`.
pub fn rpo_loss(
    params: &ModelParams,
    reference: &ReferenceSnapshot,
    vocab: &Vocabulary,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<LossGraph, LossError> {
    cfg.validate()?;
    let mut graph = dpo_loss(params, reference, vocab, pair, cfg)?;
    if cfg.lambda_rpo == 0.0 {
        return Ok(graph);
    }
    let sft = sft_loss(params, vocab, &pair.prompt, &pair.preferred)?;
    let w = cfg.lambda_rpo * cfg.beta;
    graph.value += w * sft.value;
    for mut t in sft.terms {
        t.coeff *= w;
        graph.terms.push(t);
    }
    Ok(graph)
}

/// Loss kind selector used by the trainer and CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dpo,
    Dpop,
    Rpo,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dpo" => Ok(LossKind::Dpo),
            "dpop" => Ok(LossKind::Dpop),
            "rpo" => Ok(LossKind::Rpo),
            other => Err(format!("unknown loss '{other}' (expected dpo|dpop|rpo)")),
        }
    }
}

/// Dispatch on the configured preference loss.
pub fn preference_loss(
    kind: LossKind,
    params: &ModelParams,
    reference: &ReferenceSnapshot,
    vocab: &Vocabulary,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<LossGraph, LossError> {
    match kind {
        LossKind::Dpo => dpo_loss(params, reference, vocab, pair, cfg),
        LossKind::Dpop => dpop_loss(params, reference, vocab, pair, cfg),
        LossKind::Rpo => rpo_loss(params, reference, vocab, pair, cfg),
    }
}

/// Constant-loss graph; used by tests for the zero-gradient contract.
pub fn constant_loss(value: f64) -> LossGraph {
    LossGraph::constant(value)
}
