//! Optimization loops: SFT, preference training, and the two alternating
//! schedules, plus resumable training-state checkpoints.
//!
//! Determinism contract: every shuffle is derived from (seed, epoch), so a
//! resumed run replays exactly the same batches as an uninterrupted one.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Mcq, Task};
use crate::lm::checkpoint::{
    read_f64, read_model_body, read_string, read_u32, read_u64, write_f64, write_model_body,
    write_string, write_u32, write_u64,
};
use crate::lm::{LmError, ModelParams, ReferenceSnapshot, Vocabulary};
use crate::losses::{
    backward, preference_loss, sft_loss, LossConfig, LossError, LossGraph, LossKind,
    PreferencePair,
};
use crate::mining::{
    build_gt_pairs, mine_inconsistency_pairs, MiningConfig, MiningError, MiningReport,
};

pub const TRAIN_STATE_MAGIC: &[u8; 4] = b"PLTS";
pub const TRAIN_STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    SftOnly,
    DpoOnly,
    /// Even batch indices train SFT, odd ones the preference loss. The SFT
    /// stream wraps around when exhausted.
    AlternatePerBatch,
    /// Even epochs train SFT, odd epochs the preference loss.
    AlternatePerEpoch,
}

impl std::str::FromStr for Schedule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sft-only" => Ok(Schedule::SftOnly),
            "none" | "dpo-only" => Ok(Schedule::DpoOnly),
            "per-batch" => Ok(Schedule::AlternatePerBatch),
            "per-epoch" => Ok(Schedule::AlternatePerEpoch),
            other => Err(format!(
                "unknown schedule '{other}' (expected none|dpo-only|per-batch|per-epoch)"
            )),
        }
    }
}

/// When the frozen reference policy is replaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefRefresh {
    /// Frozen once at the start of preference training.
    #[default]
    Once,
    /// Re-frozen from the current policy at the start of every DPO phase.
    PerDpoPhase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain gradient descent, exact theta - lr * g.
    Sgd,
    Adamw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub loss_kind: LossKind,
    pub loss: LossConfig,
    pub lr_sft: f64,
    pub lr_dpo: f64,
    pub batch_size: usize,
    pub max_epochs: u64,
    /// Consecutive non-improving validation epochs tolerated before SFT
    /// early stopping.
    pub patience: u32,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub ref_refresh: RefRefresh,
    /// Zero the optimizer moments when the objective switches phase.
    pub reset_moments_on_switch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // learning rates, batch size and epoch budget follow the reference
        // hyperparameter settings
        TrainConfig {
            schedule: Schedule::SftOnly,
            loss_kind: LossKind::Dpo,
            loss: LossConfig::default(),
            lr_sft: 2e-5,
            lr_dpo: 5e-6,
            batch_size: 6,
            max_epochs: 5,
            patience: 1,
            seed: 0,
            optimizer: Optimizer::Adamw,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            ref_refresh: RefRefresh::Once,
            reset_moments_on_switch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.lr_sft <= 0.0 || self.lr_dpo <= 0.0 {
            return Err(TrainError::InvalidConfig("learning rates must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(TrainError::InvalidConfig("adam betas must be in [0, 1)".into()));
        }
        self.loss.validate().map_err(TrainError::Loss)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SftExample {
    pub prompt: String,
    pub target: String,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("model error: {0}")]
    Lm(#[from] LmError),
    #[error("loss error: {0}")]
    Loss(#[from] LossError),
    #[error("mining error: {0}")]
    Mining(#[from] MiningError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Optimizer moments plus the global step counter.
#[derive(Debug, Clone)]
pub struct OptState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptState {
    pub fn new(params: &ModelParams) -> Self {
        OptState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn reset_moments(&mut self) {
        self.m.for_each_tensor_mut(|_, t| t.fill(0.0));
        self.v.for_each_tensor_mut(|_, t| t.fill(0.0));
    }
}

/// Complete resumable training state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub ref_params: ModelParams,
    pub opt: OptState,
    pub epoch: u64,
    pub best_val: f64,
    pub bad_epochs: u32,
    pub best_params: Option<ModelParams>,
    /// One entry per completed phase, e.g. "epoch=1 phase=dpo pairs=12".
    pub trace: Vec<String>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let opt = OptState::new(&params);
        TrainState {
            ref_params: params.clone(),
            params,
            opt,
            epoch: 0,
            best_val: f64::INFINITY,
            bad_epochs: 0,
            best_params: None,
            trace: Vec::new(),
        }
    }
}

fn collect_tensors(p: &ModelParams) -> Vec<(String, crate::lm::Tensor)> {
    let mut v = Vec::new();
    p.for_each_tensor(|n, t| v.push((n.to_string(), t.clone())));
    v
}

/// One optimizer step in place. Frozen tensors are left untouched.
pub fn apply_step(
    state: &mut TrainState,
    grad: &ModelParams,
    lr: f64,
    cfg: &TrainConfig,
) {
    state.opt.step += 1;
    let t = state.opt.step as f64;
    let grads = collect_tensors(grad);
    let mut idx = 0usize;
    let trainable: Vec<bool> = {
        let mut v = Vec::new();
        let p = &state.params;
        p.for_each_tensor(|n, _| v.push(p.is_trainable(n)));
        v
    };
    match cfg.optimizer {
        Optimizer::Sgd => {
            state.params.for_each_tensor_mut(|name, tensor| {
                let (gname, g) = &grads[idx];
                debug_assert_eq!(name, gname);
                if trainable[idx] {
                    for (w, gv) in tensor.data.iter_mut().zip(&g.data) {
                        *w -= lr * gv;
                    }
                }
                idx += 1;
            });
        }
        Optimizer::Adamw => {
            let (b1, b2, eps, wd) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
            let bc1 = 1.0 - b1.powf(t);
            let bc2 = 1.0 - b2.powf(t);
            let mut m_all = collect_tensors(&state.opt.m);
            let mut v_all = collect_tensors(&state.opt.v);
            state.params.for_each_tensor_mut(|name, tensor| {
                let (gname, g) = &grads[idx];
                debug_assert_eq!(name, gname);
                if trainable[idx] {
                    let m = &mut m_all[idx].1;
                    let v = &mut v_all[idx].1;
                    for k in 0..tensor.data.len() {
                        let gv = g.data[k];
                        m.data[k] = b1 * m.data[k] + (1.0 - b1) * gv;
                        v.data[k] = b2 * v.data[k] + (1.0 - b2) * gv * gv;
                        let mhat = m.data[k] / bc1;
                        let vhat = v.data[k] / bc2;
                        tensor.data[k] -=
                            lr * (mhat / (vhat.sqrt() + eps) + wd * tensor.data[k]);
                    }
                }
                idx += 1;
            });
            let mut i = 0usize;
            state.opt.m.for_each_tensor_mut(|_, t| {
                *t = m_all[i].1.clone();
                i += 1;
            });
            i = 0;
            state.opt.v.for_each_tensor_mut(|_, t| {
                *t = v_all[i].1.clone();
                i += 1;
            });
        }
    }
    state
        .params
        .assert_finite()
        .expect("non-finite parameters after optimizer step");
}

fn epoch_rng(seed: u64, epoch: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (epoch.wrapping_add(1).wrapping_mul(0x9E3779B97F4A7C15)).wrapping_add(salt),
    )
}

fn sft_batch_loss(
    params: &ModelParams,
    vocab: &Vocabulary,
    batch: &[&SftExample],
) -> Result<LossGraph, TrainError> {
    let mut graphs = Vec::with_capacity(batch.len());
    for ex in batch {
        graphs.push(sft_loss(params, vocab, &ex.prompt, &ex.target)?);
    }
    Ok(LossGraph::mean(graphs))
}

fn pref_batch_loss(
    params: &ModelParams,
    reference: &ReferenceSnapshot,
    vocab: &Vocabulary,
    batch: &[&PreferencePair],
    cfg: &TrainConfig,
) -> Result<LossGraph, TrainError> {
    let mut graphs = Vec::with_capacity(batch.len());
    for pair in batch {
        graphs.push(preference_loss(
            cfg.loss_kind,
            params,
            reference,
            vocab,
            pair,
            &cfg.loss,
        )?);
    }
    Ok(LossGraph::mean(graphs))
}

/// Mean SFT loss over a held-out set.
pub fn validation_loss(
    params: &ModelParams,
    vocab: &Vocabulary,
    val: &[SftExample],
) -> Result<f64, TrainError> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for ex in val {
        total += sft_loss(params, vocab, &ex.prompt, &ex.target)?.value;
    }
    Ok(total / val.len() as f64)
}

fn log_metrics(state: &TrainState, objective: &str, loss: f64, val: Option<f64>, pairs: usize) {
    match val {
        Some(v) => log::info!(
            "step={} epoch={} objective={objective} loss={loss:.6} val_loss={v:.6} pairs_available={pairs}",
            state.opt.step,
            state.epoch
        ),
        None => log::info!(
            "step={} epoch={} objective={objective} loss={loss:.6} pairs_available={pairs}",
            state.opt.step,
            state.epoch
        ),
    }
}

/// One full SFT pass over `train` in (seed, epoch)-shuffled batches.
/// Returns the mean batch loss.
fn run_sft_epoch(
    state: &mut TrainState,
    vocab: &Vocabulary,
    train: &[SftExample],
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut epoch_rng(cfg.seed, state.epoch, 1));
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&SftExample> = chunk.iter().map(|&i| &train[i]).collect();
        let graph = sft_batch_loss(&state.params, vocab, &batch)?;
        let grad = backward(&state.params, &graph)?;
        apply_step(state, &grad, cfg.lr_sft, cfg);
        total += graph.value;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// One full preference pass over `pairs`. Returns the mean batch loss, or
/// None when the pair set is empty (phase skipped).
fn run_pref_epoch(
    state: &mut TrainState,
    vocab: &Vocabulary,
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<Option<f64>, TrainError> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let reference = ReferenceSnapshot::freeze(&state.ref_params);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut epoch_rng(cfg.seed, state.epoch, 2));
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&PreferencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
        let graph = pref_batch_loss(&state.params, &reference, vocab, &batch, cfg)?;
        let grad = backward(&state.params, &graph)?;
        apply_step(state, &grad, cfg.lr_dpo, cfg);
        total += graph.value;
        batches += 1;
    }
    Ok(Some(total / batches.max(1) as f64))
}

/// Interleaved pass: batch t even trains SFT (stream wraps around), odd
/// trains the preference loss. Epoch length is set by the preference
/// batches. With no pairs the epoch degrades to a plain SFT pass.
fn run_alternating_batch_epoch(
    state: &mut TrainState,
    vocab: &Vocabulary,
    train: &[SftExample],
    pairs: &[PreferencePair],
    cfg: &TrainConfig,
) -> Result<(f64, bool), TrainError> {
    if pairs.is_empty() {
        let loss = run_sft_epoch(state, vocab, train, cfg)?;
        return Ok((loss, false));
    }
    let reference = ReferenceSnapshot::freeze(&state.ref_params);
    let mut sft_order: Vec<usize> = (0..train.len()).collect();
    sft_order.shuffle(&mut epoch_rng(cfg.seed, state.epoch, 1));
    let mut pair_order: Vec<usize> = (0..pairs.len()).collect();
    pair_order.shuffle(&mut epoch_rng(cfg.seed, state.epoch, 2));
    let pref_batches: Vec<&[usize]> = pair_order.chunks(cfg.batch_size).collect();
    let mut sft_cursor = 0usize;
    let mut total = 0.0;
    let mut batches = 0usize;
    for t in 0..2 * pref_batches.len() {
        state.trace.push(format!(
            "epoch={} batch={t} objective={}",
            state.epoch,
            if t % 2 == 0 { "sft" } else { "dpo" }
        ));
        if t % 2 == 0 {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size.min(train.len()) {
                batch.push(&train[sft_order[sft_cursor]]);
                sft_cursor = (sft_cursor + 1) % sft_order.len();
            }
            let graph = sft_batch_loss(&state.params, vocab, &batch)?;
            let grad = backward(&state.params, &graph)?;
            apply_step(state, &grad, cfg.lr_sft, cfg);
            total += graph.value;
        } else {
            let chunk = pref_batches[t / 2];
            let batch: Vec<&PreferencePair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let graph = pref_batch_loss(&state.params, &reference, vocab, &batch, cfg)?;
            let grad = backward(&state.params, &graph)?;
            apply_step(state, &grad, cfg.lr_dpo, cfg);
            total += graph.value;
        }
        batches += 1;
    }
    Ok((total / batches.max(1) as f64, true))
}

/// Supervised fine-tuning with early stopping on validation loss. On
/// return `state.params` holds the best-validation checkpoint.
pub fn train_sft(
    state: &mut TrainState,
    vocab: &Vocabulary,
    train: &[SftExample],
    val: &[SftExample],
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset("no SFT training examples".into()));
    }
    while state.epoch < cfg.max_epochs {
        let loss = run_sft_epoch(state, vocab, train, cfg)?;
        let val_loss = validation_loss(&state.params, vocab, val)?;
        log_metrics(state, "sft", loss, Some(val_loss), 0);
        state.trace.push(format!(
            "epoch={} phase=sft loss={loss:.6} val_loss={val_loss:.6}",
            state.epoch
        ));
        state.epoch += 1;
        if !val.is_empty() {
            if val_loss < state.best_val {
                state.best_val = val_loss;
                state.bad_epochs = 0;
                state.best_params = Some(state.params.clone());
            } else {
                state.bad_epochs += 1;
                if state.bad_epochs > cfg.patience {
                    state.trace.push(format!(
                        "epoch={} phase=sft early_stop bad_epochs={}",
                        state.epoch, state.bad_epochs
                    ));
                    break;
                }
            }
        }
    }
    if let Some(best) = state.best_params.take() {
        state.params = best;
        state.best_params = Some(state.params.clone());
    }
    Ok(())
}

/// Where preference pairs come from during alternating training.
pub enum PairProvider<'a> {
    /// A fixed pair set (typically ground-truth cross pairs).
    Fixed(&'a [PreferencePair]),
    /// Mined from the current policy, regenerated after every epoch, with
    /// ground-truth cross pairs optionally merged in.
    Mined {
        mcqs: &'a [Mcq],
        tasks: &'a [Task],
        mining: MiningConfig,
        include_gt: bool,
    },
}

impl PairProvider<'_> {
    /// Pairs to use for the epoch about to run.
    fn pairs_for_epoch(
        &self,
        params: &ModelParams,
        vocab: &Vocabulary,
        epoch: u64,
    ) -> Result<(Vec<PreferencePair>, Option<MiningReport>), TrainError> {
        match self {
            PairProvider::Fixed(pairs) => Ok((pairs.to_vec(), None)),
            PairProvider::Mined {
                mcqs,
                tasks,
                mining,
                include_gt,
            } => {
                let (mut ds, report) =
                    mine_inconsistency_pairs(params, vocab, mcqs, tasks, epoch, mining)?;
                if *include_gt {
                    ds.pairs.extend(build_gt_pairs(mcqs, tasks).pairs);
                }
                Ok((ds.pairs, Some(report)))
            }
        }
    }
}

fn is_dpo_phase(schedule: Schedule, epoch: u64) -> bool {
    match schedule {
        Schedule::SftOnly => false,
        Schedule::DpoOnly => true,
        Schedule::AlternatePerBatch => true,
        // epoch numbering starts at 0; even epochs are SFT
        Schedule::AlternatePerEpoch => epoch % 2 == 1,
    }
}

/// Preference or alternating training for `cfg.max_epochs` epochs.
/// Mined providers regenerate their pair set before every epoch that uses
/// pairs. Empty pair sets skip the DPO phase with a logged event.
pub fn train_preference(
    state: &mut TrainState,
    vocab: &Vocabulary,
    train: &[SftExample],
    val: &[SftExample],
    provider: &PairProvider<'_>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    cfg.validate()?;
    if matches!(cfg.schedule, Schedule::SftOnly) {
        return train_sft(state, vocab, train, val, cfg);
    }
    if matches!(
        cfg.schedule,
        Schedule::AlternatePerBatch | Schedule::AlternatePerEpoch
    ) && train.is_empty()
    {
        return Err(TrainError::EmptyDataset("no SFT training examples".into()));
    }
    // derived from the epoch so a resumed run replays the same resets
    let mut prev_phase_dpo: Option<bool> = state
        .epoch
        .checked_sub(1)
        .map(|e| is_dpo_phase(cfg.schedule, e));
    while state.epoch < cfg.max_epochs {
        let dpo_phase = is_dpo_phase(cfg.schedule, state.epoch);
        if cfg.reset_moments_on_switch && prev_phase_dpo.is_some_and(|p| p != dpo_phase) {
            state.opt.reset_moments();
        }
        if dpo_phase && matches!(cfg.ref_refresh, RefRefresh::PerDpoPhase)
            && prev_phase_dpo != Some(true)
        {
            state.ref_params = state.params.clone();
            state.trace.push(format!("epoch={} ref=refreshed", state.epoch));
        }
        prev_phase_dpo = Some(dpo_phase);
        if !dpo_phase {
            let loss = run_sft_epoch(state, vocab, train, cfg)?;
            let val_loss = validation_loss(&state.params, vocab, val)?;
            log_metrics(state, "sft", loss, Some(val_loss), 0);
            state
                .trace
                .push(format!("epoch={} phase=sft loss={loss:.6}", state.epoch));
            state.epoch += 1;
            continue;
        }
        let (pairs, report) = provider.pairs_for_epoch(&state.params, vocab, state.epoch)?;
        if let Some(r) = &report {
            log::info!(
                "epoch={} mining: processed={} inconsistent={} pairs={}",
                state.epoch,
                r.samples_processed,
                r.inconsistent_generations,
                r.pairs_emitted
            );
        }
        match cfg.schedule {
            Schedule::AlternatePerBatch => {
                let (loss, had_pairs) =
                    run_alternating_batch_epoch(state, vocab, train, &pairs, cfg)?;
                let val_loss = validation_loss(&state.params, vocab, val)?;
                let phase = if had_pairs { "alt" } else { "alt_sft_only" };
                log_metrics(state, phase, loss, Some(val_loss), pairs.len());
                if !had_pairs {
                    log::warn!("epoch={}: no preference pairs, DPO batches skipped", state.epoch);
                }
                state.trace.push(format!(
                    "epoch={} phase={phase} pairs={} loss={loss:.6}",
                    state.epoch,
                    pairs.len()
                ));
            }
            Schedule::DpoOnly | Schedule::AlternatePerEpoch => {
                match run_pref_epoch(state, vocab, &pairs, cfg)? {
                    Some(loss) => {
                        let val_loss = validation_loss(&state.params, vocab, val)?;
                        log_metrics(state, "dpo", loss, Some(val_loss), pairs.len());
                        state.trace.push(format!(
                            "epoch={} phase=dpo pairs={} loss={loss:.6}",
                            state.epoch,
                            pairs.len()
                        ));
                    }
                    None => {
                        log::warn!("epoch={}: no preference pairs, DPO phase skipped", state.epoch);
                        state
                            .trace
                            .push(format!("epoch={} phase=dpo skipped=no_pairs", state.epoch));
                    }
                }
            }
            Schedule::SftOnly => unreachable!(),
        }
        state.epoch += 1;
    }
    Ok(())
}

fn ck_err(e: std::io::Error) -> TrainError {
    TrainError::Checkpoint(e.to_string())
}

/// Byte-stable training-state checkpoint: policy, reference, optimizer
/// moments, counters and the schedule trace.
pub fn save_train_state(
    path: &Path,
    vocab: &Vocabulary,
    state: &TrainState,
) -> Result<(), TrainError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(TRAIN_STATE_MAGIC);
    write_u32(&mut buf, TRAIN_STATE_VERSION).map_err(ck_err)?;
    write_model_body(&mut buf, vocab, &state.params).map_err(ck_err)?;
    write_model_body(&mut buf, vocab, &state.ref_params).map_err(ck_err)?;
    write_model_body(&mut buf, vocab, &state.opt.m).map_err(ck_err)?;
    write_model_body(&mut buf, vocab, &state.opt.v).map_err(ck_err)?;
    write_u64(&mut buf, state.opt.step).map_err(ck_err)?;
    write_u64(&mut buf, state.epoch).map_err(ck_err)?;
    write_f64(&mut buf, state.best_val).map_err(ck_err)?;
    write_u32(&mut buf, state.bad_epochs).map_err(ck_err)?;
    match &state.best_params {
        Some(p) => {
            write_u32(&mut buf, 1).map_err(ck_err)?;
            write_model_body(&mut buf, vocab, p).map_err(ck_err)?;
        }
        None => write_u32(&mut buf, 0).map_err(ck_err)?,
    }
    write_u32(&mut buf, state.trace.len() as u32).map_err(ck_err)?;
    for line in &state.trace {
        write_string(&mut buf, line).map_err(ck_err)?;
    }
    std::fs::write(path, buf).map_err(ck_err)
}

pub fn load_train_state(path: &Path) -> Result<(Vocabulary, TrainState), TrainError> {
    let bytes = std::fs::read(path).map_err(ck_err)?;
    let mut r: &[u8] = &bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(ck_err)?;
    if &magic != TRAIN_STATE_MAGIC {
        return Err(TrainError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r).map_err(ck_err)?;
    if version != TRAIN_STATE_VERSION {
        return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
    }
    let (vocab, params) = read_model_body(&mut r).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let (_, ref_params) = read_model_body(&mut r).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let (_, m) = read_model_body(&mut r).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let (_, v) = read_model_body(&mut r).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
    let step = read_u64(&mut r).map_err(ck_err)?;
    let epoch = read_u64(&mut r).map_err(ck_err)?;
    let best_val = read_f64(&mut r).map_err(ck_err)?;
    let bad_epochs = read_u32(&mut r).map_err(ck_err)?;
    let best_params = match read_u32(&mut r).map_err(ck_err)? {
        0 => None,
        1 => {
            let (_, p) =
                read_model_body(&mut r).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
            Some(p)
        }
        other => {
            return Err(TrainError::Checkpoint(format!("bad best_params flag {other}")));
        }
    };
    let n_trace = read_u32(&mut r).map_err(ck_err)? as usize;
    let mut trace = Vec::with_capacity(n_trace);
    for _ in 0..n_trace {
        trace.push(read_string(&mut r).map_err(|e| TrainError::Checkpoint(e.to_string()))?);
    }
    if !r.is_empty() {
        return Err(TrainError::Checkpoint("trailing bytes".into()));
    }
    Ok((
        vocab,
        TrainState {
            params,
            ref_params,
            opt: OptState { m, v, step },
            epoch,
            best_val,
            bad_epochs,
            best_params,
            trace,
        },
    ))
}
