//! Flat key = value run configuration. One file plus the data fully
//! describes a run; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::eval::judge::JudgeEndpoint;
use crate::lm::HyperParams;
use crate::losses::{DpopSign, LossConfig, LossKind};
use crate::mining::MiningConfig;
use crate::trainer::{Optimizer, RefRefresh, Schedule, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected 'key = value'")]
    Syntax { line: usize },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("invalid value for '{key}': {message}")]
    BadValue { key: String, message: String },
    #[error("referenced path does not exist: {0}")]
    MissingPath(String),
}

/// Every tunable in one place. Defaults follow the reference
/// hyperparameter settings where one exists.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub data_path: PathBuf,
    pub seed: u64,

    pub synth_questions: usize,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
    pub folds: usize,

    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ctx_len: usize,
    pub adapter_rank: usize,

    pub lr_sft: f64,
    pub lr_dpo: f64,
    pub batch_size: usize,
    pub sft_epochs: u64,
    pub train_epochs: u64,
    pub patience: u32,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub beta: f64,
    pub lambda_rpo: f64,
    pub lambda_dpop: f64,
    pub dpop_sign: DpopSign,
    pub ref_refresh: RefRefresh,
    pub reset_moments: bool,

    pub mine_generations: usize,
    pub mine_groups: usize,
    pub mine_diversity_penalty: f64,
    pub mine_max_len: usize,
    pub mine_max_pairs_per_sample: usize,

    pub decode_beams: usize,
    pub decode_max_len: usize,
    pub eval_beams: usize,

    pub judge_base_url: String,
    pub judge_model: String,
    pub judge_temperature: f64,
    pub judge_timeout_secs: u64,
    pub judge_max_retries: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("out"),
            data_path: PathBuf::from("out/dataset.jsonl"),
            seed: 17,
            synth_questions: 200,
            split_train: 0.72,
            split_val: 0.16,
            split_test: 0.12,
            folds: 5,
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            ctx_len: 160,
            adapter_rank: 0,
            lr_sft: 2e-5,
            lr_dpo: 5e-6,
            batch_size: 6,
            sft_epochs: 5,
            train_epochs: 4,
            patience: 1,
            optimizer: Optimizer::Adamw,
            weight_decay: 0.0,
            beta: 0.5,
            lambda_rpo: 0.005,
            lambda_dpop: 0.1,
            dpop_sign: DpopSign::Subtracted,
            ref_refresh: RefRefresh::Once,
            reset_moments: true,
            mine_generations: 4,
            mine_groups: 2,
            mine_diversity_penalty: 0.5,
            mine_max_len: 24,
            mine_max_pairs_per_sample: 3,
            decode_beams: 10,
            decode_max_len: 24,
            eval_beams: 1,
            judge_base_url: "http://127.0.0.1:8080".into(),
            judge_model: "judge".into(),
            judge_temperature: 0.0,
            judge_timeout_secs: 30,
            judge_max_retries: 3,
        }
    }
}

macro_rules! set_keys {
    ($cfg:ident, $key:ident, $value:ident, { $($name:literal => $setter:expr),+ $(,)? }) => {
        match $key {
            $($name => $setter,)+
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
    };
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        message: e.to_string(),
    })
}

impl RunConfig {
    /// Parse `key = value` lines; `#` starts a comment. Unknown keys fail.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: idx + 1 })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |key: &str, message: &str| ConfigError::BadValue {
            key: key.to_string(),
            message: message.to_string(),
        };
        set_keys!(self, key, value, {
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data_path" => self.data_path = PathBuf::from(value),
            "seed" => self.seed = parse_as(key, value)?,
            "synth_questions" => self.synth_questions = parse_as(key, value)?,
            "split_train" => self.split_train = parse_as(key, value)?,
            "split_val" => self.split_val = parse_as(key, value)?,
            "split_test" => self.split_test = parse_as(key, value)?,
            "folds" => self.folds = parse_as(key, value)?,
            "n_layers" => self.n_layers = parse_as(key, value)?,
            "d_model" => self.d_model = parse_as(key, value)?,
            "n_heads" => self.n_heads = parse_as(key, value)?,
            "ctx_len" => self.ctx_len = parse_as(key, value)?,
            "adapter_rank" => self.adapter_rank = parse_as(key, value)?,
            "lr_sft" => self.lr_sft = parse_as(key, value)?,
            "lr_dpo" => self.lr_dpo = parse_as(key, value)?,
            "batch_size" => self.batch_size = parse_as(key, value)?,
            "sft_epochs" => self.sft_epochs = parse_as(key, value)?,
            "train_epochs" => self.train_epochs = parse_as(key, value)?,
            "patience" => self.patience = parse_as(key, value)?,
            "optimizer" => self.optimizer = match value {
                "sgd" => Optimizer::Sgd,
                "adamw" => Optimizer::Adamw,
                _ => return Err(bad(key, "expected sgd|adamw")),
            },
            "weight_decay" => self.weight_decay = parse_as(key, value)?,
            "beta" => self.beta = parse_as(key, value)?,
            "lambda_rpo" => self.lambda_rpo = parse_as(key, value)?,
            "lambda_dpop" => self.lambda_dpop = parse_as(key, value)?,
            "dpop_sign" => self.dpop_sign = match value {
                "subtracted" => DpopSign::Subtracted,
                "canonical" => DpopSign::Canonical,
                _ => return Err(bad(key, "expected subtracted|canonical")),
            },
            "ref_refresh" => self.ref_refresh = match value {
                "once" => RefRefresh::Once,
                "per_dpo_phase" => RefRefresh::PerDpoPhase,
                _ => return Err(bad(key, "expected once|per_dpo_phase")),
            },
            "reset_moments" => self.reset_moments = parse_as(key, value)?,
            "mine_generations" => self.mine_generations = parse_as(key, value)?,
            "mine_groups" => self.mine_groups = parse_as(key, value)?,
            "mine_diversity_penalty" => self.mine_diversity_penalty = parse_as(key, value)?,
            "mine_max_len" => self.mine_max_len = parse_as(key, value)?,
            "mine_max_pairs_per_sample" => self.mine_max_pairs_per_sample = parse_as(key, value)?,
            "decode_beams" => self.decode_beams = parse_as(key, value)?,
            "decode_max_len" => self.decode_max_len = parse_as(key, value)?,
            "eval_beams" => self.eval_beams = parse_as(key, value)?,
            "judge_base_url" => self.judge_base_url = value.to_string(),
            "judge_model" => self.judge_model = value.to_string(),
            "judge_temperature" => self.judge_temperature = parse_as(key, value)?,
            "judge_timeout_secs" => self.judge_timeout_secs = parse_as(key, value)?,
            "judge_max_retries" => self.judge_max_retries = parse_as(key, value)?,
        });
        Ok(())
    }

    /// Stage seed derived from the top-level seed by stage-name hashing.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        let digest = Sha256::digest(stage.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        self.seed ^ u64::from_le_bytes(bytes)
    }

    pub fn hyperparams(&self, vocab_size: usize) -> HyperParams {
        HyperParams {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            ctx_len: self.ctx_len,
            vocab_size,
            adapter_rank: if self.adapter_rank == 0 {
                None
            } else {
                Some(self.adapter_rank)
            },
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            beta: self.beta,
            lambda_rpo: self.lambda_rpo,
            lambda_dpop: self.lambda_dpop,
            dpop_sign: self.dpop_sign,
        }
    }

    pub fn train_config(&self, schedule: Schedule, loss_kind: LossKind, stage: &str) -> TrainConfig {
        TrainConfig {
            schedule,
            loss_kind,
            loss: self.loss_config(),
            lr_sft: self.lr_sft,
            lr_dpo: self.lr_dpo,
            batch_size: self.batch_size,
            max_epochs: match schedule {
                Schedule::SftOnly => self.sft_epochs,
                _ => self.train_epochs,
            },
            patience: self.patience,
            seed: self.stage_seed(stage),
            optimizer: self.optimizer,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: self.weight_decay,
            ref_refresh: self.ref_refresh,
            reset_moments_on_switch: self.reset_moments,
        }
    }

    pub fn mining_config(&self) -> MiningConfig {
        MiningConfig {
            n_generations: self.mine_generations,
            groups: self.mine_groups,
            diversity_penalty: self.mine_diversity_penalty,
            max_len: self.mine_max_len,
            max_pairs_per_sample: self.mine_max_pairs_per_sample,
        }
    }

    pub fn judge_endpoint(&self) -> JudgeEndpoint {
        JudgeEndpoint {
            base_url: self.judge_base_url.clone(),
            model: self.judge_model.clone(),
            temperature: self.judge_temperature,
            timeout_secs: self.judge_timeout_secs,
            max_retries: self.judge_max_retries,
            backoff_ms: 500,
        }
    }

    /// Canonical serialization used for stage stamps.
    pub fn canonical_lines(&self) -> String {
        // BTreeMap for a stable key order
        let mut map: BTreeMap<&str, String> = BTreeMap::new();
        map.insert("out_dir", self.out_dir.display().to_string());
        map.insert("data_path", self.data_path.display().to_string());
        map.insert("seed", self.seed.to_string());
        map.insert("synth_questions", self.synth_questions.to_string());
        map.insert("split_train", format!("{}", self.split_train));
        map.insert("split_val", format!("{}", self.split_val));
        map.insert("split_test", format!("{}", self.split_test));
        map.insert("folds", self.folds.to_string());
        map.insert("n_layers", self.n_layers.to_string());
        map.insert("d_model", self.d_model.to_string());
        map.insert("n_heads", self.n_heads.to_string());
        map.insert("ctx_len", self.ctx_len.to_string());
        map.insert("adapter_rank", self.adapter_rank.to_string());
        map.insert("lr_sft", format!("{}", self.lr_sft));
        map.insert("lr_dpo", format!("{}", self.lr_dpo));
        map.insert("batch_size", self.batch_size.to_string());
        map.insert("sft_epochs", self.sft_epochs.to_string());
        map.insert("train_epochs", self.train_epochs.to_string());
        map.insert("patience", self.patience.to_string());
        map.insert("optimizer", format!("{:?}", self.optimizer).to_lowercase());
        map.insert("weight_decay", format!("{}", self.weight_decay));
        map.insert("beta", format!("{}", self.beta));
        map.insert("lambda_rpo", format!("{}", self.lambda_rpo));
        map.insert("lambda_dpop", format!("{}", self.lambda_dpop));
        map.insert("dpop_sign", format!("{:?}", self.dpop_sign).to_lowercase());
        map.insert("ref_refresh", format!("{:?}", self.ref_refresh).to_lowercase());
        map.insert("reset_moments", self.reset_moments.to_string());
        map.insert("mine_generations", self.mine_generations.to_string());
        map.insert("mine_groups", self.mine_groups.to_string());
        map.insert(
            "mine_diversity_penalty",
            format!("{}", self.mine_diversity_penalty),
        );
        map.insert("mine_max_len", self.mine_max_len.to_string());
        map.insert(
            "mine_max_pairs_per_sample",
            self.mine_max_pairs_per_sample.to_string(),
        );
        map.insert("decode_beams", self.decode_beams.to_string());
        map.insert("decode_max_len", self.decode_max_len.to_string());
        map.insert("eval_beams", self.eval_beams.to_string());
        map.insert("judge_base_url", self.judge_base_url.clone());
        map.insert("judge_model", self.judge_model.clone());
        map.insert("judge_temperature", format!("{}", self.judge_temperature));
        map.insert("judge_timeout_secs", self.judge_timeout_secs.to_string());
        map.insert("judge_max_retries", self.judge_max_retries.to_string());
        map.iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr_sft, 2e-5);
        assert_eq!(cfg.lr_dpo, 5e-6);
        assert_eq!(cfg.batch_size, 6);
        assert_eq!(cfg.sft_epochs, 5);
        assert_eq!(cfg.beta, 0.5);
        assert_eq!(cfg.lambda_rpo, 0.005);
        assert_eq!(cfg.lambda_dpop, 0.1);
        assert_eq!(cfg.decode_beams, 10);
        assert_eq!(cfg.folds, 5);
        assert_eq!(
            (cfg.split_train, cfg.split_val, cfg.split_test),
            (0.72, 0.16, 0.12)
        );
        assert_eq!(cfg.judge_temperature, 0.0);
    }

    #[test]
    fn parse_overrides_and_comments() {
        let cfg = RunConfig::parse(
            "# run settings\nseed = 99\nbeta=0.25 # inline\n\nd_model = 48\ndpop_sign = canonical\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.beta, 0.25);
        assert_eq!(cfg.d_model, 48);
        assert_eq!(cfg.dpop_sign, DpopSign::Canonical);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            RunConfig::parse("no_such_key = 1\n"),
            Err(ConfigError::UnknownKey(k)) if k == "no_such_key"
        ));
    }

    #[test]
    fn bad_value_and_syntax_rejected() {
        assert!(matches!(
            RunConfig::parse("seed = banana\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            RunConfig::parse("just a line\n"),
            Err(ConfigError::Syntax { line: 1 })
        ));
    }

    #[test]
    fn stage_seeds_differ_but_are_stable() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.stage_seed("sft"), cfg.stage_seed("sft"));
        assert_ne!(cfg.stage_seed("sft"), cfg.stage_seed("dpo"));
        let mut other = RunConfig::default();
        other.seed += 1;
        assert_ne!(cfg.stage_seed("sft"), other.stage_seed("sft"));
    }

    #[test]
    fn canonical_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.seed = 123;
        cfg.lambda_dpop = 0.07;
        let reparsed = RunConfig::parse(&cfg.canonical_lines()).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn derived_configs_consistent() {
        let cfg = RunConfig::default();
        let tc = cfg.train_config(Schedule::SftOnly, LossKind::Dpo, "sft");
        assert_eq!(tc.max_epochs, cfg.sft_epochs);
        let tc = cfg.train_config(Schedule::AlternatePerEpoch, LossKind::Dpo, "train");
        assert_eq!(tc.max_epochs, cfg.train_epochs);
        assert_eq!(cfg.hyperparams(50).vocab_size, 50);
        assert_eq!(cfg.hyperparams(50).adapter_rank, None);
        let mut with_adapters = RunConfig::default();
        with_adapters.adapter_rank = 4;
        assert_eq!(with_adapters.hyperparams(50).adapter_rank, Some(4));
    }
}
