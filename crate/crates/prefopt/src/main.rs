//! Command-line entry point orchestrating the full pipeline: synthetic
//! data, splits, SFT, pair construction, preference training, generation,
//! evaluation, judging and reporting.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 external-service
//! error, 5 internal invariant violation. Errors are printed to stderr as a
//! single machine-parsable line. All artifacts go to the configured output
//! directory; completed stages are content-addressed and skipped with a
//! "cached" notice on re-runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use sha2::{Digest, Sha256};

use prefopt::config::{ConfigError, RunConfig};
use prefopt::data::{
    generate_synthetic_dataset, load_dataset, make_folds, save_dataset, split_by_question,
    DataError, FoldPlan, Mcq, SplitPlan, Task,
};
use prefopt::eval::judge::{JudgeClient, JudgeError, JudgeRequest, Verdict};
use prefopt::eval::{
    aggregate_report, format_report, load_records, save_records, EvalError, EvalRecord,
};
use prefopt::lm::{load_model, save_model, LmError, ModelParams};
use prefopt::losses::{LossError, LossKind};
use prefopt::mining::{build_gt_pairs, mine_inconsistency_pairs, save_pairs, MiningError};
use prefopt::pipeline::{
    build_vocab, crossval, evaluate_exact_match, format_crossval_report, generate_for_option,
    sft_examples, PipelineError,
};
use prefopt::trainer::{
    save_train_state, train_preference, train_sft, PairProvider, Schedule, TrainError, TrainState,
};

/// Preference-optimized error and distractor generation for math MCQs.
#[derive(Parser, Debug)]
#[command(name = "prefopt", version, about)]
struct Cli {
    /// Path to a `key = value` run configuration file (defaults apply when
    /// omitted; see the key listing at the end of --help).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic MCQ dataset.
    SynthData,
    /// Split the dataset into train/val/test and k folds.
    Split,
    /// Supervised fine-tuning on the train split (both tasks).
    TrainSft,
    /// Mine inconsistency preference pairs from the SFT model.
    MinePairs,
    /// Build ground-truth cross pairs from the dataset.
    BuildGtPairs,
    /// Preference training from the SFT checkpoint.
    Train {
        /// Preference loss.
        #[arg(long, default_value = "dpo")]
        loss: LossKind,
        /// Alternation schedule; `none` means preference-only training.
        #[arg(long, default_value = "none")]
        schedule: String,
    },
    /// Ranked beam-search generations for every (question, option) prompt.
    Generate {
        /// Which generation direction to run.
        #[arg(long)]
        task: Task,
        /// Beam width (overrides config key decode_beams).
        #[arg(long)]
        beams: Option<usize>,
        /// Maximum completion length (overrides config key decode_max_len).
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Exact-match evaluation of the latest model on the test split.
    Evaluate {
        /// Which generation direction to evaluate.
        #[arg(long)]
        task: Task,
        /// Model checkpoint to evaluate (defaults to the preference model,
        /// falling back to the SFT model).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// LLM-judge equivalence scoring of generated error explanations.
    Judge,
    /// Aggregate per-fold scores from saved evaluation records.
    Report,
    /// End-to-end k-fold cross-validation of SFT vs DPO vs the full
    /// mined-alternating pipeline.
    Crossval,
}

/// An error annotated with its process exit code.
struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        CliError {
            code,
            msg: msg.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(2, format!("config: {e}"))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::new(3, format!("data: {e}"))
    }
}

impl From<LmError> for CliError {
    fn from(e: LmError) -> Self {
        CliError::new(5, format!("model: {e}"))
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        CliError::new(5, format!("loss: {e}"))
    }
}

impl From<MiningError> for CliError {
    fn from(e: MiningError) -> Self {
        match e {
            MiningError::Io { .. } | MiningError::Parse { .. } => {
                CliError::new(3, format!("mining: {e}"))
            }
            _ => CliError::new(5, format!("mining: {e}")),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::EmptyDataset(_) | TrainError::Checkpoint(_) => {
                CliError::new(3, format!("train: {e}"))
            }
            TrainError::InvalidConfig(_) => CliError::new(2, format!("train: {e}")),
            _ => CliError::new(5, format!("train: {e}")),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Stats(_) => CliError::new(5, format!("eval: {e}")),
            _ => CliError::new(3, format!("eval: {e}")),
        }
    }
}

impl From<JudgeError> for CliError {
    fn from(e: JudgeError) -> Self {
        CliError::new(4, format!("judge: {e}"))
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Data(d) => d.into(),
            PipelineError::Train(t) => t.into(),
            PipelineError::Mining(m) => m.into(),
            _ => CliError::new(5, format!("pipeline: {e}")),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::new(3, format!("data: io error on {}: {e}", path.display()))
}

fn stage_order(msg: impl Into<String>) -> CliError {
    CliError::new(3, format!("stage-order violation: {}", msg.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let keys = format!(
        "CONFIG KEYS (key = default):\n{}",
        RunConfig::default().canonical_lines()
    );
    let matches = Cli::command().after_long_help(keys).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: code={} {}", e.code, e.msg.replace('\n', " "));
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    match cli.command {
        Cmd::SynthData => cmd_synth_data(&cfg),
        Cmd::Split => cmd_split(&cfg),
        Cmd::TrainSft => cmd_train_sft(&cfg),
        Cmd::MinePairs => cmd_mine_pairs(&cfg),
        Cmd::BuildGtPairs => cmd_build_gt_pairs(&cfg),
        Cmd::Train { loss, schedule } => cmd_train(&cfg, loss, &schedule),
        Cmd::Generate {
            task,
            beams,
            max_len,
        } => cmd_generate(&cfg, task, beams, max_len),
        Cmd::Evaluate { task, model } => cmd_evaluate(&cfg, task, model),
        Cmd::Judge => cmd_judge(&cfg),
        Cmd::Report => cmd_report(&cfg),
        Cmd::Crossval => cmd_crossval(&cfg),
    }
}

// ---------------------------------------------------------------------------
// Content-addressed stage stamps

/// Stamp identity of a stage: the canonical config plus a digest of every
/// input artifact, plus any behavior-selecting flags.
fn stage_hash(cfg: &RunConfig, extra: &str, inputs: &[&Path]) -> Result<String, CliError> {
    let mut hasher = Sha256::new();
    hasher.update(cfg.canonical_lines().as_bytes());
    hasher.update(extra.as_bytes());
    for path in inputs {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        hasher.update(path.to_string_lossy().as_bytes());
        hasher.update(Sha256::digest(&bytes));
    }
    Ok(hex::encode(hasher.finalize()))
}

fn stamp_path(cfg: &RunConfig, stage: &str) -> PathBuf {
    cfg.out_dir.join("stamps").join(format!("{stage}.sha256"))
}

/// True when the stage already ran with identical config and inputs and
/// all its outputs still exist.
fn stage_cached(
    cfg: &RunConfig,
    stage: &str,
    hash: &str,
    outputs: &[&Path],
) -> bool {
    let stamped = fs::read_to_string(stamp_path(cfg, stage)).ok();
    stamped.as_deref().map(str::trim) == Some(hash) && outputs.iter().all(|p| p.exists())
}

fn write_stamp(cfg: &RunConfig, stage: &str, hash: &str) -> Result<(), CliError> {
    let path = stamp_path(cfg, stage);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(&path, format!("{hash}\n")).map_err(|e| io_err(&path, e))
}

fn notice_cached(stage: &str) {
    eprintln!("cached: stage '{stage}' is up to date, skipping");
}

// ---------------------------------------------------------------------------
// Artifact paths and shared loading helpers

fn split_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("split.json")
}

fn folds_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("folds.json")
}

fn sft_model_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("sft_model.bin")
}

fn pref_model_path(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.join("pref_model.bin")
}

fn eval_records_path(cfg: &RunConfig, task: Task) -> PathBuf {
    cfg.out_dir.join(format!("eval_{task}.jsonl"))
}

fn require(path: &Path, produced_by: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(stage_order(format!(
            "{} not found; run `{produced_by}` first",
            path.display()
        )))
    }
}

fn load_mcqs(cfg: &RunConfig) -> Result<Vec<Mcq>, CliError> {
    require(&cfg.data_path, "synth-data")?;
    Ok(load_dataset(&cfg.data_path)?)
}

fn load_split(cfg: &RunConfig) -> Result<SplitPlan, CliError> {
    let path = split_path(cfg);
    require(&path, "split")?;
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::new(3, format!("data: malformed {}: {e}", path.display())))
}

fn load_folds(cfg: &RunConfig) -> Result<FoldPlan, CliError> {
    let path = folds_path(cfg);
    require(&path, "split")?;
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::new(3, format!("data: malformed {}: {e}", path.display())))
}

fn select<'a>(mcqs: &'a [Mcq], ids: &[String]) -> Vec<Mcq> {
    mcqs.iter().filter(|m| ids.contains(&m.id)).cloned().collect()
}

/// The most recently trained model: preference checkpoint when present,
/// otherwise the SFT checkpoint.
fn latest_model_path(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let pref = pref_model_path(cfg);
    if pref.exists() {
        return Ok(pref);
    }
    let sft = sft_model_path(cfg);
    require(&sft, "train-sft")?;
    Ok(sft)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::new(5, format!("pipeline: serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Subcommands

fn cmd_synth_data(cfg: &RunConfig) -> Result<(), CliError> {
    let hash = stage_hash(cfg, "synth-data", &[])?;
    if stage_cached(cfg, "synth-data", &hash, &[&cfg.data_path]) {
        notice_cached("synth-data");
        return Ok(());
    }
    let mcqs = generate_synthetic_dataset(cfg.synth_questions, cfg.stage_seed("synth-data"))?;
    if let Some(parent) = cfg.data_path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    save_dataset(&cfg.data_path, &mcqs)?;
    write_stamp(cfg, "synth-data", &hash)?;
    println!(
        "wrote {} questions to {}",
        mcqs.len(),
        cfg.data_path.display()
    );
    Ok(())
}

fn cmd_split(cfg: &RunConfig) -> Result<(), CliError> {
    require(&cfg.data_path, "synth-data")?;
    let hash = stage_hash(cfg, "split", &[&cfg.data_path])?;
    let (split_p, folds_p) = (split_path(cfg), folds_path(cfg));
    if stage_cached(cfg, "split", &hash, &[&split_p, &folds_p]) {
        notice_cached("split");
        return Ok(());
    }
    let mcqs = load_mcqs(cfg)?;
    let plan = split_by_question(
        &mcqs,
        (cfg.split_train, cfg.split_val, cfg.split_test),
        cfg.stage_seed("split"),
    )?;
    let folds = make_folds(&mcqs, cfg.folds, cfg.stage_seed("folds"))?;
    write_json(&split_p, &plan)?;
    write_json(&folds_p, &folds)?;
    write_stamp(cfg, "split", &hash)?;
    println!(
        "split {} questions: {} train / {} val / {} test; {} folds",
        mcqs.len(),
        plan.train_ids.len(),
        plan.val_ids.len(),
        plan.test_ids.len(),
        cfg.folds
    );
    Ok(())
}

const BOTH_TASKS: [Task; 2] = [Task::ErrorGen, Task::DistractorGen];

fn cmd_train_sft(cfg: &RunConfig) -> Result<(), CliError> {
    require(&cfg.data_path, "synth-data")?;
    let split_p = split_path(cfg);
    require(&split_p, "split")?;
    let hash = stage_hash(cfg, "train-sft", &[&cfg.data_path, &split_p])?;
    let model_p = sft_model_path(cfg);
    if stage_cached(cfg, "train-sft", &hash, &[&model_p]) {
        notice_cached("train-sft");
        return Ok(());
    }
    let mcqs = load_mcqs(cfg)?;
    let plan = load_split(cfg)?;
    let vocab = build_vocab(&mcqs);
    let train = sft_examples(&select(&mcqs, &plan.train_ids), &BOTH_TASKS);
    let val = sft_examples(&select(&mcqs, &plan.val_ids), &BOTH_TASKS);
    let mut state = TrainState::new(ModelParams::init(
        cfg.hyperparams(vocab.size()),
        cfg.stage_seed("init"),
    ));
    let tcfg = cfg.train_config(Schedule::SftOnly, LossKind::Dpo, "train-sft");
    train_sft(&mut state, &vocab, &train, &val, &tcfg)?;
    save_model(&model_p, &vocab, &state.params)?;
    write_stamp(cfg, "train-sft", &hash)?;
    println!(
        "SFT complete after {} epochs; model at {}",
        state.epoch,
        model_p.display()
    );
    Ok(())
}

fn cmd_build_gt_pairs(cfg: &RunConfig) -> Result<(), CliError> {
    require(&cfg.data_path, "synth-data")?;
    let hash = stage_hash(cfg, "build-gt-pairs", &[&cfg.data_path])?;
    let out = cfg.out_dir.join("gt_pairs.jsonl");
    if stage_cached(cfg, "build-gt-pairs", &hash, &[&out]) {
        notice_cached("build-gt-pairs");
        return Ok(());
    }
    let mcqs = load_mcqs(cfg)?;
    let ds = build_gt_pairs(&mcqs, &BOTH_TASKS);
    save_pairs(&out, &ds)?;
    write_stamp(cfg, "build-gt-pairs", &hash)?;
    println!("wrote {} ground-truth pairs to {}", ds.pairs.len(), out.display());
    Ok(())
}

fn cmd_mine_pairs(cfg: &RunConfig) -> Result<(), CliError> {
    require(&cfg.data_path, "synth-data")?;
    let model_p = sft_model_path(cfg);
    require(&model_p, "train-sft")?;
    let hash = stage_hash(cfg, "mine-pairs", &[&cfg.data_path, &model_p])?;
    let out = cfg.out_dir.join("mined_pairs.jsonl");
    if stage_cached(cfg, "mine-pairs", &hash, &[&out]) {
        notice_cached("mine-pairs");
        return Ok(());
    }
    let mcqs = load_mcqs(cfg)?;
    let (vocab, params) = load_model(&model_p)?;
    let (ds, report) = mine_inconsistency_pairs(
        &params,
        &vocab,
        &mcqs,
        &BOTH_TASKS,
        0,
        &cfg.mining_config(),
    )?;
    save_pairs(&out, &ds)?;
    write_stamp(cfg, "mine-pairs", &hash)?;
    println!(
        "mined {} pairs ({} generations, {} inconsistent, {} deduped, {} capped) to {}",
        ds.pairs.len(),
        report.generations_total,
        report.inconsistent_generations,
        report.pairs_deduped,
        report.pairs_capped,
        out.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, loss: LossKind, schedule: &str) -> Result<(), CliError> {
    let schedule: Schedule = schedule
        .parse()
        .map_err(|e: String| CliError::new(2, format!("config: {e}")))?;
    if schedule == Schedule::SftOnly {
        return Err(CliError::new(
            2,
            "config: `train` runs preference training; use `train-sft` for SFT only",
        ));
    }
    require(&cfg.data_path, "synth-data")?;
    let split_p = split_path(cfg);
    require(&split_p, "split")?;
    let sft_p = sft_model_path(cfg);
    require(&sft_p, "train-sft")?;
    let extra = format!("train loss={loss:?} schedule={schedule:?}");
    let hash = stage_hash(cfg, &extra, &[&cfg.data_path, &split_p, &sft_p])?;
    let model_p = pref_model_path(cfg);
    let state_p = cfg.out_dir.join("train_state.bin");
    if stage_cached(cfg, "train", &hash, &[&model_p, &state_p]) {
        notice_cached("train");
        return Ok(());
    }
    let mcqs = load_mcqs(cfg)?;
    let plan = load_split(cfg)?;
    let (vocab, params) = load_model(&sft_p)?;
    let train_mcqs = select(&mcqs, &plan.train_ids);
    let train = sft_examples(&train_mcqs, &BOTH_TASKS);
    let val = sft_examples(&select(&mcqs, &plan.val_ids), &BOTH_TASKS);
    let provider = PairProvider::Mined {
        mcqs: &train_mcqs,
        tasks: &BOTH_TASKS,
        mining: cfg.mining_config(),
        include_gt: true,
    };
    let mut state = TrainState::new(params);
    let tcfg = cfg.train_config(schedule, loss, "train");
    train_preference(&mut state, &vocab, &train, &val, &provider, &tcfg)?;
    save_model(&model_p, &vocab, &state.params)?;
    save_train_state(&state_p, &vocab, &state)?;
    write_stamp(cfg, "train", &hash)?;
    println!(
        "preference training complete after {} epochs; model at {}",
        state.epoch,
        model_p.display()
    );
    for line in &state.trace {
        println!("trace: {line}");
    }
    Ok(())
}

fn cmd_generate(
    cfg: &RunConfig,
    task: Task,
    beams: Option<usize>,
    max_len: Option<usize>,
) -> Result<(), CliError> {
    let beams = beams.unwrap_or(cfg.decode_beams);
    let max_len = max_len.unwrap_or(cfg.decode_max_len);
    let model_p = latest_model_path(cfg)?;
    let extra = format!("generate task={task} beams={beams} max_len={max_len}");
    let hash = stage_hash(cfg, &extra, &[&cfg.data_path, &model_p])?;
    let out = cfg.out_dir.join(format!("generations_{task}.jsonl"));
    if stage_cached(cfg, &format!("generate-{task}"), &hash, &[&out]) {
        notice_cached("generate");
        return Ok(());
    }
    let mcqs = load_mcqs(cfg)?;
    let (vocab, params) = load_model(&model_p)?;
    let mut lines = String::new();
    let mut count = 0usize;
    for mcq in &mcqs {
        for i in 0..mcq.options.len() {
            let ranked = generate_for_option(&params, &vocab, mcq, task, i, beams, max_len)?;
            for (rank, (text, logprob)) in ranked.iter().enumerate() {
                let record = serde_json::json!({
                    "id": mcq.id,
                    "option": i,
                    "task": task.to_string(),
                    "rank": rank,
                    "text": text,
                    "logprob": logprob,
                });
                let _ = writeln!(lines, "{record}");
                count += 1;
            }
        }
    }
    fs::write(&out, lines).map_err(|e| io_err(&out, e))?;
    write_stamp(cfg, &format!("generate-{task}"), &hash)?;
    println!("wrote {count} generations to {}", out.display());
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, task: Task, model: Option<PathBuf>) -> Result<(), CliError> {
    let model_p = match model {
        Some(p) => {
            require(&p, "train-sft")?;
            p
        }
        None => latest_model_path(cfg)?,
    };
    let split_p = split_path(cfg);
    require(&split_p, "split")?;
    let extra = format!("evaluate task={task}");
    let hash = stage_hash(cfg, &extra, &[&cfg.data_path, &split_p, &model_p])?;
    let out = eval_records_path(cfg, task);
    if stage_cached(cfg, &format!("evaluate-{task}"), &hash, &[&out]) {
        notice_cached("evaluate");
        return Ok(());
    }
    let mcqs = load_mcqs(cfg)?;
    let plan = load_split(cfg)?;
    let test = select(&mcqs, &plan.test_ids);
    let (vocab, params) = load_model(&model_p)?;
    let (records, pct) =
        evaluate_exact_match(&params, &vocab, &test, task, cfg.eval_beams, cfg.decode_max_len)?;
    save_records(&out, &records)?;
    write_stamp(cfg, &format!("evaluate-{task}"), &hash)?;
    println!(
        "{task}: exact match {pct:.2}% over {} test samples; records at {}",
        records.len(),
        out.display()
    );
    Ok(())
}

/// Align error-generation eval records back to their (question, option)
/// prompts. Records were emitted in dataset order, one per option with a
/// nonempty ground-truth error.
fn align_error_records<'a>(
    mcqs: &'a [Mcq],
    records: &[EvalRecord],
) -> Result<Vec<(&'a Mcq, usize)>, CliError> {
    let mut slots = Vec::new();
    for mcq in mcqs {
        for (i, opt) in mcq.options.iter().enumerate() {
            if opt.has_error() {
                slots.push((mcq, i));
            }
        }
    }
    let mut aligned = Vec::with_capacity(records.len());
    let mut cursor = 0usize;
    for rec in records {
        let found = slots[cursor..].iter().position(|(m, i)| {
            m.id == rec.mcq_id && m.options[*i].error == rec.ground_truth
        });
        match found {
            Some(offset) => {
                cursor += offset;
                aligned.push(slots[cursor]);
                cursor += 1;
            }
            None => {
                return Err(CliError::new(
                    3,
                    format!(
                        "data: eval record for '{}' does not match the dataset; re-run evaluate",
                        rec.mcq_id
                    ),
                ))
            }
        }
    }
    Ok(aligned)
}

fn or_unspecified(s: &str) -> String {
    let t = s.trim();
    if t.is_empty() {
        "unspecified".to_string()
    } else {
        t.to_string()
    }
}

fn cmd_judge(cfg: &RunConfig) -> Result<(), CliError> {
    let records_p = eval_records_path(cfg, Task::ErrorGen);
    require(&records_p, "evaluate --task error")?;
    let mcqs = load_mcqs(cfg)?;
    let mut records = load_records(&records_p)?;
    let aligned = align_error_records(&mcqs, &records)?;
    let cache_p = cfg.out_dir.join("judge_cache.tsv");
    let mut client = JudgeClient::new(cfg.judge_endpoint(), Some(&cache_p))?;
    let mut counts = [0usize; 3];
    for (rec, (mcq, i)) in records.iter_mut().zip(aligned) {
        let req = JudgeRequest {
            stem: mcq.stem.clone(),
            topic: or_unspecified(mcq.topics.first().map(String::as_str).unwrap_or("")),
            concept: or_unspecified(mcq.topics.get(1).map(String::as_str).unwrap_or(
                mcq.topics.first().map(String::as_str).unwrap_or(""),
            )),
            solution: or_unspecified(&mcq.explanation),
            key: mcq.key.clone(),
            distractor: mcq.options[i].distractor.clone(),
            error_1: rec.ground_truth.clone(),
            error_2: or_unspecified(&rec.generated),
        };
        let outcome = client.judge(&req)?;
        counts[match outcome.verdict {
            Verdict::Equivalent => 0,
            Verdict::NotEquivalent => 1,
            Verdict::Unparsed => 2,
        }] += 1;
        rec.judge_verdict = Some(outcome.verdict);
        rec.judge_rationale = outcome.rationale;
    }
    let judged_p = cfg.out_dir.join("judged_error.jsonl");
    save_records(&judged_p, &records)?;
    println!(
        "judged {} records: {} equivalent, {} not equivalent, {} unparsed ({} network calls); records at {}",
        records.len(),
        counts[0],
        counts[1],
        counts[2],
        client.network_calls,
        judged_p.display()
    );
    Ok(())
}

fn cmd_report(cfg: &RunConfig) -> Result<(), CliError> {
    let folds = load_folds(cfg)?;
    let mut printed = false;
    for (name, path) in [
        ("distractor exact match", eval_records_path(cfg, Task::DistractorGen)),
        ("error generation (judged)", cfg.out_dir.join("judged_error.jsonl")),
        ("error exact match", eval_records_path(cfg, Task::ErrorGen)),
    ] {
        if !path.exists() {
            continue;
        }
        let records = load_records(&path)?;
        let report = aggregate_report(&records, &folds)?;
        println!("{}", format_report(name, &report));
        printed = true;
    }
    let crossval_p = cfg.out_dir.join("crossval_report.txt");
    if crossval_p.exists() {
        let text = fs::read_to_string(&crossval_p).map_err(|e| io_err(&crossval_p, e))?;
        println!("{text}");
        printed = true;
    }
    if !printed {
        return Err(stage_order(
            "no evaluation records found; run `evaluate` or `crossval` first",
        ));
    }
    Ok(())
}

fn cmd_crossval(cfg: &RunConfig) -> Result<(), CliError> {
    require(&cfg.data_path, "synth-data")?;
    let hash = stage_hash(cfg, "crossval", &[&cfg.data_path])?;
    let report_txt = cfg.out_dir.join("crossval_report.txt");
    let report_json = cfg.out_dir.join("crossval_report.json");
    if stage_cached(cfg, "crossval", &hash, &[&report_txt, &report_json]) {
        notice_cached("crossval");
        let text = fs::read_to_string(&report_txt).map_err(|e| io_err(&report_txt, e))?;
        println!("{text}");
        return Ok(());
    }
    let mcqs = load_mcqs(cfg)?;
    let report = crossval(&mcqs, cfg)?;
    let text = format_crossval_report(&report);
    fs::write(&report_txt, &text).map_err(|e| io_err(&report_txt, e))?;
    write_json(&report_json, &report)?;
    write_stamp(cfg, "crossval", &hash)?;
    println!("{text}");
    Ok(())
}

