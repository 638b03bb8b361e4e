//! Preference-optimized error and distractor generation for math MCQs,
//! end to end at desk scale: a tiny autoregressive model trained with SFT,
//! preference pairs built from ground truth or mined from generation
//! inconsistencies, DPO-family losses with alternating SFT/DPO schedules,
//! and evaluation via exact match, an LLM judge, and significance tests.

pub mod config;
pub mod data;
pub mod eval;
pub mod lm;
pub mod losses;
pub mod mining;
pub mod normalize;
pub mod pipeline;
pub mod trainer;
