//! A small decoder-only autoregressive language model in 64-bit floats:
//! exact sequence log-probabilities, hand-written reverse-mode gradients,
//! optional low-rank adapters, and beam / diverse-beam decoding.

pub(crate) mod checkpoint;
mod decode;
mod model;
mod tensor;

pub use checkpoint::{load_model, save_model};
pub use decode::{beam_search, diverse_beam_search, Generation};
pub use model::{grad_sequence_logprob, next_token_log_probs, sequence_logprob};
pub use tensor::Tensor;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Mcq, Task};

pub type TokenId = usize;

/// Field separator character used when rendering prompts as plain text.
/// Encodes to the reserved SEP token.
pub const SEP_CHAR: char = '\u{1F}';

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("sequence length {len} exceeds context length {ctx}")]
    ContextOverflow { len: usize, ctx: usize },
    #[error("character {0:?} outside vocabulary")]
    TokenOutOfVocab(char),
    #[error("token id {0} outside vocabulary")]
    TokenIdOutOfVocab(TokenId),
    #[error("non-finite value detected in {0}")]
    NonFinite(String),
    #[error("completion must end with EOS")]
    MissingEos,
    #[error("beam groups {groups} does not divide width {width}")]
    GroupsDontDivide { groups: usize, width: usize },
    #[error("invalid decode settings: {0}")]
    BadDecodeSettings(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Char-level vocabulary with reserved BOS/EOS/PAD/SEP tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, TokenId>,
}

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;
pub const SEP: TokenId = 3;
const RESERVED: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<sep>"];

impl Vocabulary {
    /// Build a char-level vocabulary from a corpus of texts.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut chars: Vec<char> = texts
            .into_iter()
            .flat_map(|t| t.chars())
            .filter(|c| *c != SEP_CHAR)
            .collect();
        chars.sort_unstable();
        chars.dedup();
        let mut symbols: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        symbols.extend(chars.into_iter().map(|c| c.to_string()));
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Vocabulary { symbols, index }
    }

    pub fn from_symbols(symbols: Vec<String>) -> Result<Self, LmError> {
        for (i, r) in RESERVED.iter().enumerate() {
            if symbols.get(i).map(String::as_str) != Some(*r) {
                return Err(LmError::Checkpoint(format!(
                    "reserved token {r} missing at index {i}"
                )));
            }
        }
        let index: HashMap<String, TokenId> = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        if index.len() != symbols.len() {
            return Err(LmError::Checkpoint("duplicate vocabulary symbol".into()));
        }
        Ok(Vocabulary { symbols, index })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Encode text to token ids. `SEP_CHAR` maps to the SEP token.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        text.chars()
            .map(|c| {
                if c == SEP_CHAR {
                    return Ok(SEP);
                }
                self.index
                    .get(c.to_string().as_str())
                    .copied()
                    .ok_or(LmError::TokenOutOfVocab(c))
            })
            .collect()
    }

    /// Encode a completion: text chars followed by EOS.
    pub fn encode_completion(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        let mut toks = self.encode(text)?;
        toks.push(EOS);
        Ok(toks)
    }

    /// Decode token ids to text, dropping reserved tokens.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter(|&&t| t >= RESERVED.len())
            .map(|&t| self.symbols[t].as_str())
            .collect()
    }

    /// Token ids a decoder may emit: every non-reserved symbol plus EOS.
    pub fn generatable(&self) -> Vec<TokenId> {
        let mut out = vec![EOS];
        out.extend(RESERVED.len()..self.symbols.len());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HyperParams {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ctx_len: usize,
    pub vocab_size: usize,
    /// Low-rank adapter rank; `None` trains all base weights.
    pub adapter_rank: Option<usize>,
}

impl HyperParams {
    pub fn toy(vocab_size: usize) -> Self {
        HyperParams {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            ctx_len: 128,
            vocab_size,
            adapter_rank: None,
        }
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Low-rank factor pair for one linear map: delta = (x * a) * b.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub a: Tensor, // d_in x r
    pub b: Tensor, // r x d_out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    /// Adapters on wq, wk, wv, wo, w1, w2 when adapter rank is set.
    pub adapters: Option<[Adapter; 6]>,
}

/// All trainable tensors of the model plus hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hp: HyperParams,
    pub tok_emb: Tensor, // V x d
    pub pos_emb: Tensor, // ctx x d
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub w_out: Tensor, // d x V
    pub out_adapter: Option<Adapter>,
}

/// Frozen deep copy of model params serving as the DPO reference policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSnapshot(ModelParams);

impl ReferenceSnapshot {
    pub fn freeze(params: &ModelParams) -> Self {
        ReferenceSnapshot(params.clone())
    }

    pub fn params(&self) -> &ModelParams {
        &self.0
    }
}

fn adapter_zero_b(d_in: usize, r: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Adapter {
    // a random, b zero: adapted map starts identical to the base map.
    let normal = Normal::new(0.0, 0.02).unwrap();
    Adapter {
        a: Tensor::from_fn(d_in, r, || normal.sample(rng)),
        b: Tensor::zeros(r, d_out),
    }
}

impl ModelParams {
    /// Random initialization (normal, sd 0.02; layernorm gains 1; output
    /// projection zero so a fresh model is exactly uniform over the vocab).
    pub fn init(hp: HyperParams, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        let d = hp.d_model;
        let ff = hp.d_ff();
        let v = hp.vocab_size;
        let mut sample = |rows: usize, cols: usize| {
            Tensor::from_fn(rows, cols, || normal.sample(&mut rng))
        };
        let mut layers = Vec::with_capacity(hp.n_layers);
        for _ in 0..hp.n_layers {
            let mut ones = Tensor::zeros(1, d);
            ones.fill(1.0);
            layers.push(LayerParams {
                ln1_g: ones.clone(),
                ln1_b: Tensor::zeros(1, d),
                wq: sample(d, d),
                bq: Tensor::zeros(1, d),
                wk: sample(d, d),
                bk: Tensor::zeros(1, d),
                wv: sample(d, d),
                bv: Tensor::zeros(1, d),
                wo: sample(d, d),
                bo: Tensor::zeros(1, d),
                ln2_g: ones.clone(),
                ln2_b: Tensor::zeros(1, d),
                w1: sample(d, ff),
                b1: Tensor::zeros(1, ff),
                w2: sample(ff, d),
                b2: Tensor::zeros(1, d),
                adapters: None,
            });
        }
        let mut lnf_g = Tensor::zeros(1, d);
        lnf_g.fill(1.0);
        let mut params = ModelParams {
            hp,
            tok_emb: sample(v, d),
            pos_emb: sample(hp.ctx_len, d),
            layers,
            lnf_g,
            lnf_b: Tensor::zeros(1, d),
            w_out: Tensor::zeros(d, v),
            out_adapter: None,
        };
        if let Some(r) = hp.adapter_rank {
            params.attach_adapters(r, seed.wrapping_add(1));
        }
        params
    }

    /// Attach fresh low-rank adapters; base weights freeze from here on.
    pub fn attach_adapters(&mut self, rank: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.hp.d_model;
        let ff = self.hp.d_ff();
        let v = self.hp.vocab_size;
        for layer in &mut self.layers {
            layer.adapters = Some([
                adapter_zero_b(d, rank, d, &mut rng),
                adapter_zero_b(d, rank, d, &mut rng),
                adapter_zero_b(d, rank, d, &mut rng),
                adapter_zero_b(d, rank, d, &mut rng),
                adapter_zero_b(d, rank, ff, &mut rng),
                adapter_zero_b(ff, rank, d, &mut rng),
            ]);
        }
        self.out_adapter = Some(adapter_zero_b(d, rank, v, &mut rng));
        self.hp.adapter_rank = Some(rank);
    }

    pub fn adapters_enabled(&self) -> bool {
        self.hp.adapter_rank.is_some()
    }

    /// Same shapes, all values zero. Used for gradients and moments.
    pub fn zeros_like(&self) -> ModelParams {
        let mut out = self.clone();
        out.for_each_tensor_mut(|_, t| t.fill(0.0));
        out
    }

    /// Visit every tensor with a stable name, in a canonical order.
    pub fn for_each_tensor(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("tok_emb", &self.tok_emb);
        f("pos_emb", &self.pos_emb);
        for (i, l) in self.layers.iter().enumerate() {
            let named: [(&str, &Tensor); 16] = [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ];
            for (n, t) in named {
                f(&format!("layer{i}.{n}"), t);
            }
            if let Some(ads) = &l.adapters {
                for (j, ad) in ads.iter().enumerate() {
                    f(&format!("layer{i}.adapter{j}.a"), &ad.a);
                    f(&format!("layer{i}.adapter{j}.b"), &ad.b);
                }
            }
        }
        f("lnf_g", &self.lnf_g);
        f("lnf_b", &self.lnf_b);
        f("w_out", &self.w_out);
        if let Some(ad) = &self.out_adapter {
            f("out_adapter.a", &ad.a);
            f("out_adapter.b", &ad.b);
        }
    }

    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("tok_emb", &mut self.tok_emb);
        f("pos_emb", &mut self.pos_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let named: [(&str, &mut Tensor); 16] = [
                ("ln1_g", &mut l.ln1_g),
                ("ln1_b", &mut l.ln1_b),
                ("wq", &mut l.wq),
                ("bq", &mut l.bq),
                ("wk", &mut l.wk),
                ("bk", &mut l.bk),
                ("wv", &mut l.wv),
                ("bv", &mut l.bv),
                ("wo", &mut l.wo),
                ("bo", &mut l.bo),
                ("ln2_g", &mut l.ln2_g),
                ("ln2_b", &mut l.ln2_b),
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
            ];
            for (n, t) in named {
                f(&format!("layer{i}.{n}"), t);
            }
            if let Some(ads) = &mut l.adapters {
                for (j, ad) in ads.iter_mut().enumerate() {
                    f(&format!("layer{i}.adapter{j}.a"), &mut ad.a);
                    f(&format!("layer{i}.adapter{j}.b"), &mut ad.b);
                }
            }
        }
        f("lnf_g", &mut self.lnf_g);
        f("lnf_b", &mut self.lnf_b);
        f("w_out", &mut self.w_out);
        if let Some(ad) = &mut self.out_adapter {
            f("out_adapter.a", &mut ad.a);
            f("out_adapter.b", &mut ad.b);
        }
    }

    /// Names of tensors that train. With adapters enabled only the factor
    /// pairs are trainable; everything else is frozen.
    pub fn is_trainable(&self, name: &str) -> bool {
        if self.adapters_enabled() {
            name.contains("adapter")
        } else {
            true
        }
    }

    pub fn total_values(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(|_, t| n += t.len());
        n
    }

    pub fn assert_finite(&self) -> Result<(), LmError> {
        let mut bad: Option<String> = None;
        self.for_each_tensor(|name, t| {
            if bad.is_none() && !t.is_finite() {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(LmError::NonFinite(name)),
            None => Ok(()),
        }
    }
}

/// Render the shared prompt template as plain text:
/// `stem SEP key SEP explanation SEP topics SEP conditioning SEP`.
/// The conditioning text is the error for distractor generation and the
/// distractor for error generation.
pub fn render_prompt(mcq: &Mcq, task: Task, option_index: usize) -> String {
    let opt = &mcq.options[option_index];
    let conditioning = match task {
        Task::DistractorGen => &opt.error,
        Task::ErrorGen => &opt.distractor,
    };
    format!(
        "{}{SEP_CHAR}{}{SEP_CHAR}{}{SEP_CHAR}{}{SEP_CHAR}{}{SEP_CHAR}",
        mcq.stem,
        mcq.key,
        mcq.explanation,
        mcq.topics.join(","),
        conditioning
    )
}

/// The generation target paired with `render_prompt` for the same option.
pub fn target_text(mcq: &Mcq, task: Task, option_index: usize) -> &str {
    let opt = &mcq.options[option_index];
    match task {
        Task::DistractorGen => &opt.distractor,
        Task::ErrorGen => &opt.error,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_reserved_and_bijective() {
        let v = Vocabulary::from_texts(["abc", "cba"]);
        assert_eq!(v.size(), 4 + 3);
        for (i, s) in v.symbols().iter().enumerate() {
            assert_eq!(v.index[s], i);
        }
        assert_eq!(v.encode("ab").unwrap(), vec![4, 5]);
        assert!(matches!(v.encode("z"), Err(LmError::TokenOutOfVocab('z'))));
    }

    #[test]
    fn sep_char_round_trip() {
        let v = Vocabulary::from_texts(["ab"]);
        let toks = v.encode(&format!("a{SEP_CHAR}b")).unwrap();
        assert_eq!(toks, vec![4, SEP, 5]);
        assert_eq!(v.decode(&toks), "ab");
    }

    #[test]
    fn completion_ends_with_eos() {
        let v = Vocabulary::from_texts(["ab"]);
        let toks = v.encode_completion("ba").unwrap();
        assert_eq!(*toks.last().unwrap(), EOS);
    }

    #[test]
    fn prompt_template_field_order() {
        let mcq = Mcq {
            id: "q".into(),
            stem: "stem".into(),
            key: "key".into(),
            explanation: "why".into(),
            topics: vec!["t1".into(), "t2".into()],
            options: vec![crate::data::ErrorDistractor {
                distractor: "d".into(),
                error: "e".into(),
            }],
        };
        let p = render_prompt(&mcq, Task::DistractorGen, 0);
        assert_eq!(
            p,
            format!("stem{SEP_CHAR}key{SEP_CHAR}why{SEP_CHAR}t1,t2{SEP_CHAR}e{SEP_CHAR}")
        );
        let p = render_prompt(&mcq, Task::ErrorGen, 0);
        assert!(p.ends_with(&format!("d{SEP_CHAR}")));
        assert_eq!(target_text(&mcq, Task::ErrorGen, 0), "e");
    }

    #[test]
    fn zeros_like_shapes() {
        let hp = HyperParams {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            ctx_len: 16,
            vocab_size: 7,
            adapter_rank: None,
        };
        let p = ModelParams::init(hp, 0);
        let z = p.zeros_like();
        assert_eq!(p.total_values(), z.total_values());
        let mut all_zero = true;
        z.for_each_tensor(|_, t| all_zero &= t.data.iter().all(|&x| x == 0.0));
        assert!(all_zero);
    }
}
