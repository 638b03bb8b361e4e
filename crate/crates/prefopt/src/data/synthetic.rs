//! Synthetic arithmetic MCQ generator.
//!
//! Stands in for the proprietary corpus: every distractor is produced by a
//! named error rule applied to the numbers in the stem, so ground-truth
//! error/distractor consistency is perfect by construction and re-applying
//! the rule named in the error text reproduces the stored distractor.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, ErrorDistractor, Mcq};
use crate::normalize::normalize;

/// A named procedure a careless student might follow. The description text
/// doubles as the ground-truth error annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorRule {
    AddsValues,
    IgnoresPercentSign,
    FindsPercentAsAmount,
    CopiesFirst,
    CopiesSecond,
    ConcatenatesDigits,
    ReversesFirst,
    SubtractsInstead,
    SwapsSubtraction,
    AddsInstead,
}

pub const ALL_RULES: [ErrorRule; 10] = [
    ErrorRule::AddsValues,
    ErrorRule::IgnoresPercentSign,
    ErrorRule::FindsPercentAsAmount,
    ErrorRule::CopiesFirst,
    ErrorRule::CopiesSecond,
    ErrorRule::ConcatenatesDigits,
    ErrorRule::ReversesFirst,
    ErrorRule::SubtractsInstead,
    ErrorRule::SwapsSubtraction,
    ErrorRule::AddsInstead,
];

impl ErrorRule {
    pub fn description(self) -> &'static str {
        match self {
            ErrorRule::AddsValues => "adds the values together",
            ErrorRule::IgnoresPercentSign => "ignores the percent sign",
            ErrorRule::FindsPercentAsAmount => {
                "finds A% as an amount of B when asked for percentage"
            }
            ErrorRule::CopiesFirst => "copies the first number",
            ErrorRule::CopiesSecond => "copies the second number",
            ErrorRule::ConcatenatesDigits => "joins the digits of both numbers",
            ErrorRule::ReversesFirst => "reverses the digits of the first number",
            ErrorRule::SubtractsInstead => "subtracts instead of adding",
            ErrorRule::SwapsSubtraction => "subtracts the first from the second",
            ErrorRule::AddsInstead => "adds instead of subtracting",
        }
    }

    pub fn by_description(desc: &str) -> Option<ErrorRule> {
        let norm = normalize(desc);
        ALL_RULES.iter().copied().find(|r| r.description() == norm)
    }

    /// Apply the rule to the two stem operands.
    pub fn apply(self, a: i64, b: i64) -> String {
        match self {
            ErrorRule::AddsValues | ErrorRule::AddsInstead => format!("{}", a + b),
            ErrorRule::IgnoresPercentSign => format!("{}", a * b),
            ErrorRule::FindsPercentAsAmount => format_ratio(a * b, 100),
            ErrorRule::CopiesFirst => format!("{a}"),
            ErrorRule::CopiesSecond => format!("{b}"),
            ErrorRule::ConcatenatesDigits => format!("{a}{b}"),
            ErrorRule::ReversesFirst => a.to_string().chars().rev().collect(),
            ErrorRule::SubtractsInstead => format!("{}", a - b),
            ErrorRule::SwapsSubtraction => format!("{}", b - a),
        }
    }
}

/// Format numerator/denominator with up to two decimals, trimming zeros.
fn format_ratio(num: i64, den: i64) -> String {
    let scaled = (num * 100) / den; // exact when den divides 100*num
    let int = scaled / 100;
    let frac = (scaled % 100).abs();
    if frac == 0 {
        format!("{int}")
    } else if frac % 10 == 0 {
        format!("{int}.{}", frac / 10)
    } else {
        format!("{int}.{frac:02}")
    }
}

#[derive(Debug, Clone, Copy)]
enum Template {
    PercentOf,
    PercentAsked,
    Addition,
    Subtraction,
    Doubling,
}

impl Template {
    fn stem(self, a: i64, b: i64) -> String {
        match self {
            Template::PercentOf => format!("Calculate: {a}% of {b}"),
            Template::PercentAsked => format!("What percentage is {a} of {b}?"),
            Template::Addition => format!("What is {a} plus {b}?"),
            Template::Subtraction => format!("What is {a} minus {b}?"),
            Template::Doubling => format!("What is double {a} plus {b}?"),
        }
    }

    fn key(self, a: i64, b: i64) -> String {
        match self {
            Template::PercentOf => format_ratio(a * b, 100),
            Template::PercentAsked => format_ratio(a * 100, b),
            Template::Addition => format!("{}", a + b),
            Template::Subtraction => format!("{}", a - b),
            Template::Doubling => format!("{}", 2 * a + b),
        }
    }

    fn topic(self) -> &'static str {
        match self {
            Template::PercentOf | Template::PercentAsked => "Percentages",
            Template::Addition | Template::Doubling => "Addition",
            Template::Subtraction => "Subtraction",
        }
    }

    fn explanation(self) -> &'static str {
        match self {
            Template::PercentOf => "Multiply and divide by 100.",
            Template::PercentAsked => "Divide and scale to 100.",
            Template::Addition => "Add the two numbers.",
            Template::Subtraction => "Subtract the second number.",
            Template::Doubling => "Double then add.",
        }
    }

    /// Small operand pools: contents repeat across the corpus, so held-out
    /// questions stay answerable at desk scale without real arithmetic.
    fn operand_pools(self) -> (&'static [i64], &'static [i64]) {
        match self {
            Template::PercentOf => (&[20, 25, 40, 75], &[40, 60, 80]),
            Template::PercentAsked => (&[13, 24, 35, 46], &[20, 25, 50]),
            Template::Addition => (&[25, 38, 47, 64], &[13, 29, 56]),
            Template::Subtraction => (&[52, 64, 75, 83], &[17, 28, 41]),
            Template::Doubling => (&[12, 23, 34, 45], &[16, 27, 58]),
        }
    }

    fn rules(self) -> &'static [ErrorRule] {
        match self {
            Template::PercentOf => &[
                ErrorRule::AddsValues,
                ErrorRule::IgnoresPercentSign,
                ErrorRule::CopiesFirst,
                ErrorRule::CopiesSecond,
                ErrorRule::ConcatenatesDigits,
            ],
            Template::PercentAsked => &[
                ErrorRule::FindsPercentAsAmount,
                ErrorRule::AddsValues,
                ErrorRule::CopiesFirst,
                ErrorRule::CopiesSecond,
                ErrorRule::ReversesFirst,
            ],
            Template::Addition => &[
                ErrorRule::SubtractsInstead,
                ErrorRule::CopiesFirst,
                ErrorRule::CopiesSecond,
                ErrorRule::ConcatenatesDigits,
                ErrorRule::ReversesFirst,
            ],
            Template::Subtraction => &[
                ErrorRule::AddsInstead,
                ErrorRule::SwapsSubtraction,
                ErrorRule::CopiesFirst,
                ErrorRule::ReversesFirst,
            ],
            Template::Doubling => &[
                ErrorRule::CopiesFirst,
                ErrorRule::CopiesSecond,
                ErrorRule::AddsValues,
                ErrorRule::ConcatenatesDigits,
            ],
        }
    }
}

const TEMPLATES: [Template; 5] = [
    Template::PercentOf,
    Template::PercentAsked,
    Template::Addition,
    Template::Subtraction,
    Template::Doubling,
];

/// Extract the two operand numbers from a synthetic stem. Used by the
/// consistency oracle to re-apply a named rule.
#[cfg_attr(not(test), allow(dead_code))]
pub(crate) fn stem_numbers(stem: &str) -> Option<(i64, i64)> {
    let mut nums = Vec::new();
    let mut cur = String::new();
    for ch in stem.chars() {
        if ch.is_ascii_digit() {
            cur.push(ch);
        } else if !cur.is_empty() {
            nums.push(cur.parse().ok()?);
            cur.clear();
        }
    }
    if !cur.is_empty() {
        nums.push(cur.parse().ok()?);
    }
    match nums.len() {
        2 => Some((nums[0], nums[1])),
        3 if stem.contains("100") => Some((nums[0], nums[1])),
        _ => None,
    }
}

/// Generate a deterministic synthetic dataset of `n_questions` MCQs.
pub fn generate_synthetic_dataset(n_questions: usize, seed: u64) -> Result<Vec<Mcq>, DataError> {
    if n_questions < 1 {
        return Err(DataError::Other("n_questions must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_questions);
    for i in 0..n_questions {
        let mcq = loop {
            let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
            let (a_pool, b_pool) = template.operand_pools();
            let a = a_pool[rng.gen_range(0..a_pool.len())];
            let b = b_pool[rng.gen_range(0..b_pool.len())];
            if a == b {
                continue;
            }
            let key = template.key(a, b);
            let mut rules = template.rules().to_vec();
            // Deterministic rule subset: rotate by a seeded offset, take 3.
            let offset = rng.gen_range(0..rules.len());
            rules.rotate_left(offset);
            rules.truncate(3);
            let options: Vec<ErrorDistractor> = rules
                .iter()
                .map(|r| ErrorDistractor {
                    distractor: r.apply(a, b),
                    error: r.description().to_string(),
                })
                .collect();
            // Reject draws where a distractor collides with the key or
            // another distractor after normalization.
            let mut texts: Vec<String> =
                options.iter().map(|o| normalize(&o.distractor)).collect();
            texts.push(normalize(&key));
            texts.sort();
            let distinct = texts.windows(2).all(|w| w[0] != w[1]);
            let nonempty = options.iter().all(|o| !o.distractor.trim().is_empty());
            if !distinct || !nonempty {
                continue;
            }
            break Mcq {
                id: format!("syn-{i:04}"),
                stem: template.stem(a, b),
                key,
                explanation: template.explanation().to_string(),
                topics: vec![template.topic().to_string()],
                options,
            };
        };
        out.push(mcq);
    }
    Ok(out)
}
