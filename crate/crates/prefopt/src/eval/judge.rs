//! LLM-as-judge client for error equivalence, with a persistent response
//! cache keyed by a content hash of the rendered prompt.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable holding the bearer token for the judge endpoint.
pub const JUDGE_TOKEN_ENV: &str = "PREFOPT_JUDGE_TOKEN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Equivalent,
    NotEquivalent,
    Unparsed,
}

impl Verdict {
    fn as_str(self) -> &'static str {
        match self {
            Verdict::Equivalent => "equivalent",
            Verdict::NotEquivalent => "not_equivalent",
            Verdict::Unparsed => "unparsed",
        }
    }

    fn parse(s: &str) -> Option<Verdict> {
        match s {
            "equivalent" => Some(Verdict::Equivalent),
            "not_equivalent" => Some(Verdict::NotEquivalent),
            "unparsed" => Some(Verdict::Unparsed),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeEndpoint {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// Base backoff delay, doubled per retry.
    pub backoff_ms: u64,
}

impl Default for JudgeEndpoint {
    fn default() -> Self {
        JudgeEndpoint {
            base_url: "http://127.0.0.1:8080".into(),
            model: "judge".into(),
            // deterministic judging by default
            temperature: 0.0,
            timeout_secs: 30,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

/// One equivalence question for the judge. Every slot must be filled
/// before dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgeRequest {
    pub stem: String,
    pub topic: String,
    pub concept: String,
    pub solution: String,
    pub key: String,
    pub distractor: String,
    /// Ground-truth error explanation.
    pub error_1: String,
    /// Generated error explanation.
    pub error_2: String,
}

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("empty prompt slot: {0}")]
    EmptySlot(&'static str),
    #[error("cache io error on {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cache line {line} malformed")]
    CacheParse { line: usize },
}

impl JudgeRequest {
    pub fn validate(&self) -> Result<(), JudgeError> {
        let slots = [
            ("stem", &self.stem),
            ("topic", &self.topic),
            ("concept", &self.concept),
            ("solution", &self.solution),
            ("key", &self.key),
            ("distractor", &self.distractor),
            ("error_1", &self.error_1),
            ("error_2", &self.error_2),
        ];
        for (name, value) in slots {
            if value.trim().is_empty() {
                let name: &'static str = match name {
                    "stem" => "stem",
                    "topic" => "topic",
                    "concept" => "concept",
                    "solution" => "solution",
                    "key" => "key",
                    "distractor" => "distractor",
                    "error_1" => "error_1",
                    _ => "error_2",
                };
                return Err(JudgeError::EmptySlot(name));
            }
        }
        Ok(())
    }

    /// The judge system prompt with every slot substituted.
    pub fn render_prompt(&self) -> String {
        format!(
            "You are a math education expert.\n\
             \n\
             Given a question and a distractor (an incorrect student answer), determine whether two error descriptions are mathematically equivalent.\n\
             \n\
             Definitions.\n\
             - An incorrect answer or distractor is a plausible but incorrect answer choice to the specified question.\n\
             - An error explanation or error is the misconception a student might make that leads them to choosing the specified distractor.\n\
             - Two error explanations are mathematically equivalent if they stem from the same core misunderstanding, regardless of wording.\n\
             \n\
             Your response should include a brief justification (1-2 sentences) for whether the errors reflect the same or different misconceptions.\n\
             \n\
             Always conclude with: \"Answer: Equivalent or Answer: Not Equivalent\".\n\
             \n\
             Question and Metadata.\n\
             \n\
             The question is: {}\n\
             The question topic is: {}\n\
             The question concept is: {}\n\
             The solution is: {}\n\
             The correct answer is: {}\n\
             \n\
             Distractor (incorrect answer): {}\n\
             \n\
             Error explanation 1: {}\n\
             Error explanation 2: {}\n",
            self.stem,
            self.topic,
            self.concept,
            self.solution,
            self.key,
            self.distractor,
            self.error_1,
            self.error_2
        )
    }

    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.render_prompt().as_bytes()))
    }
}

/// Extract the verdict from the last `Answer:` marker in a response.
/// Case-insensitive; trailing punctuation and markup are tolerated.
pub fn parse_verdict(response: &str) -> Verdict {
    let lower = response.to_lowercase();
    let mut verdict = Verdict::Unparsed;
    let mut from = 0;
    while let Some(pos) = lower[from..].find("answer:") {
        let start = from + pos + "answer:".len();
        let rest: String = lower[start..]
            .chars()
            .filter(|c| c.is_ascii_alphabetic() || c.is_whitespace())
            .collect();
        let rest = rest.split_whitespace().collect::<Vec<_>>().join(" ");
        if rest.starts_with("not equivalent") {
            verdict = Verdict::NotEquivalent;
        } else if rest.starts_with("equivalent") {
            verdict = Verdict::Equivalent;
        }
        from = start;
    }
    verdict
}

#[derive(Debug, Clone, PartialEq)]
pub struct JudgeOutcome {
    pub verdict: Verdict,
    pub rationale: String,
    pub from_cache: bool,
}

/// Judge client with a line-oriented persistent cache of
/// (prompt-hash, verdict, rationale).
pub struct JudgeClient {
    pub endpoint: JudgeEndpoint,
    cache_path: Option<PathBuf>,
    cache: HashMap<String, (Verdict, String)>,
    /// Network calls issued in this process; cache hits do not count.
    pub network_calls: usize,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('\\') => out.push('\\'),
                Some(other) => out.push(other),
                None => {}
            }
        } else {
            out.push(c);
        }
    }
    out
}

impl JudgeClient {
    pub fn new(endpoint: JudgeEndpoint, cache_path: Option<&Path>) -> Result<Self, JudgeError> {
        let mut cache = HashMap::new();
        if let Some(path) = cache_path {
            if path.exists() {
                let text = std::fs::read_to_string(path).map_err(|source| JudgeError::CacheIo {
                    path: path.display().to_string(),
                    source,
                })?;
                for (idx, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let mut parts = line.splitn(3, '\t');
                    let (hash, verdict, rationale) = match (
                        parts.next(),
                        parts.next().and_then(Verdict::parse),
                        parts.next(),
                    ) {
                        (Some(h), Some(v), Some(r)) => (h, v, r),
                        _ => return Err(JudgeError::CacheParse { line: idx + 1 }),
                    };
                    cache.insert(hash.to_string(), (verdict, unescape(rationale)));
                }
            }
        }
        Ok(JudgeClient {
            endpoint,
            cache_path: cache_path.map(Path::to_path_buf),
            cache,
            network_calls: 0,
        })
    }

    fn append_cache(&self, hash: &str, verdict: Verdict, rationale: &str) {
        let Some(path) = &self.cache_path else { return };
        let line = format!("{hash}\t{}\t{}\n", verdict.as_str(), escape(rationale));
        let result = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .and_then(|mut f| f.write_all(line.as_bytes()));
        if let Err(e) = result {
            log::warn!("judge cache append failed on {}: {e}", path.display());
        }
    }

    fn post_once(&self, prompt: &str) -> Result<String, String> {
        let url = format!("{}/chat/completions", self.endpoint.base_url.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.endpoint.model,
            "temperature": self.endpoint.temperature,
            "messages": [{"role": "system", "content": prompt}],
        });
        let mut req = ureq::post(&url)
            .timeout(std::time::Duration::from_secs(self.endpoint.timeout_secs));
        if let Ok(token) = std::env::var(JUDGE_TOKEN_ENV) {
            req = req.set("Authorization", &format!("Bearer {token}"));
        }
        let resp = req.send_json(body).map_err(|e| e.to_string());
        let resp = resp?;
        let value: serde_json::Value = resp.into_json().map_err(|e| e.to_string())?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| "response missing choices[0].message.content".to_string())
    }

    /// Judge one request, consulting the cache first. Transport failures
    /// retry with exponential backoff and finally degrade to Unparsed; a
    /// response without the answer marker is Unparsed and cached.
    pub fn judge(&mut self, req: &JudgeRequest) -> Result<JudgeOutcome, JudgeError> {
        req.validate()?;
        let hash = req.content_hash();
        if let Some((verdict, rationale)) = self.cache.get(&hash) {
            return Ok(JudgeOutcome {
                verdict: *verdict,
                rationale: rationale.clone(),
                from_cache: true,
            });
        }
        let prompt = req.render_prompt();
        let mut last_err = String::new();
        for attempt in 0..=self.endpoint.max_retries {
            if attempt > 0 {
                let delay = self.endpoint.backoff_ms << (attempt - 1);
                std::thread::sleep(std::time::Duration::from_millis(delay));
            }
            self.network_calls += 1;
            match self.post_once(&prompt) {
                Ok(content) => {
                    let verdict = parse_verdict(&content);
                    self.cache.insert(hash.clone(), (verdict, content.clone()));
                    self.append_cache(&hash, verdict, &content);
                    return Ok(JudgeOutcome {
                        verdict,
                        rationale: content,
                        from_cache: false,
                    });
                }
                Err(e) => {
                    log::warn!("judge call attempt {attempt} failed: {e}");
                    last_err = e;
                }
            }
        }
        // transport failures are not cached so a later run can retry
        Ok(JudgeOutcome {
            verdict: Verdict::Unparsed,
            rationale: format!("transport failure after retries: {last_err}"),
            from_cache: false,
        })
    }
}
