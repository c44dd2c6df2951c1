use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Attempt, Result, ScriptError};
use crate::source::is_cjk;
use crate::Language;

/// Attempts per LLM call; retries resend the identical prompt.
pub const MAX_ATTEMPTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Default for CompletionParams {
    fn default() -> Self {
        Self { temperature: 0.7, max_tokens: 8192 }
    }
}

pub trait LlmClient {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String>;
}

/// Sends `prompt` up to [`MAX_ATTEMPTS`] times until `parse` accepts the
/// response. Transport errors abort immediately.
pub fn call_with_retries<T>(
    client: &dyn LlmClient,
    stage: &'static str,
    prompt: &str,
    params: &CompletionParams,
    mut parse: impl FnMut(&str) -> std::result::Result<T, String>,
) -> Result<T> {
    let mut attempts = Vec::new();
    for _ in 0..MAX_ATTEMPTS {
        let response = client.complete(prompt, params)?;
        match parse(&response) {
            Ok(v) => return Ok(v),
            Err(error) => attempts.push(Attempt { response, error }),
        }
    }
    Err(ScriptError::Unparseable { stage, attempts })
}

/// Lowercase hex SHA-256 of the prompt bytes.
pub fn prompt_hash(prompt: &str) -> String {
    Sha256::digest(prompt.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Chat-completions client. Endpoint, model and key come from
/// `DUOCAST_LLM_ENDPOINT`, `DUOCAST_LLM_MODEL`, `DUOCAST_LLM_API_KEY`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpLlm {
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpLlm {
    pub fn from_env() -> Result<Self> {
        let endpoint =
            std::env::var("DUOCAST_LLM_ENDPOINT").map_err(|_| ScriptError::InvalidInput("DUOCAST_LLM_ENDPOINT is not set".into()))?;
        Ok(Self {
            endpoint,
            model: std::env::var("DUOCAST_LLM_MODEL").unwrap_or_else(|_| "default".into()),
            api_key: std::env::var("DUOCAST_LLM_API_KEY").ok(),
            timeout: Duration::from_secs(300),
        })
    }
}

impl LlmClient for HttpLlm {
    fn complete(&self, prompt: &str, params: &CompletionParams) -> Result<String> {
        let url = format!("{}/chat/completions", self.endpoint.trim_end_matches('/'));
        let body = serde_json::json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into();
        let mut req = agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let transport = |e: &dyn std::fmt::Display| ScriptError::Transport(format!("{url}: {e}"));
        let mut resp = req.send(body.to_string()).map_err(|e| transport(&e))?;
        let text = resp.body_mut().read_to_string().map_err(|e| transport(&e))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| transport(&e))?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ScriptError::Transport(format!("{url}: response has no choices[0].message.content")))
    }
}

/// Offline responder. Lookup order: queued responses, recorded fixtures
/// keyed by [`prompt_hash`], then a template-driven generator seeded by
/// `seed` and the prompt hash. Every prompt is logged.
#[derive(Debug, Default)]
pub struct MockLlm {
    pub seed: u64,
    fixtures: HashMap<String, String>,
    queue: Mutex<VecDeque<String>>,
    log: Mutex<Vec<String>>,
}

impl MockLlm {
    pub fn new(seed: u64) -> Self {
        Self { seed, ..Default::default() }
    }

    /// Responses returned in order, before any other lookup.
    pub fn scripted(responses: impl IntoIterator<Item = String>) -> Self {
        Self { queue: Mutex::new(responses.into_iter().collect()), ..Default::default() }
    }

    pub fn with_fixture(mut self, prompt: &str, response: impl Into<String>) -> Self {
        self.fixtures.insert(prompt_hash(prompt), response.into());
        self
    }

    /// Loads a JSON object mapping prompt hashes to responses.
    pub fn load_fixtures(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let map: HashMap<String, String> =
            serde_json::from_str(&text).map_err(|e| ScriptError::InvalidInput(format!("fixture file: {e}")))?;
        self.fixtures.extend(map);
        Ok(self)
    }

    pub fn prompts(&self) -> Vec<String> {
        self.log.lock().expect("mock log").clone()
    }

    fn rng_for(&self, prompt: &str) -> ChaCha8Rng {
        let h = Sha256::digest(prompt.as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&h[..8]);
        ChaCha8Rng::seed_from_u64(self.seed ^ u64::from_le_bytes(b))
    }
}

impl LlmClient for MockLlm {
    fn complete(&self, prompt: &str, _params: &CompletionParams) -> Result<String> {
        self.log.lock().expect("mock log").push(prompt.to_string());
        if let Some(r) = self.queue.lock().expect("mock queue").pop_front() {
            return Ok(r);
        }
        if let Some(r) = self.fixtures.get(&prompt_hash(prompt)) {
            return Ok(r.clone());
        }
        let mut rng = self.rng_for(prompt);
        let (kind, lang) = classify_prompt(prompt)
            .ok_or_else(|| ScriptError::Transport(format!("mock has no response for prompt {}", prompt_hash(prompt))))?;
        let input = prompt_input(prompt, kind);
        Ok(match kind {
            PromptKind::Brief => mock_brief(&input, lang, &mut rng),
            PromptKind::Script => mock_script(&input, lang, &mut rng),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PromptKind {
    Brief,
    Script,
}

fn classify_prompt(prompt: &str) -> Option<(PromptKind, Language)> {
    let p = prompt.trim_start();
    if p.starts_with("### Task Description") {
        Some((PromptKind::Brief, Language::En))
    } else if p.starts_with("### 任务说明") {
        Some((PromptKind::Brief, Language::Zh))
    } else if p.starts_with("## 1. Task Overview") {
        Some((PromptKind::Script, Language::En))
    } else if p.starts_with("## 一、任务概述") {
        Some((PromptKind::Script, Language::Zh))
    } else {
        None
    }
}

/// Text substituted into the template's input slot.
fn prompt_input(prompt: &str, kind: PromptKind) -> String {
    let start = prompt.find("\nINPUT: ").map_or(0, |i| i + "\nINPUT: ".len());
    let rest = &prompt[start..];
    let end = match kind {
        PromptKind::Brief => rest.rfind("\n\nOUTPUT:"),
        PromptKind::Script => rest.rfind("\n## Re-emphasize:").or_else(|| rest.rfind("再次强调")),
    };
    rest[..end.unwrap_or(rest.len())].trim().to_string()
}

/// Sentences of `text`, markdown heading lines removed.
fn sentences(text: &str) -> Vec<String> {
    let body: String = text.lines().filter(|l| !l.trim_start().starts_with('#')).collect::<Vec<_>>().join(" ");
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in body.chars() {
        cur.push(c);
        if matches!(c, '.' | '?' | '!' | '。' | '？' | '！') {
            let s = cur.trim().to_string();
            if s.chars().any(char::is_alphanumeric) {
                out.push(s);
            }
            cur.clear();
        }
    }
    if cur.chars().any(char::is_alphanumeric) {
        out.push(cur.trim().to_string());
    }
    out
}

const PUNCT: [char; 6] = [',', '.', '?', '，', '。', '？'];

/// Rewrites `s` to use only the punctuation a script may contain.
fn sanitize(s: &str, lang: Language) -> String {
    let chars: Vec<char> = s.chars().collect();
    let mut out = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let between_letters = i > 0 && i + 1 < chars.len() && chars[i - 1].is_ascii_alphanumeric() && chars[i + 1].is_ascii_alphanumeric();
        let mapped = match lang {
            Language::En => match c {
                c if c.is_alphanumeric() && !is_cjk(c) => Some(c),
                ',' | '.' | '?' => Some(c),
                '!' | ';' => Some('.'),
                ':' => Some(','),
                '\'' | '-' if between_letters => Some(c),
                _ => Some(' '),
            },
            Language::Zh => match c {
                c if c.is_alphanumeric() => Some(c),
                '，' | '。' | '？' => Some(c),
                ',' | ';' | '；' | ':' | '：' | '、' => Some('，'),
                '.' | '!' | '！' => Some('。'),
                '?' => Some('？'),
                '\'' | '-' if between_letters => Some(c),
                c if c.is_whitespace() => Some(' '),
                _ => None,
            },
        };
        if let Some(m) = mapped {
            if PUNCT.contains(&m) {
                out.truncate(out.trim_end().len());
                if out.is_empty() || out.ends_with(PUNCT) {
                    continue;
                }
            }
            out.push(m);
        }
    }
    let mut out = out.split_whitespace().collect::<Vec<_>>().join(" ");
    while out.ends_with(PUNCT) {
        out.pop();
        out.truncate(out.trim_end().len());
    }
    if out.is_empty() {
        return out;
    }
    out.push(if lang == Language::En { '.' } else { '。' });
    out
}

fn clip_words(s: &str, max: usize) -> String {
    let words: Vec<&str> = s.split_whitespace().collect();
    if words.len() <= max {
        s.to_string()
    } else {
        words[..max].join(" ")
    }
}

fn mock_brief(input: &str, lang: Language, rng: &mut ChaCha8Rng) -> String {
    let mut s: Vec<String> = sentences(input).into_iter().map(|x| sanitize(&clip_words(&x, 40), lang)).filter(|x| !x.is_empty()).collect();
    if s.is_empty() {
        s.push(sanitize(&clip_words(input, 40), lang));
    }
    let titles = match lang {
        Language::En => crate::brief::SECTION_TITLES_EN,
        Language::Zh => crate::brief::SECTION_TITLES_ZH,
    };
    let explain = match lang {
        Language::En => "Terms that may be unfamiliar are explained in plain words.",
        Language::Zh => "文中可能让人困惑的术语都用通俗的话做了解释。",
    };
    let mut out = String::new();
    let mut next = rng.random_range(0..s.len());
    for title in titles {
        out.push_str(&format!("### {title}\n"));
        let n = rng.random_range(1..=2usize);
        let body: Vec<&str> = (0..n)
            .map(|_| {
                let x = s[next % s.len()].as_str();
                next += 1;
                x
            })
            .collect();
        out.push_str(&body.join(" "));
        out.push_str("\n\n");
        out.push_str(explain);
        out.push_str("\n\n");
    }
    out
}

const HOST_QUESTIONS_EN: [&str; 4] = [
    "So, um, what is the big idea there?",
    "Okay, and why does that matter, you know?",
    "Hmm, can you walk me through that a bit more?",
    "Right, so how does that actually work?",
];
const HOST_QUESTIONS_ZH: [&str; 4] =
    ["嗯，那这个具体是怎么回事呢？", "那为什么这个很重要呢？", "呃，你能再展开讲讲吗？", "所以它到底是怎么做到的呢？"];
const RESPONSES_EN: [&str; 4] = ["Right.", "Yeah.", "Okay.", "Mhm, exactly."];
const RESPONSES_ZH: [&str; 3] = ["嗯。", "是。", "对。"];

fn mock_script(brief: &str, lang: Language, rng: &mut ChaCha8Rng) -> String {
    let facts: Vec<String> = sentences(brief).into_iter().map(|x| sanitize(&clip_words(&x, 40), lang)).filter(|x| !x.is_empty()).collect();
    let topic = facts.first().cloned().unwrap_or_default();
    let mut turns: Vec<(&str, String)> = Vec::new();
    let welcome = match lang {
        Language::En => format!("Welcome back to the podcast, everyone. Today we are talking about this, {topic}"),
        Language::Zh => format!("欢迎收听今天的播客。今天我们来聊一聊这个，{topic}"),
    };
    let n_topics = rng.random_range(3..=5usize).min(facts.len().max(1));
    for i in 0..n_topics {
        let fact = facts.get(1 + i).or(facts.first()).cloned().unwrap_or_default();
        let (q, r) = match lang {
            Language::En => (*HOST_QUESTIONS_EN.choose(rng).expect("nonempty"), *RESPONSES_EN.choose(rng).expect("nonempty")),
            Language::Zh => (*HOST_QUESTIONS_ZH.choose(rng).expect("nonempty"), *RESPONSES_ZH.choose(rng).expect("nonempty")),
        };
        // The host's opening and first question form one turn so speakers strictly alternate.
        let question = if i == 0 { format!("{welcome}{}{q}", if lang == Language::En { " " } else { "" }) } else { q.to_string() };
        turns.push(("1", question));
        turns.push(("2", fact));
        if rng.random::<f64>() < 0.5 {
            turns.push(("1", r.to_string()));
            turns.push((
                "2",
                match lang {
                    Language::En => "And that is, you know, the core of it.".to_string(),
                    Language::Zh => "对，这就是它的核心。".to_string(),
                },
            ));
        }
    }
    turns.push((
        "1",
        match lang {
            Language::En => "That is a great place to wrap up. Thanks for listening, everyone.".to_string(),
            Language::Zh => "好，今天就聊到这里，感谢大家收听。".to_string(),
        },
    ));
    let json: Vec<serde_json::Value> = turns.iter().map(|(s, t)| serde_json::json!({ "speaker": s, "text": t })).collect();
    format!("```json\n{}\n```", serde_json::to_string_pretty(&json).expect("json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sanitize_en_and_zh() {
        assert_eq!(sanitize("Hello (world)! It's self-driving -- \"quoted\"...", Language::En), "Hello world. It's self-driving quoted.");
        assert_eq!(sanitize("你好！这是“引号”：测试……", Language::Zh), "你好。这是引号，测试。");
    }

    #[test]
    fn hash_is_sha256_hex() {
        assert_eq!(prompt_hash(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn unknown_prompt_is_a_transport_error() {
        assert!(matches!(MockLlm::new(0).complete("hello", &CompletionParams::default()), Err(ScriptError::Transport(_))));
    }

    #[test]
    fn retries_resend_identical_prompt() {
        let mock = MockLlm::scripted(["bad".to_string(), "worse".to_string(), "ok".to_string()]);
        let v = call_with_retries(&mock, "test", "P", &CompletionParams::default(), |r| {
            if r == "ok" {
                Ok(1)
            } else {
                Err(format!("rejected {r}"))
            }
        })
        .unwrap();
        assert_eq!(v, 1);
        assert_eq!(mock.prompts(), vec!["P", "P", "P"]);
    }

    #[test]
    fn retries_give_up_with_transcripts() {
        let mock = MockLlm::scripted((0..5).map(|i| format!("r{i}")));
        let err = call_with_retries(&mock, "test", "P", &CompletionParams::default(), |_| Err::<(), _>("no".to_string())).unwrap_err();
        match err {
            ScriptError::Unparseable { attempts, .. } => {
                assert_eq!(attempts.iter().map(|a| a.response.as_str()).collect::<Vec<_>>(), ["r0", "r1", "r2"]);
            }
            e => panic!("{e}"),
        }
    }
}
