//! Document → briefing document → two-speaker JSON script, with strict
//! validation of the script's punctuation, length and speaker rules.
//!
//! LLM access goes through [`LlmClient`]. [`MockLlm`] answers offline and
//! deterministically; [`HttpLlm`] speaks a chat-completions HTTP API.

mod brief;
mod error;
mod examples;
mod llm;
mod script;
mod source;
mod template;
mod validate;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use brief::{generate_brief, parse_brief, Brief, SECTION_TITLES_EN, SECTION_TITLES_ZH};
pub use error::{Attempt, Result, ScriptError};
pub use examples::bundled_example;
pub use llm::{call_with_retries, prompt_hash, CompletionParams, HttpLlm, LlmClient, MockLlm, MAX_ATTEMPTS};
pub use script::{extract_json_array, generate_script, normalize_script, normalized_texts, parse_script, ScriptJson, ScriptLine};
pub use source::{detect_language, extract_html_text, load_source, normalize_whitespace, KnowledgeSource, SourceKind, SourceSpec};
pub use template::{render, Stage, Templates, TEMPLATE_VERSION};
pub use validate::{validate_script, Rule, ValidationReport, Violation, MAX_TOTAL_LENGTH, MAX_TURNS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Zh,
}

impl Language {
    pub fn code(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Zh => "zh",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Language {
    type Err = ScriptError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "en" | "english" => Ok(Language::En),
            "zh" | "chinese" => Ok(Language::Zh),
            _ => Err(ScriptError::InvalidInput(format!("unknown language {s:?} (expected en or zh)"))),
        }
    }
}
