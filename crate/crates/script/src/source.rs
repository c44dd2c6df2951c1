use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Result, ScriptError};
use crate::Language;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    PlainText,
    /// Text already extracted from a PDF.
    PdfText,
    Url,
}

/// What to load and, optionally, the language to force.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpec {
    pub kind: SourceKind,
    pub location: String,
    pub language: Option<Language>,
}

impl SourceSpec {
    /// `http(s)://` locations are URLs; anything else is a text file.
    pub fn infer(location: &str) -> Self {
        let kind =
            if location.starts_with("http://") || location.starts_with("https://") { SourceKind::Url } else { SourceKind::PlainText };
        Self { kind, location: location.to_string(), language: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSource {
    pub kind: SourceKind,
    pub resolved_text: String,
    pub language: Language,
    pub origin: String,
}

pub fn load_source(spec: &SourceSpec) -> Result<KnowledgeSource> {
    let raw = match spec.kind {
        SourceKind::PlainText | SourceKind::PdfText => read_text_file(Path::new(&spec.location))?,
        SourceKind::Url => fetch_url(&spec.location)?,
    };
    let resolved_text = normalize_whitespace(&raw);
    if resolved_text.is_empty() {
        return Err(ScriptError::EmptyDocument(spec.location.clone()));
    }
    let language = spec.language.unwrap_or_else(|| detect_language(&resolved_text));
    Ok(KnowledgeSource { kind: spec.kind, resolved_text, language, origin: spec.location.clone() })
}

fn read_text_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(ScriptError::NotFound(path.display().to_string()));
    }
    let bytes = std::fs::read(path)?;
    String::from_utf8(bytes)
        .map_err(|_| ScriptError::InvalidInput(format!("{} is not UTF-8 text; extract PDF text before loading", path.display())))
}

fn fetch_url(url: &str) -> Result<String> {
    let unreachable = |detail: String| ScriptError::Unreachable { url: url.to_string(), detail };
    let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(30))).build().into();
    let mut resp = agent.get(url).call().map_err(|e| unreachable(e.to_string()))?;
    let is_html = resp.headers().get("content-type").and_then(|v| v.to_str().ok()).is_some_and(|v| v.contains("html"));
    let body = resp.body_mut().read_to_string().map_err(|e| unreachable(e.to_string()))?;
    let looks_html = body.trim_start().starts_with('<');
    Ok(if is_html || looks_html { extract_html_text(&body) } else { body })
}

pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Chinese when CJK ideographs make up at least 30% of letters and ideographs.
pub fn detect_language(text: &str) -> Language {
    let (mut cjk, mut latin) = (0usize, 0usize);
    for c in text.chars() {
        if is_cjk(c) {
            cjk += 1;
        } else if c.is_alphabetic() {
            latin += 1;
        }
    }
    if cjk > 0 && cjk * 10 >= (cjk + latin) * 3 {
        Language::Zh
    } else {
        Language::En
    }
}

pub(crate) fn is_cjk(c: char) -> bool {
    matches!(c as u32, 0x3400..=0x4DBF | 0x4E00..=0x9FFF | 0xF900..=0xFAFF | 0x20000..=0x2FA1F)
}

const DROPPED_ELEMENTS: [&str; 5] = ["script", "style", "noscript", "template", "head"];

/// Visible body text of an HTML document: comments and non-content
/// elements dropped, tags replaced by spaces, entities decoded, whitespace collapsed.
pub fn extract_html_text(html: &str) -> String {
    let lower = html.to_ascii_lowercase();
    let body = match lower.find("<body") {
        Some(open) => {
            let start = lower[open..].find('>').map_or(html.len(), |e| open + e + 1);
            let end = lower[start..].find("</body").map_or(html.len(), |e| start + e);
            (start, end)
        }
        None => (0, html.len()),
    };
    let (src, src_lower) = (&html[body.0..body.1], &lower[body.0..body.1]);
    let mut text = String::with_capacity(src.len());
    let mut i = 0;
    while i < src.len() {
        let rest = &src_lower[i..];
        if rest.starts_with("<!--") {
            i += rest.find("-->").map_or(rest.len(), |e| e + 3);
            continue;
        }
        if rest.starts_with('<') {
            let dropped = DROPPED_ELEMENTS
                .iter()
                .find(|name| rest[1..].starts_with(*name) && rest[1 + name.len()..].starts_with(|c: char| c == '>' || c.is_whitespace()));
            if let Some(name) = dropped {
                let close = format!("</{name}");
                i += rest.find(&close).map_or(rest.len(), |e| e + rest[e..].find('>').map_or(rest.len() - e, |g| g + 1));
            } else {
                i += rest.find('>').map_or(rest.len(), |e| e + 1);
            }
            text.push(' ');
            continue;
        }
        let next = rest.find('<').unwrap_or(rest.len());
        text.push_str(&src[i..i + next]);
        i += next;
    }
    normalize_whitespace(&html_escape::decode_html_entities(&text))
}
