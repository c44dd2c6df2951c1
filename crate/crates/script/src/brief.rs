use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::llm::{call_with_retries, CompletionParams, LlmClient};
use crate::source::KnowledgeSource;
use crate::template::{Stage, Templates};
use crate::Language;

pub const SECTION_TITLES_EN: [&str; 5] = ["Title and Author", "Abstract", "Main Themes and Concepts", "Key Citations", "Conclusion"];
pub const SECTION_TITLES_ZH: [&str; 5] = ["标题和作者", "摘要", "主要主题和概念", "重要引文", "总结"];

/// Five-section briefing document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Brief {
    pub title_authors: String,
    pub abstract_text: String,
    pub themes: String,
    pub key_citations: String,
    pub conclusion: String,
    pub language: Language,
}

impl Brief {
    pub fn sections(&self) -> [&str; 5] {
        [&self.title_authors, &self.abstract_text, &self.themes, &self.key_citations, &self.conclusion]
    }

    /// Markdown rendering with `###` headings in the brief's language.
    pub fn to_text(&self) -> String {
        let titles = match self.language {
            Language::En => SECTION_TITLES_EN,
            Language::Zh => SECTION_TITLES_ZH,
        };
        titles.iter().zip(self.sections()).map(|(t, body)| format!("### {t}\n{body}\n")).collect::<Vec<_>>().join("\n")
    }
}

fn section_index(heading: &str) -> Option<usize> {
    let h = heading.trim().trim_matches('*').trim().trim_end_matches([':', '：']).trim();
    SECTION_TITLES_EN.iter().position(|t| t.eq_ignore_ascii_case(h)).or_else(|| SECTION_TITLES_ZH.iter().position(|t| *t == h))
}

/// Splits `text` at markdown headings naming the five sections (either
/// language). Text under other headings stays with the current section.
pub fn parse_brief(text: &str, language: Language) -> std::result::Result<Brief, String> {
    let mut bodies: [Option<Vec<&str>>; 5] = Default::default();
    let mut current: Option<usize> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        if trimmed.starts_with('#') {
            if let Some(i) = section_index(trimmed.trim_start_matches('#')) {
                if bodies[i].is_some() {
                    return Err(format!("section {:?} appears twice", SECTION_TITLES_EN[i]));
                }
                bodies[i] = Some(Vec::new());
                current = Some(i);
                continue;
            }
        }
        if let Some(i) = current {
            bodies[i].as_mut().expect("opened").push(line);
        }
    }
    let mut out: Vec<String> = Vec::with_capacity(5);
    for (i, b) in bodies.into_iter().enumerate() {
        let body = b.map(|lines| lines.join("\n").trim().to_string()).unwrap_or_default();
        if body.is_empty() {
            return Err(format!("section {:?} is missing or empty", SECTION_TITLES_EN[i]));
        }
        out.push(body);
    }
    let [title_authors, abstract_text, themes, key_citations, conclusion]: [String; 5] = out.try_into().expect("five sections");
    Ok(Brief { title_authors, abstract_text, themes, key_citations, conclusion, language })
}

/// Fills the brief template for the source's language and parses the reply.
pub fn generate_brief(client: &dyn LlmClient, templates: &Templates, source: &KnowledgeSource) -> Result<Brief> {
    let prompt = templates.prompt(Stage::Brief, source.language, &source.resolved_text)?;
    call_with_retries(client, "brief", &prompt, &CompletionParams::default(), |r| parse_brief(r, source.language))
}

#[cfg(test)]
mod tests {
    use super::*;

    const WELL_FORMED: &str = "### Title and Author\nA study by someone.\n\n### Abstract\nIt does things.\n\nExplanation paragraph.\n\
        ### Main Themes and Concepts\n#### What\nA problem.\n### Key Citations\nArgument, evidence.\n### Conclusion\nIt works.\n";

    #[test]
    fn parses_five_sections() {
        let b = parse_brief(WELL_FORMED, Language::En).unwrap();
        assert_eq!(b.title_authors, "A study by someone.");
        assert_eq!(b.abstract_text, "It does things.\n\nExplanation paragraph.");
        assert_eq!(b.themes, "#### What\nA problem.");
        assert_eq!(parse_brief(&b.to_text(), Language::En).unwrap(), b);
    }

    #[test]
    fn rejects_missing_or_duplicate_sections() {
        let four = WELL_FORMED.replace("### Conclusion\nIt works.\n", "");
        assert!(parse_brief(&four, Language::En).unwrap_err().contains("Conclusion"));
        let dup = format!("{WELL_FORMED}### Abstract\nagain\n");
        assert!(parse_brief(&dup, Language::En).is_err());
        let empty = WELL_FORMED.replace("It works.", "");
        assert!(parse_brief(&empty, Language::En).is_err());
    }

    #[test]
    fn chinese_headings() {
        let text = "### 标题和作者\n甲\n### 摘要\n乙\n### 主要主题和概念\n丙\n### 重要引文\n丁\n### 总结\n戊\n";
        let b = parse_brief(text, Language::Zh).unwrap();
        assert_eq!(b.sections(), ["甲", "乙", "丙", "丁", "戊"]);
        assert_eq!(parse_brief(&b.to_text(), Language::Zh).unwrap(), b);
    }
}
