use std::path::Path;

use crate::error::{Result, ScriptError};
use crate::Language;

pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Brief,
    Script,
}

impl Stage {
    fn file_stem(self) -> &'static str {
        match self {
            Stage::Brief => "brief",
            Stage::Script => "script",
        }
    }

    /// Placeholder the stage's template expects.
    pub fn slot(self) -> &'static str {
        match self {
            Stage::Brief => "input",
            Stage::Script => "BRIEF",
        }
    }
}

/// Prompt templates, one per (stage, language).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub version: String,
    brief_en: String,
    brief_zh: String,
    script_en: String,
    script_zh: String,
}

impl Templates {
    pub fn bundled() -> Self {
        Self {
            version: TEMPLATE_VERSION.to_string(),
            brief_en: include_str!("../templates/v1/brief_en.md").to_string(),
            brief_zh: include_str!("../templates/v1/brief_zh.md").to_string(),
            script_en: include_str!("../templates/v1/script_en.md").to_string(),
            script_zh: include_str!("../templates/v1/script_zh.md").to_string(),
        }
    }

    /// Reads `brief_en.md`, `brief_zh.md`, `script_en.md`, `script_zh.md`
    /// from `dir`; the directory name is the version.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |stage: Stage, lang: Language| -> Result<String> {
            let p = dir.join(format!("{}_{}.md", stage.file_stem(), lang.code()));
            let text = std::fs::read_to_string(&p).map_err(|e| ScriptError::Template(format!("{}: {e}", p.display())))?;
            render(&text, &[(stage.slot(), "")])?;
            Ok(text)
        };
        Ok(Self {
            version: dir.file_name().map_or_else(|| "custom".into(), |n| n.to_string_lossy().into_owned()),
            brief_en: read(Stage::Brief, Language::En)?,
            brief_zh: read(Stage::Brief, Language::Zh)?,
            script_en: read(Stage::Script, Language::En)?,
            script_zh: read(Stage::Script, Language::Zh)?,
        })
    }

    pub fn get(&self, stage: Stage, lang: Language) -> &str {
        match (stage, lang) {
            (Stage::Brief, Language::En) => &self.brief_en,
            (Stage::Brief, Language::Zh) => &self.brief_zh,
            (Stage::Script, Language::En) => &self.script_en,
            (Stage::Script, Language::Zh) => &self.script_zh,
        }
    }

    pub fn prompt(&self, stage: Stage, lang: Language, value: &str) -> Result<String> {
        render(self.get(stage, lang), &[(stage.slot(), value)])
    }
}

/// Format-string substitution: `{{` and `}}` become literal braces and
/// `{name}` is replaced by its value. Substituted text is not re-scanned.
pub fn render(template: &str, vars: &[(&str, &str)]) -> Result<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(i) = rest.find(['{', '}']) {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        if let Some(after) = tail.strip_prefix("{{") {
            out.push('{');
            rest = after;
        } else if let Some(after) = tail.strip_prefix("}}") {
            out.push('}');
            rest = after;
        } else if tail.starts_with('}') {
            return Err(ScriptError::Template(format!("unmatched '}}' at byte {}", template.len() - tail.len())));
        } else {
            let close = tail.find('}').ok_or_else(|| ScriptError::Template("unclosed '{'".into()))?;
            let name = &tail[1..close];
            let value = vars
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| ScriptError::Template(format!("unknown placeholder {{{name}}}")))?;
            out.push_str(value);
            rest = &tail[close + 1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}
