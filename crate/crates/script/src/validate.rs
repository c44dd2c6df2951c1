use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::script::ScriptJson;
use crate::Language;

pub const MAX_TURNS: usize = 60;
/// Whitespace-delimited words for English, non-whitespace characters for Chinese.
pub const MAX_TOTAL_LENGTH: usize = 3000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Rule {
    PunctExclaim,
    PunctEllipsis,
    PunctParen,
    PunctQuote,
    PunctDash,
    PunctOther,
    TurnsMax,
    LengthMax,
    HostOpens,
    HostCloses,
    SpeakerInvalid,
    EmptyText,
    EmptyScript,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::PunctExclaim => "PUNCT_EXCLAIM",
            Rule::PunctEllipsis => "PUNCT_ELLIPSIS",
            Rule::PunctParen => "PUNCT_PAREN",
            Rule::PunctQuote => "PUNCT_QUOTE",
            Rule::PunctDash => "PUNCT_DASH",
            Rule::PunctOther => "PUNCT_OTHER",
            Rule::TurnsMax => "TURNS_MAX",
            Rule::LengthMax => "LENGTH_MAX",
            Rule::HostOpens => "HOST_OPENS",
            Rule::HostCloses => "HOST_CLOSES",
            Rule::SpeakerInvalid => "SPEAKER_INVALID",
            Rule::EmptyText => "EMPTY_TEXT",
            Rule::EmptyScript => "EMPTY_SCRIPT",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: Rule,
    /// `None` for whole-script rules.
    pub turn: Option<usize>,
    pub detail: String,
}

/// `pass` holds exactly when `violations` is empty. Warnings never fail a script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub pass: bool,
    pub violations: Vec<Violation>,
    pub warnings: Vec<Violation>,
}

impl ValidationReport {
    pub fn rules(&self) -> Vec<Rule> {
        let mut r: Vec<Rule> = self.violations.iter().map(|v| v.rule).collect();
        r.sort();
        r.dedup();
        r
    }
}

fn classify(chars: &[char], i: usize, lang: Language) -> Option<Rule> {
    let c = chars[i];
    if c.is_alphanumeric() || c.is_whitespace() {
        return None;
    }
    let letter = |j: Option<usize>| j.and_then(|j| chars.get(j)).is_some_and(|c| c.is_ascii_alphabetic());
    let alnum = |j: Option<usize>| j.and_then(|j| chars.get(j)).is_some_and(|c| c.is_ascii_alphanumeric());
    let (prev, next) = (i.checked_sub(1), Some(i + 1));
    match c {
        '!' | '！' | '¡' => Some(Rule::PunctExclaim),
        '…' | '⋯' => Some(Rule::PunctEllipsis),
        '.' | '。' if chars.get(i + 1) == Some(&c) || prev.is_some_and(|p| chars[p] == c) => Some(Rule::PunctEllipsis),
        '(' | ')' | '（' | '）' | '[' | ']' | '［' | '］' | '{' | '}' | '【' | '】' | '〔' | '〕' => Some(Rule::PunctParen),
        '\'' | '’' if letter(prev) && letter(next) => None,
        '"' | '\'' | '‘' | '’' | '“' | '”' | '「' | '」' | '『' | '』' | '`' | '＂' | '＇' | '«' | '»' => {
            Some(Rule::PunctQuote)
        }
        '-' if alnum(prev) && alnum(next) => None,
        '-' | '‐' | '‑' | '‒' | '–' | '—' | '―' | '−' | '－' | '～' | '~' => Some(Rule::PunctDash),
        _ => {
            let allowed: &[char] = match lang {
                Language::En => &[',', '.', '?'],
                Language::Zh => &['，', '。', '？', '、'],
            };
            (!allowed.contains(&c)).then_some(Rule::PunctOther)
        }
    }
}

fn text_length(text: &str, lang: Language) -> usize {
    match lang {
        Language::En => text.split_whitespace().count(),
        Language::Zh => text.chars().filter(|c| !c.is_whitespace()).count(),
    }
}

/// Checks every rule and reports all violations. Pure and total.
pub fn validate_script(script: &ScriptJson) -> ValidationReport {
    let lang = script.language;
    let mut violations = Vec::new();
    let mut warnings = Vec::new();
    let whole = |rule, detail: String| Violation { rule, turn: None, detail };
    if script.turns.is_empty() {
        violations.push(whole(Rule::EmptyScript, "script has no turns".into()));
    }
    if script.turns.len() > MAX_TURNS {
        violations.push(whole(Rule::TurnsMax, format!("{} turns exceed {MAX_TURNS}", script.turns.len())));
    }
    let total: usize = script.turns.iter().map(|t| text_length(&t.text, lang)).sum();
    if total > MAX_TOTAL_LENGTH {
        let unit = if lang == Language::En { "words" } else { "characters" };
        violations.push(whole(Rule::LengthMax, format!("{total} {unit} exceed {MAX_TOTAL_LENGTH}")));
    }
    if let Some(first) = script.turns.first() {
        if first.speaker != "1" {
            violations.push(Violation { rule: Rule::HostOpens, turn: Some(0), detail: format!("opened by speaker {:?}", first.speaker) });
        }
    }
    if let Some(last) = script.turns.last() {
        if last.speaker != "1" {
            let turn = Some(script.turns.len() - 1);
            warnings.push(Violation { rule: Rule::HostCloses, turn, detail: format!("closed by speaker {:?}", last.speaker) });
        }
    }
    for (i, t) in script.turns.iter().enumerate() {
        if t.speaker != "1" && t.speaker != "2" {
            violations.push(Violation { rule: Rule::SpeakerInvalid, turn: Some(i), detail: format!("speaker {:?}", t.speaker) });
        }
        if t.text.trim().is_empty() {
            violations.push(Violation { rule: Rule::EmptyText, turn: Some(i), detail: "empty text".into() });
            continue;
        }
        let chars: Vec<char> = t.text.chars().collect();
        let mut found: BTreeMap<Rule, Vec<String>> = BTreeMap::new();
        for j in 0..chars.len() {
            if let Some(rule) = classify(&chars, j, lang) {
                found.entry(rule).or_default().push(format!("{:?}@{j}", chars[j]));
            }
        }
        for (rule, hits) in found {
            violations.push(Violation { rule, turn: Some(i), detail: hits.join(" ") });
        }
    }
    ValidationReport { pass: violations.is_empty(), violations, warnings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::script::ScriptLine;

    fn one(text: &str, lang: Language) -> ScriptJson {
        ScriptJson { turns: vec![ScriptLine { speaker: "1".into(), text: text.into() }], language: lang }
    }

    fn rules(text: &str, lang: Language) -> Vec<Rule> {
        validate_script(&one(text, lang)).rules()
    }

    #[test]
    fn punctuation_rules() {
        assert_eq!(rules("Hello, world. Right?", Language::En), vec![]);
        assert_eq!(rules("Wow!", Language::En), vec![Rule::PunctExclaim]);
        assert_eq!(rules("Well...", Language::En), vec![Rule::PunctEllipsis]);
        assert_eq!(rules("Well…", Language::En), vec![Rule::PunctEllipsis]);
        assert_eq!(rules("a (b)", Language::En), vec![Rule::PunctParen]);
        assert_eq!(rules("it's fine", Language::En), vec![]);
        assert_eq!(rules("say 'hi'", Language::En), vec![Rule::PunctQuote]);
        assert_eq!(rules("self-driving", Language::En), vec![]);
        assert_eq!(rules("wait - what", Language::En), vec![Rule::PunctDash]);
        assert_eq!(rules("a — b", Language::En), vec![Rule::PunctDash]);
        assert_eq!(rules("note: this", Language::En), vec![Rule::PunctOther]);
        assert_eq!(rules("你好，世界。", Language::En), vec![Rule::PunctOther]);
        assert_eq!(rules("你好，十三、十四。对吗？", Language::Zh), vec![]);
        assert_eq!(rules("你好, 世界.", Language::Zh), vec![Rule::PunctOther]);
        assert_eq!(rules("好！", Language::Zh), vec![Rule::PunctExclaim]);
        assert_eq!(rules("好——", Language::Zh), vec![Rule::PunctDash]);
        assert_eq!(rules("“好”", Language::Zh), vec![Rule::PunctQuote]);
        assert_eq!(rules("好。。。", Language::Zh), vec![Rule::PunctEllipsis]);
        assert_eq!(rules("（好）", Language::Zh), vec![Rule::PunctParen]);
    }

    #[test]
    fn structural_rules() {
        let mut s = one("ok.", Language::En);
        s.turns.push(ScriptLine { speaker: "2".into(), text: "ok.".into() });
        let r = validate_script(&s);
        assert!(r.pass);
        assert_eq!(r.warnings[0].rule, Rule::HostCloses);

        s.turns[0].speaker = "2".into();
        s.turns[1].speaker = "3".into();
        s.turns[1].text = "  ".into();
        assert_eq!(validate_script(&s).rules(), vec![Rule::HostOpens, Rule::SpeakerInvalid, Rule::EmptyText]);

        let empty = ScriptJson { turns: vec![], language: Language::Zh };
        assert_eq!(validate_script(&empty).rules(), vec![Rule::EmptyScript]);
    }

    #[test]
    fn length_limits() {
        let words = vec!["word"; MAX_TOTAL_LENGTH].join(" ");
        assert!(validate_script(&one(&words, Language::En)).pass);
        assert_eq!(rules(&format!("{words} more"), Language::En), vec![Rule::LengthMax]);
        let chars = "字".repeat(MAX_TOTAL_LENGTH);
        assert!(validate_script(&one(&chars, Language::Zh)).pass);
        assert_eq!(rules(&format!("{chars}字"), Language::Zh), vec![Rule::LengthMax]);
    }

    #[test]
    fn every_violation_is_listed() {
        let r = validate_script(&one("Wow! (yes) ... and — more!", Language::En));
        assert!(!r.pass);
        assert_eq!(r.rules(), vec![Rule::PunctExclaim, Rule::PunctEllipsis, Rule::PunctParen, Rule::PunctDash]);
        let exclaim = r.violations.iter().find(|v| v.rule == Rule::PunctExclaim).unwrap();
        assert_eq!(exclaim.detail.matches('!').count(), 2);
    }
}
