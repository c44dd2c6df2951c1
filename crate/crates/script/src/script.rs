use duocast_core::sequence::{merge_adjacent_turns, ScriptTurn};
use duocast_core::tokenizer::TextTokenizer;
use serde::{Deserialize, Serialize};

use crate::brief::Brief;
use crate::error::{Result, ScriptError};
use crate::llm::{call_with_retries, CompletionParams, LlmClient};
use crate::template::{Stage, Templates};
use crate::Language;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptLine {
    pub speaker: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptJson {
    pub turns: Vec<ScriptLine>,
    pub language: Language,
}

impl ScriptJson {
    /// The array-of-objects file form.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.turns).expect("script lines serialize")
    }

    pub fn from_json(text: &str, language: Language) -> std::result::Result<Self, String> {
        let turns: Vec<ScriptLine> = serde_json::from_str(text).map_err(|e| format!("script JSON: {e}"))?;
        Ok(Self { turns, language })
    }
}

/// The first balanced `[...]` in `text`, ignoring brackets inside JSON strings.
pub fn extract_json_array(text: &str) -> Option<&str> {
    let start = text.find('[')?;
    let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
    for (i, c) in text[start..].char_indices() {
        if in_str {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_str = true,
            '[' => depth += 1,
            ']' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Strips the reply to its first JSON array and parses it. Validation is separate.
pub fn parse_script(response: &str, language: Language) -> std::result::Result<ScriptJson, String> {
    let array = extract_json_array(response).ok_or("no JSON array in response")?;
    ScriptJson::from_json(array, language)
}

pub fn generate_script(client: &dyn LlmClient, templates: &Templates, brief: &Brief) -> Result<ScriptJson> {
    let prompt = templates.prompt(Stage::Script, brief.language, &brief.to_text())?;
    call_with_retries(client, "script", &prompt, &CompletionParams::default(), |r| parse_script(r, brief.language))
}

fn speaker_id(label: &str) -> Result<u8> {
    match label {
        "1" => Ok(1),
        "2" => Ok(2),
        _ => Err(ScriptError::UnknownSpeaker(label.to_string())),
    }
}

/// Speaker ids and texts after merging consecutive same-speaker lines.
/// English texts are joined with a space, Chinese texts directly.
pub fn normalized_texts(script: &ScriptJson) -> Result<Vec<(u8, String)>> {
    let sep = if script.language == Language::En { " " } else { "" };
    let mut out: Vec<(u8, String)> = Vec::new();
    for line in &script.turns {
        let id = speaker_id(&line.speaker)?;
        match out.last_mut() {
            Some((s, text)) if *s == id => {
                text.push_str(sep);
                text.push_str(line.text.trim());
            }
            _ => out.push((id, line.text.trim().to_string())),
        }
    }
    Ok(out)
}

/// Maps speakers "1"/"2" to 1/2, tokenizes, and merges consecutive
/// same-speaker lines through the sequence builder's merge.
pub fn normalize_script(script: &ScriptJson, tok: &TextTokenizer) -> Result<Vec<ScriptTurn>> {
    let sep = if script.language == Language::En { " " } else { "" };
    let ids: Vec<u8> = script.turns.iter().map(|l| speaker_id(&l.speaker)).collect::<Result<_>>()?;
    let turns: Vec<ScriptTurn> = script
        .turns
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut text = l.text.trim().to_string();
            if ids.get(i + 1) == Some(&ids[i]) {
                text.push_str(sep);
            }
            ScriptTurn { speaker: ids[i], text: tok.encode(&text), codes: None }
        })
        .collect();
    Ok(merge_adjacent_turns(&turns)?)
}
