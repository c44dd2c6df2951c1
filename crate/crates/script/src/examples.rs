use crate::script::ScriptJson;
use crate::Language;

/// The bundled reference dialogues that the script rules are written for.
/// The Chinese one is stored with speakers "1"/"2" and valid JSON.
pub fn bundled_example(language: Language) -> ScriptJson {
    let text = match language {
        Language::En => include_str!("../data/example_en.json"),
        Language::Zh => include_str!("../data/example_zh.json"),
    };
    ScriptJson::from_json(text, language).expect("bundled example parses")
}
