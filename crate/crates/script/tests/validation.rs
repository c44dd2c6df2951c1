use duocast_script::*;
use proptest::prelude::*;

fn mutate(script: &ScriptJson, turn: usize, suffix: &str) -> ScriptJson {
    let mut s = script.clone();
    s.turns[turn].text.push_str(suffix);
    s
}

#[test]
fn bundled_examples_pass() {
    for lang in [Language::En, Language::Zh] {
        let s = bundled_example(lang);
        let r = validate_script(&s);
        assert!(r.pass, "{lang}: {:?}", r.violations);
    }
    assert_eq!(bundled_example(Language::En).turns.len(), 16);
    assert_eq!(bundled_example(Language::Zh).turns.len(), 22);
}

#[test]
fn forbidden_punctuation_mutations_fail_with_their_rule() {
    let cases: &[(&str, Rule)] = &[
        ("!", Rule::PunctExclaim),
        ("！", Rule::PunctExclaim),
        ("…", Rule::PunctEllipsis),
        ("(", Rule::PunctParen),
        (")", Rule::PunctParen),
        ("（", Rule::PunctParen),
        ("\"", Rule::PunctQuote),
        ("'", Rule::PunctQuote),
        ("‘", Rule::PunctQuote),
        ("’", Rule::PunctQuote),
        ("“", Rule::PunctQuote),
        ("”", Rule::PunctQuote),
        ("-", Rule::PunctDash),
        ("—", Rule::PunctDash),
        ("–", Rule::PunctDash),
    ];
    for lang in [Language::En, Language::Zh] {
        let base = bundled_example(lang);
        for turn in [0, base.turns.len() / 2, base.turns.len() - 1] {
            for (ch, rule) in cases {
                let r = validate_script(&mutate(&base, turn, ch));
                assert!(!r.pass);
                assert_eq!(r.rules(), vec![*rule], "{lang} turn {turn} {ch:?}");
                assert_eq!(r.violations[0].turn, Some(turn));
            }
        }
    }
}

#[test]
fn sixty_one_turns_fail_turns_max_only() {
    let turns: Vec<ScriptLine> =
        (0..61).map(|i| ScriptLine { speaker: if i % 2 == 0 { "1" } else { "2" }.into(), text: "ok.".into() }).collect();
    let r = validate_script(&ScriptJson { turns: turns.clone(), language: Language::En });
    assert_eq!(r.rules(), vec![Rule::TurnsMax]);
    let sixty = ScriptJson { turns: turns[..59].to_vec(), language: Language::En };
    assert!(validate_script(&sixty).pass);
}

proptest! {
    #[test]
    fn pass_iff_no_violations(texts in prop::collection::vec("[a-z ,.?!'()\\-]{0,20}", 0..70), open in prop::bool::ANY) {
        let turns: Vec<ScriptLine> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| ScriptLine { speaker: if (i % 2 == 0) == open { "1" } else { "2" }.into(), text: t.clone() })
            .collect();
        let s = ScriptJson { turns, language: Language::En };
        let r = validate_script(&s);
        prop_assert_eq!(r.pass, r.violations.is_empty());
        prop_assert_eq!(r, validate_script(&s));
    }
}
