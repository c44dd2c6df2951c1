use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;

use duocast_script::*;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Serves `body` with `content_type` to the next `n` requests; returns the base URL
/// and a handle yielding the request bodies received.
fn serve(body: String, content_type: &'static str, n: usize) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for stream in listener.incoming().take(n) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" || line.is_empty() {
                    break;
                }
            }
            let mut req = vec![0u8; len];
            reader.read_exact(&mut req).unwrap();
            bodies.push(String::from_utf8(req).unwrap());
            let head =
                format!("HTTP/1.1 200 OK\r\nContent-Type: {content_type}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n", body.len());
            stream.write_all(head.as_bytes()).unwrap();
            stream.write_all(body.as_bytes()).unwrap();
        }
        bodies
    });
    (url, handle)
}

#[test]
fn plain_text_source_is_kept() {
    let path = fixture("notes.txt");
    let src = load_source(&SourceSpec::infer(path.to_str().unwrap())).unwrap();
    assert_eq!(src.kind, SourceKind::PlainText);
    assert_eq!(src.resolved_text, std::fs::read_to_string(&path).unwrap().trim());
    assert_eq!(src.language, Language::En);
}

#[test]
fn empty_and_missing_sources_fail() {
    for name in ["empty.txt", "blank.txt"] {
        let spec = SourceSpec::infer(fixture(name).to_str().unwrap());
        assert!(matches!(load_source(&spec), Err(ScriptError::EmptyDocument(_))));
    }
    let missing = SourceSpec::infer(fixture("nope.txt").to_str().unwrap());
    assert!(matches!(load_source(&missing), Err(ScriptError::NotFound(_))));
}

#[test]
fn forced_language_wins() {
    let mut spec = SourceSpec::infer(fixture("notes.txt").to_str().unwrap());
    spec.language = Some(Language::Zh);
    spec.kind = SourceKind::PdfText;
    let src = load_source(&spec).unwrap();
    assert_eq!((src.language, src.kind), (Language::Zh, SourceKind::PdfText));
}

#[test]
fn served_html_matches_golden() {
    let html = std::fs::read_to_string(fixture("article.html")).unwrap();
    let (url, server) = serve(html, "text/html; charset=utf-8", 1);
    let src = load_source(&SourceSpec::infer(&format!("{url}/article"))).unwrap();
    server.join().unwrap();
    assert_eq!(src.kind, SourceKind::Url);
    assert_eq!(src.resolved_text, std::fs::read_to_string(fixture("article.golden.txt")).unwrap());
}

#[test]
fn unreachable_url_fails() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let spec = SourceSpec::infer(&format!("http://127.0.0.1:{port}/gone"));
    assert!(matches!(load_source(&spec), Err(ScriptError::Unreachable { .. })));
}

#[test]
fn brief_prompt_is_template_with_input_substituted() {
    let templates = Templates::bundled();
    for (lang, file) in [(Language::En, "brief_en.md"), (Language::Zh, "brief_zh.md")] {
        let source = KnowledgeSource {
            kind: SourceKind::PlainText,
            resolved_text: "Doc text with {braces} and {{doubles}}.".into(),
            language: lang,
            origin: "test".into(),
        };
        let mock = MockLlm::new(0);
        generate_brief(&mock, &templates, &source).unwrap();
        let raw = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("templates/v1").join(file)).unwrap();
        let (head, tail) = raw.split_once("{input}").unwrap();
        let expected = format!("{head}{}{tail}", source.resolved_text);
        assert_eq!(mock.prompts(), vec![expected]);
    }
}

#[test]
fn script_prompt_substitutes_brief_and_unescapes_braces() {
    let templates = Templates::bundled();
    let raw = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("templates/v1/script_en.md")).unwrap();
    let brief = parse_brief(
        "### Title and Author\nA.\n### Abstract\nB.\n### Main Themes and Concepts\nC.\n### Key Citations\nD.\n### Conclusion\nE.\n",
        Language::En,
    )
    .unwrap();
    let mock = MockLlm::new(0);
    generate_script(&mock, &templates, &brief).unwrap();
    let expected = raw.replace("{{", "{").replace("}}", "}").replace("{BRIEF}", &brief.to_text());
    assert_eq!(mock.prompts(), vec![expected]);
}

#[test]
fn four_section_brief_is_retried_then_reported() {
    let four = "### Title and Author\nA.\n### Abstract\nB.\n### Main Themes and Concepts\nC.\n### Key Citations\nD.\n";
    let mock = MockLlm::scripted(std::iter::repeat_n(four.to_string(), 3));
    let src = load_source(&SourceSpec::infer(fixture("notes.txt").to_str().unwrap())).unwrap();
    match generate_brief(&mock, &Templates::bundled(), &src) {
        Err(ScriptError::Unparseable { stage: "brief", attempts }) => {
            assert_eq!(attempts.len(), MAX_ATTEMPTS);
            assert!(attempts[0].error.contains("Conclusion"));
        }
        other => panic!("{other:?}"),
    }
    let prompts = mock.prompts();
    assert_eq!(prompts.len(), 3);
    assert!(prompts.iter().all(|p| p == &prompts[0]));
}

#[test]
fn brief_recovers_on_second_attempt() {
    let good = "### Title and Author\nA.\n### Abstract\nB.\n### Main Themes and Concepts\nC.\n### Key Citations\nD.\n### Conclusion\nE.\n";
    let mock = MockLlm::scripted(["garbage".to_string(), good.to_string()]);
    let src = load_source(&SourceSpec::infer(fixture("notes.txt").to_str().unwrap())).unwrap();
    let brief = generate_brief(&mock, &Templates::bundled(), &src).unwrap();
    assert_eq!(brief.conclusion, "E.");
    assert_eq!(mock.prompts().len(), 2);
}

fn dummy_brief() -> Brief {
    parse_brief(
        "### Title and Author\nA.\n### Abstract\nB.\n### Main Themes and Concepts\nC.\n### Key Citations\nD.\n### Conclusion\nE.\n",
        Language::En,
    )
    .unwrap()
}

#[test]
fn example_dialogue_response_parses_to_sixteen_turns() {
    let example = bundled_example(Language::En);
    let mock = MockLlm::scripted([format!("```json\n{}\n```", example.to_json())]);
    let script = generate_script(&mock, &Templates::bundled(), &dummy_brief()).unwrap();
    assert_eq!(script.turns.len(), 16);
    assert_eq!(script, example);
}

#[test]
fn malformed_json_three_times_fails_with_transcripts() {
    let replies: Vec<String> = (0..3).map(|i| format!("[{{\"speaker\": \"1\", \"text\": broken {i}")).collect();
    let mock = MockLlm::scripted(replies.clone());
    match generate_script(&mock, &Templates::bundled(), &dummy_brief()) {
        Err(ScriptError::Unparseable { stage: "script", attempts }) => {
            assert_eq!(attempts.iter().map(|a| a.response.clone()).collect::<Vec<_>>(), replies);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn fixtures_keyed_by_prompt_hash() {
    let templates = Templates::bundled();
    let brief = dummy_brief();
    let prompt = templates.prompt(Stage::Script, Language::En, &brief.to_text()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixtures.json");
    let reply = r#"[{"speaker": "1", "text": "Recorded."}]"#;
    std::fs::write(&path, serde_json::json!({ prompt_hash(&prompt): reply }).to_string()).unwrap();
    let mock = MockLlm::new(0).load_fixtures(&path).unwrap();
    let script = generate_script(&mock, &templates, &brief).unwrap();
    assert_eq!(script.turns[0].text, "Recorded.");
}

#[test]
fn mock_end_to_end_is_deterministic_and_valid() {
    let templates = Templates::bundled();
    for (file, lang) in [("notes.txt", Language::En), ("article.html", Language::En)] {
        let src = load_source(&SourceSpec::infer(fixture(file).to_str().unwrap())).unwrap();
        assert_eq!(src.language, lang);
        let run = |seed| {
            let mock = MockLlm::new(seed);
            let brief = generate_brief(&mock, &templates, &src).unwrap();
            generate_script(&mock, &templates, &brief).unwrap()
        };
        let a = run(7);
        assert_eq!(a, run(7));
        assert!(a.turns.windows(2).all(|w| w[0].speaker != w[1].speaker));
        let report = validate_script(&a);
        assert!(report.pass, "{:?}", report.violations);
        assert!(report.warnings.is_empty());
    }
    let zh = KnowledgeSource {
        kind: SourceKind::PlainText,
        resolved_text: "语音合成可以生成很长的对话！每一段都依赖前面的内容（上下文）。这让声音更加稳定。".into(),
        language: Language::Zh,
        origin: "inline".into(),
    };
    let mock = MockLlm::new(3);
    let script = generate_script(&mock, &templates, &generate_brief(&mock, &templates, &zh).unwrap()).unwrap();
    let report = validate_script(&script);
    assert!(report.pass, "{:?}", report.violations);
}

#[test]
fn http_client_round_trip() {
    let reply = serde_json::json!({ "choices": [{ "message": { "content": "hello back" } }] }).to_string();
    let (url, server) = serve(reply, "application/json", 1);
    let client = HttpLlm { endpoint: url, model: "m".into(), api_key: Some("k".into()), timeout: std::time::Duration::from_secs(5) };
    let out = client.complete("hello", &CompletionParams::default()).unwrap();
    assert_eq!(out, "hello back");
    let sent: serde_json::Value = serde_json::from_str(&server.join().unwrap()[0]).unwrap();
    assert_eq!(sent["messages"][0]["content"], "hello");
    assert_eq!(sent["model"], "m");
}
