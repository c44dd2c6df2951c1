//! Document to features: source, brief, script, validation, LM, detokenizer.

use std::path::PathBuf;
use std::time::Instant;

use duocast_core::detok::{boundary_discontinuity, median_adjacent_distance, ChunkNoise};
use duocast_core::lm::{session_prompts_and_turns, GenerateLimits, StopReason};
use duocast_script::{
    generate_brief, generate_script, load_source, normalize_script, validate_script, HttpLlm, Language, LlmClient, MockLlm, ScriptJson,
    SourceKind, SourceSpec, Templates, ValidationReport, TEMPLATE_VERSION,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{LlmProvider, PipelineConfig};
use crate::error::{CliError, Result, StageExt};
use crate::store::{self, features_container, save_container, write_json, write_text, Layout};

#[derive(Debug, Clone, Default)]
pub struct SynthOptions {
    /// File path or http(s) URL.
    pub source: String,
    /// Run directory name under `<output_dir>/runs`.
    pub name: String,
    pub dry_run: bool,
    pub ode_steps: Option<usize>,
    pub chunk_seconds: Option<f64>,
    pub sigma_min: Option<f64>,
    /// Overrides both the sampling and the detokenizer noise seed.
    pub seed: Option<u64>,
    pub language: Option<Language>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceInfo {
    pub kind: SourceKind,
    pub origin: String,
    pub language: Language,
    pub chars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationInfo {
    pub generated_turns: usize,
    pub expected_turns: usize,
    pub turns_match: bool,
    pub stop: StopReason,
    pub runaway: bool,
    pub codes_per_turn: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureInfo {
    pub frames: usize,
    pub dim: usize,
    pub chunks: usize,
    pub chunk_frames: usize,
    /// Corpus median adjacent-frame distance.
    pub reference: f64,
    /// `None` when the output fits in one chunk.
    pub boundary_discontinuity: Option<f64>,
    /// Same codes and noise, every chunk generated without context.
    pub baseline_boundary_discontinuity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthReport {
    pub template_version: &'static str,
    pub dry_run: bool,
    pub completed: Vec<&'static str>,
    pub failed_stage: Option<&'static str>,
    pub error: Option<String>,
    pub source: Option<SourceInfo>,
    pub script_turns: Option<usize>,
    pub normalized_turns: Option<usize>,
    pub validation: Option<ValidationReport>,
    pub generation: Option<GenerationInfo>,
    pub features: Option<FeatureInfo>,
    pub seconds: f64,
}

pub fn llm_client(config: &PipelineConfig) -> Result<Box<dyn LlmClient>> {
    let llm = &config.llm;
    Ok(match llm.provider {
        LlmProvider::Mock => {
            let mock = MockLlm::new(llm.mock_seed);
            Box::new(match &llm.mock_fixtures {
                Some(p) => mock.load_fixtures(p).stage("llm")?,
                None => mock,
            })
        }
        LlmProvider::Http => Box::new(HttpLlm {
            endpoint: llm.endpoint.clone(),
            model: llm.model.clone(),
            api_key: std::env::var("DUOCAST_LLM_API_KEY").ok(),
            timeout: std::time::Duration::from_secs(llm.timeout_seconds),
        }),
    })
}

pub fn templates(config: &PipelineConfig) -> Result<Templates> {
    match &config.paths.templates_dir {
        Some(dir) => Templates::load_dir(dir).stage("templates"),
        None => Ok(Templates::bundled()),
    }
}

pub fn run_dir(config: &PipelineConfig, name: &str) -> Result<PathBuf> {
    if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
        return Err(CliError::Config(format!("run name {name:?} must be a plain directory name")));
    }
    Ok(Layout::new(config).runs.join(name))
}

/// Runs every stage, writing artifacts to the run directory as they are
/// produced. On failure `report.json` records the failing stage.
pub fn synthesize(config: &PipelineConfig, opts: &SynthOptions) -> Result<SynthReport> {
    let dir = run_dir(config, &opts.name)?;
    let t0 = Instant::now();
    let mut report = SynthReport {
        template_version: TEMPLATE_VERSION,
        dry_run: opts.dry_run,
        completed: Vec::new(),
        failed_stage: None,
        error: None,
        source: None,
        script_turns: None,
        normalized_turns: None,
        validation: None,
        generation: None,
        features: None,
        seconds: 0.0,
    };
    let result = run(config, opts, &dir, &mut report);
    report.seconds = t0.elapsed().as_secs_f64();
    if let Err(e) = &result {
        report.failed_stage = Some(failed_stage(e));
        report.error = Some(e.to_string());
    }
    write_json(&dir.join("report.json"), &report)?;
    result.map(|()| report)
}

fn failed_stage(e: &CliError) -> &'static str {
    match e {
        CliError::Script { stage, .. } | CliError::Core { stage, .. } => stage,
        CliError::Validation { .. } => "validate",
        CliError::Prerequisite { what, .. } => what,
        CliError::Config(_) => "config",
        CliError::Io { .. } => "io",
    }
}

fn run(config: &PipelineConfig, opts: &SynthOptions, dir: &std::path::Path, report: &mut SynthReport) -> Result<()> {
    let client = llm_client(config)?;
    let templates = templates(config)?;

    let mut spec = SourceSpec::infer(&opts.source);
    spec.language = opts.language.or(config.synthesize.language);
    let source = load_source(&spec).stage("load_source")?;
    write_text(&dir.join("source.txt"), &source.resolved_text)?;
    report.source = Some(SourceInfo {
        kind: source.kind,
        origin: source.origin.clone(),
        language: source.language,
        chars: source.resolved_text.chars().count(),
    });
    report.completed.push("load_source");

    let brief = generate_brief(client.as_ref(), &templates, &source).stage("brief")?;
    write_text(&dir.join("brief.md"), &brief.to_text())?;
    report.completed.push("brief");

    let script = generate_script(client.as_ref(), &templates, &brief).stage("script")?;
    write_text(&dir.join("script.json"), &script.to_json())?;
    report.script_turns = Some(script.turns.len());
    report.completed.push("script");

    let validation = validate_script(&script);
    let validation_path = dir.join("validation.json");
    write_json(&validation_path, &validation)?;
    report.validation = Some(validation.clone());
    if !validation.pass {
        return Err(CliError::Validation { rules: validation.rules(), report: validation_path });
    }
    report.completed.push("validate");
    if opts.dry_run {
        return Ok(());
    }

    let layout = Layout::new(config);
    let codec = store::load_codec(&layout)?;
    let lm = store::load_lm(&layout)?;
    let mut detok = store::load_detok(&layout)?;
    let corpus = store::load_corpus(&layout)?;
    let tok = store::tokenizer(config)?;
    if lm.config.vocab.text_vocab_size != tok.vocab_size() || lm.config.vocab.code_vocab_size != codec.codebook().size() {
        return Err(CliError::Config("tokenizer or codec does not match the lm checkpoint vocabulary".into()));
    }

    let turns = normalize_script(&script, &tok).stage("normalize")?;
    report.normalized_turns = Some(turns.len());
    report.completed.push("normalize");

    let prompts = {
        let session = corpus
            .stage3
            .get(config.synthesize.prompt_session)
            .ok_or_else(|| CliError::Config(format!("synthesize.prompt_session {} out of range", config.synthesize.prompt_session)))?;
        let mut session = session.clone();
        for t in &mut session.turns {
            t.codes = codec.tokenize(&t.feature_sequence().cast()).stage("prompts")?;
        }
        session_prompts_and_turns(&tok, &session).stage("prompts")?.0
    };
    report.completed.push("build_sequence");

    let seed = opts.seed.unwrap_or(config.seeds.sampling);
    let limits = GenerateLimits {
        max_tokens: config.synthesize.max_tokens,
        max_turn_codes: config.synthesize.max_turn_codes,
        hold_eos: config.synthesize.hold_eos,
    };
    let generation = lm.generate(&prompts, &turns, &config.sampler, &limits, &mut ChaCha8Rng::seed_from_u64(seed)).stage("generate")?;
    write_json(&dir.join("codes.json"), &generation)?;
    report.generation = Some(GenerationInfo {
        generated_turns: generation.turns.len(),
        expected_turns: generation.expected_turns,
        turns_match: generation.turns.len() == generation.expected_turns,
        stop: generation.stop,
        runaway: generation.runaway,
        codes_per_turn: generation.turns.iter().map(|(_, c)| c.len()).collect(),
    });
    report.completed.push("generate");

    let codes: Vec<u32> = generation.turns.iter().flat_map(|(_, c)| c.iter().copied()).collect();
    let flow = &mut detok.config.flow;
    flow.ode_steps = opts.ode_steps.unwrap_or(flow.ode_steps);
    flow.infer_chunk_seconds = opts.chunk_seconds.unwrap_or(flow.infer_chunk_seconds);
    flow.sigma_min = opts.sigma_min.unwrap_or(flow.sigma_min);
    detok.config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let noise = ChunkNoise { seed: opts.seed.unwrap_or(config.seeds.noise) };
    let features = detok.detokenize_stream(&codes, &noise).stage("detokenize")?;
    save_container(&features_container(&features), &dir.join("features.dctc"))?;

    let plan = detok.inference_plan(codes.len()).stage("detokenize")?;
    let frames: Vec<_> = store::session_pairs(&corpus).into_iter().map(|(_, f)| f.frames).collect();
    let reference = median_adjacent_distance(&frames).stage("detokenize")?;
    let boundaries = plan.boundaries();
    let (bd, base) = if boundaries.is_empty() {
        (None, None)
    } else {
        let baseline = detok.detokenize_independent(&codes, &plan, &noise).stage("detokenize")?;
        (
            Some(boundary_discontinuity(&features.frames, &boundaries, reference).stage("detokenize")?),
            Some(boundary_discontinuity(&baseline, &boundaries, reference).stage("detokenize")?),
        )
    };
    report.features = Some(FeatureInfo {
        frames: features.len(),
        dim: features.dim(),
        chunks: plan.len(),
        chunk_frames: detok.config.flow.infer_chunk_frames(),
        reference,
        boundary_discontinuity: bd,
        baseline_boundary_discontinuity: base,
    });
    report.completed.push("detokenize");
    Ok(())
}

/// Validates a script file without touching any model.
pub fn validate_file(path: &std::path::Path, language: Language) -> Result<ValidationReport> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            CliError::Script { stage: "validate", source: duocast_script::ScriptError::NotFound(path.display().to_string()) }
        }
        _ => crate::error::io_err(path)(e),
    })?;
    let script = ScriptJson::from_json(&text, language)
        .map_err(|e| CliError::Script { stage: "validate", source: duocast_script::ScriptError::InvalidInput(e) })?;
    Ok(validate_script(&script))
}
