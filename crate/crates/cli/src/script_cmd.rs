use std::path::PathBuf;

use duocast_script::{
    generate_brief, generate_script, load_source, validate_script, Brief, Language, ScriptJson, SourceSpec, ValidationReport,
};

use crate::config::PipelineConfig;
use crate::error::{Result, StageExt};
use crate::store::{write_json, write_text};
use crate::synthesize::{llm_client, run_dir, templates};

pub struct ScriptOutputs {
    pub dir: PathBuf,
    pub brief: Brief,
    pub script: Option<ScriptJson>,
    pub validation: Option<ValidationReport>,
}

/// Brief only (`with_script = false`) or brief, script and validation report.
pub fn generate(config: &PipelineConfig, source: &str, name: &str, language: Option<Language>, with_script: bool) -> Result<ScriptOutputs> {
    let dir = run_dir(config, name)?;
    let client = llm_client(config)?;
    let templates = templates(config)?;
    let mut spec = SourceSpec::infer(source);
    spec.language = language.or(config.synthesize.language);
    let source = load_source(&spec).stage("load_source")?;
    let brief = generate_brief(client.as_ref(), &templates, &source).stage("brief")?;
    write_text(&dir.join("brief.md"), &brief.to_text())?;
    if !with_script {
        return Ok(ScriptOutputs { dir, brief, script: None, validation: None });
    }
    let script = generate_script(client.as_ref(), &templates, &brief).stage("script")?;
    write_text(&dir.join("script.json"), &script.to_json())?;
    let validation = validate_script(&script);
    write_json(&dir.join("validation.json"), &validation)?;
    Ok(ScriptOutputs { dir, brief, script: Some(script), validation: Some(validation) })
}
