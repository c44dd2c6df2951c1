use std::path::Path;

use duocast_core::corpus::{
    filter_conversations, filter_single_turn, group_sessions, load_manifest, save_manifest, synth_corpus, synth_records,
};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{Result, StageExt};
use crate::store::{ensure_parent, save_container, write_json, Layout};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterReport {
    pub records: usize,
    pub single_turn_kept: usize,
    pub sessions: usize,
    pub conversations_kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusReport {
    pub sessions: [usize; 3],
    pub turns: [usize; 3],
    pub codes: [usize; 3],
    pub filters: FilterReport,
}

fn filter_report(
    records: &[duocast_core::corpus::UtteranceRecord],
) -> (FilterReport, Vec<duocast_core::corpus::UtteranceRecord>, Vec<duocast_core::corpus::RecordSession>) {
    let single = filter_single_turn(records);
    let sessions = group_sessions(records);
    let conv = filter_conversations(&sessions);
    let report =
        FilterReport { records: records.len(), single_turn_kept: single.len(), sessions: sessions.len(), conversations_kept: conv.len() };
    (report, single, conv)
}

/// Generates the three stage corpora, the metadata manifest and the filter summary.
pub fn synth(config: &PipelineConfig) -> Result<CorpusReport> {
    let layout = Layout::new(config);
    let corpus = synth_corpus(&config.corpus).stage("corpus")?;
    save_container(&corpus.to_container().stage("corpus")?, &layout.corpus)?;
    let all: Vec<_> = corpus.all_sessions().cloned().collect();
    let records = synth_records(&all, config.corpus.seed);
    ensure_parent(&layout.manifest)?;
    save_manifest(&records, &layout.manifest).stage("manifest")?;
    let (filters, _, _) = filter_report(&records);
    let stages = [&corpus.stage1, &corpus.stage2, &corpus.stage3];
    let report = CorpusReport {
        sessions: stages.map(|s| s.len()),
        turns: stages.map(|s| s.iter().map(|x| x.turns.len()).sum()),
        codes: stages.map(|s| s.iter().flat_map(|x| &x.turns).map(|t| t.codes.len()).sum()),
        filters,
    };
    write_json(&layout.filter_report, &report)?;
    Ok(report)
}

/// Applies both metadata filters to a manifest; kept records go under the output dir.
pub fn filter(config: &PipelineConfig, manifest: &Path) -> Result<FilterReport> {
    let records = load_manifest(manifest).stage("manifest")?;
    let (report, single, conv) = filter_report(&records);
    let out = config.paths.output_dir.join("filtered");
    let single_path = out.join("single_turn.jsonl");
    ensure_parent(&single_path)?;
    save_manifest(&single, &single_path).stage("manifest")?;
    let conv_records: Vec<_> = conv.into_iter().flat_map(|s| s.records).collect();
    save_manifest(&conv_records, out.join("conversations.jsonl")).stage("manifest")?;
    write_json(&out.join("filter_report.json"), &report)?;
    Ok(report)
}
