//! On-disk layout of corpora, checkpoints and run outputs.

use std::path::{Path, PathBuf};

use duocast_core::codec::FeatureSequence;
use duocast_core::container::{NamedTensor, TensorFile};
use duocast_core::corpus::SynthCorpus;
use duocast_core::tokenizer::TextTokenizer;
use duocast_core::{Codec, Detok, LanguageModel};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{io_err, CliError, Result, StageExt};

pub struct Layout {
    pub corpus: PathBuf,
    pub manifest: PathBuf,
    pub filter_report: PathBuf,
    pub codec: PathBuf,
    pub codec_metrics: PathBuf,
    pub lm: PathBuf,
    pub lm_metrics: PathBuf,
    pub detok: PathBuf,
    pub detok_metrics: PathBuf,
    pub eval_report: PathBuf,
    pub runs: PathBuf,
    checkpoints: PathBuf,
}

impl Layout {
    pub fn new(config: &PipelineConfig) -> Self {
        let p = &config.paths;
        let ck = |f: &str| p.checkpoint_dir.join(f);
        Self {
            corpus: p.corpus_dir.join("corpus.dctc"),
            manifest: p.corpus_dir.join("manifest.jsonl"),
            filter_report: p.corpus_dir.join("filter_report.json"),
            codec: ck("codec.dctc"),
            codec_metrics: ck("codec_metrics.json"),
            lm: ck("lm.dctc"),
            lm_metrics: ck("lm_metrics.json"),
            detok: ck("detok.dctc"),
            detok_metrics: ck("detok_metrics.json"),
            eval_report: p.output_dir.join("eval_report.json"),
            runs: p.output_dir.join("runs"),
            checkpoints: p.checkpoint_dir.clone(),
        }
    }

    pub fn lm_stage(&self, stage: u8) -> PathBuf {
        self.checkpoints.join(format!("lm_stage{stage}.dctc"))
    }
}

fn require(path: &Path, what: &'static str, hint: &'static str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Prerequisite { what, path: path.to_path_buf(), hint })
    }
}

fn load_container(path: &Path, what: &'static str, hint: &'static str) -> Result<TensorFile> {
    require(path, what, hint)?;
    TensorFile::load(path).stage(what)
}

pub fn load_corpus(layout: &Layout) -> Result<SynthCorpus> {
    SynthCorpus::from_container(&load_container(&layout.corpus, "corpus", "corpus synth")?).stage("corpus")
}

pub fn load_codec(layout: &Layout) -> Result<Codec> {
    Codec::from_container(&load_container(&layout.codec, "codec checkpoint", "train codec")?).stage("codec checkpoint")
}

pub fn load_lm(layout: &Layout) -> Result<LanguageModel> {
    LanguageModel::from_container(&load_container(&layout.lm, "lm checkpoint", "train lm")?).stage("lm checkpoint")
}

pub fn load_detok(layout: &Layout) -> Result<Detok> {
    Detok::from_container(&load_container(&layout.detok, "detok checkpoint", "train detok")?).stage("detok checkpoint")
}

pub fn save_container(file: &TensorFile, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    file.save(path).stage("save")
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn tokenizer(config: &PipelineConfig) -> Result<TextTokenizer> {
    match &config.paths.tokenizer_merges {
        None => Ok(TextTokenizer::bytes_only()),
        Some(p) => {
            require(p, "tokenizer merges", "train a tokenizer")?;
            TextTokenizer::load_merges(p).stage("tokenizer")
        }
    }
}

/// Replaces every turn's codes by the codec's tokenization of its features.
pub fn recode_corpus(corpus: &SynthCorpus, codec: &Codec) -> Result<SynthCorpus> {
    let mut out = corpus.clone();
    for stage in [&mut out.stage1, &mut out.stage2, &mut out.stage3] {
        for session in stage.iter_mut() {
            for turn in &mut session.turns {
                turn.codes = codec.tokenize(&turn.feature_sequence().cast()).stage("tokenize corpus")?;
            }
        }
    }
    Ok(out)
}

/// Per session: all turns' codes and features concatenated.
pub fn session_pairs(corpus: &SynthCorpus) -> Vec<(Vec<u32>, FeatureSequence<f32>)> {
    corpus
        .all_sessions()
        .map(|s| {
            let codes: Vec<u32> = s.turns.iter().flat_map(|t| t.codes.iter().copied()).collect();
            let views: Vec<_> = s.turns.iter().map(|t| t.features.view()).collect();
            let frames = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths").mapv(|v| v as f32);
            (codes, FeatureSequence { frames, frame_rate_hz: duocast_core::codec::CODE_RATE_HZ })
        })
        .collect()
}

pub fn features_container(features: &FeatureSequence<f32>) -> TensorFile {
    let meta = serde_json::json!({ "kind": "features", "frame_rate_hz": features.frame_rate_hz });
    let mut f = TensorFile::new(meta.to_string());
    f.push(NamedTensor::f32_matrix("features", &features.frames));
    f
}

pub fn load_features(path: &Path) -> Result<FeatureSequence<f32>> {
    let f = TensorFile::load(path).stage("features")?;
    let meta: serde_json::Value = serde_json::from_str(&f.meta).map_err(|e| CliError::Core { stage: "features", source: e.into() })?;
    let rate = meta["frame_rate_hz"].as_f64().unwrap_or(duocast_core::codec::CODE_RATE_HZ);
    FeatureSequence::new(f.get("features").stage("features")?.to_matrix().stage("features")?, rate).stage("features")
}
