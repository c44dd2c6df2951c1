//! `PipelineConfig`: one TOML file describing every stage.
//!
//! A config file only needs the keys it changes; everything else falls back
//! to [`PipelineConfig::default`]. Relative paths are resolved against the
//! directory holding the config file.

use std::path::{Path, PathBuf};

use duocast_core::codec::{CodecConfig, CodecTrainOpts, NormStats};
use duocast_core::corpus::SynthSpec;
use duocast_core::detok::{DetokConfig, DetokTrainOpts};
use duocast_core::lm::{CurriculumStage, LmConfig, LmTrainOpts, SamplerConfig};
use duocast_core::sequence::MixedVocab;
use duocast_script::Language;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Prompt templates; the bundled set when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    /// Byte-pair merges file; byte-level tokens when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer_merges: Option<PathBuf>,
}

/// Initialization seeds. Training seeds live in each stage's `train` table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub codec_init: u64,
    pub lm_init: u64,
    pub detok_init: u64,
    pub sampling: u64,
    pub noise: u64,
}

/// Codec architecture; `input_dim` comes from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecSection {
    pub latent_dim: usize,
    pub codebook_size: usize,
    pub hidden_dim: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub kernel_size: usize,
    pub commitment_weight: f64,
    pub ema_decay: f64,
    pub dead_after: usize,
    pub train: CodecTrainOpts,
}

impl CodecSection {
    pub fn model_config(&self, input_dim: usize) -> CodecConfig {
        CodecConfig {
            input_dim,
            latent_dim: self.latent_dim,
            codebook_size: self.codebook_size,
            hidden_dim: self.hidden_dim,
            encoder_depth: self.encoder_depth,
            decoder_depth: self.decoder_depth,
            kernel_size: self.kernel_size,
            commitment_weight: self.commitment_weight,
            ema_decay: self.ema_decay,
            dead_after: self.dead_after,
            norm_stats: NormStats::identity(input_dim),
        }
    }
}

/// LM architecture; the vocabulary comes from the tokenizer and codec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmSection {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_context: usize,
    pub stages: Vec<CurriculumStage>,
    pub train: LmTrainOpts,
}

impl LmSection {
    pub fn model_config(&self, vocab: MixedVocab) -> LmConfig {
        LmConfig {
            vocab,
            layers: self.layers,
            heads: self.heads,
            model_dim: self.model_dim,
            ffn_dim: self.ffn_dim,
            max_context: self.max_context,
        }
    }
}

/// `model.code_vocab` and `model.flow.feature_dim` are overwritten from the codec and corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetokSection {
    pub model: DetokConfig,
    pub train: DetokTrainOpts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesizeSection {
    pub max_tokens: usize,
    /// Per-turn code budget; four times the median training turn when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_turn_codes: Option<usize>,
    /// Keep generating until every script turn is closed.
    pub hold_eos: bool,
    /// Stage-3 corpus session whose first turns serve as speaker prompts.
    pub prompt_session: usize,
    /// Forces the document language instead of detecting it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<Language>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmProvider {
    Mock,
    Http,
}

/// The API key is read from `DUOCAST_LLM_API_KEY`, never from the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmSection {
    pub provider: LlmProvider,
    pub endpoint: String,
    pub model: String,
    pub timeout_seconds: u64,
    pub mock_seed: u64,
    /// JSON object mapping prompt hashes to canned responses for the mock.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_fixtures: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Held-out sessions for the boundary comparison.
    pub items: usize,
    pub item_seed: u64,
    pub chunk_seconds: f64,
    /// Required share of items where autoregressive chunking is no worse than the baseline.
    pub min_win_fraction: f64,
    pub sampler_draws: usize,
    pub path_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub seeds: Seeds,
    pub corpus: SynthSpec,
    pub codec: CodecSection,
    pub lm: LmSection,
    pub detok: DetokSection,
    pub sampler: SamplerConfig,
    pub synthesize: SynthesizeSection,
    pub llm: LlmSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let codec = CodecConfig::default();
        Self {
            paths: Paths {
                corpus_dir: "out/corpus".into(),
                checkpoint_dir: "out/checkpoints".into(),
                output_dir: "out".into(),
                templates_dir: None,
                tokenizer_merges: None,
            },
            seeds: Seeds { codec_init: 0, lm_init: 0, detok_init: 0, sampling: 0, noise: 0 },
            corpus: SynthSpec::default(),
            codec: CodecSection {
                latent_dim: codec.latent_dim,
                codebook_size: codec.codebook_size,
                hidden_dim: codec.hidden_dim,
                encoder_depth: codec.encoder_depth,
                decoder_depth: codec.decoder_depth,
                kernel_size: codec.kernel_size,
                commitment_weight: codec.commitment_weight,
                ema_decay: codec.ema_decay,
                dead_after: codec.dead_after,
                train: CodecTrainOpts::default(),
            },
            lm: LmSection {
                layers: 2,
                heads: 4,
                model_dim: 64,
                ffn_dim: 256,
                max_context: 4096,
                stages: vec![
                    CurriculumStage { stage: 1, steps: 200, max_context: 512 },
                    CurriculumStage { stage: 2, steps: 200, max_context: 2048 },
                    CurriculumStage { stage: 3, steps: 400, max_context: 2048 },
                ],
                train: LmTrainOpts::default(),
            },
            detok: DetokSection { model: DetokConfig::default(), train: DetokTrainOpts::default() },
            sampler: SamplerConfig::default(),
            synthesize: SynthesizeSection { max_tokens: 2000, max_turn_codes: None, hold_eos: true, prompt_session: 0, language: None },
            llm: LlmSection {
                provider: LlmProvider::Mock,
                endpoint: "https://api.openai.com/v1".into(),
                model: "gpt-4o".into(),
                timeout_seconds: 120,
                mock_seed: 0,
                mock_fixtures: None,
            },
            eval: EvalSection {
                items: 50,
                item_seed: 9000,
                chunk_seconds: 0.5,
                min_win_fraction: 0.8,
                sampler_draws: 100_000,
                path_samples: 1000,
            },
        }
    }
}

impl PipelineConfig {
    /// A small configuration whose whole pipeline trains in a few CPU minutes.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.corpus.num_sessions = 200;
        c.corpus.turns_per_session = duocast_core::corpus::Span::new(6, 10);
        c.corpus.codes_per_turn = duocast_core::corpus::Span::new(6, 60);
        c.corpus.code_vocab = 32;
        c.codec.codebook_size = 32;
        c.codec.train.steps = 400;
        c.lm.stages = vec![
            CurriculumStage { stage: 1, steps: 100, max_context: 256 },
            CurriculumStage { stage: 2, steps: 100, max_context: 1024 },
            CurriculumStage { stage: 3, steps: 300, max_context: 2048 },
        ];
        c.lm.max_context = 8192;
        c.lm.train.sequences_per_step = 2;
        c.synthesize.max_tokens = 6000;
        // Nucleus truncation can starve the speaker-change token of a small model.
        c.sampler.top_p = 1.0;
        c.detok.model.flow.train_chunk_seconds = (0.2, 1.0);
        c.detok.model.flow.infer_chunk_seconds = 0.5;
        c.detok.train.steps = 600;
        c.detok.train.pairs_per_step = 2;
        c
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Parses `text` as overrides of the defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let overrides: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut base = toml::Table::try_from(Self::default()).expect("default config serializes");
        merge(&mut base, overrides);
        let config: Self = base.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.corpus_dir);
        fix(&mut self.paths.checkpoint_dir);
        fix(&mut self.paths.output_dir);
        self.paths.templates_dir.as_mut().map(fix);
        self.paths.tokenizer_merges.as_mut().map(fix);
        self.llm.mock_fixtures.as_mut().map(fix);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.corpus.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.codec.model_config(self.corpus.feature_dim).validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.sampler.validate().map_err(|e| CliError::Config(e.to_string()))?;
        duocast_core::lm::validate_stage_order(&self.lm.stages).map_err(|e| CliError::Config(e.to_string()))?;
        self.detok_config(self.codec.codebook_size).validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.eval.chunk_seconds <= 0.0 || !(0.0..=1.0).contains(&self.eval.min_win_fraction) {
            return bad("eval.chunk_seconds must be positive and eval.min_win_fraction in [0, 1]".into());
        }
        if self.eval.items == 0 {
            return bad("eval.items must be positive".into());
        }
        Ok(())
    }

    /// Detokenizer config with the vocabulary and feature width filled in.
    pub fn detok_config(&self, code_vocab: usize) -> DetokConfig {
        let mut m = self.detok.model.clone();
        m.code_vocab = code_vocab;
        m.flow.feature_dim = self.corpus.feature_dim;
        m
    }
}

fn merge(base: &mut toml::Table, overrides: toml::Table) {
    for (k, v) in overrides {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
