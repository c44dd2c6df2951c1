use duocast_core::codec::{codebook_utilization, FeatureSequence};
use duocast_core::lm::{stage_sequences, StageMetrics};
use duocast_core::sequence::MixedVocab;
use duocast_core::{Codec, Detok, LanguageModel};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{Result, StageExt};
use crate::store::{self, save_container, write_json, Layout};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CodecReport {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub utilization: f64,
    pub reconstruction_mse: f64,
    pub feature_variance: f64,
    pub revived_entries: usize,
    pub epoch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LmReport {
    pub vocab_size: usize,
    pub median_turn_tokens: usize,
    pub stages: Vec<StageMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetokReport {
    pub steps: usize,
    pub pairs: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

pub fn codec(config: &PipelineConfig) -> Result<CodecReport> {
    let layout = Layout::new(config);
    let corpus = store::load_corpus(&layout)?;
    let seqs: Vec<FeatureSequence<f32>> = corpus.feature_sequences().iter().map(|s| s.cast()).collect();
    let mut codec = Codec::new(config.codec.model_config(config.corpus.feature_dim), config.seeds.codec_init).stage("train codec")?;
    let metrics = codec.train(&seqs, &config.codec.train).stage("train codec")?;
    save_container(&codec.to_container().stage("train codec")?, &layout.codec)?;

    let (mut se, mut n, mut codes) = (0.0, 0usize, Vec::new());
    for s in &seqs {
        let (c, q) = codec.quantize(&codec.encode(s).stage("train codec")?).stage("train codec")?;
        let y = codec.decode(&q).stage("train codec")?;
        se += (&y.frames - &s.frames).mapv(|v| f64::from(v).powi(2)).sum();
        n += s.frames.len();
        codes.extend(c);
    }
    let report = CodecReport {
        steps: metrics.step_losses.len(),
        final_loss: metrics.step_losses.last().map(|l| l.total()),
        utilization: codebook_utilization(&codes, config.codec.codebook_size).stage("train codec")?,
        reconstruction_mse: se / n as f64,
        feature_variance: feature_variance(&seqs),
        revived_entries: metrics.revived_entries,
        epoch_losses: metrics.epoch_losses,
    };
    write_json(&layout.codec_metrics, &report)?;
    Ok(report)
}

/// Mean over dimensions of the per-dimension variance of all frames.
pub fn feature_variance(seqs: &[FeatureSequence<f32>]) -> f64 {
    let d = seqs.first().map_or(0, |s| s.dim());
    let n: usize = seqs.iter().map(|s| s.len()).sum();
    if n == 0 || d == 0 {
        return 0.0;
    }
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for s in seqs {
        for r in s.frames.rows() {
            for j in 0..d {
                let v = f64::from(r[j]);
                sum[j] += v;
                sq[j] += v * v;
            }
        }
    }
    (0..d).map(|j| sq[j] / n as f64 - (sum[j] / n as f64).powi(2)).sum::<f64>() / d as f64
}

/// Curriculum training on codec tokens of the corpus. Writes one checkpoint per stage.
pub fn lm(config: &PipelineConfig) -> Result<LmReport> {
    let layout = Layout::new(config);
    let codec = store::load_codec(&layout)?;
    let corpus = store::recode_corpus(&store::load_corpus(&layout)?, &codec)?;
    let tok = store::tokenizer(config)?;
    let vocab = MixedVocab::new(tok.vocab_size(), codec.codebook().size());
    let mut model = LanguageModel::new(config.lm.model_config(vocab), config.seeds.lm_init).stage("train lm")?;
    let data = config
        .lm
        .stages
        .iter()
        .map(|s| Ok((*s, stage_sequences(&corpus, s.stage, &tok, &vocab).stage("train lm")?)))
        .collect::<Result<Vec<_>>>()?;
    let mut snapshots = Vec::new();
    let stages = model
        .train_curriculum(&data, &config.lm.train, |m, metrics| {
            snapshots.push((metrics.stage, m.to_container()?));
            Ok(())
        })
        .stage("train lm")?;
    for (stage, file) in &snapshots {
        save_container(file, &layout.lm_stage(*stage))?;
    }
    save_container(&model.to_container().stage("train lm")?, &layout.lm)?;
    let report = LmReport { vocab_size: vocab.size(), median_turn_tokens: model.median_turn_tokens, stages };
    write_json(&layout.lm_metrics, &report)?;
    Ok(report)
}

pub fn detok(config: &PipelineConfig) -> Result<DetokReport> {
    let layout = Layout::new(config);
    let codec = store::load_codec(&layout)?;
    let corpus = store::recode_corpus(&store::load_corpus(&layout)?, &codec)?;
    let pairs = store::session_pairs(&corpus);
    let mut model = Detok::new(config.detok_config(codec.codebook().size()), config.seeds.detok_init).stage("train detok")?;
    let metrics = model.train(&pairs, &config.detok.train).stage("train detok")?;
    save_container(&model.to_container().stage("train detok")?, &layout.detok)?;
    let report = DetokReport {
        steps: metrics.losses.len(),
        pairs: pairs.len(),
        first_loss: metrics.losses.first().copied(),
        final_loss: metrics.losses.last().copied(),
    };
    write_json(&layout.detok_metrics, &report)?;
    Ok(report)
}
