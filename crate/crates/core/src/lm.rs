//! Decoder-only language model over the mixed text + code vocabulary, its
//! curriculum trainer, and the sampler used for generation.

use std::rc::Rc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::TensorFile;
use crate::corpus::{SynthCorpus, SynthSession};
use crate::error::{Error, Result};
use crate::graph::{softmax_in_place, Graph, Var};
use crate::nn::{causal_mask, KvState, Linear, Transformer};
use crate::params::{accumulate, Adam, AdamConfig, ParamId, ParamStore};
use crate::sequence::{
    build_sequence, build_single_turn, merge_adjacent_turns, parse_generated, per_turn_weights, BuildMode, BuiltSequence, MixedVocab,
    ScriptTurn, SpeakerPrompt, Special,
};
use crate::tokenizer::TextTokenizer;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab: MixedVocab,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_context: usize,
}

impl LmConfig {
    pub fn new(vocab: MixedVocab) -> Self {
        Self { vocab, layers: 4, heads: 4, model_dim: 128, ffn_dim: 512, max_context: 2048 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!("model_dim {} not divisible by heads {}", self.model_dim, self.heads)));
        }
        if !(self.model_dim / self.heads).is_multiple_of(2) {
            return Err(Error::InvalidConfig("head dimension must be even for rotary positions".into()));
        }
        if self.layers == 0 || self.ffn_dim == 0 || self.max_context == 0 {
            return Err(Error::InvalidConfig("layers, ffn_dim and max_context must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { top_k: 30, top_p: 0.8, temperature: 0.8 }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        Self { top_k: 1, top_p: 1.0, temperature: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("top_k must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidConfig("top_p must lie in (0, 1]".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidConfig("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Candidate ids and their renormalized probabilities after temperature,
/// top-k and top-p filtering, most likely first.
pub fn sampling_distribution(row: &[f64], cfg: &SamplerConfig) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    if row.iter().any(|v| v.is_nan() || *v == f64::INFINITY) || row.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(Error::DegenerateLogits);
    }
    if cfg.temperature == 0.0 || cfg.top_k == 1 {
        return Ok(vec![(argmax(row), 1.0)]);
    }
    let mut order: Vec<usize> = (0..row.len()).filter(|&i| row[i] > f64::NEG_INFINITY).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k);
    let mut probs: Vec<f64> = order.iter().map(|&i| row[i] / cfg.temperature).collect();
    softmax_in_place(&mut probs);
    let mut cum = 0.0;
    let mut keep = probs.len();
    for (n, p) in probs.iter().enumerate() {
        cum += p;
        if cum >= cfg.top_p {
            keep = n + 1;
            break;
        }
    }
    let z: f64 = probs[..keep].iter().sum();
    Ok(order[..keep].iter().zip(&probs[..keep]).map(|(&i, &p)| (i, p / z)).collect())
}

/// Draws one id from the filtered distribution of `row`.
pub fn sample_next<R: Rng>(row: &[f64], cfg: &SamplerConfig, rng: &mut R) -> Result<usize> {
    let dist = sampling_distribution(row, cfg)?;
    if dist.len() == 1 {
        return Ok(dist[0].0);
    }
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for &(i, p) in &dist {
        cum += p;
        if u < cum {
            return Ok(i);
        }
    }
    Ok(dist.last().expect("nonempty").0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub stage: u8,
    pub steps: usize,
    pub max_context: usize,
}

/// Stages must be drawn from {1, 2, 3} in strictly increasing order.
pub fn validate_stage_order(stages: &[CurriculumStage]) -> Result<()> {
    let mut prev = 0;
    for s in stages {
        if !(1..=3).contains(&s.stage) || s.stage <= prev {
            let ids: Vec<u8> = stages.iter().map(|s| s.stage).collect();
            return Err(Error::InvalidConfig(format!("curriculum stages {ids:?} must be increasing within 1..=3")));
        }
        prev = s.stage;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainOpts {
    pub adam: AdamConfig,
    pub sequences_per_step: usize,
    pub warmup_steps: usize,
    /// Final learning-rate multiplier reached by cosine decay at each stage's end.
    pub min_lr_scale: f64,
    pub seed: u64,
}

impl Default for LmTrainOpts {
    fn default() -> Self {
        Self { adam: AdamConfig { lr: 3e-3, ..Default::default() }, sequences_per_step: 4, warmup_steps: 20, min_lr_scale: 0.1, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: u8,
    pub steps: usize,
    pub sequences: usize,
    pub losses: Vec<f64>,
}

impl StageMetrics {
    pub fn first_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

/// Attention state of every layer for the tokens consumed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct LmCache<A> {
    pub layers: Vec<KvState<A>>,
}

impl<A: Scalar> LmCache<A> {
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, KvState::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateLimits {
    /// Total speech tokens (codes and SC) that may be generated.
    pub max_tokens: usize,
    /// Per-turn code budget; `None` uses the model's guard.
    pub max_turn_codes: Option<usize>,
    /// Mask EOS until every script turn has been closed by SC.
    pub hold_eos: bool,
}

impl GenerateLimits {
    pub fn new(max_tokens: usize) -> Self {
        Self { max_tokens, max_turn_codes: None, hold_eos: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Eos,
    AllTurns,
    TokenLimit,
    TurnLimit,
    Context,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub turns: Vec<(u8, Vec<u32>)>,
    pub tokens: Vec<u32>,
    pub stop: StopReason,
    pub runaway: bool,
    pub expected_turns: usize,
}

#[derive(Debug, Clone)]
pub struct TextToSemantic<A: Scalar> {
    pub config: LmConfig,
    pub params: ParamStore<A>,
    /// Median podcast-turn length (codes + SC) seen in training.
    pub median_turn_tokens: usize,
    embed: ParamId,
    stack: Transformer,
    head: Linear,
}

impl<A: Scalar> TextToSemantic<A> {
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let v = config.vocab.size();
        let d = config.model_dim;
        let embed = params.add_normal("embed", (v, d), 1.0, &mut rng);
        let stack = Transformer::new(&mut params, "stack", config.layers, d, config.heads, config.ffn_dim, &mut rng);
        let head = Linear::new(&mut params, "head", d, v, false, &mut rng);
        Ok(Self { config, params, median_turn_tokens: 16, embed, stack, head })
    }

    pub fn empty_cache(&self) -> LmCache<A> {
        LmCache { layers: (0..self.config.layers).map(|_| KvState::empty(self.config.model_dim)).collect() }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<Vec<usize>> {
        let v = self.config.vocab.size();
        tokens.iter().map(|&t| if (t as usize) < v { Ok(t as usize) } else { Err(Error::UnknownToken(t)) }).collect()
    }

    /// Builds the graph for `tokens` at positions `past..past + n`.
    fn graph_forward(&self, g: &mut Graph<'_, A>, ids: &[usize], cache: Option<&LmCache<A>>) -> (Var, Vec<(Var, Var)>) {
        let past = cache.map_or(0, LmCache::len);
        let table = g.param(self.embed);
        let x = g.gather(table, ids);
        let positions: Vec<usize> = (past..past + ids.len()).collect();
        let mask = Rc::new(causal_mask(past, ids.len()));
        let out = self.stack.forward(g, x, &positions, &mask, cache.map(|c| c.layers.as_slice()), None);
        (self.head.forward(g, out.hidden), out.kv)
    }

    /// Full-sequence logits, one row per input position.
    pub fn forward(&self, tokens: &[u32]) -> Result<Array2<A>> {
        if tokens.len() > self.config.max_context {
            return Err(Error::ContextOverflow { len: tokens.len(), max: self.config.max_context });
        }
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        let ids = self.check_tokens(tokens)?;
        let mut g = Graph::new(&self.params);
        let (logits, _) = self.graph_forward(&mut g, &ids, None);
        Ok(g.value(logits).to_owned())
    }

    /// Consumes `tokens` after everything already in `cache`; returns their
    /// logits and appends their attention state.
    pub fn forward_incremental(&self, tokens: &[u32], cache: &mut LmCache<A>) -> Result<Array2<A>> {
        let len = cache.len() + tokens.len();
        if len > self.config.max_context {
            return Err(Error::ContextOverflow { len, max: self.config.max_context });
        }
        let ids = self.check_tokens(tokens)?;
        let g_params = &self.params;
        let mut g = Graph::new(g_params);
        let (logits, kv) = self.graph_forward(&mut g, &ids, Some(cache));
        for (layer, (k, v)) in cache.layers.iter_mut().zip(kv) {
            layer.append(g.value(k), g.value(v));
        }
        Ok(g.value(logits).to_owned())
    }

    /// Per-turn-averaged loss and parameter gradients for one sequence.
    pub fn sequence_loss(&self, seq: &BuiltSequence) -> Result<(f64, Vec<Option<Array2<A>>>)> {
        let n = seq.tokens.len();
        if n < 2 {
            return Err(Error::Sequence("sequence too short to train on".into()));
        }
        if n > self.config.max_context {
            return Err(Error::ContextOverflow { len: n, max: self.config.max_context });
        }
        let ids = self.check_tokens(&seq.tokens[..n - 1])?;
        let targets: Vec<usize> = seq.tokens[1..].iter().map(|&t| t as usize).collect();
        // Row i predicts token i + 1.
        let shifted: Vec<(usize, usize)> = seq.turn_boundaries.iter().map(|&(s, e)| (s - 1, e - 1)).collect();
        let weights: Vec<A> = per_turn_weights(&shifted, n - 1)?;
        let mut g = Graph::new(&self.params);
        let (logits, _) = self.graph_forward(&mut g, &ids, None);
        let loss = g.cross_entropy(logits, &targets, &weights);
        let value = g.scalar(loss).as_f64();
        Ok((value, g.backward(loss).into_param_grads()))
    }

    /// Runs one curriculum stage over `data`; each step averages
    /// `sequences_per_step` sequences drawn without replacement per pass.
    pub fn train_stage(&mut self, stage: &CurriculumStage, data: &[BuiltSequence], opts: &LmTrainOpts) -> Result<StageMetrics> {
        let data: Vec<BuiltSequence> = data
            .iter()
            .map(|s| s.truncated(stage.max_context.min(self.config.max_context)))
            .filter(|s| !s.turn_boundaries.is_empty())
            .collect();
        let mut metrics = StageMetrics { stage: stage.stage, steps: stage.steps, sequences: data.len(), losses: Vec::new() };
        if stage.steps == 0 {
            return Ok(metrics);
        }
        if data.is_empty() {
            return Err(Error::Empty("stage training data"));
        }
        let mut lens: Vec<usize> = data.iter().flat_map(|s| s.turn_boundaries.iter().map(|(a, b)| b - a)).collect();
        lens.sort_unstable();
        self.median_turn_tokens = lens[lens.len() / 2];

        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (u64::from(stage.stage) << 32));
        let mut adam = Adam::new(opts.adam, &self.params);
        let mut order: Vec<usize> = Vec::new();
        let per_step = opts.sequences_per_step.max(1);
        for step in 0..stage.steps {
            let mut grads = Vec::new();
            let mut loss = 0.0;
            for _ in 0..per_step {
                if order.is_empty() {
                    order = (0..data.len()).collect();
                    for i in (1..order.len()).rev() {
                        order.swap(i, rng.random_range(0..=i));
                    }
                }
                let idx = order.pop().expect("refilled");
                let (l, g) = self.sequence_loss(&data[idx])?;
                loss += l;
                accumulate(&mut grads, g);
            }
            loss /= per_step as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, detail: format!("stage {} loss {loss}", stage.stage) });
            }
            let inv = A::lit(1.0 / per_step as f64);
            grads.iter_mut().flatten().for_each(|g| g.mapv_inplace(|v| v * inv));
            adam.step(&mut self.params, &grads, lr_scale(step, stage.steps, opts));
            metrics.losses.push(loss);
        }
        Ok(metrics)
    }

    /// Trains every stage in order, calling `after_stage` once each stage
    /// completes (e.g. to persist a checkpoint).
    pub fn train_curriculum(
        &mut self,
        stages: &[(CurriculumStage, Vec<BuiltSequence>)],
        opts: &LmTrainOpts,
        mut after_stage: impl FnMut(&Self, &StageMetrics) -> Result<()>,
    ) -> Result<Vec<StageMetrics>> {
        let plan: Vec<CurriculumStage> = stages.iter().map(|(s, _)| *s).collect();
        validate_stage_order(&plan)?;
        let mut out = Vec::new();
        for (stage, data) in stages {
            let m = self.train_stage(stage, data, opts)?;
            after_stage(self, &m)?;
            out.push(m);
        }
        Ok(out)
    }

    /// Fraction of loss-masked targets predicted exactly by argmax under teacher forcing.
    pub fn teacher_forced_accuracy(&self, data: &[BuiltSequence]) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for seq in data {
            let n = seq.tokens.len();
            let logits = self.forward(&seq.tokens[..n - 1])?;
            for i in 1..n {
                if !seq.loss_mask[i] {
                    continue;
                }
                let row: Vec<f64> = logits.row(i - 1).iter().map(|v| v.as_f64()).collect();
                total += 1;
                hit += usize::from(argmax(&row) == seq.tokens[i] as usize);
            }
        }
        if total == 0 {
            return Err(Error::Empty("loss-masked targets"));
        }
        Ok(hit as f64 / total as f64)
    }

    /// Samples podcast speech after the infer-mode sequence for `turns`.
    ///
    /// Only code ids, SC and EOS are eligible; SC is withheld while the
    /// current turn is empty. Stops at EOS, once every script turn has been
    /// closed by SC, or when a limit is hit (flagged as runaway).
    pub fn generate<R: Rng>(
        &self,
        prompts: &[SpeakerPrompt; 2],
        turns: &[ScriptTurn],
        sampler: &SamplerConfig,
        limits: &GenerateLimits,
        rng: &mut R,
    ) -> Result<Generation> {
        sampler.validate()?;
        let turns = merge_adjacent_turns(turns)?;
        let prefix = build_sequence(&self.config.vocab, prompts, &turns, BuildMode::Infer)?;
        let vocab = self.config.vocab;
        let (sc, eos) = (vocab.special(Special::Sc), vocab.special(Special::Eos));
        let turn_budget = limits.max_turn_codes.unwrap_or(4 * self.median_turn_tokens.max(1));
        let mut gen =
            Generation { turns: Vec::new(), tokens: Vec::new(), stop: StopReason::TokenLimit, runaway: true, expected_turns: turns.len() };
        if limits.max_tokens == 0 {
            return Ok(gen);
        }
        let mut cache = self.empty_cache();
        let mut logits = self.forward_incremental(&prefix.tokens, &mut cache)?;
        let mut current = 0usize;
        let mut closed = 0usize;
        loop {
            if gen.tokens.len() >= limits.max_tokens {
                gen.stop = StopReason::TokenLimit;
                break;
            }
            if cache.len() >= self.config.max_context {
                gen.stop = StopReason::Context;
                break;
            }
            let last = logits.nrows() - 1;
            let mut row = vec![f64::NEG_INFINITY; vocab.size()];
            for i in vocab.speech_range() {
                row[i] = logits[[last, i]].as_f64();
            }
            if current > 0 {
                row[sc as usize] = logits[[last, sc as usize]].as_f64();
            }
            if !limits.hold_eos {
                row[eos as usize] = logits[[last, eos as usize]].as_f64();
            }
            let tok = sample_next(&row, sampler, rng)? as u32;
            if tok == eos {
                gen.stop = StopReason::Eos;
                gen.runaway = false;
                break;
            }
            gen.tokens.push(tok);
            if tok == sc {
                current = 0;
                closed += 1;
                if closed == turns.len() {
                    gen.stop = StopReason::AllTurns;
                    gen.runaway = false;
                    break;
                }
            } else {
                current += 1;
                if current > turn_budget {
                    gen.stop = StopReason::TurnLimit;
                    break;
                }
            }
            logits = self.forward_incremental(&[tok], &mut cache)?;
        }
        gen.turns = parse_generated(&vocab, &gen.tokens, turns[0].speaker)?;
        Ok(gen)
    }

    pub fn to_container(&self) -> Result<TensorFile> {
        let meta = serde_json::json!({
            "kind": "text_to_semantic",
            "config": self.config,
            "median_turn_tokens": self.median_turn_tokens,
        });
        let mut f = TensorFile::new(serde_json::to_string_pretty(&meta)?);
        f.push_params("param.", &self.params);
        Ok(f)
    }

    pub fn from_container(f: &TensorFile) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&f.meta)?;
        if meta["kind"] != "text_to_semantic" {
            return Err(Error::Format(format!("expected text_to_semantic checkpoint, found {}", meta["kind"])));
        }
        let config: LmConfig = serde_json::from_value(meta["config"].clone())?;
        let mut lm = Self::new(config, 0)?;
        lm.median_turn_tokens = meta["median_turn_tokens"].as_u64().unwrap_or(16) as usize;
        f.load_params("param.", &mut lm.params)?;
        Ok(lm)
    }
}

fn lr_scale(step: usize, total: usize, opts: &LmTrainOpts) -> f64 {
    if step < opts.warmup_steps {
        return (step + 1) as f64 / opts.warmup_steps as f64;
    }
    let span = total.saturating_sub(opts.warmup_steps).max(1) as f64;
    let progress = (step - opts.warmup_steps) as f64 / span;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    opts.min_lr_scale + (1.0 - opts.min_lr_scale) * cos
}

/// Script turn with text tokens and codes, from a synthetic turn.
pub fn script_turn(tok: &TextTokenizer, speaker: u8, text: &str, codes: Option<&[u32]>) -> ScriptTurn {
    ScriptTurn { speaker, text: tok.encode(text), codes: codes.map(<[u32]>::to_vec) }
}

/// Prompts are each speaker's first turn; the remaining turns are the podcast.
pub fn session_prompts_and_turns(tok: &TextTokenizer, s: &SynthSession) -> Result<([SpeakerPrompt; 2], Vec<ScriptTurn>)> {
    let first = |spk: u8| {
        s.turns
            .iter()
            .position(|t| t.speaker == spk)
            .ok_or_else(|| Error::Sequence(format!("session {} has no turn by speaker {spk}", s.id)))
    };
    let (a, b) = (first(1)?, first(2)?);
    let prompt =
        |i: usize| SpeakerPrompt { speaker: s.turns[i].speaker, text: tok.encode(&s.turns[i].text), codes: s.turns[i].codes.clone() };
    let turns: Vec<ScriptTurn> = s
        .turns
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != a && *i != b)
        .map(|(_, t)| script_turn(tok, t.speaker, &t.text, Some(&t.codes)))
        .collect();
    if turns.is_empty() {
        return Err(Error::Sequence(format!("session {} has no turns beyond the prompts", s.id)));
    }
    Ok(([prompt(a), prompt(b)], merge_adjacent_turns(&turns)?))
}

/// Training sequences for one curriculum stage of a synthetic corpus.
pub fn stage_sequences(corpus: &SynthCorpus, stage: u8, tok: &TextTokenizer, vocab: &MixedVocab) -> Result<Vec<BuiltSequence>> {
    let sessions = corpus.stage(stage)?;
    sessions
        .iter()
        .map(|s| {
            if stage == 1 {
                let t = &s.turns[0];
                build_single_turn(vocab, &script_turn(tok, t.speaker, &t.text, Some(&t.codes)))
            } else {
                let (prompts, turns) = session_prompts_and_turns(tok, s)?;
                build_sequence(vocab, &prompts, &turns, BuildMode::Train)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, Span, SynthSpec};

    fn tiny_config() -> LmConfig {
        LmConfig { layers: 2, heads: 2, model_dim: 16, ffn_dim: 32, max_context: 256, ..LmConfig::new(MixedVocab::new(20, 8)) }
    }

    #[test]
    fn logits_shape_and_causality() {
        let lm = TextToSemantic::<f64>::new(tiny_config(), 0).unwrap();
        let tokens: Vec<u32> = vec![32, 1, 2, 20, 21, 22, 31, 5, 6];
        let a = lm.forward(&tokens).unwrap();
        assert_eq!(a.dim(), (9, 33));
        assert!(a.iter().all(|v| v.is_finite()));
        for j in 0..tokens.len() {
            let mut p = tokens.clone();
            p[j] = (p[j] + 1) % 33;
            let b = lm.forward(&p).unwrap();
            for i in 0..j {
                for c in 0..33 {
                    assert!((a[[i, c]] - b[[i, c]]).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn overlength_and_unknown_tokens_rejected() {
        let lm = TextToSemantic::<f32>::new(tiny_config(), 0).unwrap();
        assert!(matches!(lm.forward(&vec![0; 257]), Err(Error::ContextOverflow { .. })));
        assert!(matches!(lm.forward(&[40]), Err(Error::UnknownToken(40))));
    }

    #[test]
    fn forward_is_deterministic() {
        let a = TextToSemantic::<f32>::new(tiny_config(), 5).unwrap().forward(&[1, 2, 3]).unwrap();
        let b = TextToSemantic::<f32>::new(tiny_config(), 5).unwrap().forward(&[1, 2, 3]).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn incremental_matches_full_forward() {
        let lm = TextToSemantic::<f64>::new(tiny_config(), 1).unwrap();
        let tokens: Vec<u32> = vec![32, 1, 2, 20, 21, 22, 31, 5, 6, 7];
        let full = lm.forward(&tokens).unwrap();
        let mut cache = lm.empty_cache();
        let first = lm.forward_incremental(&tokens[..4], &mut cache).unwrap();
        let mut rows = vec![first];
        for &t in &tokens[4..] {
            rows.push(lm.forward_incremental(&[t], &mut cache).unwrap());
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let inc = ndarray::concatenate(ndarray::Axis(0), &views).unwrap();
        assert!((&inc - &full).iter().all(|v| v.abs() < 1e-10));
        assert_eq!(cache.len(), tokens.len());
    }

    #[test]
    fn sampler_rules() {
        let row = [0.1, 2.0, -1.0, 1.9];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t0 = SamplerConfig { temperature: 0.0, ..Default::default() };
        let k1 = SamplerConfig { top_k: 1, top_p: 0.1, temperature: 1.0 };
        for _ in 0..20 {
            assert_eq!(sample_next(&row, &t0, &mut rng).unwrap(), 1);
            assert_eq!(sample_next(&row, &k1, &mut rng).unwrap(), 1);
        }
        assert!(matches!(sample_next(&[f64::NEG_INFINITY; 3], &t0, &mut rng), Err(Error::DegenerateLogits)));
        assert!(SamplerConfig { top_p: 0.0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { top_k: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn stage_order_enforced() {
        let s = |stage| CurriculumStage { stage, steps: 0, max_context: 64 };
        assert!(validate_stage_order(&[s(1), s(2), s(3)]).is_ok());
        assert!(validate_stage_order(&[s(2), s(3)]).is_ok());
        assert!(validate_stage_order(&[s(2), s(1), s(3)]).is_err());
        assert!(validate_stage_order(&[s(1), s(1)]).is_err());
        assert!(validate_stage_order(&[s(4)]).is_err());
    }

    fn tiny_corpus() -> SynthCorpus {
        synth_corpus(&SynthSpec {
            num_sessions: 4,
            turns_per_session: Span::new(4, 5),
            codes_per_turn: Span::new(3, 5),
            code_vocab: 8,
            ..Default::default()
        })
        .unwrap()
    }

    fn byte_config() -> LmConfig {
        LmConfig { layers: 1, heads: 2, model_dim: 16, ffn_dim: 32, max_context: 512, ..LmConfig::new(MixedVocab::new(256, 8)) }
    }

    #[test]
    fn zero_step_stage_leaves_parameters_unchanged() {
        let c = tiny_corpus();
        let tok = TextTokenizer::bytes_only();
        let mut lm = TextToSemantic::<f32>::new(byte_config(), 2).unwrap();
        let before = lm.params.clone();
        let data = stage_sequences(&c, 3, &tok, &lm.config.vocab).unwrap();
        let stage = CurriculumStage { stage: 3, steps: 0, max_context: 512 };
        lm.train_stage(&stage, &data, &LmTrainOpts::default()).unwrap();
        assert_eq!(lm.params.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>(), before.iter().map(|(_, v)| v.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn stage3_loss_decreases() {
        let c = tiny_corpus();
        let tok = TextTokenizer::bytes_only();
        let mut lm = TextToSemantic::<f32>::new(byte_config(), 2).unwrap();
        let data = stage_sequences(&c, 3, &tok, &lm.config.vocab).unwrap();
        let stage = CurriculumStage { stage: 3, steps: 60, max_context: 512 };
        let m = lm.train_stage(&stage, &data, &LmTrainOpts { sequences_per_step: 2, ..Default::default() }).unwrap();
        let head: f64 = m.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = m.losses[55..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "loss {head} -> {tail}");
    }

    #[test]
    fn untouched_embedding_rows_get_zero_gradient() {
        let lm = TextToSemantic::<f64>::new(byte_config(), 3).unwrap();
        let c = tiny_corpus();
        let tok = TextTokenizer::bytes_only();
        let seq = &stage_sequences(&c, 3, &tok, &lm.config.vocab).unwrap()[0];
        let (_, grads) = lm.sequence_loss(seq).unwrap();
        let g = grads[lm.embed.index()].as_ref().unwrap();
        let used: std::collections::BTreeSet<u32> = seq.tokens.iter().copied().collect();
        for id in 0..lm.config.vocab.size() as u32 {
            if !used.contains(&id) {
                assert!(g.row(id as usize).iter().all(|&v| v == 0.0), "row {id}");
            }
        }
    }

    #[test]
    fn generation_limits_and_determinism() {
        let c = tiny_corpus();
        let tok = TextTokenizer::bytes_only();
        let lm = TextToSemantic::<f32>::new(byte_config(), 4).unwrap();
        let (prompts, turns) = session_prompts_and_turns(&tok, &c.stage3[0]).unwrap();
        let infer: Vec<ScriptTurn> = turns.iter().map(|t| ScriptTurn { codes: None, ..t.clone() }).collect();
        let zero =
            lm.generate(&prompts, &infer, &SamplerConfig::default(), &GenerateLimits::new(0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(zero.turns.is_empty() && zero.runaway);
        let limits = GenerateLimits { max_tokens: 40, max_turn_codes: Some(10), hold_eos: false };
        let a = lm.generate(&prompts, &infer, &SamplerConfig::greedy(), &limits, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = lm.generate(&prompts, &infer, &SamplerConfig::greedy(), &limits, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.tokens.len() <= 40);
        let held = GenerateLimits { max_tokens: 400, max_turn_codes: Some(3), hold_eos: true };
        for seed in 0..5 {
            let g = lm.generate(&prompts, &infer, &SamplerConfig::default(), &held, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_ne!(g.stop, StopReason::Eos);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let lm = TextToSemantic::<f32>::new(tiny_config(), 6).unwrap();
        let f = TensorFile::read_from(lm.to_container().unwrap().to_bytes().as_slice()).unwrap();
        let back = TextToSemantic::<f32>::from_container(&f).unwrap();
        assert_eq!(lm.forward(&[1, 2, 3]).unwrap(), back.forward(&[1, 2, 3]).unwrap());
    }
}
