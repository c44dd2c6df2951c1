//! Synthetic training corpora and utterance-metadata filters.
//!
//! Codes follow a sticky per-voice Markov chain. Each frame's feature is a
//! fixed linear map of its one-hot code, plus a per-voice offset, plus
//! Gaussian noise, so the conditional mean of every (code, voice) pair is
//! known in closed form.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::codec::{FeatureSequence, CODE_RATE_HZ};
use crate::container::{NamedTensor, TensorFile};
use crate::error::{Error, Result};

const LEXICON: &[&str] = &[
    "the",
    "model",
    "speech",
    "data",
    "we",
    "talk",
    "about",
    "today",
    "this",
    "paper",
    "shows",
    "how",
    "long",
    "podcast",
    "voices",
    "can",
    "sound",
    "natural",
    "and",
    "it",
    "uses",
    "tokens",
    "in",
    "a",
    "simple",
    "way",
    "so",
    "what",
    "does",
    "that",
    "mean",
    "for",
    "people",
    "listening",
    "well",
    "think",
    "of",
    "story",
    "next",
    "step",
    "is",
    "learning",
    "from",
    "two",
    "speakers",
    "turns",
];

const RESPONSE_WORDS: &[&str] = &["yeah.", "right.", "mm.", "okay.", "sure.", "uh-huh."];

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub min: usize,
    pub max: usize,
}

impl Span {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_sessions: usize,
    pub turns_per_session: Span,
    pub codes_per_turn: Span,
    pub code_vocab: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    /// Insert short response-word turns into the stage-3 sessions.
    pub conversational: bool,
    pub num_voices: usize,
    /// Scale of the per-voice feature offset; 0 gives voice-independent features.
    pub timbre_scale: f64,
    /// Probability of repeating the previous code.
    pub stay_prob: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_sessions: 50,
            turns_per_session: Span::new(12, 16),
            codes_per_turn: Span::new(8, 20),
            code_vocab: 64,
            feature_dim: 16,
            noise_sigma: 0.05,
            conversational: true,
            num_voices: 4,
            timbre_scale: 0.5,
            stay_prob: 0.6,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        for (name, s) in [("turns_per_session", self.turns_per_session), ("codes_per_turn", self.codes_per_turn)] {
            if s.min == 0 || s.min > s.max {
                return Err(Error::InvalidConfig(format!("{name} range {}..={} is empty or starts at 0", s.min, s.max)));
            }
        }
        if self.num_sessions == 0 {
            return bad("num_sessions must be positive");
        }
        if self.code_vocab < 2 || self.feature_dim == 0 {
            return bad("code_vocab must be >= 2 and feature_dim positive");
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad("noise_sigma must be >= 0");
        }
        if self.num_voices < 2 {
            return bad("num_voices must be >= 2");
        }
        if !(0.0..1.0).contains(&self.stay_prob) {
            return bad("stay_prob must lie in [0, 1)");
        }
        if self.timbre_scale.is_nan() || self.timbre_scale < 0.0 {
            return bad("timbre_scale must be >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTurn {
    /// 1 or 2.
    pub speaker: u8,
    /// Index into the corpus voice table.
    pub voice: usize,
    pub text: String,
    pub codes: Vec<u32>,
    pub features: Array2<f64>,
}

impl SynthTurn {
    pub fn feature_sequence(&self) -> FeatureSequence<f64> {
        FeatureSequence { frames: self.features.clone(), frame_rate_hz: CODE_RATE_HZ }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSession {
    pub id: String,
    pub turns: Vec<SynthTurn>,
}

/// The three curriculum corpora plus the ground-truth generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    /// `K x D`: row k is the feature image of code k.
    pub feature_map: Array2<f64>,
    /// `voices x D` additive offsets.
    pub timbre: Array2<f64>,
    pub stage1: Vec<SynthSession>,
    pub stage2: Vec<SynthSession>,
    pub stage3: Vec<SynthSession>,
}

impl SynthCorpus {
    /// Noise-free feature of `code` spoken by `voice`.
    pub fn conditional_mean(&self, code: u32, voice: usize) -> ndarray::Array1<f64> {
        &self.feature_map.row(code as usize) + &self.timbre.row(voice)
    }

    pub fn stage(&self, id: u8) -> Result<&[SynthSession]> {
        match id {
            1 => Ok(&self.stage1),
            2 => Ok(&self.stage2),
            3 => Ok(&self.stage3),
            _ => Err(Error::InvalidConfig(format!("no curriculum stage {id}"))),
        }
    }

    pub fn all_sessions(&self) -> impl Iterator<Item = &SynthSession> {
        self.stage1.iter().chain(&self.stage2).chain(&self.stage3)
    }

    /// Every turn's features, for codec training.
    pub fn feature_sequences(&self) -> Vec<FeatureSequence<f64>> {
        self.all_sessions().flat_map(|s| s.turns.iter().map(SynthTurn::feature_sequence)).collect()
    }

    /// (codes, features) pairs, one per turn, for detokenizer training.
    pub fn code_feature_pairs(&self) -> Vec<(Vec<u32>, FeatureSequence<f64>)> {
        self.all_sessions().flat_map(|s| s.turns.iter().map(|t| (t.codes.clone(), t.feature_sequence()))).collect()
    }

    pub fn to_container(&self) -> Result<TensorFile> {
        let mut sessions_meta = Vec::new();
        let mut tensors = Vec::new();
        for (stage, sessions) in [(1, &self.stage1), (2, &self.stage2), (3, &self.stage3)] {
            for (si, s) in sessions.iter().enumerate() {
                let turns: Vec<_> = s
                    .turns
                    .iter()
                    .enumerate()
                    .map(|(ti, t)| {
                        let key = format!("stage{stage}.{si}.{ti}");
                        tensors.push(NamedTensor::u32_vec(format!("{key}.codes"), &t.codes));
                        tensors.push(NamedTensor::f32_matrix(format!("{key}.features"), &t.features));
                        serde_json::json!({ "speaker": t.speaker, "voice": t.voice, "text": t.text })
                    })
                    .collect();
                sessions_meta.push(serde_json::json!({ "stage": stage, "id": s.id, "turns": turns }));
            }
        }
        let meta = serde_json::json!({ "kind": "synth_corpus", "spec": self.spec, "sessions": sessions_meta });
        let mut f = TensorFile::new(serde_json::to_string(&meta)?);
        f.push(NamedTensor::f32_matrix("feature_map", &self.feature_map));
        f.push(NamedTensor::f32_matrix("timbre", &self.timbre));
        f.tensors.extend(tensors);
        Ok(f)
    }

    /// Reads a corpus written by [`SynthCorpus::to_container`]. Features come
    /// back at 32-bit precision.
    pub fn from_container(f: &TensorFile) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_str(&f.meta)?;
        if meta["kind"] != "synth_corpus" {
            return Err(Error::Format(format!("expected synth_corpus, found {}", meta["kind"])));
        }
        let spec: SynthSpec = serde_json::from_value(meta["spec"].clone())?;
        let mut stages: [Vec<SynthSession>; 3] = Default::default();
        let mut counters = [0usize; 3];
        let sessions = meta["sessions"].as_array().ok_or_else(|| Error::Format("sessions missing".into()))?;
        for s in sessions {
            let stage = s["stage"].as_u64().filter(|v| (1..=3).contains(v)).ok_or_else(|| Error::Format("bad stage".into()))? as usize;
            let si = counters[stage - 1];
            counters[stage - 1] += 1;
            let mut turns = Vec::new();
            for (ti, t) in s["turns"].as_array().ok_or_else(|| Error::Format("turns missing".into()))?.iter().enumerate() {
                let key = format!("stage{stage}.{si}.{ti}");
                turns.push(SynthTurn {
                    speaker: t["speaker"].as_u64().ok_or_else(|| Error::Format("speaker".into()))? as u8,
                    voice: t["voice"].as_u64().ok_or_else(|| Error::Format("voice".into()))? as usize,
                    text: t["text"].as_str().ok_or_else(|| Error::Format("text".into()))?.to_string(),
                    codes: f.get(&format!("{key}.codes"))?.as_u32()?.to_vec(),
                    features: f.get(&format!("{key}.features"))?.to_matrix()?,
                });
            }
            stages[stage - 1].push(SynthSession { id: s["id"].as_str().ok_or_else(|| Error::Format("id".into()))?.to_string(), turns });
        }
        let [stage1, stage2, stage3] = stages;
        Ok(Self { spec, feature_map: f.get("feature_map")?.to_matrix()?, timbre: f.get("timbre")?.to_matrix()?, stage1, stage2, stage3 })
    }
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    feature_map: &'a Array2<f64>,
    timbre: &'a Array2<f64>,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    /// Voice v draws from a window of K/2 codes starting at v·K/voices
    /// (wrapping), so the windows jointly cover the vocabulary.
    fn codes(&mut self, voice: usize, n: usize) -> Vec<u32> {
        let k = self.spec.code_vocab;
        let start = voice * k / self.spec.num_voices;
        let width = (k / 2).max(1);
        let mut out = Vec::with_capacity(n);
        let mut cur = (start + self.rng.random_range(0..width)) % k;
        for _ in 0..n {
            if !out.is_empty() && self.rng.random::<f64>() >= self.spec.stay_prob {
                cur = (start + self.rng.random_range(0..width)) % k;
            }
            out.push(cur as u32);
        }
        out
    }

    fn features(&mut self, codes: &[u32], voice: usize) -> Array2<f64> {
        let d = self.spec.feature_dim;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut out = Array2::zeros((codes.len(), d));
        for (t, &c) in codes.iter().enumerate() {
            for j in 0..d {
                let noise = if self.spec.noise_sigma > 0.0 { self.spec.noise_sigma * normal.sample(&mut self.rng) } else { 0.0 };
                out[[t, j]] = self.feature_map[[c as usize, j]] + self.timbre[[voice, j]] + noise;
            }
        }
        out
    }

    /// About one word per three codes.
    fn text(&mut self, n_codes: usize) -> String {
        let words = (n_codes / 3 + self.rng.random_range(0..=1)).max(1);
        let mut s: Vec<&str> = (0..words).map(|_| LEXICON[self.rng.random_range(0..LEXICON.len())]).collect();
        let last = s.pop().expect("at least one word");
        let mut text = s.join(" ");
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(last);
        text.push('.');
        text
    }

    fn turn(&mut self, speaker: u8, voice: usize, n_codes: usize) -> SynthTurn {
        let codes = self.codes(voice, n_codes);
        let features = self.features(&codes, voice);
        let text = self.text(n_codes);
        SynthTurn { speaker, voice, text, codes, features }
    }

    fn response_turn(&mut self, speaker: u8, voice: usize) -> SynthTurn {
        let n = self.rng.random_range(1..=3);
        let codes = self.codes(voice, n);
        let features = self.features(&codes, voice);
        let text = RESPONSE_WORDS[self.rng.random_range(0..RESPONSE_WORDS.len())].to_string();
        SynthTurn { speaker, voice, text, codes, features }
    }

    fn voice_pair(&mut self) -> [usize; 2] {
        let a = self.rng.random_range(0..self.spec.num_voices);
        let mut b = self.rng.random_range(0..self.spec.num_voices - 1);
        if b >= a {
            b += 1;
        }
        [a, b]
    }
}

/// Builds all three curriculum corpora from `spec`. Pure in `spec`.
///
/// Stage 1 holds single turns; stage 2 holds alternating turns twice the
/// usual length; stage 3 holds alternating turns with short response-word
/// turns (1 to 3 codes) mixed in, at least one per session.
pub fn synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (k, d) = (spec.code_vocab, spec.feature_dim);
    let feature_map = Array2::from_shape_simple_fn((k, d), || rng.random_range(-1.0..1.0));
    let timbre = Array2::from_shape_simple_fn((spec.num_voices, d), || spec.timbre_scale * rng.random_range(-1.0..1.0));
    let mut g = Generator { spec, feature_map: &feature_map, timbre: &timbre, rng };
    let long = Span::new(spec.codes_per_turn.min * 2, spec.codes_per_turn.max * 2);

    let mut stage1 = Vec::with_capacity(spec.num_sessions);
    let mut stage2 = Vec::with_capacity(spec.num_sessions);
    let mut stage3 = Vec::with_capacity(spec.num_sessions);
    for i in 0..spec.num_sessions {
        let voice = g.rng.random_range(0..spec.num_voices);
        let n = spec.codes_per_turn.sample(&mut g.rng);
        stage1.push(SynthSession { id: format!("s1-{i:04}"), turns: vec![g.turn(1, voice, n)] });

        let voices = g.voice_pair();
        let turns = spec.turns_per_session.sample(&mut g.rng);
        let turns = (0..turns)
            .map(|t| {
                let n = long.sample(&mut g.rng);
                g.turn((t % 2) as u8 + 1, voices[t % 2], n)
            })
            .collect();
        stage2.push(SynthSession { id: format!("s2-{i:04}"), turns });

        let voices = g.voice_pair();
        let n_turns = spec.turns_per_session.sample(&mut g.rng).max(2);
        let forced = g.rng.random_range(1..n_turns);
        let turns = (0..n_turns)
            .map(|t| {
                let speaker = (t % 2) as u8 + 1;
                let short = spec.conversational && (t == forced || (t > 0 && g.rng.random::<f64>() < 0.25));
                if short {
                    g.response_turn(speaker, voices[t % 2])
                } else {
                    let n = spec.codes_per_turn.sample(&mut g.rng);
                    g.turn(speaker, voices[t % 2], n)
                }
            })
            .collect();
        stage3.push(SynthSession { id: format!("s3-{i:04}"), turns });
    }
    Ok(SynthCorpus { spec: spec.clone(), feature_map, timbre, stage1, stage2, stage3 })
}

/// Processed-segment metadata for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub session_id: String,
    pub speaker: String,
    pub start: f64,
    pub end: f64,
    pub transcript: String,
    /// Speech-quality score in [1, 5].
    pub score: f64,
    pub alignment_ok: bool,
}

impl UtteranceRecord {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.end > self.start) {
            return Err(Error::InvalidConfig(format!("record end {} not after start {}", self.end, self.start)));
        }
        if !(1.0..=5.0).contains(&self.score) {
            return Err(Error::InvalidConfig(format!("record score {} outside [1, 5]", self.score)));
        }
        Ok(())
    }
}

/// Records sharing a session id, in manifest order. Each record is one turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordSession {
    pub id: String,
    pub records: Vec<UtteranceRecord>,
}

pub const MIN_QUALITY_SCORE: f64 = 2.6;
pub const MIN_CONVERSATION_TURNS: usize = 10;
pub const MAX_MEAN_TURN_SECONDS: f64 = 30.0;

pub fn keep_single_turn(r: &UtteranceRecord) -> bool {
    r.score > MIN_QUALITY_SCORE && r.alignment_ok
}

pub fn keep_conversation(s: &RecordSession) -> bool {
    if s.records.len() <= MIN_CONVERSATION_TURNS {
        return false;
    }
    let speakers: BTreeSet<&str> = s.records.iter().map(|r| r.speaker.as_str()).collect();
    if speakers.len() != 2 {
        return false;
    }
    let mean = s.records.iter().map(UtteranceRecord::duration).sum::<f64>() / s.records.len() as f64;
    mean < MAX_MEAN_TURN_SECONDS
}

/// Quality and alignment filter for single-turn segments.
pub fn filter_single_turn(records: &[UtteranceRecord]) -> Vec<UtteranceRecord> {
    records.iter().filter(|r| keep_single_turn(r)).cloned().collect()
}

/// Keeps two-speaker sessions with more than 10 turns and short mean turns.
pub fn filter_conversations(sessions: &[RecordSession]) -> Vec<RecordSession> {
    sessions.iter().filter(|s| keep_conversation(s)).cloned().collect()
}

/// Groups records by session id in order of first appearance.
pub fn group_sessions(records: &[UtteranceRecord]) -> Vec<RecordSession> {
    let mut out: Vec<RecordSession> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for r in records {
        let i = *index.entry(r.session_id.clone()).or_insert_with(|| {
            out.push(RecordSession { id: r.session_id.clone(), records: Vec::new() });
            out.len() - 1
        });
        out[i].records.push(r.clone());
    }
    out
}

/// Metadata records for every turn of `sessions`, with timings from code
/// counts and synthetic quality scores drawn uniformly from [1, 5].
pub fn synth_records(sessions: &[SynthSession], seed: u64) -> Vec<UtteranceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for s in sessions {
        let mut clock = 0.0;
        for t in &s.turns {
            let dur = t.codes.len() as f64 / CODE_RATE_HZ;
            out.push(UtteranceRecord {
                session_id: s.id.clone(),
                speaker: t.speaker.to_string(),
                start: clock,
                end: clock + dur,
                transcript: t.text.clone(),
                score: rng.random_range(1.0..=5.0),
                alignment_ok: rng.random::<f64>() < 0.9,
            });
            clock += dur;
        }
    }
    out
}

pub fn write_manifest<W: Write>(records: &[UtteranceRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<UtteranceRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord = serde_json::from_str(&line).map_err(|e| Error::Format(format!("manifest line {}: {e}", i + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_manifest(records: &[UtteranceRecord], path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_manifest(records, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    read_manifest(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec() -> SynthSpec {
        SynthSpec { num_sessions: 6, turns_per_session: Span::new(3, 5), codes_per_turn: Span::new(4, 8), ..Default::default() }
    }

    #[test]
    fn noiseless_features_equal_linear_map() {
        let spec = SynthSpec { noise_sigma: 0.0, ..small_spec() };
        let c = synth_corpus(&spec).unwrap();
        for s in c.all_sessions() {
            for t in &s.turns {
                for (row, &code) in t.features.rows().into_iter().zip(&t.codes) {
                    assert_eq!(row.to_owned(), c.conditional_mean(code, t.voice));
                }
            }
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(synth_corpus(&small_spec()).unwrap(), synth_corpus(&small_spec()).unwrap());
        let other = SynthSpec { seed: 1, ..small_spec() };
        assert_ne!(synth_corpus(&small_spec()).unwrap(), synth_corpus(&other).unwrap());
    }

    #[test]
    fn invalid_ranges_rejected() {
        for spec in [
            SynthSpec { codes_per_turn: Span::new(5, 4), ..small_spec() },
            SynthSpec { turns_per_session: Span::new(0, 4), ..small_spec() },
            SynthSpec { noise_sigma: -1.0, ..small_spec() },
        ] {
            assert!(matches!(synth_corpus(&spec), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn stage_structure() {
        let c = synth_corpus(&small_spec()).unwrap();
        assert!(c.stage1.iter().all(|s| s.turns.len() == 1));
        for s in c.stage2.iter().chain(&c.stage3) {
            for (i, t) in s.turns.iter().enumerate() {
                assert_eq!(t.speaker as usize, i % 2 + 1);
            }
        }
        assert!(c.stage2.iter().flat_map(|s| &s.turns).all(|t| t.codes.len() >= 8));
        for s in &c.stage3 {
            assert!(s.turns.iter().any(|t| t.codes.len() <= 3), "session {} lacks a response turn", s.id);
        }
    }

    #[test]
    fn per_code_mean_matches_linear_map() {
        // Long single-voice turns with no timbre: every code's mean should
        // sit within 3σ/√n of its feature-map row.
        let spec =
            SynthSpec { num_sessions: 200, codes_per_turn: Span::new(60, 60), timbre_scale: 0.0, code_vocab: 8, ..Default::default() };
        let c = synth_corpus(&spec).unwrap();
        let mut sums = Array2::<f64>::zeros((8, spec.feature_dim));
        let mut counts = [0usize; 8];
        for s in &c.stage1 {
            for t in &s.turns {
                for (row, &code) in t.features.rows().into_iter().zip(&t.codes) {
                    counts[code as usize] += 1;
                    let mut r = sums.row_mut(code as usize);
                    r += &row;
                }
            }
        }
        assert!(counts.iter().sum::<usize>() >= 10_000);
        for k in 0..8 {
            let n = counts[k] as f64;
            assert!(n > 100.0);
            for j in 0..spec.feature_dim {
                let err = (sums[[k, j]] / n - c.feature_map[[k, j]]).abs();
                assert!(err < 3.0 * spec.noise_sigma / n.sqrt() + 1e-12, "code {k} dim {j} err {err}");
            }
        }
    }

    #[test]
    fn corpus_container_roundtrip() {
        let c = synth_corpus(&small_spec()).unwrap();
        let f = c.to_container().unwrap();
        let back = SynthCorpus::from_container(&TensorFile::read_from(f.to_bytes().as_slice()).unwrap()).unwrap();
        assert_eq!(back.stage3.len(), c.stage3.len());
        for (a, b) in c.all_sessions().zip(back.all_sessions()) {
            assert_eq!(a.id, b.id);
            for (ta, tb) in a.turns.iter().zip(&b.turns) {
                assert_eq!(ta.codes, tb.codes);
                assert_eq!(ta.text, tb.text);
                assert!((&ta.features - &tb.features).iter().all(|v| v.abs() < 1e-6));
            }
        }
    }

    fn rec(session: &str, speaker: &str, start: f64, end: f64, score: f64, ok: bool) -> UtteranceRecord {
        UtteranceRecord { session_id: session.into(), speaker: speaker.into(), start, end, transcript: "x".into(), score, alignment_ok: ok }
    }

    #[test]
    fn single_turn_thresholds() {
        let rs = vec![rec("a", "1", 0.0, 1.0, 2.6, true), rec("a", "1", 0.0, 1.0, 5.0, false), rec("a", "1", 0.0, 1.0, 2.61, true)];
        let kept = filter_single_turn(&rs);
        assert_eq!(kept, vec![rs[2].clone()]);
    }

    fn session(turns: usize, speakers: usize, mean: f64) -> RecordSession {
        let records =
            (0..turns).map(|i| rec("s", &((i % speakers) + 1).to_string(), i as f64 * mean, (i + 1) as f64 * mean, 3.0, true)).collect();
        RecordSession { id: "s".into(), records }
    }

    #[test]
    fn conversation_thresholds() {
        assert!(keep_conversation(&session(11, 2, 29.0)));
        assert!(!keep_conversation(&session(10, 2, 29.0)));
        assert!(!keep_conversation(&session(11, 2, 30.0)));
        assert!(!keep_conversation(&session(11, 3, 5.0)));
        assert!(!keep_conversation(&session(11, 1, 5.0)));
    }

    #[test]
    fn grouping_preserves_first_appearance_order() {
        let rs = vec![rec("b", "1", 0.0, 1.0, 3.0, true), rec("a", "1", 0.0, 1.0, 3.0, true), rec("b", "2", 1.0, 2.0, 3.0, true)];
        let g = group_sessions(&rs);
        assert_eq!(g.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), vec!["b", "a"]);
        assert_eq!(g[0].records.len(), 2);
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let c = synth_corpus(&small_spec()).unwrap();
        let rs = synth_records(&c.stage3, 3);
        assert!(rs.iter().all(|r| r.validate().is_ok()));
        let mut buf = Vec::new();
        write_manifest(&rs, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), rs.len());
        assert_eq!(read_manifest(buf.as_slice()).unwrap(), rs);
        let bad = br#"{"session_id":"x","speaker":"1","start":2.0,"end":1.0,"transcript":"","score":3.0,"alignment_ok":true}"#;
        assert!(read_manifest(&bad[..]).is_err());
    }

    fn arb_record() -> impl Strategy<Value = UtteranceRecord> {
        (0u8..4, 1u8..4, 0.0f64..100.0, 0.01f64..60.0, prop_oneof![Just(2.6), 1.0f64..5.0], any::<bool>())
            .prop_map(|(s, spk, start, dur, score, ok)| rec(&format!("s{s}"), &spk.to_string(), start, start + dur, score, ok))
    }

    proptest! {
        #[test]
        fn single_turn_filter_matches_predicate_scan(rs in prop::collection::vec(arb_record(), 0..60)) {
            let kept = filter_single_turn(&rs);
            let oracle: Vec<_> = rs.iter().filter(|r| r.score > 2.6 && r.alignment_ok).cloned().collect();
            prop_assert_eq!(&kept, &oracle);
            prop_assert_eq!(filter_single_turn(&kept), kept);
        }

        #[test]
        fn conversation_filter_is_idempotent(rs in prop::collection::vec(arb_record(), 0..120)) {
            let sessions = group_sessions(&rs);
            let once = filter_conversations(&sessions);
            prop_assert_eq!(filter_conversations(&once), once);
        }
    }

    #[test]
    fn synth_records_scores_in_range() {
        let c = synth_corpus(&small_spec()).unwrap();
        let rs = synth_records(&c.stage1, 0);
        assert!(rs.iter().all(|r| (1.0..=5.0).contains(&r.score) && r.end > r.start));
    }
}
