//! Two-speaker interleaved token sequences.
//!
//! Layout (train mode):
//!
//! ```text
//! BOS SPK1 t̂¹ SPK2 t̂² | spk_1 t_1 spk_2 t_2 … | ŝ¹ SC ŝ² SC | s_1 SC s_2 SC … EOS
//!   prompt text        |  podcast text        | prompt speech | podcast speech
//! ```
//!
//! Infer mode stops after the SC closing ŝ². Only podcast speech codes and
//! their SC tokens carry loss.

use std::fmt::Write as _;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::log_sum_exp;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Special {
    Bos,
    Eos,
    Sc,
    Spk1,
    Spk2,
}

impl Special {
    pub const ALL: [Special; 5] = [Special::Bos, Special::Eos, Special::Sc, Special::Spk1, Special::Spk2];

    fn offset(self) -> u32 {
        self as u32
    }

    pub fn speaker(speaker: u8) -> Result<Self> {
        match speaker {
            1 => Ok(Special::Spk1),
            2 => Ok(Special::Spk2),
            s => Err(Error::Sequence(format!("speaker id {s} is not 1 or 2"))),
        }
    }
}

/// Id layout: text ids `[0, text)`, codes `[text, text + K)`, then the five specials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedVocab {
    pub text_vocab_size: usize,
    pub code_vocab_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Text(u32),
    Code(u32),
    Special(Special),
}

impl MixedVocab {
    pub fn new(text_vocab_size: usize, code_vocab_size: usize) -> Self {
        Self { text_vocab_size, code_vocab_size }
    }

    pub fn size(&self) -> usize {
        self.text_vocab_size + self.code_vocab_size + Special::ALL.len()
    }

    pub fn code_offset(&self) -> u32 {
        self.text_vocab_size as u32
    }

    pub fn special(&self, s: Special) -> u32 {
        (self.text_vocab_size + self.code_vocab_size) as u32 + s.offset()
    }

    pub fn text_id(&self, t: u32) -> Result<u32> {
        if (t as usize) < self.text_vocab_size {
            Ok(t)
        } else {
            Err(Error::UnknownToken(t))
        }
    }

    pub fn code_id(&self, c: u32) -> Result<u32> {
        if (c as usize) < self.code_vocab_size {
            Ok(self.code_offset() + c)
        } else {
            Err(Error::UnknownToken(c))
        }
    }

    pub fn classify(&self, id: u32) -> Result<TokenKind> {
        let i = id as usize;
        if i < self.text_vocab_size {
            Ok(TokenKind::Text(id))
        } else if i < self.text_vocab_size + self.code_vocab_size {
            Ok(TokenKind::Code(id - self.code_offset()))
        } else if i < self.size() {
            Ok(TokenKind::Special(Special::ALL[i - self.text_vocab_size - self.code_vocab_size]))
        } else {
            Err(Error::UnknownToken(id))
        }
    }

    /// Ids that may appear in generated podcast speech.
    pub fn speech_range(&self) -> std::ops::Range<usize> {
        self.text_vocab_size..self.text_vocab_size + self.code_vocab_size
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerPrompt {
    pub speaker: u8,
    pub text: Vec<u32>,
    pub codes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptTurn {
    pub speaker: u8,
    pub text: Vec<u32>,
    /// Present for training, absent for inference.
    pub codes: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    PromptText,
    PodcastText,
    PromptSpeech,
    PodcastSpeech,
}

impl Region {
    pub fn tag(self) -> &'static str {
        match self {
            Region::PromptText => "PROMPT_TEXT",
            Region::PodcastText => "PODCAST_TEXT",
            Region::PromptSpeech => "PROMPT_SPEECH",
            Region::PodcastSpeech => "PODCAST_SPEECH",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "PROMPT_TEXT" => Ok(Region::PromptText),
            "PODCAST_TEXT" => Ok(Region::PodcastText),
            "PROMPT_SPEECH" => Ok(Region::PromptSpeech),
            "PODCAST_SPEECH" => Ok(Region::PodcastSpeech),
            _ => Err(Error::Format(format!("unknown region tag {tag:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BuildMode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuiltSequence {
    pub tokens: Vec<u32>,
    pub region: Vec<Region>,
    pub loss_mask: Vec<bool>,
    /// Half-open token ranges of each podcast turn's codes plus its SC.
    pub turn_boundaries: Vec<(usize, usize)>,
}

impl BuiltSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn loss_token_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Tokens tagged `PODCAST_SPEECH`, in order.
    pub fn podcast_speech(&self) -> Vec<u32> {
        self.tokens.iter().zip(&self.region).filter(|(_, r)| **r == Region::PodcastSpeech).map(|(t, _)| *t).collect()
    }

    /// Line-oriented fixture form: `id REGION loss_bit` per token.
    pub fn to_fixture_text(&self) -> String {
        let mut s = String::new();
        for ((t, r), m) in self.tokens.iter().zip(&self.region).zip(&self.loss_mask) {
            writeln!(s, "{t} {} {}", r.tag(), u8::from(*m)).expect("write to string");
        }
        s
    }

    /// Parses [`BuiltSequence::to_fixture_text`]. Turn boundaries are
    /// recovered from runs of loss-masked tokens ending in `sc_id`.
    pub fn from_fixture_text(text: &str, sc_id: u32) -> Result<Self> {
        let mut seq = BuiltSequence { tokens: vec![], region: vec![], loss_mask: vec![], turn_boundaries: vec![] };
        for (n, line) in text.lines().enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [id, tag, bit] = parts.as_slice() else {
                return Err(Error::Format(format!("fixture line {}: expected 3 fields", n + 1)));
            };
            seq.tokens.push(id.parse().map_err(|_| Error::Format(format!("fixture line {}: bad id", n + 1)))?);
            seq.region.push(Region::from_tag(tag)?);
            seq.loss_mask.push(match *bit {
                "0" => false,
                "1" => true,
                _ => return Err(Error::Format(format!("fixture line {}: bad loss bit", n + 1))),
            });
        }
        let mut start = None;
        for i in 0..seq.tokens.len() {
            if seq.loss_mask[i] {
                let s = *start.get_or_insert(i);
                if seq.tokens[i] == sc_id {
                    seq.turn_boundaries.push((s, i + 1));
                    start = None;
                }
            }
        }
        Ok(seq)
    }
}

/// Merges runs of consecutive same-speaker turns by concatenating text and codes.
pub fn merge_adjacent_turns(turns: &[ScriptTurn]) -> Result<Vec<ScriptTurn>> {
    if turns.is_empty() {
        return Err(Error::Empty("script turns"));
    }
    let mut out: Vec<ScriptTurn> = Vec::with_capacity(turns.len());
    for t in turns {
        Special::speaker(t.speaker)?;
        match out.last_mut() {
            Some(prev) if prev.speaker == t.speaker => {
                prev.text.extend_from_slice(&t.text);
                prev.codes = match (prev.codes.take(), &t.codes) {
                    (Some(mut a), Some(b)) => {
                        a.extend_from_slice(b);
                        Some(a)
                    }
                    (None, None) => None,
                    _ => return Err(Error::Sequence("cannot merge a turn with codes into one without".into())),
                };
            }
            _ => out.push(t.clone()),
        }
    }
    Ok(out)
}

pub fn build_sequence(vocab: &MixedVocab, prompts: &[SpeakerPrompt; 2], turns: &[ScriptTurn], mode: BuildMode) -> Result<BuiltSequence> {
    for (i, p) in prompts.iter().enumerate() {
        if p.speaker as usize != i + 1 {
            return Err(Error::Sequence(format!("prompt {} must belong to speaker {}", i, i + 1)));
        }
        if p.text.is_empty() || p.codes.is_empty() {
            return Err(Error::Sequence(format!("prompt for speaker {} is empty", p.speaker)));
        }
    }
    for (i, t) in turns.iter().enumerate() {
        Special::speaker(t.speaker)?;
        if i > 0 && turns[i - 1].speaker == t.speaker {
            return Err(Error::Sequence(format!("turns {} and {} share speaker {}; merge first", i - 1, i, t.speaker)));
        }
        if t.text.is_empty() {
            return Err(Error::Sequence(format!("turn {i} has no text")));
        }
        if mode == BuildMode::Train && t.codes.as_ref().is_none_or(Vec::is_empty) {
            return Err(Error::Sequence(format!("training turn {i} has no codes")));
        }
    }

    let mut seq = BuiltSequence { tokens: vec![], region: vec![], loss_mask: vec![], turn_boundaries: vec![] };
    let push = |seq: &mut BuiltSequence, tok: u32, region: Region, loss: bool| {
        seq.tokens.push(tok);
        seq.region.push(region);
        seq.loss_mask.push(loss);
    };
    let sc = vocab.special(Special::Sc);

    push(&mut seq, vocab.special(Special::Bos), Region::PromptText, false);
    for p in prompts {
        push(&mut seq, vocab.special(Special::speaker(p.speaker)?), Region::PromptText, false);
        for &t in &p.text {
            push(&mut seq, vocab.text_id(t)?, Region::PromptText, false);
        }
    }
    for t in turns {
        push(&mut seq, vocab.special(Special::speaker(t.speaker)?), Region::PodcastText, false);
        for &x in &t.text {
            push(&mut seq, vocab.text_id(x)?, Region::PodcastText, false);
        }
    }
    for p in prompts {
        for &c in &p.codes {
            push(&mut seq, vocab.code_id(c)?, Region::PromptSpeech, false);
        }
        push(&mut seq, sc, Region::PromptSpeech, false);
    }
    if mode == BuildMode::Train {
        for t in turns {
            let start = seq.tokens.len();
            for &c in t.codes.as_deref().unwrap_or_default() {
                push(&mut seq, vocab.code_id(c)?, Region::PodcastSpeech, true);
            }
            push(&mut seq, sc, Region::PodcastSpeech, true);
            seq.turn_boundaries.push((start, seq.tokens.len()));
        }
        push(&mut seq, vocab.special(Special::Eos), Region::PodcastSpeech, false);
    }
    Ok(seq)
}

/// Stage-1 layout for one unprompted turn: `BOS spk t | s SC EOS`. The
/// segment's own speech acts as an implicit prompt, so every code carries loss.
pub fn build_single_turn(vocab: &MixedVocab, turn: &ScriptTurn) -> Result<BuiltSequence> {
    let spk = Special::speaker(turn.speaker)?;
    let codes = turn.codes.as_deref().filter(|c| !c.is_empty()).ok_or_else(|| Error::Sequence("single turn has no codes".into()))?;
    if turn.text.is_empty() {
        return Err(Error::Sequence("single turn has no text".into()));
    }
    let mut seq = BuiltSequence { tokens: vec![], region: vec![], loss_mask: vec![], turn_boundaries: vec![] };
    seq.tokens.push(vocab.special(Special::Bos));
    seq.region.push(Region::PromptText);
    seq.tokens.push(vocab.special(spk));
    seq.region.push(Region::PodcastText);
    for &t in &turn.text {
        seq.tokens.push(vocab.text_id(t)?);
        seq.region.push(Region::PodcastText);
    }
    let start = seq.tokens.len();
    for &c in codes {
        seq.tokens.push(vocab.code_id(c)?);
        seq.region.push(Region::PodcastSpeech);
    }
    seq.tokens.push(vocab.special(Special::Sc));
    seq.region.push(Region::PodcastSpeech);
    seq.turn_boundaries.push((start, seq.tokens.len()));
    seq.tokens.push(vocab.special(Special::Eos));
    seq.region.push(Region::PodcastSpeech);
    seq.loss_mask = (0..seq.tokens.len()).map(|i| i >= start && i + 1 < seq.tokens.len()).collect();
    Ok(seq)
}

impl BuiltSequence {
    /// Keeps the first `len` tokens and only the turns that fit entirely.
    pub fn truncated(&self, len: usize) -> BuiltSequence {
        if len >= self.tokens.len() {
            return self.clone();
        }
        let turn_boundaries: Vec<_> = self.turn_boundaries.iter().copied().filter(|&(_, e)| e <= len).collect();
        let mut loss_mask = vec![false; len];
        for &(s, e) in &turn_boundaries {
            loss_mask[s..e].iter_mut().for_each(|m| *m = true);
        }
        BuiltSequence { tokens: self.tokens[..len].to_vec(), region: self.region[..len].to_vec(), loss_mask, turn_boundaries }
    }
}

/// Splits generated speech tokens into turns at SC, alternating speakers
/// from `first_speaker`. Reading stops at EOS.
pub fn parse_generated(vocab: &MixedVocab, tokens: &[u32], first_speaker: u8) -> Result<Vec<(u8, Vec<u32>)>> {
    Special::speaker(first_speaker)?;
    let mut out = Vec::new();
    let mut current = Vec::new();
    let mut speaker = first_speaker;
    for &tok in tokens {
        match vocab.classify(tok)? {
            TokenKind::Code(c) => current.push(c),
            TokenKind::Special(Special::Sc) => {
                if current.is_empty() {
                    return Err(Error::ZeroLengthTurn(out.len()));
                }
                out.push((speaker, std::mem::take(&mut current)));
                speaker = 3 - speaker;
            }
            TokenKind::Special(Special::Eos) => break,
            _ => return Err(Error::UnknownToken(tok)),
        }
    }
    if !current.is_empty() {
        out.push((speaker, current));
    }
    Ok(out)
}

fn check_boundaries(boundaries: &[(usize, usize)], len: usize) -> Result<()> {
    if boundaries.is_empty() {
        return Err(Error::Empty("turn boundaries"));
    }
    let mut prev_end = 0;
    for &(s, e) in boundaries {
        if s >= e || e > len || s < prev_end {
            return Err(Error::Sequence(format!("invalid turn boundary ({s}, {e})")));
        }
        prev_end = e;
    }
    Ok(())
}

/// Row weights that turn a weighted sum of token losses into the mean over
/// turns of each turn's mean token loss.
pub fn per_turn_weights<A: Scalar>(boundaries: &[(usize, usize)], len: usize) -> Result<Vec<A>> {
    check_boundaries(boundaries, len)?;
    let mut w = vec![A::zero(); len];
    let n = boundaries.len() as f64;
    for &(s, e) in boundaries {
        let v = A::lit(1.0 / (n * (e - s) as f64));
        w[s..e].iter_mut().for_each(|x| *x = v);
    }
    Ok(w)
}

/// Mean over turns of the mean cross-entropy of that turn's rows.
/// `logits` row `i` scores `targets[i]`.
pub fn per_turn_ce_loss<A: Scalar>(logits: &Array2<A>, targets: &[u32], boundaries: &[(usize, usize)]) -> Result<f64> {
    if logits.nrows() != targets.len() {
        return Err(Error::DimMismatch { what: "targets", expected: logits.nrows(), got: targets.len() });
    }
    let w: Vec<A> = per_turn_weights(boundaries, targets.len())?;
    let mut total = 0.0;
    for (i, row) in logits.rows().into_iter().enumerate() {
        if w[i] == A::zero() {
            continue;
        }
        let t = targets[i] as usize;
        if t >= row.len() {
            return Err(Error::UnknownToken(targets[i]));
        }
        let r = row.to_vec();
        total += w[i].as_f64() * (log_sum_exp(&r) - r[t]).as_f64();
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const V: MixedVocab = MixedVocab { text_vocab_size: 10, code_vocab_size: 6 };

    fn prompts() -> [SpeakerPrompt; 2] {
        [SpeakerPrompt { speaker: 1, text: vec![1], codes: vec![0, 1] }, SpeakerPrompt { speaker: 2, text: vec![2], codes: vec![2, 3] }]
    }

    fn turn(speaker: u8, text: &[u32], codes: &[u32]) -> ScriptTurn {
        ScriptTurn { speaker, text: text.to_vec(), codes: Some(codes.to_vec()) }
    }

    #[test]
    fn vocab_layout() {
        assert_eq!(V.size(), 21);
        assert_eq!(V.code_id(0).unwrap(), 10);
        assert_eq!(V.special(Special::Bos), 16);
        assert_eq!(V.special(Special::Spk2), 20);
        assert_eq!(V.classify(12).unwrap(), TokenKind::Code(2));
        assert_eq!(V.classify(18).unwrap(), TokenKind::Special(Special::Sc));
        assert!(V.classify(21).is_err());
        assert!(V.code_id(6).is_err());
    }

    #[test]
    fn merge_examples() {
        let t = vec![turn(1, &[1], &[0]), turn(1, &[2], &[1]), turn(2, &[3], &[2])];
        let m = merge_adjacent_turns(&t).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0], turn(1, &[1, 2], &[0, 1]));
        let alt = vec![turn(1, &[1], &[0]), turn(2, &[2], &[1]), turn(1, &[3], &[2])];
        assert_eq!(merge_adjacent_turns(&alt).unwrap(), alt);
        assert!(matches!(merge_adjacent_turns(&[]), Err(Error::Empty(_))));
        assert!(merge_adjacent_turns(&[turn(3, &[1], &[0])]).is_err());
    }

    #[test]
    fn one_turn_loss_count() {
        let s = build_sequence(&V, &prompts(), &[turn(1, &[4], &[1, 2, 3])], BuildMode::Train).unwrap();
        assert_eq!(s.loss_token_count(), 4);
        assert_eq!(s.turn_boundaries.len(), 1);
    }

    #[test]
    fn infer_mode_ends_at_prompt_sc() {
        let t = ScriptTurn { speaker: 1, text: vec![4], codes: None };
        let s = build_sequence(&V, &prompts(), &[t], BuildMode::Infer).unwrap();
        assert_eq!(*s.tokens.last().unwrap(), V.special(Special::Sc));
        assert_eq!(*s.region.last().unwrap(), Region::PromptSpeech);
        assert!(!s.region.contains(&Region::PodcastSpeech));
        assert_eq!(s.loss_token_count(), 0);
    }

    #[test]
    fn two_turn_layout_by_hand() {
        // BOS=16 EOS=17 SC=18 SPK1=19 SPK2=20; code c -> 10 + c.
        let turns = [turn(1, &[5, 6], &[4]), turn(2, &[7], &[5, 0])];
        let s = build_sequence(&V, &prompts(), &turns, BuildMode::Train).unwrap();
        let expected = vec![
            16, 19, 1, 20, 2, // prompt text
            19, 5, 6, 20, 7, // podcast text
            10, 11, 18, 12, 13, 18, // prompt speech
            14, 18, 15, 10, 18, // podcast speech
            17,
        ];
        assert_eq!(s.tokens, expected);
        assert_eq!(s.turn_boundaries, vec![(16, 18), (18, 21)]);
        let fixture = include_str!("../tests/fixtures/two_turn_sequence.txt");
        assert_eq!(s.to_fixture_text(), fixture);
        assert_eq!(BuiltSequence::from_fixture_text(fixture, 18).unwrap(), s);
    }

    #[test]
    fn single_turn_layout() {
        let s = build_single_turn(&V, &turn(2, &[3, 4], &[1, 2])).unwrap();
        assert_eq!(s.tokens, vec![16, 20, 3, 4, 11, 12, 18, 17]);
        assert_eq!(s.turn_boundaries, vec![(4, 7)]);
        assert_eq!(s.loss_token_count(), 3);
        let t = s.truncated(6);
        assert!(t.turn_boundaries.is_empty());
        assert_eq!(t.loss_token_count(), 0);
    }

    #[test]
    fn build_rejects_bad_input() {
        let ok = turn(1, &[1], &[1]);
        assert!(build_sequence(&V, &prompts(), &[ok.clone(), ok.clone()], BuildMode::Train).is_err());
        assert!(build_sequence(&V, &prompts(), &[turn(3, &[1], &[1])], BuildMode::Train).is_err());
        let mut p = prompts();
        p[0].codes.clear();
        assert!(build_sequence(&V, &p, &[ok], BuildMode::Train).is_err());
        let no_codes = ScriptTurn { speaker: 1, text: vec![1], codes: None };
        assert!(build_sequence(&V, &prompts(), &[no_codes], BuildMode::Train).is_err());
    }

    #[test]
    fn parse_examples() {
        let sc = V.special(Special::Sc);
        let eos = V.special(Special::Eos);
        let got = parse_generated(&V, &[10, 11, sc, 12, sc, eos], 1).unwrap();
        assert_eq!(got, vec![(1, vec![0, 1]), (2, vec![2])]);
        assert!(matches!(parse_generated(&V, &[sc, 10], 1), Err(Error::ZeroLengthTurn(0))));
        assert!(matches!(parse_generated(&V, &[10, sc, sc], 1), Err(Error::ZeroLengthTurn(1))));
        assert!(matches!(parse_generated(&V, &[3], 1), Err(Error::UnknownToken(3))));
        assert_eq!(parse_generated(&V, &[10, sc, 11], 2).unwrap(), vec![(2, vec![0]), (1, vec![1])]);
    }

    #[test]
    fn per_turn_loss_examples() {
        let uniform = Array2::<f64>::zeros((3, 7));
        let l = per_turn_ce_loss(&uniform, &[0, 3, 6], &[(0, 3)]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);

        // Turn losses a (2 tokens) and b (4 tokens) average to (a + b) / 2.
        let mut logits = Array2::<f64>::zeros((6, 2));
        logits[[0, 0]] = 1.0;
        logits[[1, 0]] = 1.0;
        let a = (1f64.exp() + 1.0).ln() - 1.0;
        let b = 2f64.ln();
        let l = per_turn_ce_loss(&logits, &[0, 0, 1, 1, 1, 1], &[(0, 2), (2, 6)]).unwrap();
        assert!((l - (a + b) / 2.0).abs() < 1e-12);
        assert!(matches!(per_turn_ce_loss(&logits, &[0; 6], &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn per_turn_loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let (t, v) = (rng.random_range(2..30), rng.random_range(2..12));
            let logits: Array2<f64> = Array2::from_shape_simple_fn((t, v), || rng.random_range(-4.0..4.0));
            let targets: Vec<u32> = (0..t).map(|_| rng.random_range(0..v) as u32).collect();
            let mut cuts: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0..=t)).collect();
            cuts.extend([0, t]);
            cuts.sort();
            cuts.dedup();
            let bounds: Vec<(usize, usize)> = cuts.windows(2).map(|w| (w[0], w[1])).collect();
            let mut turn_means = Vec::new();
            for &(s, e) in &bounds {
                let mut sum = 0.0;
                for i in s..e {
                    let z: f64 = (0..v).map(|j| logits[[i, j]].exp()).sum();
                    sum += -(logits[[i, targets[i] as usize]].exp() / z).ln();
                }
                turn_means.push(sum / (e - s) as f64);
            }
            let oracle = turn_means.iter().sum::<f64>() / turn_means.len() as f64;
            let got = per_turn_ce_loss(&logits, &targets, &bounds).unwrap();
            assert!((got - oracle).abs() < 1e-6);
        }
    }

    fn arb_turns(with_codes: bool) -> impl Strategy<Value = Vec<ScriptTurn>> {
        prop::collection::vec((1u8..=2, prop::collection::vec(0u32..10, 1..4), prop::collection::vec(0u32..6, 1..5)), 1..12).prop_map(
            move |v| v.into_iter().map(|(speaker, text, codes)| ScriptTurn { speaker, text, codes: with_codes.then_some(codes) }).collect(),
        )
    }

    proptest! {
        #[test]
        fn merge_alternates_and_preserves_text(turns in arb_turns(true)) {
            let m = merge_adjacent_turns(&turns).unwrap();
            prop_assert!(m.windows(2).all(|w| w[0].speaker != w[1].speaker));
            let all: Vec<u32> = turns.iter().flat_map(|t| t.text.clone()).collect();
            let merged: Vec<u32> = m.iter().flat_map(|t| t.text.clone()).collect();
            prop_assert_eq!(all, merged);
            prop_assert_eq!(merge_adjacent_turns(&m).unwrap(), m.clone());
            let alternating = turns.windows(2).all(|w| w[0].speaker != w[1].speaker);
            prop_assert_eq!(m.len() == turns.len(), alternating);
        }

        #[test]
        fn build_parse_roundtrip(turns in arb_turns(true)) {
            let m = merge_adjacent_turns(&turns).unwrap();
            let s = build_sequence(&V, &prompts(), &m, BuildMode::Train).unwrap();
            let order: Vec<Region> = s.region.to_vec();
            prop_assert!(order.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(s.loss_mask.iter().zip(&s.region).all(|(m, r)| !m || *r == Region::PodcastSpeech));
            let covered: usize = s.turn_boundaries.iter().map(|(a, b)| b - a).sum();
            prop_assert_eq!(covered, s.loss_token_count());
            let parsed = parse_generated(&V, &s.podcast_speech(), m[0].speaker).unwrap();
            let expected: Vec<(u8, Vec<u32>)> = m.iter().map(|t| (t.speaker, t.codes.clone().unwrap())).collect();
            prop_assert_eq!(parsed, expected);
        }
    }
}
