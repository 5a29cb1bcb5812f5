//! Procedural toy speech world.
//!
//! Text is a string over 32 symbols. Each symbol is "spoken" as 8 frames of
//! `d_mel` features: a symbol-specific pattern plus a speaker-specific offset
//! plus Gaussian noise. Speakers come from a fixed pool, each with a unit
//! embedding; the offset is a fixed linear map of the embedding, so a model
//! can only reproduce a voice by reading its embedding.
//!
//! Discrete speech tokens follow from the text and the speaker:
//!
//! * factor 4 (2 tokens per symbol): an onset token `s`, then a continuation
//!   token `32 + 2s + g` where `g` is a one-bit speaker group;
//! * factor 8 (1 token per symbol): the token `s`, carrying no speaker
//!   information.
//!
//! A toy recogniser classifies each 8-frame window against the templates of
//! every (symbol, dialogue speaker) pair and is used to score generated
//! frames. Every sample is a pure function of `(world seed, stage, index)`.

use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{derive_seed, fnv1a, Tensor};
use crate::error::{Error, Result};
use crate::evalkit::{align, cpwer, error_rate, EditOp, MetricReport, SpeakerTranscript, Unit};
use crate::fsq::TokenizerItem;
use crate::sequence::{build_sequence, DialogueScript, SpeakerProfile, TextVocab, Turn};
use crate::trainer::{DataSource, Stage, TrainItem};

pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz012345";
pub const N_SYMBOLS: usize = 32;
pub const FRAMES_PER_SYMBOL: usize = 8;
pub const CODEBOOK: usize = 125;
pub const EOS: usize = CODEBOOK;
pub const SPEECH_VOCAB: usize = CODEBOOK + 1;

/// Default weights of 1..=8 speakers in long-form dialogues.
pub const SPEAKER_COUNT_WEIGHTS: [f64; 8] = [0.3, 0.25, 0.15, 0.1, 0.08, 0.05, 0.04, 0.03];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorldConfig {
    pub seed: u64,
    pub pool_size: usize,
    pub d_spk: usize,
    pub d_mel: usize,
    /// Frames per speech token: 4 or 8.
    pub factor: usize,
    pub use_spk_embeddings: bool,
    /// Scale of the per-symbol mean vector.
    pub symbol_scale: f32,
    /// Scale of the per-frame symbol shape.
    pub shape_amp: f32,
    /// Scale of the embedding-to-offset map.
    pub offset_scale: f32,
    pub noise: f32,
    /// Inclusive text length range of single-speaker samples.
    pub short_len: (usize, usize),
    /// Inclusive symbols-per-turn range of long-form turns.
    pub turn_len: (usize, usize),
    /// Turns beyond one per speaker in long-form dialogues, at most.
    pub extra_turns: usize,
    /// Relative weight of each speaker count `1..=len` in long-form
    /// dialogues.
    pub speaker_weights: Vec<f64>,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            pool_size: 32,
            d_spk: 8,
            d_mel: 8,
            factor: 4,
            use_spk_embeddings: true,
            symbol_scale: 1.0,
            shape_amp: 0.5,
            offset_scale: 0.6,
            noise: 0.05,
            short_len: (3, 8),
            turn_len: (2, 5),
            extra_turns: 2,
            speaker_weights: SPEAKER_COUNT_WEIGHTS.to_vec(),
        }
    }
}

impl ToyWorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.factor != 4 && self.factor != 8 {
            return Err(Error::Config(format!("factor must be 4 or 8, got {}", self.factor)));
        }
        if self.pool_size < 8 || self.d_spk == 0 || self.d_mel == 0 {
            return Err(Error::Config("pool_size must be >= 8 and dimensions positive".into()));
        }
        let w = &self.speaker_weights;
        if w.is_empty() || w.len() > 8 || w.iter().any(|x| !(*x >= 0.0)) || !(w.iter().sum::<f64>() > 0.0) {
            return Err(Error::Config(
                "speaker_weights needs 1..=8 non-negative weights with a positive sum".into(),
            ));
        }
        let ok = |r: (usize, usize)| r.0 >= 1 && r.0 <= r.1;
        if !ok(self.short_len) || !ok(self.turn_len) {
            return Err(Error::Config("length ranges must satisfy 1 <= lo <= hi".into()));
        }
        Ok(())
    }

    pub fn tokens_per_symbol(&self) -> usize {
        FRAMES_PER_SYMBOL / self.factor
    }
}

/// A generated dialogue with its tokens and frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub script: DialogueScript,
    /// Pool index of the speaker with each tag.
    pub speakers: Vec<usize>,
    pub profiles: Vec<SpeakerProfile>,
    /// Speech tokens, ending in EOS.
    pub tokens: Vec<usize>,
    /// `[symbols * 8, d_mel]`.
    pub frames: Tensor,
}

/// One recognised window: symbol and dialogue speaker tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Recognized {
    pub symbol: usize,
    pub speaker: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWorld {
    pub cfg: ToyWorldConfig,
    pub vocab: TextVocab,
    embeddings: Vec<Vec<f32>>,
    offsets: Vec<Vec<f32>>,
    /// `patterns[s][f]`: expected frame `f` of symbol `s` without offset.
    patterns: Vec<Vec<Vec<f32>>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    StandardNormal.sample(rng)
}

impl ToyWorld {
    pub fn new(cfg: ToyWorldConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "world"));
        let embeddings: Vec<Vec<f32>> = (0..cfg.pool_size)
            .map(|_| {
                let v: Vec<f32> = (0..cfg.d_spk).map(|_| normal(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let map: Vec<Vec<f32>> = (0..cfg.d_mel)
            .map(|_| (0..cfg.d_spk).map(|_| cfg.offset_scale * normal(&mut rng)).collect())
            .collect();
        let offsets = embeddings
            .iter()
            .map(|e| map.iter().map(|row| row.iter().zip(e).map(|(a, b)| a * b).sum()).collect())
            .collect();
        let patterns = (0..N_SYMBOLS)
            .map(|_| {
                let mean: Vec<f32> = (0..cfg.d_mel).map(|_| cfg.symbol_scale * normal(&mut rng)).collect();
                (0..FRAMES_PER_SYMBOL)
                    .map(|_| mean.iter().map(|m| m + cfg.shape_amp * normal(&mut rng)).collect())
                    .collect()
            })
            .collect();
        Ok(Self {
            vocab: TextVocab::from_chars(ALPHABET),
            cfg,
            embeddings,
            offsets,
            patterns,
        })
    }

    pub fn embedding(&self, speaker: usize) -> &[f32] {
        &self.embeddings[speaker]
    }

    pub fn offset(&self, speaker: usize) -> &[f32] {
        &self.offsets[speaker]
    }

    /// Speaker group bit carried by continuation tokens.
    pub fn group(&self, speaker: usize) -> usize {
        usize::from(self.embeddings[speaker][0] > 0.0)
    }

    /// Noise-free frame `f` of `symbol` spoken by pool speaker `speaker`.
    pub fn template(&self, symbol: usize, speaker: usize, f: usize) -> Vec<f32> {
        self.patterns[symbol][f]
            .iter()
            .zip(&self.offsets[speaker])
            .map(|(p, o)| p + o)
            .collect()
    }

    /// Tokens of `symbol` for the configured factor.
    pub fn symbol_tokens(&self, symbol: usize, speaker: usize) -> Vec<usize> {
        self.tokens_for(symbol, speaker, self.cfg.factor)
    }

    fn tokens_for(&self, symbol: usize, speaker: usize, factor: usize) -> Vec<usize> {
        if factor == 8 {
            vec![symbol]
        } else {
            vec![symbol, N_SYMBOLS + 2 * symbol + self.group(speaker)]
        }
    }

    /// Symbols recovered from a token stream (EOS and unknown ids skipped).
    pub fn decode_tokens(&self, tokens: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev: Option<usize> = None;
        for &t in tokens {
            if t < N_SYMBOLS {
                out.push(t);
                prev = Some(t);
            } else if self.cfg.factor == 4 && t < 3 * N_SYMBOLS {
                let s = (t - N_SYMBOLS) / 2;
                if prev != Some(s) {
                    out.push(s);
                }
                prev = None;
            } else {
                prev = None;
            }
        }
        out
    }

    /// Text CER of a token stream against a script.
    pub fn token_cer(&self, script: &DialogueScript, tokens: &[usize]) -> Result<f64> {
        error_rate(&script.flat_text(), &self.decode_tokens(tokens))
    }

    pub fn profiles(&self, speakers: &[usize]) -> Vec<SpeakerProfile> {
        speakers
            .iter()
            .enumerate()
            .map(|(tag, &k)| SpeakerProfile {
                tag,
                embedding: self.embeddings[k].clone(),
            })
            .collect()
    }

    /// Whether a dialogue belongs to the held-out split.
    pub fn is_held_out(&self, script: &DialogueScript, speakers: &[usize]) -> bool {
        let mut key = script.render(&self.vocab);
        for k in speakers {
            key.push_str(&format!("|{k}"));
        }
        fnv1a(key.as_bytes()).is_multiple_of(10)
    }

    fn draw_short(&self, rng: &mut ChaCha8Rng) -> (DialogueScript, Vec<usize>) {
        let (lo, hi) = self.cfg.short_len;
        let len = rng.gen_range(lo..=hi);
        let text = (0..len).map(|_| rng.gen_range(0..N_SYMBOLS)).collect();
        let speaker = rng.gen_range(0..self.cfg.pool_size);
        let script = DialogueScript {
            turns: vec![Turn { speaker: 0, text }],
            num_speakers: 1,
        };
        (script, vec![speaker])
    }

    fn draw_dialogue(&self, rng: &mut ChaCha8Rng, n: usize, turns: usize) -> (DialogueScript, Vec<usize>) {
        let mut pool: Vec<usize> = (0..self.cfg.pool_size).collect();
        pool.shuffle(rng);
        let speakers = pool[..n].to_vec();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        while order.len() < turns {
            let prev = *order.last().expect("nonempty");
            let next = (prev + rng.gen_range(1..n)) % n;
            order.push(next);
        }
        let (lo, hi) = self.cfg.turn_len;
        let turns = order
            .into_iter()
            .map(|speaker| Turn {
                speaker,
                text: (0..rng.gen_range(lo..=hi)).map(|_| rng.gen_range(0..N_SYMBOLS)).collect(),
            })
            .collect();
        (
            DialogueScript {
                turns,
                num_speakers: n,
            },
            speakers,
        )
    }

    fn draw_long(&self, rng: &mut ChaCha8Rng) -> (DialogueScript, Vec<usize>) {
        let n = WeightedIndex::new(&self.cfg.speaker_weights)
            .expect("validated weights")
            .sample(rng)
            + 1;
        let extra = if n == 1 { 0 } else { rng.gen_range(0..=self.cfg.extra_turns) };
        self.draw_dialogue(rng, n, n + extra)
    }

    /// Renders tokens and noisy frames of a script.
    pub fn realize(&self, script: &DialogueScript, speakers: &[usize], seed: u64) -> Result<ToySample> {
        script.validate()?;
        if speakers.len() != script.num_speakers {
            return Err(Error::Invalid(format!(
                "{} pool speakers for {} tags",
                speakers.len(),
                script.num_speakers
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "noise"));
        let mut tokens = Vec::new();
        let mut data = Vec::new();
        for turn in &script.turns {
            let k = speakers[turn.speaker];
            for &s in &turn.text {
                tokens.extend(self.symbol_tokens(s, k));
                for f in 0..FRAMES_PER_SYMBOL {
                    for v in self.template(s, k, f) {
                        data.push(v + self.cfg.noise * normal(&mut rng));
                    }
                }
            }
        }
        tokens.push(EOS);
        let rows = data.len() / self.cfg.d_mel;
        Ok(ToySample {
            script: script.clone(),
            profiles: self.profiles(speakers),
            speakers: speakers.to_vec(),
            tokens,
            frames: Tensor::matrix(rows, self.cfg.d_mel, data)?,
        })
    }

    /// Training sample `index` of a stage; held-out dialogues are skipped.
    pub fn sample(&self, stage: Stage, index: u64) -> Result<ToySample> {
        for attempt in 0u32.. {
            let seed = derive_seed(self.cfg.seed, &format!("sample/{}/{index}/{attempt}", stage.id()));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (script, speakers) = match stage {
                Stage::Short => self.draw_short(&mut rng),
                Stage::Long => self.draw_long(&mut rng),
            };
            if !self.is_held_out(&script, &speakers) {
                return self.realize(&script, &speakers, seed);
            }
        }
        unreachable!("held-out split is a strict subset")
    }

    /// Held-out dialogue `index` with exactly `n` speakers and `turns` turns.
    pub fn held_out(&self, n: usize, turns: usize, index: u64) -> Result<ToySample> {
        if n == 0 || n > self.cfg.pool_size || turns < n || (n == 1 && turns > 1) {
            return Err(Error::Invalid(format!("cannot build {turns} turns over {n} speakers")));
        }
        for attempt in 0u32.. {
            let seed = derive_seed(self.cfg.seed, &format!("heldout/{n}/{turns}/{index}/{attempt}"));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (script, speakers) = if n == 1 && turns == 1 {
                let (s, k) = self.draw_short(&mut rng);
                (s, k)
            } else {
                self.draw_dialogue(&mut rng, n, turns)
            };
            if self.is_held_out(&script, &speakers) {
                return self.realize(&script, &speakers, seed);
            }
        }
        unreachable!("held-out split is nonempty")
    }

    /// Training example for the joint model.
    pub fn train_item(&self, sample: &ToySample) -> Result<TrainItem> {
        Ok(TrainItem {
            seq: build_sequence(&sample.profiles, &sample.script, &sample.tokens, self.cfg.use_spk_embeddings)?,
            frames: sample.frames.clone(),
        })
    }

    /// Single-speaker frames with one symbol label per `factor`-frame window.
    pub fn tokenizer_batch(&self, start: u64, count: usize, factor: usize) -> Result<Vec<TokenizerItem>> {
        if factor != 4 && factor != 8 {
            return Err(Error::Config(format!("factor must be 4 or 8, got {factor}")));
        }
        (start..start + count as u64)
            .map(|i| {
                let s = self.sample(Stage::Short, i)?;
                let text = s.script.flat_text();
                let labels = (0..s.frames.rows() / factor)
                    .map(|j| text[j * factor / FRAMES_PER_SYMBOL])
                    .collect();
                Ok(TokenizerItem {
                    features: s.frames,
                    labels,
                })
            })
            .collect()
    }

    /// Classifies each 8-frame window (a trailing partial window included)
    /// against every (symbol, dialogue speaker) template.
    pub fn recognize(&self, frames: &Tensor, speakers: &[usize]) -> Result<Vec<Recognized>> {
        if frames.cols() != self.cfg.d_mel {
            return Err(Error::shape(
                "recognize",
                format!("{} feature columns, world has {}", frames.cols(), self.cfg.d_mel),
            ));
        }
        let rows = frames.rows();
        let mut out = Vec::new();
        let mut start = 0;
        while start < rows {
            let end = (start + FRAMES_PER_SYMBOL).min(rows);
            let mut best = (f32::INFINITY, Recognized { symbol: 0, speaker: 0 });
            for s in 0..N_SYMBOLS {
                for (tag, &k) in speakers.iter().enumerate() {
                    let mut d = 0.0;
                    for r in start..end {
                        let t = self.template(s, k, r - start);
                        d += frames.row(r).iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
                    }
                    if d < best.0 {
                        best = (d, Recognized { symbol: s, speaker: tag });
                    }
                }
            }
            out.push(best.1);
            start = end;
        }
        Ok(out)
    }

    /// CER of recognised symbols against the script text.
    pub fn frame_cer(&self, script: &DialogueScript, rec: &[Recognized]) -> Result<f64> {
        let hyp: Vec<usize> = rec.iter().map(|r| r.symbol).collect();
        error_rate(&script.flat_text(), &hyp)
    }

    /// Turns whose aligned windows are mostly attributed to the right
    /// speaker, and the number of turns.
    pub fn speaker_turn_accuracy(&self, script: &DialogueScript, rec: &[Recognized]) -> (usize, usize) {
        let hyp: Vec<usize> = rec.iter().map(|r| r.symbol).collect();
        let turn_of: Vec<usize> = script
            .turns
            .iter()
            .enumerate()
            .flat_map(|(i, t)| std::iter::repeat_n(i, t.text.len()))
            .collect();
        let mut votes = vec![vec![0usize; script.num_speakers]; script.turns.len()];
        for op in align(&script.flat_text(), &hyp) {
            if let EditOp::Match { r, h } | EditOp::Sub { r, h } = op {
                if let Some(v) = votes[turn_of[r]].get_mut(rec[h].speaker) {
                    *v += 1;
                }
            }
        }
        let correct = script
            .turns
            .iter()
            .zip(&votes)
            .filter(|(t, v)| {
                let top = v.iter().copied().max().unwrap_or(0);
                top > 0 && v[t.speaker] == top && v.iter().filter(|&&c| c == top).count() == 1
            })
            .count();
        (correct, script.turns.len())
    }

    /// cpCER: reference transcripts per speaker tag against hypothesis
    /// utterances formed by consecutive windows of the same speaker.
    pub fn cp_cer(&self, script: &DialogueScript, rec: &[Recognized]) -> Result<MetricReport> {
        let mut refs: Vec<Vec<(usize, String)>> = vec![Vec::new(); script.num_speakers];
        for (i, t) in script.turns.iter().enumerate() {
            refs[t.speaker].push((i, self.vocab.spell(&t.text)));
        }
        let refs = refs
            .into_iter()
            .enumerate()
            .map(|(k, u)| SpeakerTranscript::new(format!("spk{k}"), u))
            .collect::<Result<Vec<_>>>()?;
        let mut hyps: Vec<Vec<(usize, String)>> = vec![Vec::new(); script.num_speakers];
        let mut utt = 0;
        for (i, r) in rec.iter().enumerate() {
            if i > 0 && rec[i - 1].speaker != r.speaker {
                utt += 1;
            }
            let sym = self.vocab.symbol(r.symbol);
            match hyps[r.speaker].last_mut() {
                Some((j, text)) if *j == utt => text.push_str(sym),
                _ => hyps[r.speaker].push((utt, sym.to_string())),
            }
        }
        let hyps = hyps
            .into_iter()
            .enumerate()
            .filter(|(_, u)| !u.is_empty())
            .map(|(k, u)| SpeakerTranscript::new(format!("hyp{k}"), u))
            .collect::<Result<Vec<_>>>()?;
        cpwer(&refs, &hyps, Unit::Char)
    }
}

impl DataSource for ToyWorld {
    fn item(&self, stage: Stage, index: u64) -> Result<TrainItem> {
        self.train_item(&self.sample(stage, index)?)
    }
}

impl ToySample {
    /// `SPK<k>: ...` script lines, a `speakers` line and a `tokens` line.
    pub fn render(&self, vocab: &TextVocab) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        format!(
            "{}speakers {}\ntokens {}\n",
            self.script.render(vocab),
            join(&self.speakers),
            join(&self.tokens)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(factor: usize) -> ToyWorld {
        ToyWorld::new(ToyWorldConfig {
            factor,
            ..ToyWorldConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn samples_are_pure_functions_of_their_index() {
        let w = world(4);
        assert_eq!(w.sample(Stage::Long, 7).unwrap(), w.sample(Stage::Long, 7).unwrap());
        assert_ne!(w.sample(Stage::Long, 7).unwrap(), w.sample(Stage::Long, 8).unwrap());
    }

    #[test]
    fn token_and_frame_counts_follow_the_factor() {
        for factor in [4, 8] {
            let w = world(factor);
            for i in 0..20 {
                let s = w.sample(Stage::Long, i).unwrap();
                let n = s.script.text_len();
                assert_eq!(s.tokens.len(), n * (8 / factor) + 1);
                assert_eq!(s.frames.rows(), (s.tokens.len() - 1) * factor);
                assert_eq!(*s.tokens.last().unwrap(), EOS);
                assert!(s.tokens.iter().all(|&t| t < SPEECH_VOCAB));
            }
        }
    }

    #[test]
    fn decoding_inverts_the_token_map() {
        for factor in [4, 8] {
            let w = world(factor);
            for i in 0..20 {
                let s = w.sample(Stage::Long, i).unwrap();
                assert_eq!(w.decode_tokens(&s.tokens), s.script.flat_text());
                assert_eq!(w.token_cer(&s.script, &s.tokens).unwrap(), 0.0);
            }
        }
        let w = world(4);
        // a stray continuation still names its symbol
        assert_eq!(w.decode_tokens(&[N_SYMBOLS + 2 * 5 + 1, 3, EOS]), vec![5, 3]);
    }

    #[test]
    fn long_form_dialogues_respect_turn_rules() {
        let w = world(4);
        let mut seen_multi = false;
        for i in 0..200 {
            let s = w.sample(Stage::Long, i).unwrap();
            let sc = &s.script;
            assert!(sc.turns.len() >= sc.num_speakers);
            assert!(sc.turns.windows(2).all(|p| p[0].speaker != p[1].speaker));
            for k in 0..sc.num_speakers {
                assert!(sc.turns.iter().any(|t| t.speaker == k));
            }
            let mut ids = s.speakers.clone();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids.len(), s.speakers.len());
            assert!(!w.is_held_out(sc, &s.speakers));
            seen_multi |= sc.num_speakers > 1;
        }
        assert!(seen_multi);
    }

    #[test]
    fn stage_two_speaker_counts_follow_the_weights() {
        let w = world(8);
        let n = 10_000;
        let mut counts = [0usize; 8];
        for i in 0..n {
            counts[w.sample(Stage::Long, i).unwrap().script.num_speakers - 1] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let got = c as f64 / n as f64;
            assert!((got - SPEAKER_COUNT_WEIGHTS[k]).abs() < 0.02, "{} speakers: {got}", k + 1);
        }
    }

    #[test]
    fn stage_one_has_no_dialogues() {
        let w = world(8);
        for i in 0..10_000 {
            assert_eq!(w.sample(Stage::Short, i).unwrap().script.num_speakers, 1);
        }
    }

    #[test]
    fn held_out_split_is_disjoint() {
        let w = world(4);
        for i in 0..10 {
            let s = w.held_out(3, 6, i).unwrap();
            assert_eq!(s.script.num_speakers, 3);
            assert_eq!(s.script.turns.len(), 6);
            assert!(w.is_held_out(&s.script, &s.speakers));
        }
    }

    #[test]
    fn recogniser_reads_clean_frames() {
        let w = world(4);
        for i in 0..20 {
            let s = w.held_out(3, 6, i).unwrap();
            let rec = w.recognize(&s.frames, &s.speakers).unwrap();
            assert_eq!(w.frame_cer(&s.script, &rec).unwrap(), 0.0);
            assert_eq!(w.speaker_turn_accuracy(&s.script, &rec), (6, 6));
            assert_eq!(w.cp_cer(&s.script, &rec).unwrap().rate, 0.0);
        }
    }

    #[test]
    fn wrong_voice_is_detected() {
        let w = world(4);
        let s = w.held_out(2, 2, 0).unwrap();
        let swapped: Vec<usize> = s.speakers.iter().rev().copied().collect();
        let wrong = w.realize(&s.script, &swapped, 1).unwrap();
        let rec = w.recognize(&wrong.frames, &s.speakers).unwrap();
        assert_eq!(w.speaker_turn_accuracy(&s.script, &rec).0, 0);
    }

    #[test]
    fn tokenizer_labels_cover_each_window() {
        let w = world(4);
        let batch = w.tokenizer_batch(3, 2, 8).unwrap();
        for item in batch {
            assert_eq!(item.labels.len(), item.features.rows() / 8);
        }
    }
}
