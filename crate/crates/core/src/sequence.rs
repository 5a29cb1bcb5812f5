//! The unified multi-speaker input sequence `[P; T; S]`.
//!
//! * `P`: one speaker tag per dialogue speaker, in tag order, each followed by
//!   that speaker's embedding when embeddings are enabled.
//! * `T`: for every turn, the turn's speaker tag followed by its text tokens.
//! * `S`: one contiguous run of speech tokens for the whole dialogue, with no
//!   speaker or turn delimiters. The caller appends the end-of-speech token.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub tag: usize,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Turn {
    pub speaker: usize,
    pub text: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DialogueScript {
    pub turns: Vec<Turn>,
    pub num_speakers: usize,
}

impl DialogueScript {
    pub fn new(turns: Vec<Turn>, num_speakers: usize) -> Result<Self> {
        let s = Self { turns, num_speakers };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::Invalid("dialogue has no turns".into()));
        }
        for (j, t) in self.turns.iter().enumerate() {
            if t.speaker >= self.num_speakers {
                return Err(Error::Invalid(format!(
                    "turn {j} names speaker {} but the dialogue has {}",
                    t.speaker, self.num_speakers
                )));
            }
            if t.text.is_empty() {
                return Err(Error::Invalid(format!("turn {j} has empty text")));
            }
        }
        Ok(())
    }

    pub fn num_turns(&self) -> usize {
        self.turns.len()
    }

    /// All text tokens in chronological order.
    pub fn flat_text(&self) -> Vec<usize> {
        self.turns.iter().flat_map(|t| t.text.iter().copied()).collect()
    }

    /// Speaker of every text token, aligned with [`Self::flat_text`].
    pub fn flat_speakers(&self) -> Vec<usize> {
        self.turns
            .iter()
            .flat_map(|t| std::iter::repeat_n(t.speaker, t.text.len()))
            .collect()
    }

    pub fn text_len(&self) -> usize {
        self.turns.iter().map(|t| t.text.len()).sum()
    }

    /// Parses `SPK<k>: <tok> <tok> ...` lines. Blank lines and `#` comments
    /// are skipped; the speaker count is one more than the largest tag.
    pub fn parse(text: &str, vocab: &TextVocab) -> Result<Self> {
        let mut turns = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |detail: String| Error::Parse { line: i + 1, detail };
            let (head, body) = line
                .split_once(':')
                .ok_or_else(|| bad("expected `SPK<k>: tokens`".into()))?;
            let speaker: usize = head
                .trim()
                .strip_prefix("SPK")
                .and_then(|k| k.parse().ok())
                .ok_or_else(|| bad(format!("bad speaker label {head:?}")))?;
            let text = body
                .split_whitespace()
                .map(|w| vocab.id(w).ok_or_else(|| bad(format!("unknown text token {w:?}"))))
                .collect::<Result<Vec<_>>>()?;
            turns.push(Turn { speaker, text });
        }
        let num_speakers = turns.iter().map(|t| t.speaker + 1).max().unwrap_or(0);
        Self::new(turns, num_speakers)
    }

    pub fn render(&self, vocab: &TextVocab) -> String {
        let mut out = String::new();
        for t in &self.turns {
            let words: Vec<&str> = t.text.iter().map(|&id| vocab.symbol(id)).collect();
            let _ = writeln!(out, "SPK{}: {}", t.speaker, words.join(" "));
        }
        out
    }
}

/// A fixed list of text symbols; ids are positions in the list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextVocab {
    symbols: Vec<String>,
}

impl TextVocab {
    pub fn new(symbols: Vec<String>) -> Self {
        Self { symbols }
    }

    /// One symbol per character of `chars`.
    pub fn from_chars(chars: &str) -> Self {
        Self::new(chars.chars().map(String::from).collect())
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, sym: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == sym)
    }

    pub fn symbol(&self, id: usize) -> &str {
        self.symbols.get(id).map_or("?", String::as_str)
    }

    pub fn spell(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.symbol(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Element {
    SpkTag(usize),
    /// Embedding of the speaker with this tag.
    SpkEmb(usize),
    Text(usize),
    Speech(usize),
}

impl Element {
    pub fn kind(&self) -> usize {
        match self {
            Element::SpkTag(_) => 0,
            Element::SpkEmb(_) => 1,
            Element::Text(_) => 2,
            Element::Speech(_) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedSequence {
    pub elements: Vec<Element>,
    /// Embedding of speaker `k` at index `k`.
    pub embeddings: Vec<Vec<f32>>,
    pub p_span: Range<usize>,
    pub t_span: Range<usize>,
    pub s_span: Range<usize>,
}

/// Builds `[P; T; S]`. An empty `speech_tokens` yields a prompt-only
/// sequence (`S` empty) suitable for generation.
pub fn build_prompt(
    profiles: &[SpeakerProfile],
    script: &DialogueScript,
    use_spk_embeddings: bool,
) -> Result<UnifiedSequence> {
    script.validate()?;
    let mut by_tag: Vec<Option<&SpeakerProfile>> = vec![None; script.num_speakers];
    for p in profiles {
        if p.tag < script.num_speakers {
            if by_tag[p.tag].is_some() {
                return Err(Error::Invalid(format!("duplicate speaker tag {}", p.tag)));
            }
            by_tag[p.tag] = Some(p);
        }
    }
    let dim = profiles.first().map_or(0, |p| p.embedding.len());
    let mut embeddings = Vec::with_capacity(script.num_speakers);
    for (k, p) in by_tag.iter().enumerate() {
        let p = p.ok_or_else(|| Error::Invalid(format!("no profile for speaker {k}")))?;
        if p.embedding.len() != dim {
            return Err(Error::Invalid("speaker embeddings differ in dimension".into()));
        }
        embeddings.push(p.embedding.clone());
    }

    let mut elements = Vec::new();
    for k in 0..script.num_speakers {
        elements.push(Element::SpkTag(k));
        if use_spk_embeddings {
            elements.push(Element::SpkEmb(k));
        }
    }
    let p_end = elements.len();
    for t in &script.turns {
        elements.push(Element::SpkTag(t.speaker));
        elements.extend(t.text.iter().map(|&x| Element::Text(x)));
    }
    let t_end = elements.len();
    Ok(UnifiedSequence {
        elements,
        embeddings,
        p_span: 0..p_end,
        t_span: p_end..t_end,
        s_span: t_end..t_end,
    })
}

pub fn build_sequence(
    profiles: &[SpeakerProfile],
    script: &DialogueScript,
    speech_tokens: &[usize],
    use_spk_embeddings: bool,
) -> Result<UnifiedSequence> {
    if speech_tokens.is_empty() {
        return Err(Error::Invalid("speech token sequence is empty".into()));
    }
    let mut seq = build_prompt(profiles, script, use_spk_embeddings)?;
    seq.push_speech(speech_tokens);
    Ok(seq)
}

impl UnifiedSequence {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn num_speakers(&self) -> usize {
        self.embeddings.len()
    }

    pub fn uses_embeddings(&self) -> bool {
        self.elements[self.p_span.clone()]
            .iter()
            .any(|e| matches!(e, Element::SpkEmb(_)))
    }

    pub fn speech(&self) -> Vec<usize> {
        self.elements[self.s_span.clone()]
            .iter()
            .map(|e| match e {
                Element::Speech(s) => *s,
                _ => unreachable!("S holds only speech tokens"),
            })
            .collect()
    }

    pub fn push_speech(&mut self, tokens: &[usize]) {
        self.elements.extend(tokens.iter().map(|&s| Element::Speech(s)));
        self.s_span.end = self.elements.len();
    }

    /// The prompt part `[P; T]` with `S` dropped.
    pub fn prompt(&self) -> UnifiedSequence {
        let mut p = self.clone();
        p.elements.truncate(self.s_span.start);
        p.s_span = self.s_span.start..self.s_span.start;
        p
    }

    /// The script encoded in `T`.
    pub fn script(&self) -> DialogueScript {
        let mut turns: Vec<Turn> = Vec::new();
        for e in &self.elements[self.t_span.clone()] {
            match *e {
                Element::SpkTag(k) => turns.push(Turn {
                    speaker: k,
                    text: Vec::new(),
                }),
                Element::Text(x) => turns.last_mut().expect("T starts with a tag").text.push(x),
                _ => {}
            }
        }
        DialogueScript {
            turns,
            num_speakers: self.num_speakers(),
        }
    }

    /// For every element, the speaker it belongs to: the tag itself for `P`
    /// entries, the turn's speaker for `T` entries, `None` inside `S`.
    pub fn owners(&self) -> Vec<Option<usize>> {
        let mut cur = None;
        self.elements
            .iter()
            .enumerate()
            .map(|(i, e)| match *e {
                Element::SpkTag(k) => {
                    cur = Some(k);
                    Some(k)
                }
                Element::SpkEmb(k) => Some(k),
                Element::Text(_) if self.t_span.contains(&i) => cur,
                _ => None,
            })
            .collect()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.p_span.start != 0
            || self.p_span.end != self.t_span.start
            || self.t_span.end != self.s_span.start
            || self.s_span.end != self.elements.len()
        {
            return bad("spans do not tile the sequence as P, T, S");
        }
        let n = self.num_speakers();
        let p = &self.elements[self.p_span.clone()];
        let with_emb = self.uses_embeddings();
        let expect: Vec<Element> = (0..n)
            .flat_map(|k| {
                let mut v = vec![Element::SpkTag(k)];
                if with_emb {
                    v.push(Element::SpkEmb(k));
                }
                v
            })
            .collect();
        if p != expect.as_slice() {
            return bad("P must hold each speaker tag once, in tag order");
        }
        let t = &self.elements[self.t_span.clone()];
        if !matches!(t.first(), Some(Element::SpkTag(_))) {
            return bad("T must start with a speaker tag");
        }
        for e in t {
            match *e {
                Element::SpkTag(k) if k >= n => return bad("T names a speaker missing from P"),
                Element::SpkTag(_) | Element::Text(_) => {}
                _ => return bad("T holds only tags and text"),
            }
        }
        if self.elements[self.s_span.clone()]
            .iter()
            .any(|e| !matches!(e, Element::Speech(_)))
        {
            return bad("S holds only speech tokens");
        }
        Ok(())
    }

    /// Serialises as a `spk <k> <floats>` line per speaker followed by one
    /// `seq` line of tagged integers (`t` tag, `e` embedding, `x` text, `s`
    /// speech). Floats use shortest round-trip formatting.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, e) in self.embeddings.iter().enumerate() {
            let _ = write!(out, "spk {k}");
            for v in e {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out.push_str("seq");
        for e in &self.elements {
            let _ = match e {
                Element::SpkTag(k) => write!(out, " t{k}"),
                Element::SpkEmb(k) => write!(out, " e{k}"),
                Element::Text(x) => write!(out, " x{x}"),
                Element::Speech(s) => write!(out, " s{s}"),
            };
        }
        out.push('\n');
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut embeddings = Vec::new();
        let mut elements = Vec::new();
        let mut seen_seq = false;
        for (i, line) in text.lines().enumerate() {
            let bad = |detail: String| Error::Parse { line: i + 1, detail };
            let mut words = line.split_whitespace();
            match words.next() {
                Some("spk") => {
                    let k: usize = words
                        .next()
                        .and_then(|w| w.parse().ok())
                        .ok_or_else(|| bad("missing speaker index".into()))?;
                    if k != embeddings.len() {
                        return Err(bad(format!("speaker {k} out of order")));
                    }
                    let v = words
                        .map(|w| w.parse::<f32>().map_err(|_| bad(format!("bad float {w:?}"))))
                        .collect::<Result<Vec<_>>>()?;
                    embeddings.push(v);
                }
                Some("seq") => {
                    seen_seq = true;
                    for w in words {
                        let (tag, num) = w.split_at(1);
                        let n: usize = num.parse().map_err(|_| bad(format!("bad element {w:?}")))?;
                        elements.push(match tag {
                            "t" => Element::SpkTag(n),
                            "e" => Element::SpkEmb(n),
                            "x" => Element::Text(n),
                            "s" => Element::Speech(n),
                            _ => return Err(bad(format!("bad element {w:?}"))),
                        });
                    }
                }
                None => {}
                Some(w) => return Err(bad(format!("unexpected line start {w:?}"))),
            }
        }
        if !seen_seq {
            return Err(Error::Parse {
                line: text.lines().count(),
                detail: "missing seq line".into(),
            });
        }
        let n = embeddings.len();
        let with_emb = elements.get(1) == Some(&Element::SpkEmb(0));
        let p_end = if with_emb { 2 * n } else { n };
        let s_start = elements
            .iter()
            .position(|e| matches!(e, Element::Speech(_)))
            .unwrap_or(elements.len());
        let seq = Self {
            p_span: 0..p_end.min(elements.len()),
            t_span: p_end.min(s_start)..s_start,
            s_span: s_start..elements.len(),
            elements,
            embeddings,
        };
        seq.validate()?;
        Ok(seq)
    }
}

/// Next-token loss mask: true at the positions whose successor is a speech
/// token, i.e. `S` shifted one step left.
pub fn loss_mask(seq: &UnifiedSequence) -> Vec<bool> {
    let mut mask = vec![false; seq.len()];
    for i in seq.s_span.clone() {
        if i > 0 {
            mask[i - 1] = true;
        }
    }
    mask
}
