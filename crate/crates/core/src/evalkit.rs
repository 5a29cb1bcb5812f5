//! Edit-distance metrics: CER, WER and concatenated minimum-permutation WER.

use std::collections::BTreeMap;
use std::fmt;

use itertools::Itertools;

use crate::error::{Error, Result};

/// Largest speaker count per side accepted by [`cpwer`].
pub const MAX_CPWER_SPEAKERS: usize = 8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub sub: usize,
    pub del: usize,
    pub ins: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.sub + self.del + self.ins
    }
}

impl std::ops::Add for EditCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            sub: self.sub + o.sub,
            del: self.del + o.del,
            ins: self.ins + o.ins,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match { r: usize, h: usize },
    Sub { r: usize, h: usize },
    Del { r: usize },
    Ins { h: usize },
}

fn dp_table<T: PartialEq>(r: &[T], h: &[T]) -> Vec<Vec<usize>> {
    let mut d = vec![vec![0usize; h.len() + 1]; r.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=h.len() {
        d[0][j] = j;
    }
    for i in 1..=r.len() {
        for j in 1..=h.len() {
            let diag = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = diag.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

/// Minimal Levenshtein alignment. Ties prefer match/substitution, then
/// deletion, then insertion.
pub fn align<T: PartialEq>(r: &[T], h: &[T]) -> Vec<EditOp> {
    let d = dp_table(r, h);
    let (mut i, mut j) = (r.len(), h.len());
    let mut ops = Vec::with_capacity(i.max(j));
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = r[i - 1] == h[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                ops.push(if same {
                    EditOp::Match { r: i - 1, h: j - 1 }
                } else {
                    EditOp::Sub { r: i - 1, h: j - 1 }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(EditOp::Del { r: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Ins { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn edit_distance<T: PartialEq>(r: &[T], h: &[T]) -> EditCounts {
    let mut c = EditCounts::default();
    for op in align(r, h) {
        match op {
            EditOp::Match { .. } => {}
            EditOp::Sub { .. } => c.sub += 1,
            EditOp::Del { .. } => c.del += 1,
            EditOp::Ins { .. } => c.ins += 1,
        }
    }
    c
}

/// Edit errors divided by reference length.
pub fn error_rate<T: PartialEq>(r: &[T], h: &[T]) -> Result<f64> {
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(edit_distance(r, h).total() as f64 / r.len() as f64)
}

pub fn cer(reference: &str, hyp: &str) -> Result<f64> {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hyp.chars().collect();
    error_rate(&r, &h)
}

pub fn wer(reference: &str, hyp: &str) -> Result<f64> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hyp.split_whitespace().collect();
    error_rate(&r, &h)
}

/// Tokenisation unit for transcript scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Char,
    Word,
}

impl Unit {
    pub fn tokens(self, text: &str) -> Vec<String> {
        match self {
            Unit::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
            Unit::Word => text.split_whitespace().map(String::from).collect(),
        }
    }
}

/// One speaker's utterances, in chronological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerTranscript {
    pub speaker: String,
    pub utterances: Vec<(usize, String)>,
}

impl SpeakerTranscript {
    pub fn new(speaker: impl Into<String>, utterances: Vec<(usize, String)>) -> Result<Self> {
        let t = Self {
            speaker: speaker.into(),
            utterances,
        };
        if t.utterances.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Invalid(format!(
                "chronological indices of speaker {} are not strictly increasing",
                t.speaker
            )));
        }
        Ok(t)
    }

    /// Concatenation of all utterances.
    pub fn tokens(&self, unit: Unit) -> Vec<String> {
        self.utterances.iter().flat_map(|(_, u)| unit.tokens(u)).collect()
    }
}

/// Parses `<chrono_index>\t<speaker_id>\t<text>` lines into per-speaker
/// transcripts, ordered by first appearance.
pub fn parse_transcripts(text: &str) -> Result<Vec<SpeakerTranscript>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_spk: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Parse { line: i + 1, detail };
        let mut parts = line.splitn(3, '\t');
        let (Some(idx), Some(spk)) = (parts.next(), parts.next()) else {
            return Err(bad("expected index<TAB>speaker<TAB>text".into()));
        };
        let idx: usize = idx.trim().parse().map_err(|_| bad(format!("bad index {idx:?}")))?;
        let text = parts.next().unwrap_or("").to_string();
        if !by_spk.contains_key(spk) {
            order.push(spk.to_string());
        }
        by_spk.entry(spk.to_string()).or_default().push((idx, text));
    }
    order
        .into_iter()
        .map(|spk| {
            let mut utts = by_spk.remove(&spk).unwrap_or_default();
            utts.sort_by_key(|(i, _)| *i);
            SpeakerTranscript::new(spk, utts)
        })
        .collect()
}

pub fn render_transcripts(ts: &[SpeakerTranscript]) -> String {
    let mut rows: Vec<(usize, &str, &str)> = ts
        .iter()
        .flat_map(|t| t.utterances.iter().map(move |(i, u)| (*i, t.speaker.as_str(), u.as_str())))
        .collect();
    rows.sort();
    rows.iter().map(|(i, s, u)| format!("{i}\t{s}\t{u}\n")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub counts: EditCounts,
    pub ref_len: usize,
    pub rate: f64,
    /// For cpWER: `assignment[i]` is the hypothesis speaker paired with
    /// reference speaker `i` (`None` for an empty pseudo-speaker).
    pub assignment: Vec<Option<usize>>,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rate\t{}\nsub\t{}\ndel\t{}\nins\t{}\nref_len\t{}",
            self.rate, self.counts.sub, self.counts.del, self.counts.ins, self.ref_len
        )
    }
}

/// Concatenated minimum-permutation error rate. Each side is concatenated
/// per speaker, the smaller side is padded with empty speakers, and the
/// speaker assignment with the fewest total errors is chosen (first in
/// lexicographic order on ties).
pub fn cpwer(refs: &[SpeakerTranscript], hyps: &[SpeakerTranscript], unit: Unit) -> Result<MetricReport> {
    for side in [refs.len(), hyps.len()] {
        if side > MAX_CPWER_SPEAKERS {
            return Err(Error::TooManySpeakers {
                got: side,
                max: MAX_CPWER_SPEAKERS,
            });
        }
    }
    let n = refs.len().max(hyps.len());
    let pad = |ts: &[SpeakerTranscript]| -> Vec<Vec<String>> {
        let mut v: Vec<Vec<String>> = ts.iter().map(|t| t.tokens(unit)).collect();
        v.resize(n, Vec::new());
        v
    };
    let (r, h) = (pad(refs), pad(hyps));
    let ref_len: usize = r.iter().map(Vec::len).sum();
    if ref_len == 0 {
        return Err(Error::EmptyReference);
    }
    let cost: Vec<Vec<EditCounts>> = r
        .iter()
        .map(|ri| h.iter().map(|hj| edit_distance(ri, hj)).collect())
        .collect();
    let mut best: Option<(usize, Vec<usize>)> = None;
    for perm in (0..n).permutations(n) {
        let total: usize = perm.iter().enumerate().map(|(i, &j)| cost[i][j].total()).sum();
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, perm));
        }
    }
    let (_, perm) = best.expect("n >= 1 since ref_len > 0");
    let counts = perm
        .iter()
        .enumerate()
        .fold(EditCounts::default(), |acc, (i, &j)| acc + cost[i][j]);
    Ok(MetricReport {
        counts,
        ref_len,
        rate: counts.total() as f64 / ref_len as f64,
        assignment: perm
            .iter()
            .take(refs.len())
            .map(|&j| (j < hyps.len()).then_some(j))
            .collect(),
    })
}

/// Plain error-rate report for a single reference/hypothesis pair.
pub fn report(reference: &[String], hyp: &[String]) -> Result<MetricReport> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let counts = edit_distance(reference, hyp);
    Ok(MetricReport {
        counts,
        ref_len: reference.len(),
        rate: counts.total() as f64 / reference.len() as f64,
        assignment: Vec::new(),
    })
}
