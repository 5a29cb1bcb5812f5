//! Causal decoder-only acoustic model over the unified sequence.
//!
//! Every element is embedded as the sum of
//!
//! * a content vector: speaker-tag, text or speech embedding, or a linear
//!   projection of the speaker embedding vector (plus its tag embedding);
//! * for text, the tag embedding of the turn's speaker and, when the prompt
//!   carries speaker embeddings, the same projection of that speaker's
//!   embedding;
//! * a segment-kind embedding and a learned absolute position embedding.
//!
//! Optionally, queries and keys are rotated by an alignment ordinal: the index
//! of a text token among all text tokens, and for the `i`-th speech token
//! `floor((i + 1) / tokens_per_symbol)`, the text index its successor belongs
//! to. Attention scores then depend on ordinal differences only, so the
//! text/speech alignment learned on short utterances carries over to long
//! dialogues. Prefix rows are not rotated.
//!
//! Logits and hidden states are read from the final layer norm at the rows
//! that predict speech tokens, `[S_start - 1, S_end - 1)`.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Graph, Init, ParameterStore, Reduction, Scalar, Tensor, Var, INIT_STD};
use crate::error::{Error, Result};
use crate::nn::{self, BlockConfig, KvCache};
use crate::sequence::{Element, UnifiedSequence};

const ORDINAL_BASE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ArConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub text_vocab: usize,
    /// Speech codebook plus the end-of-speech token (the last id).
    pub speech_vocab: usize,
    pub d_spk: usize,
    pub max_len: usize,
    pub max_speakers: usize,
    pub use_spk_embeddings: bool,
    pub ordinal_encoding: bool,
    pub tokens_per_symbol: usize,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            mlp_hidden: 128,
            text_vocab: 32,
            speech_vocab: 126,
            d_spk: 8,
            max_len: 512,
            max_speakers: 8,
            use_spk_embeddings: true,
            ordinal_encoding: true,
            tokens_per_symbol: 2,
        }
    }
}

impl ArConfig {
    pub fn eos(&self) -> usize {
        self.speech_vocab - 1
    }

    fn block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            mlp_hidden: self.mlp_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        if self.speech_vocab < 2 || self.tokens_per_symbol == 0 || self.n_layers == 0 {
            return Err(Error::Config("acoustic model sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AmOutput {
    /// `[|S|, speech_vocab]`.
    pub logits: Var,
    /// `[|S|, d_model]`, the conditioning for the flow head.
    pub hidden: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticModel {
    pub cfg: ArConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    /// 0 means greedy.
    pub temperature: f64,
    /// 0 means no top-k filtering.
    pub top_k: usize,
    pub seed: u64,
    /// Hard cap on generated tokens; defaults to 4x the expected length.
    pub max_tokens: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            seed: 0,
            max_tokens: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// Generated tokens, ending with EOS unless the cap was hit.
    pub tokens: Vec<usize>,
    pub hit_cap: bool,
}

impl SampleOutput {
    /// Tokens with the trailing EOS removed.
    pub fn speech(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(&t) if t == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Init scale of token and tag embeddings, large next to the position table so
/// content dominates the first layer norm.
const CONTENT_STD: f32 = 1.0;

impl AcousticModel {
    pub fn new(cfg: ArConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        let c = &self.cfg;
        let emb = Init::TruncNormal(INIT_STD);
        let content = Init::TruncNormal(CONTENT_STD);
        store.init("am.tag_emb", &[c.max_speakers, c.d_model], content)?;
        store.init("am.text_emb", &[c.text_vocab, c.d_model], content)?;
        store.init("am.speech_emb", &[c.speech_vocab, c.d_model], content)?;
        store.init("am.kind_emb", &[4, c.d_model], emb)?;
        store.init("am.pos_emb", &[c.max_len, c.d_model], emb)?;
        nn::init_linear(store, "am.spk_proj", c.d_spk, c.d_model)?;
        for l in 0..c.n_layers {
            nn::init_block(store, &format!("am.block{l}"), c.block())?;
        }
        nn::init_layer_norm(store, "am.ln_f", c.d_model)?;
        nn::init_linear(store, "am.head", c.d_model, c.speech_vocab)
    }

    fn check(&self, seq: &UnifiedSequence) -> Result<()> {
        let c = &self.cfg;
        if seq.len() > c.max_len {
            return Err(Error::TooLong {
                len: seq.len(),
                max: c.max_len,
            });
        }
        if seq.num_speakers() > c.max_speakers {
            return Err(Error::Invalid(format!(
                "{} speakers exceed the model's {}",
                seq.num_speakers(),
                c.max_speakers
            )));
        }
        for e in &seq.elements {
            let (tok, vocab) = match *e {
                Element::Text(x) => (x, c.text_vocab),
                Element::Speech(s) => (s, c.speech_vocab),
                _ => continue,
            };
            if tok >= vocab {
                return Err(Error::OutOfVocab {
                    token: tok as u32,
                    vocab,
                });
            }
        }
        if seq.uses_embeddings() && seq.embeddings.iter().any(|e| e.len() != c.d_spk) {
            return Err(Error::Invalid(format!("speaker embeddings must have dimension {}", c.d_spk)));
        }
        Ok(())
    }

    /// Alignment ordinal of every element (`None` for the prefix).
    fn ordinals(&self, seq: &UnifiedSequence) -> Vec<Option<f64>> {
        let mut text_idx = 0usize;
        seq.elements
            .iter()
            .enumerate()
            .map(|(p, e)| match e {
                Element::Text(_) => {
                    text_idx += 1;
                    Some((text_idx - 1) as f64)
                }
                Element::Speech(_) => {
                    let i = p - seq.s_span.start;
                    Some(((i + 1) / self.cfg.tokens_per_symbol) as f64)
                }
                _ => None,
            })
            .collect()
    }

    /// Input embeddings of the elements in `range`.
    fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore,
        seq: &UnifiedSequence,
        range: Range<usize>,
    ) -> Result<Var> {
        let c = &self.cfg;
        let owners = seq.owners();
        let n = range.len();
        let (mut tag_pos, mut tag_ids) = (vec![], vec![]);
        let (mut emb_pos, mut emb_ids, mut emb_rows) = (vec![], vec![], vec![]);
        let (mut text_pos, mut text_ids, mut text_owner) = (vec![], vec![], vec![]);
        let (mut sp_pos, mut sp_ids) = (vec![], vec![]);
        for (r, p) in range.clone().enumerate() {
            match seq.elements[p] {
                Element::SpkTag(k) => {
                    tag_pos.push(r);
                    tag_ids.push(k);
                }
                Element::SpkEmb(k) => {
                    emb_pos.push(r);
                    emb_ids.push(k);
                    emb_rows.extend(seq.embeddings[k].iter().map(|&v| T::from_f32(v)));
                }
                Element::Text(x) => {
                    text_pos.push(r);
                    text_ids.push(x);
                    text_owner.push(owners[p].unwrap_or(0));
                }
                Element::Speech(s) => {
                    sp_pos.push(r);
                    sp_ids.push(s);
                }
            }
        }
        let mut parts = Vec::new();
        if !tag_pos.is_empty() {
            let t = g.param(store, "am.tag_emb")?;
            parts.push((g.embedding_lookup(t, &tag_ids)?, tag_pos));
        }
        if !emb_pos.is_empty() {
            let e = g.constant(Tensor::matrix(emb_pos.len(), c.d_spk, emb_rows)?);
            let proj = nn::linear(g, store, "am.spk_proj", e)?;
            let t = g.param(store, "am.tag_emb")?;
            let tags = g.embedding_lookup(t, &emb_ids)?;
            parts.push((g.add(proj, tags)?, emb_pos));
        }
        if !text_pos.is_empty() {
            let t = g.param(store, "am.text_emb")?;
            let x = g.embedding_lookup(t, &text_ids)?;
            let tt = g.param(store, "am.tag_emb")?;
            let o = g.embedding_lookup(tt, &text_owner)?;
            let mut x = g.add(x, o)?;
            if seq.uses_embeddings() {
                let rows: Vec<T> = text_owner
                    .iter()
                    .flat_map(|&k| seq.embeddings[k].iter().map(|&v| T::from_f32(v)))
                    .collect();
                let e = g.constant(Tensor::matrix(text_owner.len(), c.d_spk, rows)?);
                let proj = nn::linear(g, store, "am.spk_proj", e)?;
                x = g.add(x, proj)?;
            }
            parts.push((x, text_pos));
        }
        if !sp_pos.is_empty() {
            let t = g.param(store, "am.speech_emb")?;
            parts.push((g.embedding_lookup(t, &sp_ids)?, sp_pos));
        }
        let x = g.interleave_rows(&parts, n)?;

        let kinds: Vec<usize> = range.clone().map(|p| seq.elements[p].kind()).collect();
        let kt = g.param(store, "am.kind_emb")?;
        let k = g.embedding_lookup(kt, &kinds)?;
        let x = g.add(x, k)?;
        let pt = g.param(store, "am.pos_emb")?;
        let pos: Vec<usize> = range.clone().collect();
        let pe = g.embedding_lookup(pt, &pos)?;
        g.add(x, pe)
    }

    /// Rotary phases of the elements in `range`, if ordinals are enabled.
    fn rotary<T: Scalar>(&self, seq: &UnifiedSequence, range: Range<usize>) -> Result<Option<nn::Rotary<T>>> {
        if !self.cfg.ordinal_encoding {
            return Ok(None);
        }
        let ords = self.ordinals(seq);
        nn::Rotary::new(&ords[range], self.cfg.block(), ORDINAL_BASE).map(Some)
    }

    /// Final-layer-norm states of every element, with causal attention.
    pub fn hidden_states<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore,
        seq: &UnifiedSequence,
    ) -> Result<Var> {
        self.check(seq)?;
        let mut x = self.embed(g, store, seq, 0..seq.len())?;
        let rot = self.rotary(seq, 0..seq.len())?;
        let mask = g.constant(nn::causal_mask(seq.len()));
        for l in 0..self.cfg.n_layers {
            x = nn::block(g, store, &format!("am.block{l}"), self.cfg.block(), x, Some(mask), rot.as_ref(), None)?;
        }
        nn::layer_norm(g, store, "am.ln_f", x)
    }

    /// Logits and hidden states at the rows that predict each speech token.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore,
        seq: &UnifiedSequence,
    ) -> Result<AmOutput> {
        if seq.s_span.is_empty() || seq.s_span.start == 0 {
            return Err(Error::Invalid("sequence has no speech segment to predict".into()));
        }
        let h = self.hidden_states(g, store, seq)?;
        let hidden = g.slice_rows(h, seq.s_span.start - 1, seq.s_span.end - 1)?;
        let logits = nn::linear(g, store, "am.head", hidden)?;
        Ok(AmOutput { logits, hidden })
    }

    /// Incremental decoding state: KV caches after a prompt.
    fn prefill(&self, store: &ParameterStore, seq: &UnifiedSequence) -> Result<(Vec<KvCache<f32>>, Vec<f32>)> {
        self.check(seq)?;
        let mut g = Graph::<f32>::new();
        let mut caches = vec![KvCache::default(); self.cfg.n_layers];
        let mut x = self.embed(&mut g, store, seq, 0..seq.len())?;
        let rot = self.rotary(seq, 0..seq.len())?;
        let mask = g.constant(nn::causal_mask(seq.len()));
        for (l, cache) in caches.iter_mut().enumerate() {
            let prefix = format!("am.block{l}");
            x = nn::block(&mut g, store, &prefix, self.cfg.block(), x, Some(mask), rot.as_ref(), Some(cache))?;
        }
        let last = g.slice_rows(x, seq.len() - 1, seq.len())?;
        let logits = self.head(&mut g, store, last)?;
        Ok((caches, logits))
    }

    fn head(&self, g: &mut Graph<f32>, store: &ParameterStore, x: Var) -> Result<Vec<f32>> {
        let h = nn::layer_norm(g, store, "am.ln_f", x)?;
        let l = nn::linear(g, store, "am.head", h)?;
        Ok(g.value(l).data().to_vec())
    }

    fn step(
        &self,
        store: &ParameterStore,
        seq: &UnifiedSequence,
        caches: &mut [KvCache<f32>],
    ) -> Result<Vec<f32>> {
        self.check(seq)?;
        let mut g = Graph::<f32>::new();
        let p = seq.len() - 1;
        let mut x = self.embed(&mut g, store, seq, p..p + 1)?;
        let rot = self.rotary(seq, p..p + 1)?;
        for (l, cache) in caches.iter_mut().enumerate() {
            let prefix = format!("am.block{l}");
            x = nn::block(&mut g, store, &prefix, self.cfg.block(), x, None, rot.as_ref(), Some(cache))?;
        }
        self.head(&mut g, store, x)
    }

    /// Autoregressive sampling after a `[P; T]` prompt.
    pub fn sample(&self, store: &ParameterStore, prompt: &UnifiedSequence, dec: &DecodeConfig) -> Result<SampleOutput> {
        if !prompt.s_span.is_empty() {
            return Err(Error::Invalid("prompt already contains speech tokens".into()));
        }
        let expected = self.cfg.tokens_per_symbol * prompt.script().text_len() + 1;
        let cap = dec
            .max_tokens
            .unwrap_or(4 * expected)
            .min(self.cfg.max_len.saturating_sub(prompt.len()));
        let mut rng = ChaCha8Rng::seed_from_u64(dec.seed);
        let mut seq = prompt.clone();
        let (mut caches, mut logits) = self.prefill(store, &seq)?;
        let mut tokens = Vec::new();
        while tokens.len() < cap {
            let tok = pick(&logits, dec, &mut rng);
            tokens.push(tok);
            if tok == self.cfg.eos() {
                return Ok(SampleOutput { tokens, hit_cap: false });
            }
            seq.push_speech(&[tok]);
            if tokens.len() < cap {
                logits = self.step(store, &seq, &mut caches)?;
            }
        }
        Ok(SampleOutput { tokens, hit_cap: true })
    }
}

/// Draws a token from `logits` (temperature, top-k); greedy at temperature 0.
pub fn pick(logits: &[f32], dec: &DecodeConfig, rng: &mut impl Rng) -> usize {
    let argmax = || {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        best
    };
    if dec.temperature <= 0.0 {
        return argmax();
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    if dec.top_k > 0 && dec.top_k < logits.len() {
        idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        idx.truncate(dec.top_k);
        idx.sort_unstable();
    }
    let m = idx.iter().map(|&i| logits[i] as f64).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = idx
        .iter()
        .map(|&i| ((logits[i] as f64 - m) / dec.temperature).exp())
        .collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, &wk) in w.iter().enumerate() {
        if u < wk {
            return idx[k];
        }
        u -= wk;
    }
    *idx.last().expect("nonempty vocabulary")
}

/// Mean next-token cross-entropy over the masked rows of `logits`.
pub fn am_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Invalid("loss mask selects no positions".into()));
    }
    g.cross_entropy(logits, targets, Some(mask), Reduction::Mean)
}
