//! Direct preference optimisation over speech-token sequences.
//!
//! Candidates for a prompt are sampled from the acoustic model, scored by
//! text CER, and split into a perfect set (CER 0) and an imperfect set; every
//! perfect/imperfect combination becomes a (chosen, rejected) pair. Identical
//! candidates are merged before pairing.

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ar_model::{AcousticModel, DecodeConfig};
use crate::diffcore::{derive_seed, Graph, ParameterStore, Reduction, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::sequence::{DialogueScript, UnifiedSequence};
use crate::trainer::AdamW;

pub const DEFAULT_PAIR_CAP: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub prompt_id: u64,
    pub prompt: UnifiedSequence,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lr: 2e-4,
            epochs: 1,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("dpo beta must be > 0, got {}", self.beta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("dpo batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Sum of teacher-forced log-probabilities of `tokens` after `prompt`.
pub fn speech_logprob<T: Scalar>(
    g: &mut Graph<T>,
    model: &AcousticModel,
    store: &ParameterStore,
    prompt: &UnifiedSequence,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= model.cfg.speech_vocab) {
        return Err(Error::OutOfVocab {
            token: t as u32,
            vocab: model.cfg.speech_vocab,
        });
    }
    let mut seq = prompt.prompt();
    seq.push_speech(tokens);
    let out = model.forward(g, store, &seq)?;
    let nll = g.cross_entropy(out.logits, tokens, None, Reduction::Sum)?;
    g.scale(nll, T::from_f64(-1.0))
}

/// `log pi(y | x)` for a complete (EOS-terminated) speech sequence.
pub fn seq_logprob<T: Scalar>(
    g: &mut Graph<T>,
    model: &AcousticModel,
    store: &ParameterStore,
    prompt: &UnifiedSequence,
    tokens: &[usize],
) -> Result<Var> {
    if tokens.last() != Some(&model.cfg.eos()) {
        return Err(Error::Invalid("token sequence must end with EOS".into()));
    }
    speech_logprob(g, model, store, prompt, tokens)
}

/// Plain-value log-probability.
pub fn seq_logprob_value(
    model: &AcousticModel,
    store: &ParameterStore,
    prompt: &UnifiedSequence,
    tokens: &[usize],
) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let v = seq_logprob(&mut g, model, store, prompt, tokens)?;
    Ok(g.value(v).item())
}

/// `-log sigmoid(beta * ((pw - rw) - (pl - rl)))` on plain numbers.
pub fn dpo_loss_from_logps(pw: f64, pl: f64, rw: f64, rl: f64, beta: f64) -> f64 {
    let z = beta * ((pw - rw) - (pl - rl));
    // -log sigmoid(z) = softplus(-z)
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

/// DPO loss of one pair on the tape; the reference terms are constants.
pub fn dpo_pair_loss<T: Scalar>(
    g: &mut Graph<T>,
    policy_w: Var,
    policy_l: Var,
    ref_w: f64,
    ref_l: f64,
    beta: f64,
) -> Result<Var> {
    let diff = g.sub(policy_w, policy_l)?;
    let shift = g.constant(Tensor::scalar(T::from_f64(ref_l - ref_w)));
    let margin = g.add(diff, shift)?;
    let z = g.scale(margin, T::from_f64(beta))?;
    let ls = g.log_sigmoid(z)?;
    g.scale(ls, T::from_f64(-1.0))
}

/// Mean DPO loss over `pairs`, with `refs[i] = (log pi_ref(chosen), log
/// pi_ref(rejected))`.
pub fn dpo_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &AcousticModel,
    store: &ParameterStore,
    pairs: &[PreferencePair],
    refs: &[(f64, f64)],
    beta: f64,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Invalid("empty preference pair set".into()));
    }
    if refs.len() != pairs.len() {
        return Err(Error::Invalid(format!("{} reference scores for {} pairs", refs.len(), pairs.len())));
    }
    let mut losses = Vec::with_capacity(pairs.len());
    for (p, &(rw, rl)) in pairs.iter().zip(refs) {
        let pw = seq_logprob(g, model, store, &p.prompt, &p.chosen)?;
        let pl = seq_logprob(g, model, store, &p.prompt, &p.rejected)?;
        losses.push(dpo_pair_loss(g, pw, pl, rw, rl, beta)?);
    }
    let all = g.concat(&losses, 1)?;
    g.mean(all)
}

/// Reference log-probabilities of every pair under a frozen store.
pub fn reference_logps(model: &AcousticModel, reference: &ParameterStore, pairs: &[PreferencePair]) -> Result<Vec<(f64, f64)>> {
    pairs
        .iter()
        .map(|p| {
            Ok((
                seq_logprob_value(model, reference, &p.prompt, &p.chosen)?,
                seq_logprob_value(model, reference, &p.prompt, &p.rejected)?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairStatus {
    Paired,
    /// One of the two sets is empty; the prompt is skipped.
    NoPairs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    /// `(chosen, rejected)` candidate indices.
    pub pairs: Vec<(usize, usize)>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    pub status: PairStatus,
}

/// Pairs every perfect candidate with every imperfect one. Duplicate
/// candidates are merged first (the first occurrence is kept). When the
/// product exceeds `cap` (0 = unlimited) a uniform subsample of `cap` pairs
/// drawn with `seed` is returned in product order.
pub fn apo_build_pairs(candidates: &[Vec<usize>], cers: &[f64], cap: usize, seed: u64) -> Result<PairSet> {
    if candidates.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 candidates, got {}", candidates.len())));
    }
    if cers.len() != candidates.len() {
        return Err(Error::Invalid(format!("{} CERs for {} candidates", cers.len(), candidates.len())));
    }
    let mut chosen = Vec::new();
    let mut rejected = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        if candidates[..i].contains(c) {
            continue;
        }
        if cers[i] == 0.0 {
            chosen.push(i);
        } else {
            rejected.push(i);
        }
    }
    let product: Vec<(usize, usize)> = chosen
        .iter()
        .flat_map(|&w| rejected.iter().map(move |&l| (w, l)))
        .collect();
    let pairs = if cap > 0 && product.len() > cap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample_indices(&mut rng, product.len(), cap).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| product[i]).collect()
    } else {
        product
    };
    let status = if pairs.is_empty() {
        PairStatus::NoPairs
    } else {
        PairStatus::Paired
    };
    Ok(PairSet {
        pairs,
        chosen,
        rejected,
        status,
    })
}

/// A prompt for candidate harvesting.
#[derive(Debug, Clone)]
pub struct ApoPrompt {
    pub id: u64,
    pub prompt: UnifiedSequence,
    pub script: DialogueScript,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptStats {
    pub id: u64,
    pub unique: usize,
    pub chosen: usize,
    pub rejected: usize,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApoRound {
    pub pairs: Vec<PreferencePair>,
    pub stats: Vec<PromptStats>,
}

impl ApoRound {
    /// Fraction of prompts that yielded at least one pair.
    pub fn yield_rate(&self) -> f64 {
        if self.stats.is_empty() {
            return 0.0;
        }
        self.stats.iter().filter(|s| s.pairs > 0).count() as f64 / self.stats.len() as f64
    }
}

/// Samples `n` candidates per prompt (seed of candidate `j` of prompt `id`
/// derived from `dec.seed`), scores them with `cer` and pairs them.
pub fn apo_round(
    model: &AcousticModel,
    store: &ParameterStore,
    prompts: &[ApoPrompt],
    n: usize,
    dec: &DecodeConfig,
    cap: usize,
    cer: &dyn Fn(&DialogueScript, &[usize]) -> Result<f64>,
) -> Result<ApoRound> {
    let mut round = ApoRound {
        pairs: Vec::new(),
        stats: Vec::new(),
    };
    for p in prompts {
        let mut cands = Vec::with_capacity(n);
        let mut cers = Vec::with_capacity(n);
        for j in 0..n {
            let d = DecodeConfig {
                seed: derive_seed(dec.seed, &format!("apo/{}/{j}", p.id)),
                ..dec.clone()
            };
            let out = model.sample(store, &p.prompt, &d)?;
            cers.push(if out.hit_cap { 1.0 } else { cer(&p.script, &out.tokens)? });
            cands.push(out.tokens);
        }
        let set = apo_build_pairs(&cands, &cers, cap, derive_seed(dec.seed, &format!("cap/{}", p.id)))?;
        round.stats.push(PromptStats {
            id: p.id,
            unique: set.chosen.len() + set.rejected.len(),
            chosen: set.chosen.len(),
            rejected: set.rejected.len(),
            pairs: set.pairs.len(),
        });
        for &(w, l) in &set.pairs {
            // a capped candidate has no EOS and cannot be scored as a sequence
            if cands[l].last() != Some(&model.cfg.eos()) {
                continue;
            }
            round.pairs.push(PreferencePair {
                prompt_id: p.id,
                prompt: p.prompt.clone(),
                chosen: cands[w].clone(),
                rejected: cands[l].clone(),
            });
        }
    }
    Ok(round)
}

/// Trains the policy on `pairs` against a frozen copy of its starting
/// weights. Returns the mean loss of each minibatch.
pub fn dpo_train(
    model: &AcousticModel,
    store: &mut ParameterStore,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<Vec<f32>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Invalid("empty preference pair set".into()));
    }
    let reference = store.clone();
    let refs = reference_logps(model, &reference, pairs)?;
    let mut opt = AdamW::new(0.0);
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("dpo/{epoch}")));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grads();
            let mut total = 0.0;
            for &i in batch {
                let mut g = Graph::<f32>::new();
                let l = dpo_loss(&mut g, model, store, &pairs[i..=i], &refs[i..=i], cfg.beta)?;
                g.backward_scaled(l, 1.0 / batch.len() as f32)?;
                store.accumulate_grads(&g);
                total += g.value(l).item();
            }
            let mean = total / batch.len() as f32;
            if !mean.is_finite() {
                return Err(Error::NonFinite { op: "dpo_loss" });
            }
            losses.push(mean);
            opt.step(store, cfg.lr);
            store.zero_grads();
        }
    }
    Ok(losses)
}

/// `<prompt id>\t<chosen tokens>\t<rejected tokens>` per pair.
pub fn render_pairs(pairs: &[PreferencePair]) -> String {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    pairs
        .iter()
        .map(|p| format!("{}\t{}\t{}\n", p.prompt_id, join(&p.chosen), join(&p.rejected)))
        .collect()
}

/// Parses [`render_pairs`] output; prompts are rebuilt from their ids.
pub fn parse_pairs(text: &str, prompt_of: &dyn Fn(u64) -> Result<UnifiedSequence>) -> Result<Vec<PreferencePair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Parse { line: i + 1, detail };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, got {}", cols.len())));
        }
        let id: u64 = cols[0].parse().map_err(|_| bad(format!("bad prompt id {:?}", cols[0])))?;
        let toks = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| t.parse().map_err(|_| bad(format!("bad token {t:?}"))))
                .collect()
        };
        let (chosen, rejected) = (toks(cols[1])?, toks(cols[2])?);
        if chosen == rejected {
            return Err(bad("chosen equals rejected".into()));
        }
        out.push(PreferencePair {
            prompt_id: id,
            prompt: prompt_of(id)?,
            chosen,
            rejected,
        });
    }
    Ok(out)
}
