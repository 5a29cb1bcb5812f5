//! Run-directory orchestration behind the command line.
//!
//! A run directory holds `config.echo` (every resolved key), `metrics.tsv`,
//! `checkpoints/` and `reports/`. Every subcommand is a pure function of the
//! config file and its arguments, so reruns reproduce their outputs exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::ar_model::{ArConfig, DecodeConfig};
use crate::diffcore::{derive_seed, grad_check, GradCheckConfig, GradCheckReport, Graph, LossFn, ParameterStore, Scalar, Var};
use crate::error::{Error, Result};
use crate::evalkit::{cpwer, parse_transcripts, report, MetricReport, Unit};
use crate::flowmatch::{make_chunk_mask, ChunkMask, ChunkSampling, FlowConfig};
use crate::fsq::{FsqConfig, Tokenizer};
use crate::preference::{apo_round, dpo_train, parse_pairs, render_pairs, ApoPrompt, DpoConfig, DEFAULT_PAIR_CAP};
use crate::sequence::{build_prompt, build_sequence};
use crate::toytask::{ToySample, ToyWorld, ToyWorldConfig, SPEAKER_COUNT_WEIGHTS, SPEECH_VOCAB};
use crate::trainer::{
    create_metrics, eval_flow_loss, joint_loss, load_weights, FlowNoise, JointModel, Mode, Stage, StageConfig, TrainConfig,
    Trainer,
};

/// Resolved configuration: every key has a value.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub mode: Mode,
    pub lambda: f32,
    pub factor: usize,
    pub use_spk_embeddings: bool,
    pub chunk_sampling: ChunkSampling,
    pub batch_size: usize,
    pub peak_lr: f32,
    pub warmup_steps: usize,
    pub weight_decay: f32,
    pub grad_clip: f32,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub am_d_model: usize,
    pub am_layers: usize,
    pub am_heads: usize,
    pub am_mlp: usize,
    pub fm_d_model: usize,
    pub fm_layers: usize,
    pub fm_heads: usize,
    pub fm_mlp: usize,
    pub fm_time_dim: usize,
    pub euler_steps: usize,
    pub world_seed: u64,
    pub noise: f32,
    pub symbol_scale: f32,
    pub shape_amp: f32,
    pub offset_scale: f32,
    pub short_min: usize,
    pub short_max: usize,
    pub turn_min: usize,
    pub turn_max: usize,
    pub extra_turns: usize,
    pub speaker_weights: Vec<f64>,
    pub eval_prompts: usize,
    pub eval_speakers: usize,
    pub eval_turns: usize,
    /// Inference chunk size; 0 means whole utterance.
    pub eval_chunk: usize,
    pub apo_n: usize,
    pub apo_prompts: usize,
    pub apo_temperature: f64,
    pub apo_top_k: usize,
    pub apo_cap: usize,
    pub dpo_beta: f64,
    pub dpo_lr: f32,
    pub dpo_epochs: usize,
    pub dpo_batch: usize,
    pub gradcheck_tolerance: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Mode::E2e,
            lambda: 1.0,
            factor: 4,
            use_spk_embeddings: true,
            chunk_sampling: ChunkSampling::Random,
            batch_size: 8,
            peak_lr: 5e-3,
            warmup_steps: 50,
            weight_decay: 0.01,
            grad_clip: 1.0,
            stage1_steps: 2000,
            stage2_steps: 1000,
            am_d_model: 48,
            am_layers: 2,
            am_heads: 4,
            am_mlp: 96,
            fm_d_model: 32,
            fm_layers: 2,
            fm_heads: 2,
            fm_mlp: 64,
            fm_time_dim: 16,
            euler_steps: 10,
            world_seed: 2024,
            noise: 0.05,
            symbol_scale: 1.0,
            shape_amp: 0.5,
            offset_scale: 0.6,
            short_min: 3,
            short_max: 8,
            turn_min: 2,
            turn_max: 5,
            extra_turns: 2,
            speaker_weights: SPEAKER_COUNT_WEIGHTS.to_vec(),
            eval_prompts: 16,
            eval_speakers: 3,
            eval_turns: 6,
            eval_chunk: 0,
            apo_n: 8,
            apo_prompts: 32,
            apo_temperature: 1.0,
            apo_top_k: 0,
            apo_cap: DEFAULT_PAIR_CAP,
            dpo_beta: 0.1,
            dpo_lr: 2e-4,
            dpo_epochs: 1,
            dpo_batch: 4,
            gradcheck_tolerance: 1e-3,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident),* $(,)?) => {
        const KEYS: &[&str] = &[$(stringify!($key)),*];

        impl Config {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => self.$key = ConfigValue::parse_value(key, value)?,)*
                    _ => {
                        return Err(Error::UnknownKey {
                            key: key.to_string(),
                            valid: KEYS.join(", "),
                        })
                    }
                }
                Ok(())
            }

            /// Every key with its resolved value, one `key = value` per line.
            pub fn echo(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{} = {}", stringify!($key), self.$key.render_value());)*
                out
            }
        }
    };
}

config_keys!(
    seed, mode, lambda, factor, use_spk_embeddings, chunk_sampling, batch_size, peak_lr, warmup_steps,
    weight_decay, grad_clip, stage1_steps, stage2_steps, am_d_model, am_layers, am_heads, am_mlp, fm_d_model,
    fm_layers, fm_heads, fm_mlp, fm_time_dim, euler_steps, world_seed, noise, symbol_scale, shape_amp,
    offset_scale, short_min, short_max, turn_min, turn_max, extra_turns, speaker_weights, eval_prompts,
    eval_speakers, eval_turns, eval_chunk, apo_n, apo_prompts, apo_temperature, apo_top_k, apo_cap, dpo_beta,
    dpo_lr, dpo_epochs, dpo_batch, gradcheck_tolerance,
);

trait ConfigValue: Sized {
    fn parse_value(key: &str, v: &str) -> Result<Self>;
    fn render_value(&self) -> String;
}

fn bad_value(key: &str, v: &str) -> Error {
    Error::Config(format!("cannot parse {v:?} for key {key}"))
}

macro_rules! plain_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(key: &str, v: &str) -> Result<Self> {
                v.parse().map_err(|_| bad_value(key, v))
            }
            fn render_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_value!(u64, usize, f32, f64, bool, Mode);

impl ConfigValue for ChunkSampling {
    fn parse_value(key: &str, v: &str) -> Result<Self> {
        match v {
            "random" => Ok(ChunkSampling::Random),
            "full" => Ok(ChunkSampling::Full),
            _ => Err(bad_value(key, v)),
        }
    }
    fn render_value(&self) -> String {
        match self {
            ChunkSampling::Random => "random",
            ChunkSampling::Full => "full",
        }
        .to_string()
    }
}

impl ConfigValue for Vec<f64> {
    fn parse_value(key: &str, v: &str) -> Result<Self> {
        v.split(',')
            .map(|x| x.trim().parse().map_err(|_| bad_value(key, v)))
            .collect()
    }
    fn render_value(&self) -> String {
        self.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }
}

impl Config {
    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                detail: format!("expected key = value, got {raw:?}"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn validate(&self) -> Result<()> {
        self.world_config().validate()?;
        self.train_config().validate()?;
        let model = self.model()?;
        model.am.cfg.validate()?;
        model.fm.cfg.validate()?;
        self.dpo_config().validate()
    }

    pub fn world_config(&self) -> ToyWorldConfig {
        ToyWorldConfig {
            seed: self.world_seed,
            factor: self.factor,
            use_spk_embeddings: self.use_spk_embeddings,
            symbol_scale: self.symbol_scale,
            shape_amp: self.shape_amp,
            offset_scale: self.offset_scale,
            noise: self.noise,
            short_len: (self.short_min, self.short_max),
            turn_len: (self.turn_min, self.turn_max),
            extra_turns: self.extra_turns,
            speaker_weights: self.speaker_weights.clone(),
            ..ToyWorldConfig::default()
        }
    }

    pub fn world(&self) -> Result<ToyWorld> {
        ToyWorld::new(self.world_config())
    }

    pub fn model(&self) -> Result<JointModel> {
        let w = self.world_config();
        let am = ArConfig {
            d_model: self.am_d_model,
            n_layers: self.am_layers,
            n_heads: self.am_heads,
            mlp_hidden: self.am_mlp,
            speech_vocab: SPEECH_VOCAB,
            d_spk: w.d_spk,
            use_spk_embeddings: self.use_spk_embeddings,
            tokens_per_symbol: w.tokens_per_symbol(),
            ..ArConfig::default()
        };
        let fm = FlowConfig {
            d_model: self.fm_d_model,
            n_layers: self.fm_layers,
            n_heads: self.fm_heads,
            mlp_hidden: self.fm_mlp,
            time_dim: self.fm_time_dim,
            d_mel: w.d_mel,
            d_cond: self.am_d_model,
            upsample: self.factor,
            euler_steps: self.euler_steps,
            chunk_sampling: self.chunk_sampling,
        };
        JointModel::new(am, fm)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            mode: self.mode,
            warmup_steps: self.warmup_steps,
            peak_lr: self.peak_lr,
            batch_size: self.batch_size,
            seed: self.seed,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            stages: [(Stage::Short, self.stage1_steps), (Stage::Long, self.stage2_steps)]
                .into_iter()
                .filter(|(_, n)| *n > 0)
                .map(|(stage, steps)| StageConfig { stage, steps })
                .collect(),
        }
    }

    pub fn dpo_config(&self) -> DpoConfig {
        DpoConfig {
            beta: self.dpo_beta,
            lr: self.dpo_lr,
            epochs: self.dpo_epochs,
            batch_size: self.dpo_batch,
            seed: self.seed,
        }
    }

    fn inference_mask(&self, frames: usize) -> Result<ChunkMask> {
        if self.eval_chunk == 0 {
            Ok(ChunkMask::full(frames))
        } else {
            make_chunk_mask(frames, self.eval_chunk)
        }
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["checkpoints", "reports"] {
            fs::create_dir_all(root.join(sub))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn echo_config(&self, cfg: &Config) -> Result<()> {
        fs::write(self.root.join("config.echo"), cfg.echo())?;
        Ok(())
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.tsv")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    fn open(root: &Path, cfg: &Config) -> Result<Self> {
        let run = Self::create(root)?;
        run.echo_config(cfg)?;
        Ok(run)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f32,
    pub final_l_am: f32,
    pub final_l_fm: f32,
}

/// Trains through both curriculum stages; writes `metrics.tsv`,
/// `checkpoints/stage{1,2}` and `checkpoints/final`.
pub fn train(cfg: &Config, root: &Path) -> Result<(TrainSummary, ParameterStore)> {
    let run = RunDir::open(root, cfg)?;
    let world = cfg.world()?;
    let mut trainer = Trainer::new(cfg.model()?, cfg.train_config())?;
    let mut metrics = create_metrics(&run.metrics())?;
    let logs = trainer.run(&world, &mut metrics, Some(&run.root.join("checkpoints")))?;
    trainer.save(&run.checkpoint("final"))?;
    let last = logs.last().copied();
    Ok((
        TrainSummary {
            steps: logs.len(),
            final_loss: last.map_or(f32::NAN, |l| l.loss),
            final_l_am: last.map_or(f32::NAN, |l| l.l_am),
            final_l_fm: last.map_or(f32::NAN, |l| l.l_fm),
        },
        trainer.store,
    ))
}

/// Generated speech for one script.
#[derive(Debug, Clone)]
pub struct Synthesis {
    /// Sampled tokens, EOS included when produced.
    pub tokens: Vec<usize>,
    pub hit_cap: bool,
    /// `[speech tokens * factor, d_mel]`; empty when no speech was produced.
    pub frames: crate::diffcore::Tensor,
}

/// AM decoding, then flow-matching synthesis from the AM hidden states.
pub fn synthesize(
    cfg: &Config,
    model: &JointModel,
    store: &ParameterStore,
    sample: &ToySample,
    dec: &DecodeConfig,
    flow_seed: u64,
) -> Result<Synthesis> {
    let prompt = build_prompt(&sample.profiles, &sample.script, cfg.use_spk_embeddings)?;
    let out = model.am.sample(store, &prompt, dec)?;
    let speech = out.speech(model.am.cfg.eos()).to_vec();
    let d_mel = model.fm.cfg.d_mel;
    if speech.is_empty() {
        return Ok(Synthesis {
            tokens: out.tokens,
            hit_cap: out.hit_cap,
            frames: crate::diffcore::Tensor::zeros(&[0, d_mel]),
        });
    }
    let seq = build_sequence(&sample.profiles, &sample.script, &out.tokens, cfg.use_spk_embeddings)?;
    let mut g = Graph::<f32>::new();
    let am = model.am.forward(&mut g, store, &seq)?;
    let h = g.slice_rows(am.hidden, 0, speech.len())?;
    let h = g.value(h).clone();
    let frames = speech.len() * model.fm.cfg.upsample;
    let mask = cfg.inference_mask(frames)?;
    let x = model.fm.sample(store, &h, &mask, cfg.euler_steps, flow_seed)?;
    Ok(Synthesis {
        tokens: out.tokens,
        hit_cap: out.hit_cap,
        frames: x,
    })
}

/// Scores of one synthesised dialogue.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScores {
    pub token_cer: f64,
    pub frame_cer: f64,
    pub cp_cer: f64,
    pub speaker_turns: (usize, usize),
}

pub fn score(world: &ToyWorld, sample: &ToySample, syn: &Synthesis) -> Result<SampleScores> {
    let rec = world.recognize(&syn.frames, &sample.speakers)?;
    Ok(SampleScores {
        token_cer: world.token_cer(&sample.script, &syn.tokens)?,
        frame_cer: world.frame_cer(&sample.script, &rec)?,
        cp_cer: world.cp_cer(&sample.script, &rec)?.rate,
        speaker_turns: world.speaker_turn_accuracy(&sample.script, &rec),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub prompts: usize,
    /// Mean CER of the recognised frames.
    pub cer: f64,
    /// Mean CER of the inverse-mapped tokens.
    pub token_cer: f64,
    pub cp_cer: f64,
    pub speaker_acc: f64,
    pub fm_loss: f64,
    pub capped: usize,
}

impl EvalReport {
    pub fn tsv(&self) -> String {
        format!(
            "prompts\t{}\ncer\t{}\ntoken_cer\t{}\ncpcer\t{}\nspeaker_acc\t{}\nfm_loss\t{}\ncapped\t{}\n",
            self.prompts, self.cer, self.token_cer, self.cp_cer, self.speaker_acc, self.fm_loss, self.capped
        )
    }
}

/// Held-out evaluation prompts for the configured speaker/turn counts.
pub fn eval_set(cfg: &Config, world: &ToyWorld) -> Result<Vec<ToySample>> {
    (0..cfg.eval_prompts as u64)
        .map(|i| world.held_out(cfg.eval_speakers, cfg.eval_turns, i))
        .collect()
}

/// Greedy decoding plus flow synthesis on held-out prompts.
pub fn evaluate(cfg: &Config, model: &JointModel, store: &ParameterStore, samples: &[ToySample]) -> Result<EvalReport> {
    let world = cfg.world()?;
    let mut rep = EvalReport {
        prompts: samples.len(),
        cer: 0.0,
        token_cer: 0.0,
        cp_cer: 0.0,
        speaker_acc: 0.0,
        fm_loss: 0.0,
        capped: 0,
    };
    let (mut right, mut turns) = (0, 0);
    for (i, s) in samples.iter().enumerate() {
        let dec = DecodeConfig {
            temperature: 0.0,
            ..DecodeConfig::default()
        };
        let syn = synthesize(cfg, model, store, s, &dec, derive_seed(cfg.seed, &format!("eval/{i}")))?;
        let sc = score(&world, s, &syn)?;
        rep.cer += sc.frame_cer;
        rep.token_cer += sc.token_cer;
        rep.cp_cer += sc.cp_cer;
        rep.capped += usize::from(syn.hit_cap);
        right += sc.speaker_turns.0;
        turns += sc.speaker_turns.1;
    }
    let n = samples.len().max(1) as f64;
    rep.cer /= n;
    rep.token_cer /= n;
    rep.cp_cer /= n;
    rep.speaker_acc = right as f64 / turns.max(1) as f64;
    let items = samples.iter().map(|s| world.train_item(s)).collect::<Result<Vec<_>>>()?;
    rep.fm_loss = eval_flow_loss(model, store, &items, derive_seed(cfg.seed, "eval/fm"))?;
    Ok(rep)
}

fn load_model(cfg: &Config, run: &RunDir, name: &str) -> Result<(JointModel, ParameterStore)> {
    Ok((cfg.model()?, load_weights(&run.checkpoint(name))?))
}

/// Evaluates `checkpoints/<name>` and writes `reports/eval_<name>.tsv`.
pub fn eval_model(cfg: &Config, root: &Path, checkpoint: &str) -> Result<EvalReport> {
    let run = RunDir::open(root, cfg)?;
    let (model, store) = load_model(cfg, &run, checkpoint)?;
    let world = cfg.world()?;
    let rep = evaluate(cfg, &model, &store, &eval_set(cfg, &world)?)?;
    fs::write(run.report(&format!("eval_{checkpoint}.tsv")), rep.tsv())?;
    Ok(rep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cer,
    Wer,
    CpWer,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cer" => Ok(Metric::Cer),
            "wer" => Ok(Metric::Wer),
            "cpwer" => Ok(Metric::CpWer),
            _ => Err(Error::Config(format!("metric must be cer, wer or cpwer, got {s:?}"))),
        }
    }
}

/// Scores transcript files (`index\tspeaker\ttext` lines). For CER and WER
/// all utterances of each side are concatenated in chronological order.
pub fn score_files(metric: Metric, reference: &str, hyp: &str) -> Result<MetricReport> {
    let refs = parse_transcripts(reference)?;
    let hyps = parse_transcripts(hyp)?;
    match metric {
        Metric::CpWer => cpwer(&refs, &hyps, Unit::Word),
        Metric::Cer | Metric::Wer => {
            let unit = if metric == Metric::Cer { Unit::Char } else { Unit::Word };
            let flat = |ts: &[crate::evalkit::SpeakerTranscript]| {
                let mut rows: Vec<(usize, &str)> = ts
                    .iter()
                    .flat_map(|t| t.utterances.iter().map(|(i, u)| (*i, u.as_str())))
                    .collect();
                rows.sort();
                rows.iter().flat_map(|(_, u)| unit.tokens(u)).collect::<Vec<_>>()
            };
            report(&flat(&refs), &flat(&hyps))
        }
    }
}

/// Synthesises held-out dialogue `seed` with the final checkpoint and writes
/// `reports/sample_<speakers>x<turns>_<seed>.txt`. Returns the report text.
pub fn sample(cfg: &Config, root: &Path, speakers: usize, turns: usize, seed: u64) -> Result<String> {
    let run = RunDir::open(root, cfg)?;
    let (model, store) = load_model(cfg, &run, "final")?;
    let world = cfg.world()?;
    let s = world.held_out(speakers, turns, seed)?;
    let dec = DecodeConfig {
        temperature: 0.0,
        seed,
        ..DecodeConfig::default()
    };
    let syn = synthesize(cfg, &model, &store, &s, &dec, derive_seed(seed, "sample"))?;
    let rec = world.recognize(&syn.frames, &s.speakers)?;
    let sc = score(&world, &s, &syn)?;
    let mut out = String::new();
    let _ = writeln!(out, "# script");
    out.push_str(&s.script.render(&world.vocab));
    let _ = writeln!(out, "# tokens");
    let _ = writeln!(out, "{}", syn.tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" "));
    let _ = writeln!(out, "# frames {}x{}", syn.frames.rows(), syn.frames.cols());
    for r in 0..syn.frames.rows() {
        let row: Vec<String> = syn.frames.row(r).iter().map(|v| format!("{v:.4}")).collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    let _ = writeln!(out, "# transcript");
    let mut utt = String::new();
    for (i, r) in rec.iter().enumerate() {
        if i > 0 && rec[i - 1].speaker != r.speaker {
            let _ = writeln!(out, "SPK{}: {}", rec[i - 1].speaker, utt);
            utt.clear();
        }
        utt.push_str(world.vocab.symbol(r.symbol));
    }
    if let Some(last) = rec.last() {
        let _ = writeln!(out, "SPK{}: {}", last.speaker, utt);
    }
    let _ = writeln!(
        out,
        "# scores\ncer\t{}\ncpcer\t{}\nspeaker_turns\t{}/{}",
        sc.frame_cer, sc.cp_cer, sc.speaker_turns.0, sc.speaker_turns.1
    );
    fs::write(run.report(&format!("sample_{speakers}x{turns}_{seed}.txt")), &out)?;
    Ok(out)
}

/// Prompt ids for preference harvesting are indices into the long-form
/// training stream.
pub fn apo_prompt(cfg: &Config, world: &ToyWorld, id: u64) -> Result<ApoPrompt> {
    let s = world.sample(Stage::Long, id)?;
    Ok(ApoPrompt {
        id,
        prompt: build_prompt(&s.profiles, &s.script, cfg.use_spk_embeddings)?,
        script: s.script,
    })
}

/// Samples candidates with the final checkpoint and writes
/// `reports/pairs.tsv` and `reports/apo_stats.tsv`.
pub fn apo_pairs(cfg: &Config, root: &Path, n: usize, temperature: f64) -> Result<(usize, f64)> {
    let run = RunDir::open(root, cfg)?;
    let (model, store) = load_model(cfg, &run, "final")?;
    let world = cfg.world()?;
    let prompts = (0..cfg.apo_prompts as u64)
        .map(|id| apo_prompt(cfg, &world, id))
        .collect::<Result<Vec<_>>>()?;
    let dec = DecodeConfig {
        temperature,
        top_k: cfg.apo_top_k,
        seed: derive_seed(cfg.seed, "apo"),
        max_tokens: None,
    };
    let round = apo_round(&model.am, &store, &prompts, n, &dec, cfg.apo_cap, &|s, t| world.token_cer(s, t))?;
    fs::write(run.report("pairs.tsv"), render_pairs(&round.pairs))?;
    let mut stats = String::from("prompt\tunique\tchosen\trejected\tpairs\n");
    for s in &round.stats {
        let _ = writeln!(stats, "{}\t{}\t{}\t{}\t{}", s.id, s.unique, s.chosen, s.rejected, s.pairs);
    }
    fs::write(run.report("apo_stats.tsv"), stats)?;
    Ok((round.pairs.len(), round.yield_rate()))
}

/// DPO on `reports/pairs.tsv` from the final checkpoint; writes
/// `checkpoints/dpo` and `reports/dpo_metrics.tsv`.
pub fn dpo(cfg: &Config, root: &Path) -> Result<Vec<f32>> {
    let run = RunDir::open(root, cfg)?;
    let (model, mut store) = load_model(cfg, &run, "final")?;
    let world = cfg.world()?;
    let text = fs::read_to_string(run.report("pairs.tsv"))?;
    let pairs = parse_pairs(&text, &|id| apo_prompt(cfg, &world, id).map(|p| p.prompt))?;
    let losses = dpo_train(&model.am, &mut store, &pairs, &cfg.dpo_config())?;
    crate::diffcore::checkpoint::save_store(&run.checkpoint("dpo"), &store, &[])?;
    let mut m = String::from("batch\tloss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(m, "{}\t{}", i + 1, l);
    }
    fs::write(run.report("dpo_metrics.tsv"), m)?;
    Ok(losses)
}

/// Writes `n` rendered samples of a stage to `reports/data_stage<k>.txt`
/// and returns the speaker-count histogram.
pub fn gen_data(cfg: &Config, root: &Path, stage: Stage, n: usize) -> Result<Vec<usize>> {
    let run = RunDir::open(root, cfg)?;
    let world = cfg.world()?;
    let mut out = String::new();
    let mut hist = vec![0usize; 8];
    for i in 0..n as u64 {
        let s = world.sample(stage, i)?;
        hist[s.script.num_speakers - 1] += 1;
        let _ = writeln!(out, "# sample {i}");
        out.push_str(&s.render(&world.vocab));
    }
    fs::write(run.report(&format!("data_stage{}.txt", stage.id())), out)?;
    Ok(hist)
}

/// Result of one named gradient check.
#[derive(Debug, Clone)]
pub struct NamedCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

struct JointCheck {
    model: JointModel,
    item: crate::trainer::TrainItem,
    noise: FlowNoise,
    part: u8,
}

impl LossFn for JointCheck {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, s: &ParameterStore) -> Result<Var> {
        let jl = joint_loss(g, &self.model, s, &self.item, 1.0, Mode::E2e, &self.noise)?;
        Ok(match self.part {
            0 => jl.am,
            1 => jl.fm,
            _ => jl.total,
        })
    }
}

struct TokenizerCheck {
    tok: Tokenizer,
    batch: Vec<crate::fsq::TokenizerItem>,
}

impl LossFn for TokenizerCheck {
    fn loss<T: Scalar>(&self, g: &mut Graph<T>, s: &ParameterStore) -> Result<Var> {
        Ok(self.tok.loss(g, s, &self.batch)?.total)
    }
}

/// A model of a few thousand parameters for gradient checking.
pub fn small_model(factor: usize) -> Result<JointModel> {
    let am = ArConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        mlp_hidden: 16,
        speech_vocab: SPEECH_VOCAB,
        max_len: 64,
        tokens_per_symbol: 8 / factor,
        ..ArConfig::default()
    };
    let fm = FlowConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        mlp_hidden: 16,
        time_dim: 4,
        d_cond: 8,
        upsample: factor,
        ..FlowConfig::default()
    };
    JointModel::new(am, fm)
}

/// Gradient checks of `L_AM`, `L_FM`, the joint loss and the tokenizer
/// objective, each on every element of a small model. The tokenizer is
/// checked through its smooth surrogate, whose gradients equal the
/// straight-through ones.
pub fn gradcheck(cfg: &Config) -> Result<Vec<NamedCheck>> {
    let world = ToyWorld::new(ToyWorldConfig {
        short_len: (2, 3),
        ..cfg.world_config()
    })?;
    let model = small_model(cfg.factor)?;
    let mut store = ParameterStore::new(cfg.seed);
    model.init(&mut store)?;
    let item = world.train_item(&world.sample(Stage::Short, 0)?)?;
    let frames = item.frames.rows();
    let noise = FlowNoise::draw(derive_seed(cfg.seed, "gradcheck"), frames, model.fm.cfg.d_mel, 2);
    let gc = GradCheckConfig {
        tolerance: cfg.gradcheck_tolerance,
        ..GradCheckConfig::default()
    };
    let mut out = Vec::new();
    for (part, name) in [(0u8, "am"), (1, "fm"), (2, "joint")] {
        let f = JointCheck {
            model: model.clone(),
            item: item.clone(),
            noise: noise.clone(),
            part,
        };
        out.push(NamedCheck {
            name,
            report: grad_check(&f, &store, gc)?,
        });
    }
    let tok = Tokenizer {
        relaxed: true,
        ..Tokenizer::new(FsqConfig::new(vec![5, 5, 5], cfg.factor, 0.5)?, 8, 8, 32)?
    };
    let mut ts = ParameterStore::new(cfg.seed);
    tok.init(&mut ts)?;
    let f = TokenizerCheck {
        tok,
        batch: world.tokenizer_batch(0, 2, cfg.factor)?,
    };
    out.push(NamedCheck {
        name: "tokenizer",
        report: grad_check(&f, &ts, gc)?,
    });
    Ok(out)
}

/// Tab-separated gradient-check summary.
pub fn render_gradcheck(checks: &[NamedCheck]) -> String {
    let mut out = String::from("check\ttensors\telements\tmax_rel_error\tpassed\n");
    for c in checks {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:e}\t{}",
            c.name,
            c.report.params.len(),
            c.report.params.iter().map(|p| p.checked).sum::<usize>(),
            c.report.max_error(),
            c.report.passed()
        );
    }
    out
}
