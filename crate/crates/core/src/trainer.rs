//! Joint optimisation of the acoustic model and the flow head.
//!
//! The training loss is `L = L_AM + lambda * L_FM`. In cascade mode the hidden
//! states passed to the flow head are detached, so `L_FM` cannot reach the AM
//! parameters. Training runs a list of curriculum stages; every stage restarts
//! the warmup + cosine schedule and the optimizer moments from the previous
//! stage's weights.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ar_model::{am_loss, AcousticModel, ArConfig};
use crate::diffcore::checkpoint::{read_tensors, write_tensors, TensorFile};
use crate::diffcore::{derive_seed, Graph, ParameterStore, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::flowmatch::{fm_loss, gaussian, interpolate, make_chunk_mask, ChunkMask, ChunkSampling, FlowConfig, FlowHead, CHUNK_CHOICES};
use crate::sequence::UnifiedSequence;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    E2e,
    Cascade,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e2e" => Ok(Mode::E2e),
            "cascade" => Ok(Mode::Cascade),
            _ => Err(Error::Config(format!("mode must be e2e or cascade, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::E2e => "e2e",
            Mode::Cascade => "cascade",
        })
    }
}

/// Curriculum stage: 1 is single-speaker short dialogue, 2 is mixed
/// multi-speaker long-form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Short,
    Long,
}

impl Stage {
    pub fn id(self) -> u32 {
        match self {
            Stage::Short => 1,
            Stage::Long => 2,
        }
    }
}

/// One training example: the full sequence (speech ending in EOS) and the
/// frames of the non-EOS speech tokens.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub seq: UnifiedSequence,
    pub frames: Tensor,
}

/// Deterministic, indexable example stream.
pub trait DataSource {
    fn item(&self, stage: Stage, index: u64) -> Result<TrainItem>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f32,
    pub mode: Mode,
    pub warmup_steps: usize,
    pub peak_lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f32,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f32,
    pub stages: Vec<StageConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            mode: Mode::E2e,
            warmup_steps: 100,
            peak_lr: 3e-3,
            batch_size: 8,
            seed: 0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            stages: vec![
                StageConfig {
                    stage: Stage::Short,
                    steps: 2000,
                },
                StageConfig {
                    stage: Stage::Long,
                    steps: 1000,
                },
            ],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if self.batch_size == 0 || !(self.peak_lr > 0.0) {
            return Err(Error::Config("batch_size and peak_lr must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay to
/// 0 at `total`.
pub fn lr_at(step: usize, warmup: usize, total: usize, peak: f32) -> Result<f32> {
    if step > total {
        return Err(Error::Invalid(format!("step {step} outside schedule of {total} steps")));
    }
    let peak = peak as f64;
    let lr = if step < warmup {
        peak * step as f64 / warmup as f64
    } else if total == warmup {
        peak
    } else {
        let p = (step - warmup) as f64 / (total - warmup) as f64;
        peak * (1.0 + (std::f64::consts::PI * p).cos()) / 2.0
    };
    Ok(lr as f32)
}

/// AdamW with decoupled weight decay on matrices (rank >= 2 tensors).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub t: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl AdamW {
    pub fn new(weight_decay: f32) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every trainable parameter that has an accumulated gradient.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let bc2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        for (name, p) in store.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            // parameters outside this step's graphs are left untouched
            let Some(grad) = p.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let n = p.numel();
            let decay = if p.shape().len() >= 2 { self.weight_decay } else { 0.0 };
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] as f64 / bc1;
                let vh = v[i] as f64 / bc2;
                let upd = mh / (vh.sqrt() + self.eps as f64) + decay as f64 * *w as f64;
                *w = (*w as f64 - lr as f64 * upd) as f32;
            }
        }
    }

    fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (prefix, map) in [("opt.m.", &self.m), ("opt.v.", &self.v)] {
            for (k, v) in map {
                out.push((format!("{prefix}{k}"), Tensor::new(vec![v.len()], v.clone()).expect("flat")));
            }
        }
        out
    }

    fn absorb(&mut self, name: &str, t: &Tensor) -> bool {
        if let Some(k) = name.strip_prefix("opt.m.") {
            self.m.insert(k.to_string(), t.data().to_vec());
        } else if let Some(k) = name.strip_prefix("opt.v.") {
            self.v.insert(k.to_string(), t.data().to_vec());
        } else {
            return false;
        }
        true
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParameterStore, max_norm: f32) -> f32 {
    let sq: f64 = store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter().map(|&x| x as f64 * x as f64))
        .sum();
    let norm = sq.sqrt() as f32;
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in store.iter_mut() {
            if let Some(g) = t.grad().map(|g| g.iter().map(|x| x * s).collect::<Vec<_>>()) {
                t.zero_grad();
                t.accumulate_grad(&g);
            }
        }
    }
    norm
}

/// The acoustic model and flow head trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub am: AcousticModel,
    pub fm: FlowHead,
}

impl JointModel {
    pub fn new(am: ArConfig, fm: FlowConfig) -> Result<Self> {
        if am.d_model != fm.d_cond {
            return Err(Error::Config(format!(
                "flow conditioning width {} must equal AM width {}",
                fm.d_cond, am.d_model
            )));
        }
        Ok(Self {
            am: AcousticModel::new(am)?,
            fm: FlowHead::new(fm)?,
        })
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        self.am.init(store)?;
        self.fm.init(store)
    }
}

/// Per-example randomness of the flow objective.
#[derive(Debug, Clone)]
pub struct FlowNoise {
    pub x0: Tensor,
    pub t: f64,
    pub chunk: usize,
}

impl FlowNoise {
    /// Noise for example `index` of a step, drawn from `seed`.
    pub fn draw(seed: u64, frames: usize, d_mel: usize, chunk: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "t"));
        Self {
            x0: gaussian(frames, d_mel, derive_seed(seed, "x0")),
            t: rng.gen::<f64>(),
            chunk,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    pub am: Var,
    pub fm: Var,
}

/// `L = L_AM + lambda * L_FM` for one example.
pub fn joint_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &JointModel,
    store: &ParameterStore,
    item: &TrainItem,
    lambda: f32,
    mode: Mode,
    noise: &FlowNoise,
) -> Result<JointLoss> {
    let seq = &item.seq;
    let out = model.am.forward(g, store, seq)?;
    let targets = seq.speech();
    let n = targets.len();
    let l_am = am_loss(g, out.logits, &targets, &vec![true; n])?;

    // the EOS row conditions no frames
    let h = g.slice_rows(out.hidden, 0, n - 1)?;
    let h = match mode {
        Mode::E2e => h,
        Mode::Cascade => g.stop_gradient(h),
    };
    let frames = item.frames.rows();
    let xt = interpolate(&noise.x0, &item.frames, noise.t as f32)?;
    let x = g.constant(xt.cast());
    let mask = make_chunk_mask(frames, noise.chunk.min(frames).max(1))?;
    let v = model.fm.forward(g, store, x, noise.t, h, &mask)?;
    let l_fm = fm_loss(g, v, &noise.x0, &item.frames)?;

    let weighted = g.scale(l_fm, T::from_f32(lambda))?;
    let total = g.add(l_am, weighted)?;
    Ok(JointLoss {
        total,
        am: l_am,
        fm: l_fm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f32,
    pub l_am: f32,
    pub l_fm: f32,
    pub lr: f32,
}

impl StepLog {
    pub fn tsv(&self) -> String {
        format!("{}\t{}\t{}\t{}\t{}", self.step, self.loss, self.l_am, self.l_fm, self.lr)
    }
}

pub const METRICS_HEADER: &str = "step\tloss\tl_am\tl_fm\tlr";

/// Training state: weights, optimizer, position in the curriculum.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: JointModel,
    pub cfg: TrainConfig,
    pub chunk_sampling: ChunkSampling,
    pub store: ParameterStore,
    pub opt: AdamW,
    pub stage_idx: usize,
    pub stage_step: usize,
    pub global_step: usize,
}

impl Trainer {
    pub fn new(model: JointModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new(cfg.seed);
        model.init(&mut store)?;
        Ok(Self::with_store(model, cfg, store))
    }

    pub fn with_store(model: JointModel, cfg: TrainConfig, store: ParameterStore) -> Self {
        Self {
            chunk_sampling: model.fm.cfg.chunk_sampling,
            opt: AdamW::new(cfg.weight_decay),
            model,
            cfg,
            store,
            stage_idx: 0,
            stage_step: 0,
            global_step: 0,
        }
    }

    pub fn finished(&self) -> bool {
        self.stage_idx >= self.cfg.stages.len()
    }

    fn stage(&self) -> &StageConfig {
        &self.cfg.stages[self.stage_idx]
    }

    fn step_seed(&self) -> u64 {
        derive_seed(
            self.cfg.seed,
            &format!("step/{}/{}", self.stage().stage.id(), self.stage_step),
        )
    }

    /// Chunk size for the current step (`frames` stands for "whole").
    fn chunk_choice(&self) -> Option<usize> {
        match self.chunk_sampling {
            ChunkSampling::Full => None,
            ChunkSampling::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.step_seed(), "chunk"));
                CHUNK_CHOICES[rng.gen_range(0..CHUNK_CHOICES.len())]
            }
        }
    }

    /// Runs one optimizer step of the current stage.
    pub fn step(&mut self, data: &dyn DataSource) -> Result<StepLog> {
        if self.finished() {
            return Err(Error::Invalid("training already finished".into()));
        }
        let st = self.stage().clone();
        let lr = lr_at(self.stage_step + 1, self.cfg.warmup_steps.min(st.steps), st.steps, self.cfg.peak_lr)?;
        let b = self.cfg.batch_size;
        let chunk = self.chunk_choice();
        let seed = self.step_seed();
        self.store.zero_grads();
        let (mut tot, mut am, mut fm) = (0.0f32, 0.0f32, 0.0f32);
        for i in 0..b {
            let index = (self.stage_step * b + i) as u64;
            let item = data.item(st.stage, index)?;
            let frames = item.frames.rows();
            let noise = FlowNoise::draw(
                derive_seed(seed, &format!("item/{i}")),
                frames,
                self.model.fm.cfg.d_mel,
                chunk.unwrap_or(frames),
            );
            let mut g = Graph::<f32>::new();
            let jl = joint_loss(&mut g, &self.model, &self.store, &item, self.cfg.lambda, self.cfg.mode, &noise)?;
            g.backward_scaled(jl.total, 1.0 / b as f32)?;
            self.store.accumulate_grads(&g);
            tot += g.value(jl.total).item();
            am += g.value(jl.am).item();
            fm += g.value(jl.fm).item();
        }
        let inv = 1.0 / b as f32;
        let log = StepLog {
            step: self.global_step + 1,
            loss: tot * inv,
            l_am: am * inv,
            l_fm: fm * inv,
            lr,
        };
        if !(log.loss.is_finite() && log.l_am.is_finite() && log.l_fm.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: log.step,
                loss: log.loss,
                l_am: log.l_am,
                l_fm: log.l_fm,
            });
        }
        if self.cfg.grad_clip > 0.0 {
            clip_grad_norm(&mut self.store, self.cfg.grad_clip);
        }
        self.opt.step(&mut self.store, lr);
        self.store.zero_grads();
        self.global_step += 1;
        self.stage_step += 1;
        if self.stage_step >= st.steps {
            self.stage_idx += 1;
            self.stage_step = 0;
            self.opt = AdamW::new(self.cfg.weight_decay);
        }
        Ok(log)
    }

    /// Runs to the end of the curriculum, appending one line per step to
    /// `metrics` and writing a checkpoint at the end of every stage.
    pub fn run(&mut self, data: &dyn DataSource, metrics: &mut dyn Write, ckpt_dir: Option<&Path>) -> Result<Vec<StepLog>> {
        let mut logs = Vec::new();
        while !self.finished() {
            let stage = self.stage_idx;
            let log = self.step(data)?;
            writeln!(metrics, "{}", log.tsv())?;
            logs.push(log);
            if self.stage_idx != stage {
                if let Some(dir) = ckpt_dir {
                    let id = self.cfg.stages[stage].stage.id();
                    self.save(&dir.join(format!("stage{id}")))?;
                }
            }
        }
        Ok(logs)
    }

    /// Saves weights, optimizer moments and curriculum position.
    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut tensors: Vec<(String, Tensor)> = self
            .store
            .iter()
            .map(|(k, t)| Ok((k.to_string(), Tensor::new(t.shape().to_vec(), t.data().to_vec())?)))
            .collect::<Result<_>>()?;
        tensors.extend(self.opt.to_tensors());
        let file = TensorFile {
            seed: self.store.seed(),
            meta: vec![
                ("stage_idx".into(), self.stage_idx.to_string()),
                ("stage_step".into(), self.stage_step.to_string()),
                ("global_step".into(), self.global_step.to_string()),
                ("opt_t".into(), self.opt.t.to_string()),
            ],
            tensors,
        };
        write_tensors(stem, &file)
    }

    /// Restores a trainer saved by [`Trainer::save`].
    pub fn load(model: JointModel, cfg: TrainConfig, stem: &Path) -> Result<Self> {
        let file = read_tensors(stem)?;
        let meta = |k: &str| -> Result<u64> {
            file.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint {
                    path: PathBuf::from(stem),
                    detail: format!("missing meta {k}"),
                })
        };
        let mut store = ParameterStore::new(file.seed);
        let mut opt = AdamW::new(cfg.weight_decay);
        opt.t = meta("opt_t")?;
        for (name, t) in &file.tensors {
            if !opt.absorb(name, t) {
                store.insert(name.clone(), t.clone().with_requires_grad(true));
            }
        }
        let mut tr = Self::with_store(model, cfg, store);
        tr.opt = opt;
        tr.stage_idx = meta("stage_idx")? as usize;
        tr.stage_step = meta("stage_step")? as usize;
        tr.global_step = meta("global_step")? as usize;
        Ok(tr)
    }
}

/// Weights-only load (optimizer state and position ignored).
pub fn load_weights(stem: &Path) -> Result<ParameterStore> {
    let file = read_tensors(stem)?;
    let mut store = ParameterStore::new(file.seed);
    for (name, t) in file.tensors {
        if !name.starts_with("opt.") {
            store.insert(name, t.with_requires_grad(true));
        }
    }
    Ok(store)
}

/// Mean flow loss over `items` with noise fixed by `seed` and full attention.
pub fn eval_flow_loss(model: &JointModel, store: &ParameterStore, items: &[TrainItem], seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, item) in items.iter().enumerate() {
        let frames = item.frames.rows();
        let noise = FlowNoise::draw(derive_seed(seed, &format!("eval/{i}")), frames, model.fm.cfg.d_mel, frames);
        let mut g = Graph::<f32>::new();
        let jl = joint_loss(&mut g, model, store, item, 1.0, Mode::E2e, &noise)?;
        total += g.value(jl.fm).item() as f64;
    }
    Ok(total / items.len().max(1) as f64)
}

/// Writes the metrics header and returns the open file.
pub fn create_metrics(path: &Path) -> Result<fs::File> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{METRICS_HEADER}")?;
    Ok(f)
}

/// Full-attention mask helper for callers that have no chunk preference.
pub fn full_mask(frames: usize) -> ChunkMask {
    ChunkMask::full(frames)
}
