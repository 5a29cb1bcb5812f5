//! Conditional flow matching on acoustic-model hidden states.
//!
//! The velocity network sees the noisy frames `x_t`, the AM hidden states
//! upsampled to the frame rate by row repetition, a sinusoidal embedding of
//! `t`, and a learned embedding of each frame's phase within its token. Its
//! attention is chunk-wise causal: a frame sees every frame of its own chunk
//! and of all earlier chunks. The same network can be evaluated chunk by
//! chunk with cached keys and values, which reproduces the one-shot result
//! exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{Graph, Init, ParameterStore, Scalar, Tensor, Var, INIT_STD};
use crate::error::{Error, Result};
use crate::nn::{self, BlockConfig, KvCache};

const TIME_SCALE: f64 = 1000.0;
const TIME_BASE: f64 = 10_000.0;

/// How the training chunk size is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkSampling {
    /// Always attend over the whole utterance.
    Full,
    /// Uniform over `{1, 2, 4, 8, T}` per step.
    Random,
}

/// Chunk sizes drawn by [`ChunkSampling::Random`]; `None` stands for `T`.
pub const CHUNK_CHOICES: [Option<usize>; 5] = [Some(1), Some(2), Some(4), Some(8), None];

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub time_dim: usize,
    pub d_mel: usize,
    /// Width of the conditioning hidden states.
    pub d_cond: usize,
    /// Frames per speech token.
    pub upsample: usize,
    pub euler_steps: usize,
    pub chunk_sampling: ChunkSampling,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            mlp_hidden: 64,
            time_dim: 32,
            d_mel: 8,
            d_cond: 64,
            upsample: 4,
            euler_steps: 10,
            chunk_sampling: ChunkSampling::Random,
        }
    }
}

impl FlowConfig {
    fn block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            mlp_hidden: self.mlp_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        if self.euler_steps == 0 || self.upsample == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Config(
                "euler_steps and upsample must be >= 1 and time_dim even".into(),
            ));
        }
        Ok(())
    }
}

/// Attention visibility `visible(i, j) = floor(j / c) <= floor(i / c)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkMask {
    pub frames: usize,
    pub chunk: usize,
}

pub fn make_chunk_mask(frames: usize, chunk: usize) -> Result<ChunkMask> {
    if frames == 0 || chunk == 0 {
        return Err(Error::Invalid("chunk mask needs frames >= 1 and chunk >= 1".into()));
    }
    Ok(ChunkMask { frames, chunk })
}

impl ChunkMask {
    pub fn full(frames: usize) -> Self {
        Self {
            frames,
            chunk: frames.max(1),
        }
    }

    pub fn visible(&self, i: usize, j: usize) -> bool {
        j / self.chunk <= i / self.chunk
    }

    pub fn to_bools(&self) -> Vec<Vec<bool>> {
        (0..self.frames)
            .map(|i| (0..self.frames).map(|j| self.visible(i, j)).collect())
            .collect()
    }

    /// Additive form: `0` where visible, `-inf` elsewhere.
    pub fn additive<T: Scalar>(&self) -> Tensor<T> {
        let n = self.frames;
        let data = (0..n * n)
            .map(|k| {
                if self.visible(k / n, k % n) {
                    T::zero()
                } else {
                    T::neg_infinity()
                }
            })
            .collect();
        Tensor::new(vec![n, n], data).expect("square mask")
    }

    /// Frame ranges of the successive chunks.
    pub fn chunks(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.frames)
            .step_by(self.chunk)
            .map(|a| a..(a + self.chunk).min(self.frames))
    }
}

/// `x_t = (1 - t) x0 + t x1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f32) -> Result<Tensor> {
    if x0.shape() != x1.shape() {
        return Err(Error::shape(
            "interpolate",
            format!("{:?} vs {:?}", x0.shape(), x1.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("interpolation time {t} outside [0, 1]")));
    }
    let data = x0
        .data()
        .iter()
        .zip(x1.data())
        .map(|(&a, &b)| (1.0 - t) * a + t * b)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// Standard-normal matrix from a seed.
pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// `mean |v - (x1 - x0)|^2` over all elements.
pub fn fm_loss<T: Scalar>(g: &mut Graph<T>, v: Var, x0: &Tensor, x1: &Tensor) -> Result<Var> {
    let target: Vec<T> = x1
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&a, &b)| T::from_f32(a - b))
        .collect();
    let target = g.constant(Tensor::new(x1.shape().to_vec(), target)?);
    g.mse(v, target)
}

fn time_features<T: Scalar>(t: f64, dim: usize) -> Vec<T> {
    nn::sinusoid(t * TIME_SCALE, dim, TIME_BASE)
        .into_iter()
        .map(T::from_f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowHead {
    pub cfg: FlowConfig,
}

impl FlowHead {
    pub fn new(cfg: FlowConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        let c = &self.cfg;
        nn::init_linear(store, "fm.in", c.d_mel, c.d_model)?;
        nn::init_linear(store, "fm.cond", c.d_cond, c.d_model)?;
        nn::init_linear(store, "fm.time", c.time_dim, c.d_model)?;
        store.init("fm.phase_emb", &[c.upsample, c.d_model], Init::TruncNormal(INIT_STD))?;
        for l in 0..c.n_layers {
            nn::init_block(store, &format!("fm.block{l}"), c.block())?;
        }
        nn::init_layer_norm(store, "fm.ln_f", c.d_model)?;
        nn::init_linear(store, "fm.out", c.d_model, c.d_mel)
    }

    /// Input rows `frames` of the network: noisy frames, conditioning, time
    /// and phase embeddings.
    fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore,
        x_t: Var,
        t: f64,
        h: Var,
        frames: std::ops::Range<usize>,
    ) -> Result<Var> {
        let c = &self.cfg;
        let cond = g.repeat_rows(h, c.upsample)?;
        let cond = if frames.start == 0 && frames.end == g.value(cond).rows() {
            cond
        } else {
            g.slice_rows(cond, frames.start, frames.end)?
        };
        let cond = nn::linear(g, store, "fm.cond", cond)?;
        let x = nn::linear(g, store, "fm.in", x_t)?;
        let x = g.add(x, cond)?;
        let tf = g.constant(Tensor::matrix(1, c.time_dim, time_features(t, c.time_dim))?);
        let te = nn::linear(g, store, "fm.time", tf)?;
        let x = g.add_row(x, te)?;
        let phases: Vec<usize> = frames.map(|f| f % c.upsample).collect();
        let pt = g.param(store, "fm.phase_emb")?;
        let pe = g.embedding_lookup(pt, &phases)?;
        g.add(x, pe)
    }

    fn check_rows(&self, frames: usize, tokens: usize) -> Result<()> {
        if frames != tokens * self.cfg.upsample {
            return Err(Error::shape(
                "fm_forward",
                format!(
                    "{frames} frames vs {tokens} conditioning rows x {}",
                    self.cfg.upsample
                ),
            ));
        }
        Ok(())
    }

    /// Predicted velocity `[T_frames, d_mel]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore,
        x_t: Var,
        t: f64,
        h: Var,
        mask: &ChunkMask,
    ) -> Result<Var> {
        let frames = g.value(x_t).rows();
        self.check_rows(frames, g.value(h).rows())?;
        if mask.frames != frames {
            return Err(Error::shape(
                "fm_forward",
                format!("mask for {} frames, input has {frames}", mask.frames),
            ));
        }
        let mut x = self.embed(g, store, x_t, t, h, 0..frames)?;
        let m = if mask.chunk >= frames {
            None
        } else {
            Some(g.constant(mask.additive()))
        };
        for l in 0..self.cfg.n_layers {
            x = nn::block(g, store, &format!("fm.block{l}"), self.cfg.block(), x, m, None, None)?;
        }
        let x = nn::layer_norm(g, store, "fm.ln_f", x)?;
        nn::linear(g, store, "fm.out", x)
    }

    /// One-shot forward on plain tensors.
    pub fn velocity(&self, store: &ParameterStore, x_t: &Tensor, t: f64, h: &Tensor, mask: &ChunkMask) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let x = g.constant(x_t.clone());
        let hv = g.constant(h.clone());
        let v = self.forward(&mut g, store, x, t, hv, mask)?;
        Ok(g.value(v).clone())
    }

    /// Chunk-by-chunk forward with cached keys and values.
    pub fn velocity_streaming(
        &self,
        store: &ParameterStore,
        x_t: &Tensor,
        t: f64,
        h: &Tensor,
        chunk: usize,
    ) -> Result<Tensor> {
        let frames = x_t.rows();
        self.check_rows(frames, h.rows())?;
        let mask = make_chunk_mask(frames, chunk)?;
        let mut caches = vec![KvCache::<f32>::default(); self.cfg.n_layers];
        let mut out = Vec::with_capacity(frames * self.cfg.d_mel);
        for range in mask.chunks() {
            let mut g = Graph::<f32>::new();
            let xs = g.constant(x_t.slice_rows(range.start, range.end)?);
            let hv = g.constant(h.clone());
            let mut x = self.embed(&mut g, store, xs, t, hv, range)?;
            for (l, cache) in caches.iter_mut().enumerate() {
                x = nn::block(&mut g, store, &format!("fm.block{l}"), self.cfg.block(), x, None, None, Some(cache))?;
            }
            let x = nn::layer_norm(&mut g, store, "fm.ln_f", x)?;
            let v = nn::linear(&mut g, store, "fm.out", x)?;
            out.extend_from_slice(g.value(v).data());
        }
        Tensor::matrix(frames, self.cfg.d_mel, out)
    }

    /// Euler integration from Gaussian noise:
    /// `x <- x + v(x, k / steps) / steps` for `k = 0..steps`.
    pub fn sample(&self, store: &ParameterStore, h: &Tensor, mask: &ChunkMask, steps: usize, seed: u64) -> Result<Tensor> {
        let frames = h.rows() * self.cfg.upsample;
        let x = gaussian(frames, self.cfg.d_mel, seed);
        euler(x, steps, |x, t| self.velocity(store, x, t, h, mask))
    }
}

/// Integrates `dx/dt = field(x, t)` from `t = 0` to `1` with `steps` Euler
/// steps.
pub fn euler<F>(mut x: Tensor, steps: usize, mut field: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::Invalid("euler steps must be >= 1".into()));
    }
    let dt = 1.0 / steps as f32;
    for k in 0..steps {
        let v = field(&x, k as f64 / steps as f64)?;
        if v.shape() != x.shape() {
            return Err(Error::shape("euler", format!("{:?} vs {:?}", v.shape(), x.shape())));
        }
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
        if !x.all_finite() {
            return Err(Error::NonFinite { op: "euler step" });
        }
    }
    Ok(x)
}

/// Unconditional MLP velocity field on `R^d`, for low-dimensional sanity
/// checks of the flow-matching objective and sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpField {
    pub dim: usize,
    pub hidden: usize,
    pub time_dim: usize,
}

impl MlpField {
    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        nn::init_linear(store, "field.l1", self.dim + self.time_dim, self.hidden)?;
        nn::init_linear(store, "field.l2", self.hidden, self.hidden)?;
        nn::init_linear(store, "field.l3", self.hidden, self.dim)?;
        // a larger first-layer scale speeds up fitting of a 2-D field
        if let Some(w) = store.get_mut("field.l1.w") {
            for v in w.data_mut() {
                *v *= 25.0;
            }
        }
        if let Some(w) = store.get_mut("field.l2.w") {
            for v in w.data_mut() {
                *v *= 5.0;
            }
        }
        Ok(())
    }

    /// Velocity for every row of `x` at the per-row times `t`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore, x: Var, t: &[f64]) -> Result<Var> {
        let mut tf = Vec::with_capacity(t.len() * self.time_dim);
        for &ti in t {
            tf.extend(nn::sinusoid(ti * 10.0, self.time_dim, 100.0).into_iter().map(T::from_f64));
        }
        let tf = g.constant(Tensor::matrix(t.len(), self.time_dim, tf)?);
        let inp = g.concat(&[x, tf], 1)?;
        let h = nn::linear(g, store, "field.l1", inp)?;
        let h = g.gelu(h)?;
        let h = nn::linear(g, store, "field.l2", h)?;
        let h = g.gelu(h)?;
        nn::linear(g, store, "field.l3", h)
    }

    /// Flow-matching loss for a batch of data rows `x1` with noise `x0`.
    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore, x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<Var> {
        let n = x1.rows();
        let mut xt = Vec::with_capacity(x1.numel());
        for r in 0..n {
            let tr = t[r] as f32;
            for (a, b) in x0.row(r).iter().zip(x1.row(r)) {
                xt.push((1.0 - tr) * a + tr * b);
            }
        }
        let xv = g.constant(Tensor::matrix(n, self.dim, xt)?.cast());
        let v = self.forward(g, store, xv, t)?;
        fm_loss(g, v, x0, x1)
    }

    pub fn sample(&self, store: &ParameterStore, n: usize, steps: usize, seed: u64) -> Result<Tensor> {
        euler(gaussian(n, self.dim, seed), steps, |x, t| {
            let mut g = Graph::<f32>::new();
            let xv = g.constant(x.clone());
            let v = self.forward(&mut g, store, xv, &vec![t; n])?;
            Ok(g.value(v).clone())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, GradCheckConfig, LossFn};
    use proptest::prelude::*;

    fn small() -> (FlowHead, ParameterStore) {
        let cfg = FlowConfig {
            d_model: 8,
            n_heads: 2,
            mlp_hidden: 8,
            time_dim: 4,
            d_mel: 3,
            d_cond: 5,
            upsample: 2,
            ..FlowConfig::default()
        };
        let fm = FlowHead::new(cfg).unwrap();
        let mut s = ParameterStore::new(4);
        fm.init(&mut s).unwrap();
        for (_, t) in s.iter_mut() {
            for v in t.data_mut() {
                *v *= 15.0;
            }
        }
        (fm, s)
    }

    #[test]
    fn interpolation_examples() {
        let x0 = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let x1 = Tensor::new(vec![2], vec![2.0, 4.0]).unwrap();
        assert_eq!(interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0).unwrap(), x1);
        assert_eq!(interpolate(&x0, &x1, 0.5).unwrap().data(), &[1.0, 2.0]);
        assert!(interpolate(&x0, &x1, 1.5).is_err());
    }

    #[test]
    fn chunk_mask_examples() {
        assert!(make_chunk_mask(4, 4).unwrap().to_bools().iter().flatten().all(|&v| v));
        assert!(make_chunk_mask(4, 9).unwrap().to_bools().iter().flatten().all(|&v| v));
        let m = make_chunk_mask(4, 2).unwrap().to_bools();
        assert_eq!(m[0], vec![true, true, false, false]);
        assert_eq!(m[1], vec![true, true, false, false]);
        assert_eq!(m[2], vec![true; 4]);
        assert_eq!(m[3], vec![true; 4]);
        let tri = make_chunk_mask(3, 1).unwrap().to_bools();
        for (i, row) in tri.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, j <= i);
            }
        }
        assert!(make_chunk_mask(0, 1).is_err());
    }

    #[test]
    fn loss_examples() {
        let x0 = gaussian(4, 3, 1);
        let x1 = gaussian(4, 3, 2);
        let diff: Vec<f32> = x1.data().iter().zip(x0.data()).map(|(a, b)| a - b).collect();
        let mut g = Graph::<f32>::new();
        let oracle = g.constant(Tensor::matrix(4, 3, diff.clone()).unwrap());
        let l = fm_loss(&mut g, oracle, &x0, &x1).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let zero = g.constant(Tensor::zeros(&[4, 3]));
        let l = fm_loss(&mut g, zero, &x0, &x1).unwrap();
        let expect = diff.iter().map(|d| d * d).sum::<f32>() / 12.0;
        assert!((g.value(l).item() - expect).abs() < 1e-6);
    }

    #[test]
    fn constant_field_one_euler_step_is_exact() {
        let x0 = gaussian(3, 2, 7);
        let x1 = gaussian(3, 2, 8);
        let v: Vec<f32> = x1.data().iter().zip(x0.data()).map(|(a, b)| a - b).collect();
        let v = Tensor::matrix(3, 2, v).unwrap();
        let landed = euler(x0, 1, |_, _| Ok(v.clone())).unwrap();
        assert!(landed.max_abs_diff(&x1) <= 1e-6);
        assert!(euler(x1.clone(), 0, |_, _| Ok(v.clone())).is_err());
    }

    #[test]
    fn row_count_mismatch_is_an_error() {
        let (fm, s) = small();
        let h = gaussian(3, 5, 0);
        let x = gaussian(5, 3, 0);
        assert!(fm.velocity(&s, &x, 0.3, &h, &ChunkMask::full(5)).is_err());
        let x = gaussian(6, 3, 0);
        assert_eq!(fm.velocity(&s, &x, 0.3, &h, &ChunkMask::full(6)).unwrap().shape(), &[6, 3]);
    }

    #[test]
    fn full_mask_equals_large_chunk() {
        let (fm, s) = small();
        let h = gaussian(4, 5, 1);
        let x = gaussian(8, 3, 2);
        let full = fm.velocity(&s, &x, 0.6, &h, &ChunkMask::full(8)).unwrap();
        for c in [8, 9, 40] {
            let m = make_chunk_mask(8, c).unwrap();
            assert!(fm.velocity(&s, &x, 0.6, &h, &m).unwrap().bit_eq(&full));
        }
        // a real chunk mask changes early outputs
        let m = make_chunk_mask(8, 2).unwrap();
        assert!(!fm.velocity(&s, &x, 0.6, &h, &m).unwrap().bit_eq(&full));
    }

    #[test]
    fn euler_sampler_is_seeded() {
        let (fm, s) = small();
        let h = gaussian(3, 5, 3);
        let m = make_chunk_mask(6, 2).unwrap();
        let a = fm.sample(&s, &h, &m, 4, 11).unwrap();
        assert!(a.bit_eq(&fm.sample(&s, &h, &m, 4, 11).unwrap()));
        assert!(!a.bit_eq(&fm.sample(&s, &h, &m, 4, 12).unwrap()));
        assert!(fm.sample(&s, &h, &m, 0, 11).is_err());
    }

    struct FmLossFn {
        fm: FlowHead,
        x0: Tensor,
        x1: Tensor,
        t: f64,
        chunk: usize,
    }

    impl LossFn for FmLossFn {
        fn loss<T: Scalar>(&self, g: &mut Graph<T>, s: &ParameterStore) -> Result<Var> {
            let xt = interpolate(&self.x0, &self.x1, self.t as f32)?;
            let x = g.constant(xt.cast());
            let h = g.param(s, "cond")?;
            let m = make_chunk_mask(self.x0.rows(), self.chunk)?;
            let v = self.fm.forward(g, s, x, self.t, h, &m)?;
            fm_loss(g, v, &self.x0, &self.x1)
        }
    }

    #[test]
    fn fm_loss_gradient_passes_grad_check_including_conditioning() {
        let (fm, mut s) = small();
        for (_, t) in s.iter_mut() {
            for v in t.data_mut() {
                *v *= 0.2;
            }
        }
        s.insert("cond", gaussian(3, 5, 9).with_requires_grad(true));
        let f = FmLossFn {
            fm,
            x0: gaussian(6, 3, 1),
            x1: gaussian(6, 3, 2),
            t: 0.35,
            chunk: 2,
        };
        let report = grad_check(&f, &s, GradCheckConfig::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn non_nested_chunk_sizes_are_not_ordered() {
        // frame 4 shares a chunk with frame 3 under size 5 but not under 4
        let (a, b) = (make_chunk_mask(8, 4).unwrap(), make_chunk_mask(8, 5).unwrap());
        assert!(!a.visible(3, 4) && b.visible(3, 4));
        // and a smaller size can expose a frame that a larger one hides
        assert!(make_chunk_mask(8, 3).unwrap().visible(3, 5) && !make_chunk_mask(8, 5).unwrap().visible(3, 5));
    }

    #[test]
    fn training_chunk_ladder_is_monotone() {
        for t in 1..=16 {
            let ladder: Vec<usize> = CHUNK_CHOICES.iter().map(|c| c.unwrap_or(t)).collect();
            for w in ladder.windows(2) {
                let (a, b) = (make_chunk_mask(t, w[0]).unwrap(), make_chunk_mask(t, w[1]).unwrap());
                for i in 0..t {
                    for j in 0..t {
                        assert!(!a.visible(i, j) || b.visible(i, j), "t={t} {w:?} ({i},{j})");
                    }
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn mask_is_monotone_over_nested_chunk_sizes(t in 1usize..17, lo in 1usize..17, k in 1usize..5) {
            let hi = lo * k;
            let a = make_chunk_mask(t, lo).unwrap();
            let b = make_chunk_mask(t, hi).unwrap();
            for i in 0..t {
                for j in 0..t {
                    prop_assert!(!a.visible(i, j) || b.visible(i, j));
                }
            }
        }

        #[test]
        fn streaming_equals_one_shot(tokens in 1usize..7, chunk in 1usize..14, seed in 0u64..1000, t in 0.0f64..1.0) {
            let (fm, s) = small();
            let h = gaussian(tokens, 5, seed);
            let x = gaussian(2 * tokens, 3, seed + 1);
            let m = make_chunk_mask(2 * tokens, chunk).unwrap();
            let one = fm.velocity(&s, &x, t, &h, &m).unwrap();
            let inc = fm.velocity_streaming(&s, &x, t, &h, chunk).unwrap();
            prop_assert!(one.bit_eq(&inc));
        }

        #[test]
        fn no_leakage_outside_visibility(chunk in 1usize..5, frame in 0usize..8, seed in 0u64..100) {
            let (fm, s) = small();
            let h = gaussian(4, 5, seed);
            let x = gaussian(8, 3, seed + 7);
            let m = make_chunk_mask(8, chunk).unwrap();
            let base = fm.velocity(&s, &x, 0.4, &h, &m).unwrap();
            let mut x2 = x.clone();
            for v in &mut x2.data_mut()[frame * 3..frame * 3 + 3] {
                *v += 3.0;
            }
            let pert = fm.velocity(&s, &x2, 0.4, &h, &m).unwrap();
            for i in 0..8 {
                if !m.visible(i, frame) {
                    prop_assert_eq!(base.row(i), pert.row(i));
                }
            }
        }
    }
}
