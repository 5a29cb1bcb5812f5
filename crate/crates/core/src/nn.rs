//! Layers shared by the tokenizer, the acoustic model and the flow head.

use crate::diffcore::{Graph, Init, ParameterStore, Scalar, Tensor, Var, INIT_STD};
use crate::error::{Error, Result};

pub fn init_linear(store: &mut ParameterStore, name: &str, d_in: usize, d_out: usize) -> Result<()> {
    store.init(&format!("{name}.w"), &[d_in, d_out], Init::TruncNormal(INIT_STD))?;
    store.init(&format!("{name}.b"), &[d_out], Init::Zeros)
}

/// `x · w + b`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParameterStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn init_layer_norm(store: &mut ParameterStore, name: &str, d: usize) -> Result<()> {
    store.init(&format!("{name}.g"), &[d], Init::Ones)?;
    store.init(&format!("{name}.b"), &[d], Init::Zeros)
}

pub fn layer_norm<T: Scalar>(g: &mut Graph<T>, store: &ParameterStore, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.g"))?;
    let beta = g.param(store, &format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

pub fn init_block(store: &mut ParameterStore, prefix: &str, cfg: BlockConfig) -> Result<()> {
    let d = cfg.d_model;
    init_layer_norm(store, &format!("{prefix}.ln1"), d)?;
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.attn.{proj}"), d, d)?;
    }
    init_layer_norm(store, &format!("{prefix}.ln2"), d)?;
    init_linear(store, &format!("{prefix}.mlp.up"), d, cfg.mlp_hidden)?;
    init_linear(store, &format!("{prefix}.mlp.down"), cfg.mlp_hidden, d)
}

/// Keys and values of every row seen so far, for incremental evaluation.
#[derive(Debug, Clone)]
pub struct KvCache<T: Scalar> {
    pub k: Option<Tensor<T>>,
    pub v: Option<Tensor<T>>,
}

impl<T: Scalar> Default for KvCache<T> {
    fn default() -> Self {
        Self { k: None, v: None }
    }
}

fn extend<T: Scalar>(g: &mut Graph<T>, cached: &Option<Tensor<T>>, new: Var) -> Result<Var> {
    match cached {
        Some(t) => {
            let c = g.constant(t.clone());
            g.concat(&[c, new], 0)
        }
        None => Ok(new),
    }
}

/// Rotary phases for a set of rows. Within each head, column `i` of the
/// first half and column `i` of the second half form a pair rotated by
/// `position · f_i`, `f_i = base^(-2i/head_dim)`. Rows without a position
/// are left unrotated.
#[derive(Debug, Clone)]
pub struct Rotary<T: Scalar> {
    cos: Tensor<T>,
    sin: Tensor<T>,
    swap: Tensor<T>,
}

impl<T: Scalar> Rotary<T> {
    pub fn new(positions: &[Option<f64>], cfg: BlockConfig, base: f64) -> Result<Self> {
        cfg.validate()?;
        let (d, dh) = (cfg.d_model, cfg.d_model / cfg.n_heads);
        if dh % 2 != 0 {
            return Err(Error::Config(format!("rotary head dim {dh} is odd")));
        }
        let half = dh / 2;
        let n = positions.len();
        let (mut cos, mut sin) = (vec![T::one(); n * d], vec![T::zero(); n * d]);
        for (r, p) in positions.iter().enumerate() {
            let Some(p) = p else { continue };
            for col in 0..d {
                let i = (col % dh) % half;
                let angle = p * base.powf(-(2.0 * i as f64) / dh as f64);
                cos[r * d + col] = T::from_f64(angle.cos());
                sin[r * d + col] = T::from_f64(angle.sin());
            }
        }
        // (x · swap) maps each pair (a, b) to (-b, a).
        let mut swap = vec![T::zero(); d * d];
        for h in 0..cfg.n_heads {
            for i in 0..half {
                let (a, b) = (h * dh + i, h * dh + half + i);
                swap[b * d + a] = T::from_f64(-1.0);
                swap[a * d + b] = T::one();
            }
        }
        Ok(Self {
            cos: Tensor::matrix(n, d, cos)?,
            sin: Tensor::matrix(n, d, sin)?,
            swap: Tensor::matrix(d, d, swap)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.cos.shape()[0]
    }

    pub fn apply(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let cos = g.constant(self.cos.clone());
        let sin = g.constant(self.sin.clone());
        let swap = g.constant(self.swap.clone());
        let a = g.mul(x, cos)?;
        let b = g.matmul(x, swap)?;
        let b = g.mul(b, sin)?;
        g.add(a, b)
    }
}

/// Pre-LN transformer block. `mask` is an additive `[rows, keys]` mask and
/// `rotary`, if given, rotates queries and keys of the new rows. With a
/// cache, keys/values of earlier rows are prepended and the cache is extended.
#[allow(clippy::too_many_arguments)]
pub fn block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParameterStore,
    prefix: &str,
    cfg: BlockConfig,
    x: Var,
    mask: Option<Var>,
    rotary: Option<&Rotary<T>>,
    cache: Option<&mut KvCache<T>>,
) -> Result<Var> {
    let dh = cfg.d_model / cfg.n_heads;
    let h = layer_norm(g, store, &format!("{prefix}.ln1"), x)?;
    let mut q = linear(g, store, &format!("{prefix}.attn.q"), h)?;
    let mut k = linear(g, store, &format!("{prefix}.attn.k"), h)?;
    if let Some(r) = rotary {
        q = r.apply(g, q)?;
        k = r.apply(g, k)?;
    }
    let v = linear(g, store, &format!("{prefix}.attn.v"), h)?;
    let (k, v) = match cache {
        Some(c) => {
            let k_all = extend(g, &c.k, k)?;
            let v_all = extend(g, &c.v, v)?;
            c.k = Some(g.value(k_all).clone().with_requires_grad(false));
            c.v = Some(g.value(v_all).clone().with_requires_grad(false));
            (k_all, v_all)
        }
        None => (k, v),
    };
    let inv = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for hd in 0..cfg.n_heads {
        let (a, b) = (hd * dh, (hd + 1) * dh);
        let qh = g.slice_cols(q, a, b)?;
        let kh = g.slice_cols(k, a, b)?;
        let vh = g.slice_cols(v, a, b)?;
        let s = g.matmul_nt(qh, kh)?;
        let s = g.scale(s, inv)?;
        let p = g.softmax_masked(s, mask)?;
        heads.push(g.matmul(p, vh)?);
    }
    let att = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
    let att = linear(g, store, &format!("{prefix}.attn.o"), att)?;
    let x = g.add(x, att)?;
    let h = layer_norm(g, store, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, store, &format!("{prefix}.mlp.up"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, store, &format!("{prefix}.mlp.down"), h)?;
    g.add(x, h)
}

/// Sinusoidal features of a real position: `[sin(p·f_i), cos(p·f_i)]` with
/// geometric frequencies `f_i = base^(-2i/dim)`.
pub fn sinusoid(pos: f64, dim: usize, base: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = base.powf(-(2.0 * i as f64) / dim as f64);
        out[i] = (pos * f).sin();
        out[half + i] = (pos * f).cos();
    }
    out
}

/// Additive causal mask: row `i` sees columns `0..=i`.
pub fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = T::neg_infinity();
        }
    }
    Tensor::new(vec![n, n], data).expect("square mask")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rotated(rows: &[[f64; 8]], pos: &[Option<f64>]) -> Vec<f64> {
        let cfg = BlockConfig { d_model: 8, n_heads: 2, mlp_hidden: 8 };
        let rot = Rotary::<f64>::new(pos, cfg, 100.0).unwrap();
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        let x = g.constant(Tensor::matrix(rows.len(), 8, data).unwrap());
        let y = rot.apply(&mut g, x).unwrap();
        g.value(y).data().to_vec()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn rotary_scores_depend_on_position_difference_only() {
        let q = [0.3, -1.2, 0.5, 0.9, 1.1, 0.2, -0.4, 0.7];
        let k = [-0.6, 0.8, 0.1, 1.3, -0.2, 0.5, 0.9, -1.0];
        for (a, b, shift) in [(3.0, 1.0, 7.0), (0.0, 5.0, 2.5), (10.0, 10.0, 31.0)] {
            let x = rotated(&[q, k], &[Some(a), Some(b)]);
            let y = rotated(&[q, k], &[Some(a + shift), Some(b + shift)]);
            let (sx, sy) = (dot(&x[..8], &x[8..]), dot(&y[..8], &y[8..]));
            assert!((sx - sy).abs() < 1e-12, "{sx} vs {sy}");
        }
    }

    #[test]
    fn rotary_preserves_norm_and_skips_unpositioned_rows() {
        let q = [0.3, -1.2, 0.5, 0.9, 1.1, 0.2, -0.4, 0.7];
        let y = rotated(&[q, q], &[Some(4.0), None]);
        assert!((dot(&y[..8], &y[..8]) - dot(&q, &q)).abs() < 1e-12);
        assert_eq!(&y[8..], &q[..]);
        assert_eq!(rotated(&[q], &[Some(0.0)]), q.to_vec());
    }

    #[test]
    fn rotary_rejects_odd_head_dim() {
        let cfg = BlockConfig { d_model: 6, n_heads: 2, mlp_hidden: 4 };
        assert!(Rotary::<f64>::new(&[Some(1.0)], cfg, 100.0).is_err());
    }
}
