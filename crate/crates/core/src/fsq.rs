//! Finite scalar quantisation and the toy speech tokenizer.
//!
//! Each latent dimension `i` is squashed with `tanh`, scaled by the half-range
//! `h_i = (L_i - 1) / 2`, and rounded, giving an integer in `[-h_i, h_i]`.
//! Shifting by `h_i` turns it into a digit in `[0, L_i)`, and the digits form a
//! mixed-radix index with the first dimension least significant.
//!
//! The tokenizer folds `k` consecutive frames into one latent (two strided
//! projections, i.e. kernel = stride convolutions), quantises it, and trains
//! with `L = L_semantic + beta * L_recon`: cross-entropy of a per-token class
//! head plus the MSE of a mirrored decoder.

use crate::diffcore::{Graph, ParameterStore, Reduction, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn;

#[derive(Debug, Clone, PartialEq)]
pub struct FsqConfig {
    pub levels: Vec<u32>,
    pub downsample_factor: usize,
    pub beta: f32,
}

impl Default for FsqConfig {
    fn default() -> Self {
        Self {
            levels: vec![5, 5, 5],
            downsample_factor: 4,
            beta: 1.0,
        }
    }
}

impl FsqConfig {
    pub fn new(levels: Vec<u32>, downsample_factor: usize, beta: f32) -> Result<Self> {
        let cfg = Self {
            levels,
            downsample_factor,
            beta,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config("fsq levels must be nonempty".into()));
        }
        if let Some(l) = self.levels.iter().find(|&&l| l < 3 || l % 2 == 0) {
            return Err(Error::Config(format!("fsq level {l} must be odd and >= 3")));
        }
        if !matches!(self.downsample_factor, 4 | 8) {
            return Err(Error::Config(format!(
                "downsample factor {} must be 4 or 8",
                self.downsample_factor
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.levels.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.levels.iter().map(|&l| l as usize).product()
    }

    /// Mixed-radix index of `digits`, first dimension least significant.
    pub fn index_of(&self, digits: &[u32]) -> Result<usize> {
        if digits.len() != self.levels.len() {
            return Err(Error::shape(
                "fsq index",
                format!("{} digits for {} levels", digits.len(), self.levels.len()),
            ));
        }
        let mut idx = 0usize;
        let mut radix = 1usize;
        for (&d, &l) in digits.iter().zip(&self.levels) {
            if d >= l {
                return Err(Error::Invalid(format!("digit {d} out of range for level {l}")));
            }
            idx += d as usize * radix;
            radix *= l as usize;
        }
        Ok(idx)
    }

    pub fn code_of(&self, index: usize) -> Result<FsqCode> {
        if index >= self.codebook_size() {
            return Err(Error::OutOfVocab {
                token: index as u32,
                vocab: self.codebook_size(),
            });
        }
        let mut rest = index;
        let digits = self
            .levels
            .iter()
            .map(|&l| {
                let d = (rest % l as usize) as u32;
                rest /= l as usize;
                d
            })
            .collect();
        Ok(FsqCode { digits, index })
    }

    /// Quantised value of a code (each digit mapped back to `[-1, 1]`).
    pub fn value_of(&self, code: &FsqCode) -> Vec<f32> {
        code.digits
            .iter()
            .zip(&self.levels)
            .map(|(&d, &l)| {
                let h = (l as f32 - 1.0) / 2.0;
                (d as f32 - h) / h
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FsqCode {
    pub digits: Vec<u32>,
    pub index: usize,
}

/// Quantises one latent vector.
pub fn quantize(z: &[f32], cfg: &FsqConfig) -> Result<(Vec<f32>, FsqCode)> {
    if z.len() != cfg.levels.len() {
        return Err(Error::shape(
            "quantize",
            format!("latent dim {} vs {} levels", z.len(), cfg.levels.len()),
        ));
    }
    let mut q = Vec::with_capacity(z.len());
    let mut digits = Vec::with_capacity(z.len());
    for (&x, &l) in z.iter().zip(&cfg.levels) {
        let h = (l as f32 - 1.0) / 2.0;
        let r = (h * x.tanh()).round();
        q.push(r / h);
        digits.push((r + h) as u32);
    }
    let index = cfg.index_of(&digits)?;
    Ok((q, FsqCode { digits, index }))
}

pub fn token_count(frames: usize, factor: usize) -> usize {
    frames.div_ceil(factor)
}

/// Pads `features` to a multiple of `factor` rows by repeating the last row.
pub fn pad_to_multiple<T: Scalar>(features: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (t, d) = features.dims2();
    if t == 0 {
        return Err(Error::Invalid("cannot tokenize an empty frame matrix".into()));
    }
    let padded = token_count(t, factor) * factor;
    let mut data = features.data().to_vec();
    let last = features.row(t - 1).to_vec();
    for _ in t..padded {
        data.extend_from_slice(&last);
    }
    Tensor::matrix(padded, d, data)
}

/// The toy tokenizer: strided encoder, FSQ bottleneck, class head, decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub fsq: FsqConfig,
    pub d_in: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Replaces rounding by its `tanh` surrogate, making the loss smooth
    /// with the same gradients; used for finite-difference checks.
    pub relaxed: bool,
}

/// One training example: frames and one class label per token window.
#[derive(Debug, Clone)]
pub struct TokenizerItem {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct TokenizerLoss {
    pub total: Var,
    pub semantic: Var,
    pub recon: Var,
}

impl Tokenizer {
    pub fn new(fsq: FsqConfig, d_in: usize, width: usize, n_classes: usize) -> Result<Self> {
        fsq.validate()?;
        Ok(Self {
            fsq,
            d_in,
            width,
            n_classes,
            relaxed: false,
        })
    }

    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        let k = self.fsq.downsample_factor;
        let (d, w, z) = (self.d_in, self.width, self.fsq.dim());
        nn::init_linear(store, "tok.enc1", 2 * d, w)?;
        nn::init_linear(store, "tok.enc2", (k / 2) * w, z)?;
        nn::init_linear(store, "tok.sem", z, self.n_classes)?;
        nn::init_linear(store, "tok.dec1", z, w)?;
        nn::init_linear(store, "tok.dec2", w, k * d)
    }

    /// Pre-quantisation latents `[ceil(T/k), dim]` for a padded frame matrix.
    fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParameterStore, padded: Var) -> Result<Var> {
        let k = self.fsq.downsample_factor;
        let (t, d) = g.value(padded).dims2();
        let x = g.reshape(padded, &[t / 2, 2 * d])?;
        let x = nn::linear(g, store, "tok.enc1", x)?;
        let x = g.gelu(x)?;
        let x = g.reshape(x, &[t / k, (k / 2) * self.width])?;
        nn::linear(g, store, "tok.enc2", x)
    }

    /// Discrete tokens, `ceil(T / k)` of them.
    pub fn tokenize(&self, store: &ParameterStore, features: &Tensor) -> Result<Vec<usize>> {
        let padded = pad_to_multiple(features, self.fsq.downsample_factor)?;
        let mut g = Graph::<f32>::new();
        let x = g.constant(padded);
        let z = self.encode(&mut g, store, x)?;
        let zv = g.value(z);
        (0..zv.rows())
            .map(|r| quantize(zv.row(r), &self.fsq).map(|(_, c)| c.index))
            .collect()
    }

    /// Loss of one item.
    pub fn item_loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore,
        item: &TokenizerItem,
    ) -> Result<TokenizerLoss> {
        let k = self.fsq.downsample_factor;
        let (t, _) = item.features.dims2();
        let n_tok = token_count(t, k);
        if item.labels.len() != n_tok {
            return Err(Error::shape(
                "tokenizer_loss",
                format!("{} labels for {n_tok} tokens", item.labels.len()),
            ));
        }
        let padded = pad_to_multiple(&item.features.cast::<T>(), k)?;
        let x = g.constant(padded);
        let z = self.encode(g, store, x)?;
        let q = if self.relaxed {
            g.tanh(z)?
        } else {
            g.fsq_quantize(z, &self.fsq.levels)?
        };

        let logits = nn::linear(g, store, "tok.sem", q)?;
        let semantic = g.cross_entropy(logits, &item.labels, None, Reduction::Mean)?;

        let y = nn::linear(g, store, "tok.dec1", q)?;
        let y = g.gelu(y)?;
        let y = nn::linear(g, store, "tok.dec2", y)?;
        let y = g.reshape(y, &[n_tok * k, self.d_in])?;
        let y = g.slice_rows(y, 0, t)?;
        let target = g.constant(item.features.cast::<T>());
        let recon = g.mse(y, target)?;

        let weighted = g.scale(recon, T::from_f32(self.fsq.beta))?;
        let total = g.add(semantic, weighted)?;
        Ok(TokenizerLoss {
            total,
            semantic,
            recon,
        })
    }

    /// Mean of the per-item losses over a batch.
    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore,
        batch: &[TokenizerItem],
    ) -> Result<TokenizerLoss> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty tokenizer batch".into()));
        }
        let parts = batch
            .iter()
            .map(|it| self.item_loss(g, store, it))
            .collect::<Result<Vec<_>>>()?;
        let mean = |g: &mut Graph<T>, vs: Vec<Var>| -> Result<Var> {
            let c = g.concat(&vs, 1)?;
            g.mean(c)
        };
        Ok(TokenizerLoss {
            total: mean(g, parts.iter().map(|p| p.total).collect())?,
            semantic: mean(g, parts.iter().map(|p| p.semantic).collect())?,
            recon: mean(g, parts.iter().map(|p| p.recon).collect())?,
        })
    }
}
