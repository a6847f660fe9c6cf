//! Cross-attention between latent pixels and text tokens.
//!
//! Queries come from latent pixels, keys from text tokens, and the softmax
//! runs over the token axis, so every pixel carries a probability
//! distribution over the `l` tokens and the result reshapes to `h × w × l`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Stand-in for a text encoder output: `l` unit-norm rows of width `d_text`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    tokens: Tensor,
}

impl TextEmbedding {
    /// Rows drawn from a standard normal and normalised to unit length.
    pub fn random<R: Rng + ?Sized>(l: usize, d_text: usize, rng: &mut R) -> Result<Self> {
        if l == 0 || d_text == 0 {
            return Err(Error::config(
                "l",
                "text embedding needs l ≥ 1 and d_text ≥ 1",
            ));
        }
        loop {
            let raw = Tensor::randn(&[l, d_text], rng);
            if let Ok(e) = Self::normalized(&raw) {
                return Ok(e);
            }
        }
    }

    /// Normalise the rows of an `l × d_text` tensor.
    pub fn normalized(raw: &Tensor) -> Result<Self> {
        let (l, d) = raw.dims2("TextEmbedding")?;
        let mut data = raw.data().to_vec();
        for row in data.chunks_mut(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate("zero text-embedding row".into()));
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(TextEmbedding {
            tokens: Tensor::new(vec![l, d], data)?,
        })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Query projection `c → d` and key projection `d_text → d`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
}

impl ProjectionWeights {
    pub fn new(w_q: Tensor, w_k: Tensor) -> Result<Self> {
        let (_, dq) = w_q.dims2("ProjectionWeights")?;
        let (_, dk) = w_k.dims2("ProjectionWeights")?;
        if dq != dk {
            return Err(Error::dim("ProjectionWeights", w_q.shape(), w_k.shape()));
        }
        Ok(ProjectionWeights { w_q, w_k })
    }

    /// Shared attention width `d`.
    pub fn width(&self) -> usize {
        self.w_q.shape()[1]
    }
}

/// Per-token spatial attention for one timestep, stored as `h × w × l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaps {
    pub h: usize,
    pub w: usize,
    pub l: usize,
    pub timestep: usize,
    /// Row-major `h × w × l` values.
    pub data: Vec<f64>,
}

impl AttentionMaps {
    pub fn new(h: usize, w: usize, l: usize, timestep: usize, maps: &Tensor) -> Result<Self> {
        if maps.len() != h * w * l {
            return Err(Error::dim("AttentionMaps", &[h, w, l], maps.shape()));
        }
        Ok(AttentionMaps {
            h,
            w,
            l,
            timestep,
            data: maps.data().to_vec(),
        })
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::from_parts(vec![self.h, self.w, self.l], self.data.clone())
    }

    /// The maps as an `(h·w) × l` matrix, one row per pixel.
    pub fn pixel_matrix(&self) -> Tensor {
        Tensor::from_parts(vec![self.h * self.w, self.l], self.data.clone())
    }

    /// `maps[:, :, j]` as an `h × w` tensor.
    pub fn token_map(&self, j: usize) -> Result<Tensor> {
        if j >= self.l {
            return Err(Error::Index {
                index: j,
                extent: self.l,
            });
        }
        let data = self.data.iter().skip(j).step_by(self.l).copied().collect();
        Ok(Tensor::from_parts(vec![self.h, self.w], data))
    }

    /// Inverse of [`token_map`](Self::token_map) over all tokens.
    pub fn from_token_maps(slices: &[Tensor], timestep: usize) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Contract("no token maps to stack".into()))?;
        let (h, w) = first.dims2("from_token_maps")?;
        let l = slices.len();
        let mut data = vec![0.0; h * w * l];
        for (j, s) in slices.iter().enumerate() {
            if s.shape() != first.shape() {
                return Err(Error::dim("from_token_maps", first.shape(), s.shape()));
            }
            for (p, &v) in s.data().iter().enumerate() {
                data[p * l + j] = v;
            }
        }
        Ok(AttentionMaps {
            h,
            w,
            l,
            timestep,
            data,
        })
    }

    pub fn same_layout(&self, other: &AttentionMaps) -> bool {
        (self.h, self.w, self.l) == (other.h, other.w, other.l)
    }

    /// Largest deviation of a per-pixel token sum from 1.
    pub fn max_normalization_error(&self) -> f64 {
        self.data
            .chunks(self.l)
            .map(|px| (px.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Record cross-attention for latent `z` (shape `h × w × c`) on `tape`.
///
/// Returns the `(h·w) × l` attention matrix; gradients flow back into `z`.
pub fn cross_attention_on_tape(
    tape: &mut Tape,
    z: Var,
    text: &TextEmbedding,
    weights: &ProjectionWeights,
) -> Result<Var> {
    let zshape = tape.shape(z).to_vec();
    let [h, w, c] = zshape[..] else {
        return Err(Error::dim("cross_attention", &zshape, weights.w_q.shape()));
    };
    if weights.w_q.shape()[0] != c {
        return Err(Error::dim("cross_attention", &zshape, weights.w_q.shape()));
    }
    if weights.w_k.shape()[0] != text.dim() {
        return Err(Error::dim(
            "cross_attention",
            text.tokens().shape(),
            weights.w_k.shape(),
        ));
    }
    let d = weights.width();
    let keys_t = text.tokens().matmul(&weights.w_k)?.transpose()?;

    let pixels = tape.reshape(z, &[h * w, c])?;
    let w_q = tape.constant(weights.w_q.clone());
    let keys_t = tape.constant(keys_t);
    let queries = tape.matmul(pixels, w_q)?;
    let scores = tape.matmul(queries, keys_t)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    tape.softmax_rows(scores)
}

/// Cross-attention maps for `z` without keeping a gradient record.
pub fn cross_attention(
    z: &Tensor,
    text: &TextEmbedding,
    weights: &ProjectionWeights,
    timestep: usize,
) -> Result<AttentionMaps> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let a = cross_attention_on_tape(&mut tape, zv, text, weights)?;
    let shape = z.shape();
    AttentionMaps::new(shape[0], shape[1], text.len(), timestep, tape.value(a))
}
