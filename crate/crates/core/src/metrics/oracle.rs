//! Extended-precision reference for the guidance gradient.
//!
//! A central difference with `h = 1e-5` divides a loss change of order
//! `1e-5 · |g|` by `2h`; in `f64` the rounding of the two loss values alone
//! is about `1e-16 / 1e-5 = 1e-11` absolute, which dominates every
//! coordinate whose gradient is below `1e-5`. [`LossOracle`] evaluates the
//! same loss in double-double arithmetic, written independently of the tape,
//! so the differences are limited by truncation only.

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::numerics::{Dd, Tensor};
use crate::pairing::TokenGroups;
use crate::sampler::{guidance_gradient, ToyModel};

use super::{compare_gradients, finite_diff_grad, GradComparison};

/// Function values usable in [`finite_diff_grad`].
pub trait FdValue: Copy + std::fmt::Debug {
    fn is_finite(self) -> bool;
    /// `(plus − minus) / step`, rounded to `f64` at the end.
    fn quotient(plus: Self, minus: Self, step: Dd) -> f64;
}

impl FdValue for f64 {
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }

    fn quotient(plus: f64, minus: f64, step: Dd) -> f64 {
        (plus - minus) / step.to_f64()
    }
}

impl FdValue for Dd {
    fn is_finite(self) -> bool {
        Dd::is_finite(self)
    }

    fn quotient(plus: Dd, minus: Dd, step: Dd) -> f64 {
        ((plus - minus) / step).to_f64()
    }
}

struct Feature {
    label: usize,
    token: usize,
    /// Fixed per-pixel values for previous-timestep features.
    frozen: Option<Vec<Dd>>,
}

struct Entry {
    anchor: usize,
    positive: usize,
    negatives: Vec<usize>,
}

/// Contrastive loss of the toy model's attention as a function of the latent,
/// in double-double precision.
///
/// Evaluations that differ from the base latent in a single pixel reuse the
/// base pixel-wise sums and cost `O(F²)` instead of `O(h·w·F²)`.
pub struct LossOracle {
    shape: Vec<usize>,
    c: usize,
    d: usize,
    l: usize,
    w_q: Vec<Dd>,
    /// Keys `E W_K`, row per token, already divided by `√d`.
    keys: Vec<Dd>,
    inv_tau: Dd,
    features: Vec<Feature>,
    entries: Vec<Entry>,
    base: Vec<f64>,
    base_rows: Vec<Vec<Dd>>,
    base_dots: Vec<Dd>,
}

impl LossOracle {
    pub fn new(
        model: &ToyModel,
        z: &Tensor,
        previous: Option<&crate::attention::AttentionMaps>,
        groups: &TokenGroups,
        cfg: LossConfig,
    ) -> Result<Self> {
        let dims = model.dims();
        let shape = dims.latent_shape().to_vec();
        if z.shape() != shape.as_slice() {
            return Err(Error::dim("LossOracle", z.shape(), &shape));
        }
        groups.validate_for(dims.l)?;
        let (c, d, l) = (dims.c, dims.d, dims.l);
        let proj = model.projections();
        let text = model.text().tokens();
        let d_text = text.shape()[1];

        let w_q: Vec<Dd> = proj.w_q.data().iter().map(|&x| Dd::from(x)).collect();
        let inv_sqrt_d = Dd::ONE / Dd::from(d as f64).sqrt();
        let mut keys = vec![Dd::ZERO; l * d];
        for j in 0..l {
            for k in 0..d {
                let s: Dd = (0..d_text)
                    .map(|m| {
                        Dd::from(text.data()[j * d_text + m]) * Dd::from(proj.w_k.data()[m * d + k])
                    })
                    .sum();
                keys[j * d + k] = s * inv_sqrt_d;
            }
        }

        let pixels = dims.h * dims.w;
        let mut features = Vec::new();
        for (label, g) in groups.groups().iter().enumerate() {
            for token in g.tokens() {
                features.push(Feature {
                    label,
                    token,
                    frozen: None,
                });
                if let Some(prev) = previous {
                    if prev.h * prev.w != pixels || prev.l != l {
                        return Err(Error::dim(
                            "LossOracle",
                            &[prev.h, prev.w, prev.l],
                            &[dims.h, dims.w, l],
                        ));
                    }
                    let col = (0..pixels)
                        .map(|p| Dd::from(prev.data[p * l + token]))
                        .collect();
                    features.push(Feature {
                        label,
                        token,
                        frozen: Some(col),
                    });
                }
            }
        }

        let mut entries = Vec::new();
        for (a, fa) in features.iter().enumerate() {
            let negatives: Vec<usize> = (0..features.len())
                .filter(|&n| features[n].label != fa.label)
                .collect();
            if negatives.is_empty() {
                return Err(Error::NoNegatives(a));
            }
            for (p, fp) in features.iter().enumerate() {
                if p != a && fp.label == fa.label {
                    entries.push(Entry {
                        anchor: a,
                        positive: p,
                        negatives: negatives.clone(),
                    });
                }
            }
        }
        if entries.is_empty() {
            return Err(Error::NoPositivePartner(0));
        }

        let mut oracle = LossOracle {
            shape,
            c,
            d,
            l,
            w_q,
            keys,
            inv_tau: Dd::ONE / Dd::from(cfg.tau),
            features,
            entries,
            base: z.data().to_vec(),
            base_rows: Vec::new(),
            base_dots: Vec::new(),
        };
        let zd: Vec<Dd> = oracle.base.iter().map(|&x| Dd::from(x)).collect();
        oracle.base_rows = (0..pixels)
            .map(|p| oracle.row(&zd[p * c..(p + 1) * c]))
            .collect();
        oracle.base_dots = oracle.dots(&oracle.base_rows);
        Ok(oracle)
    }

    /// Softmax attention of one pixel over the tokens.
    fn row(&self, zp: &[Dd]) -> Vec<Dd> {
        let (c, d, l) = (self.c, self.d, self.l);
        let q: Vec<Dd> = (0..d)
            .map(|k| (0..c).map(|ch| zp[ch] * self.w_q[ch * d + k]).sum())
            .collect();
        let scores: Vec<Dd> = (0..l)
            .map(|j| (0..d).map(|k| q[k] * self.keys[j * d + k]).sum())
            .collect();
        let m = scores.iter().copied().fold(scores[0], Dd::max);
        let e: Vec<Dd> = scores.iter().map(|&s| (s - m).exp()).collect();
        let total: Dd = e.iter().copied().sum();
        e.into_iter().map(|x| x / total).collect()
    }

    fn value(&self, f: usize, p: usize, row: &[Dd]) -> Dd {
        let feat = &self.features[f];
        match &feat.frozen {
            Some(col) => col[p],
            None => row[feat.token],
        }
    }

    /// Pairwise dot products of all features, `F × F` row-major.
    fn dots(&self, rows: &[Vec<Dd>]) -> Vec<Dd> {
        let nf = self.features.len();
        let mut out = vec![Dd::ZERO; nf * nf];
        for (p, row) in rows.iter().enumerate() {
            let x: Vec<Dd> = (0..nf).map(|f| self.value(f, p, row)).collect();
            for i in 0..nf {
                for j in i..nf {
                    out[i * nf + j] = out[i * nf + j] + x[i] * x[j];
                }
            }
        }
        for i in 0..nf {
            for j in 0..i {
                out[i * nf + j] = out[j * nf + i];
            }
        }
        out
    }

    fn loss_from_dots(&self, dots: &[Dd]) -> Result<Dd> {
        let nf = self.features.len();
        let norms: Vec<Dd> = (0..nf).map(|i| dots[i * nf + i].sqrt()).collect();
        if let Some(i) = norms.iter().position(|n| n.hi <= 0.0) {
            return Err(Error::Degenerate(format!("feature {i} has a zero map")));
        }
        // exp(cos / τ) for every ordered pair
        let mut logit = vec![Dd::ZERO; nf * nf];
        let mut ex = vec![Dd::ZERO; nf * nf];
        for i in 0..nf {
            for j in 0..nf {
                if i != j {
                    let cos = dots[i * nf + j] / (norms[i] * norms[j]);
                    logit[i * nf + j] = cos * self.inv_tau;
                    ex[i * nf + j] = logit[i * nf + j].exp();
                }
            }
        }
        let mut total = Dd::ZERO;
        for e in &self.entries {
            let a = e.anchor * nf;
            let den = ex[a + e.positive] + e.negatives.iter().map(|&n| ex[a + n]).sum::<Dd>();
            total = total + den.ln() - logit[a + e.positive];
        }
        Ok(total / Dd::from(self.entries.len() as f64))
    }

    /// Loss at the base latent.
    pub fn base_loss(&self) -> Result<Dd> {
        self.loss_from_dots(&self.base_dots)
    }

    /// Loss at `z`.
    pub fn eval(&self, z: &Tensor) -> Result<Dd> {
        if z.shape() != self.shape.as_slice() {
            return Err(Error::dim("LossOracle::eval", z.shape(), &self.shape));
        }
        let c = self.c;
        let changed: Vec<usize> = (0..self.base_rows.len())
            .filter(|&p| z.data()[p * c..(p + 1) * c] != self.base[p * c..(p + 1) * c])
            .collect();
        let to_dd = |p: usize| -> Vec<Dd> {
            z.data()[p * c..(p + 1) * c]
                .iter()
                .map(|&x| Dd::from(x))
                .collect()
        };
        match changed[..] {
            [] => self.base_loss(),
            [p] => {
                let nf = self.features.len();
                let new_row = self.row(&to_dd(p));
                let old: Vec<Dd> = (0..nf)
                    .map(|f| self.value(f, p, &self.base_rows[p]))
                    .collect();
                let new: Vec<Dd> = (0..nf).map(|f| self.value(f, p, &new_row)).collect();
                let mut dots = self.base_dots.clone();
                for i in 0..nf {
                    for j in 0..nf {
                        dots[i * nf + j] = dots[i * nf + j] - old[i] * old[j] + new[i] * new[j];
                    }
                }
                self.loss_from_dots(&dots)
            }
            _ => {
                let rows: Vec<Vec<Dd>> = (0..self.base_rows.len())
                    .map(|p| self.row(&to_dd(p)))
                    .collect();
                self.loss_from_dots(&self.dots(&rows))
            }
        }
    }
}

/// Compare the tape gradient of the guidance loss at `z` against central
/// differences of [`LossOracle`] with step `h`.
pub fn check_guidance_gradient(
    model: &ToyModel,
    z: &Tensor,
    timestep: usize,
    previous: Option<&crate::attention::AttentionMaps>,
    groups: &TokenGroups,
    cfg: LossConfig,
    h: f64,
) -> Result<GradComparison> {
    let (_, autodiff, _) = guidance_gradient(model, z, timestep, previous, groups, cfg)?;
    let oracle = LossOracle::new(model, z, previous, groups, cfg)?;
    let fd = finite_diff_grad(|x| oracle.eval(x), z, h)?;
    compare_gradients(&autodiff, &fd)
}
