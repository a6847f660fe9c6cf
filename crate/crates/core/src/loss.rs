//! Cosine similarity and the contrastive InfoNCE objective over attention maps.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMaps;
use crate::error::{Error, Result};
use crate::numerics::{cosine_raw, logsumexp_raw, Tape, Tensor, Var};
use crate::pairing::{
    build_features, enumerate_pairs, feature_layout, LabeledFeature, Source, TokenGroups,
};

/// Temperature of the contrastive softmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
}

impl LossConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::config("tau", format!("must be > 0, got {tau}")));
        }
        Ok(LossConfig { tau })
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { tau: 0.5 }
    }
}

/// `uᵀv / (‖u‖‖v‖)`.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::dim("cosine_sim", &[u.len()], &[v.len()]));
    }
    cosine_raw(u, v)
}

/// InfoNCE from precomputed similarities: the negative log of the softmax
/// weight the positive receives among itself and all negatives.
pub fn infonce_from_sims(positive: f64, negatives: &[f64], tau: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::Contract(
            "infonce needs at least one negative".into(),
        ));
    }
    let logits: Vec<f64> = std::iter::once(positive)
        .chain(negatives.iter().copied())
        .map(|s| s / tau)
        .collect();
    Ok(logsumexp_raw(&logits) - logits[0])
}

pub fn infonce(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    cfg: LossConfig,
) -> Result<f64> {
    let pos = cosine_sim(anchor, positive)?;
    let negs = negatives
        .iter()
        .map(|n| cosine_sim(anchor, n))
        .collect::<Result<Vec<_>>>()?;
    infonce_from_sims(pos, &negs, cfg.tau)
}

/// Record InfoNCE for one anchor/positive pair given similarity nodes.
pub fn infonce_on_tape(tape: &mut Tape, positive: Var, negatives: &[Var], tau: f64) -> Result<Var> {
    if negatives.is_empty() {
        return Err(Error::Contract(
            "infonce needs at least one negative".into(),
        ));
    }
    let mut parts = Vec::with_capacity(negatives.len() + 1);
    parts.push(positive);
    parts.extend_from_slice(negatives);
    let sims = tape.stack(&parts)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    let lse = tape.logsumexp(logits)?;
    let pos = tape.select(logits, 0)?;
    tape.sub(lse, pos)
}

/// Mean InfoNCE over every directed positive pair of labelled feature nodes.
fn mean_pair_loss(tape: &mut Tape, features: &[(usize, Var)], cfg: LossConfig) -> Result<Var> {
    let labels: Vec<usize> = features.iter().map(|&(l, _)| l).collect();
    let pairs = enumerate_pairs(&labels)?;

    // cosine similarity is symmetric; compute each unordered pair once
    let mut sims: HashMap<(usize, usize), Var> = HashMap::new();
    let mut sim = |tape: &mut Tape, i: usize, j: usize| -> Result<Var> {
        let key = (i.min(j), i.max(j));
        if let Some(&v) = sims.get(&key) {
            return Ok(v);
        }
        let v = tape.cosine_sim(features[key.0].1, features[key.1].1)?;
        sims.insert(key, v);
        Ok(v)
    };

    let mut losses = Vec::with_capacity(pairs.len());
    for entry in &pairs.entries {
        let pos = sim(tape, entry.anchor, entry.positive)?;
        let negs = entry
            .negatives
            .iter()
            .map(|&n| sim(tape, entry.anchor, n))
            .collect::<Result<Vec<_>>>()?;
        losses.push(infonce_on_tape(tape, pos, &negs, cfg.tau)?);
    }
    let stacked = tape.stack(&losses)?;
    tape.mean(stacked)
}

/// Contrastive loss recorded on `tape`.
///
/// `current` is the `(h·w) × l` attention matrix node for timestep `t`;
/// `previous`, when present, contributes constant features from `t+1`.
pub fn conform_loss_on_tape(
    tape: &mut Tape,
    current: Var,
    previous: Option<&AttentionMaps>,
    groups: &TokenGroups,
    cfg: LossConfig,
) -> Result<Var> {
    let shape = tape.shape(current).to_vec();
    let [pixels, l] = shape[..] else {
        return Err(Error::dim("conform_loss", &shape, &[]));
    };
    groups.validate_for(l)?;
    if let Some(prev) = previous {
        if prev.h * prev.w != pixels || prev.l != l {
            return Err(Error::dim(
                "conform_loss",
                &shape,
                &[prev.h * prev.w, prev.l],
            ));
        }
    }

    let mut features = Vec::new();
    for slot in feature_layout(groups, previous.is_some()) {
        let node = match (slot.source, previous) {
            (Source::Current, _) => tape.column(current, slot.token)?,
            (Source::Previous, Some(prev)) => {
                let map = prev.pixel_matrix().column(slot.token)?;
                tape.constant(map)
            }
            (Source::Previous, None) => unreachable!("layout without previous maps"),
        };
        features.push((slot.label, node));
    }
    mean_pair_loss(tape, &features, cfg)
}

/// Loss value for plain attention maps.
pub fn conform_loss(
    current: &AttentionMaps,
    previous: Option<&AttentionMaps>,
    groups: &TokenGroups,
    cfg: LossConfig,
) -> Result<f64> {
    let features = build_features(current, previous, groups)?;
    conform_loss_from_features(&features, cfg)
}

/// Loss value for an explicit feature list.
pub fn conform_loss_from_features(features: &[LabeledFeature], cfg: LossConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes: Vec<(usize, Var)> = features
        .iter()
        .map(|f| {
            let flat = Tensor::new(vec![f.map.len()], f.flat().to_vec())?;
            Ok((f.label, tape.constant(flat)))
        })
        .collect::<Result<_>>()?;
    let loss = mean_pair_loss(&mut tape, &nodes, cfg)?;
    tape.value(loss).item()
}
