//! Pseudo-labelled attention features and positive/negative pair enumeration.
//!
//! Each group of tokens (a subject and its attributes) gets one label. Every
//! token contributes its map at the current timestep and, when available,
//! its map from the previous timestep, both carrying the group's label.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMaps;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A subject token and the attribute tokens bound to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenGroup {
    pub subject: usize,
    #[serde(default)]
    pub attributes: Vec<usize>,
}

impl TokenGroup {
    pub fn new(subject: usize, attributes: impl Into<Vec<usize>>) -> Self {
        TokenGroup {
            subject,
            attributes: attributes.into(),
        }
    }

    /// Subject first, then attributes in order.
    pub fn tokens(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.subject).chain(self.attributes.iter().copied())
    }

    pub fn len(&self) -> usize {
        1 + self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Ordered groups; label `i` belongs to `groups[i]`. Token indices are
/// distinct across the whole structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TokenGroup>", into = "Vec<TokenGroup>")]
pub struct TokenGroups {
    groups: Vec<TokenGroup>,
}

impl TokenGroups {
    pub fn new(groups: Vec<TokenGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::config("groups", "at least one group is required"));
        }
        let mut seen = HashSet::new();
        for t in groups.iter().flat_map(TokenGroup::tokens) {
            if !seen.insert(t) {
                return Err(Error::config(
                    "groups",
                    format!("token {t} appears more than once"),
                ));
            }
        }
        Ok(TokenGroups { groups })
    }

    pub fn groups(&self) -> &[TokenGroup] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// `(label, token)` for every grouped token, in group order.
    pub fn labelled_tokens(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(i, g)| g.tokens().map(move |t| (i, t)))
    }

    /// Check every index against a token count `l`.
    pub fn validate_for(&self, l: usize) -> Result<()> {
        match self.labelled_tokens().find(|&(_, t)| t >= l) {
            Some((_, t)) => Err(Error::config(
                "groups",
                format!("token index {t} out of range for {l} tokens"),
            )),
            None => Ok(()),
        }
    }

    /// Apply a label permutation: group `i` moves to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::dim("permuted", &[self.len()], &[perm.len()]));
        }
        let mut slots: Vec<Option<TokenGroup>> = vec![None; self.len()];
        for (g, &p) in self.groups.iter().zip(perm) {
            let slot = slots.get_mut(p).ok_or(Error::Index {
                index: p,
                extent: self.len(),
            })?;
            *slot = Some(g.clone());
        }
        let groups = slots
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Contract("not a permutation".into()))?;
        TokenGroups::new(groups)
    }
}

impl TryFrom<Vec<TokenGroup>> for TokenGroups {
    type Error = Error;

    fn try_from(groups: Vec<TokenGroup>) -> Result<Self> {
        TokenGroups::new(groups)
    }
}

impl From<TokenGroups> for Vec<TokenGroup> {
    fn from(g: TokenGroups) -> Self {
        g.groups
    }
}

/// Which timestep a feature's map was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Source {
    /// Timestep `t`, differentiable.
    Current,
    /// Timestep `t+1`, a constant.
    Previous,
}

/// Position of one feature in the feature list, without its data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSlot {
    pub label: usize,
    pub token: usize,
    pub source: Source,
}

/// Feature order used throughout: per group, per token (subject first), the
/// current map followed by the previous map.
pub fn feature_layout(groups: &TokenGroups, with_previous: bool) -> Vec<FeatureSlot> {
    let mut out = Vec::new();
    for (label, token) in groups.labelled_tokens() {
        out.push(FeatureSlot {
            label,
            token,
            source: Source::Current,
        });
        if with_previous {
            out.push(FeatureSlot {
                label,
                token,
                source: Source::Previous,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeature {
    pub label: usize,
    pub token: usize,
    pub source: Source,
    /// True for previous-timestep features, which carry no gradient.
    pub detached: bool,
    /// `h × w` attention map.
    pub map: Tensor,
}

impl LabeledFeature {
    /// Row-major flattening used for similarity.
    pub fn flat(&self) -> &[f64] {
        self.map.data()
    }
}

/// Labelled features from the current maps and, if present, the previous maps.
pub fn build_features(
    current: &AttentionMaps,
    previous: Option<&AttentionMaps>,
    groups: &TokenGroups,
) -> Result<Vec<LabeledFeature>> {
    groups.validate_for(current.l)?;
    if let Some(prev) = previous {
        if !prev.same_layout(current) {
            return Err(Error::dim(
                "build_features",
                &[current.h, current.w, current.l],
                &[prev.h, prev.w, prev.l],
            ));
        }
    }
    feature_layout(groups, previous.is_some())
        .into_iter()
        .map(|slot| {
            let maps = match slot.source {
                Source::Current => current,
                // layout only emits Previous when `previous` is Some
                Source::Previous => previous.expect("previous maps"),
            };
            Ok(LabeledFeature {
                label: slot.label,
                token: slot.token,
                source: slot.source,
                detached: slot.source == Source::Previous,
                map: maps.token_map(slot.token)?,
            })
        })
        .collect()
}

pub trait Labeled {
    fn label(&self) -> usize;
}

impl Labeled for LabeledFeature {
    fn label(&self) -> usize {
        self.label
    }
}

impl Labeled for FeatureSlot {
    fn label(&self) -> usize {
        self.label
    }
}

impl Labeled for usize {
    fn label(&self) -> usize {
        *self
    }
}

/// One directed anchor/positive pair and the anchor's negatives, as indices
/// into the feature list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairEntry {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub entries: Vec<PairEntry>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Every ordered pair of distinct same-label features, each with all
/// differently labelled features as negatives.
pub fn enumerate_pairs<L: Labeled>(features: &[L]) -> Result<PairSet> {
    let labels: Vec<usize> = features.iter().map(Labeled::label).collect();
    let Some(&first) = labels.first() else {
        return Err(Error::Contract("no features to pair".into()));
    };
    if labels.iter().all(|&l| l == first) {
        return Err(Error::NoNegatives(first));
    }
    for &l in &labels {
        if labels.iter().filter(|&&m| m == l).count() < 2 {
            return Err(Error::NoPositivePartner(l));
        }
    }

    let mut entries = Vec::new();
    for (a, &la) in labels.iter().enumerate() {
        let negatives: Vec<usize> = (0..labels.len()).filter(|&n| labels[n] != la).collect();
        for (p, &lp) in labels.iter().enumerate() {
            if p != a && lp == la {
                entries.push(PairEntry {
                    anchor: a,
                    positive: p,
                    negatives: negatives.clone(),
                });
            }
        }
    }
    Ok(PairSet { entries })
}
