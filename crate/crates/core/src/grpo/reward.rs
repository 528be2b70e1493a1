//! Rewards for a generated SID against a sample's future sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::ItemId;
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::sidcodec::{Codec, SemanticId, SidTable};
use crate::targets::TargetSets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardScheme {
    /// Similarity to the expanded negative set.
    #[serde(rename = "a")]
    SimGts,
    /// As `SimGts`, zeroed below the truncation point.
    #[serde(rename = "b")]
    SimTruncated,
    /// `s+ - gamma s-`.
    #[serde(rename = "c")]
    SimMinusFps,
    /// `SimMinusFps` with both similarities truncated.
    #[serde(rename = "d")]
    BothTruncated,
    /// 1 / 0.1 / 0.01 / 0 by the deepest shared prefix with a target SID.
    #[serde(rename = "e")]
    HierHit,
}

impl RewardScheme {
    pub const ALL: [RewardScheme; 5] = [
        RewardScheme::SimGts,
        RewardScheme::SimTruncated,
        RewardScheme::SimMinusFps,
        RewardScheme::BothTruncated,
        RewardScheme::HierHit,
    ];

    pub fn letter(self) -> char {
        (b'a' + self as u8) as char
    }
}

impl fmt::Display for RewardScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for RewardScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RewardScheme::ALL
            .into_iter()
            .find(|r| r.letter().to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown reward scheme {s:?}; expected a..e")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSpec {
    pub scheme: RewardScheme,
    pub gamma: f64,
    pub trunc: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec { scheme: RewardScheme::SimMinusFps, gamma: 0.5, trunc: 0.6 }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig("gamma must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.trunc) {
            return Err(Error::InvalidConfig("trunc must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Combines the best similarities to the negative (`s_plus`) and positive
    /// (`s_minus`) sets. Not used by [`RewardScheme::HierHit`].
    pub fn combine(&self, s_plus: f64, s_minus: f64) -> f64 {
        let t = |s: f64| if s >= self.trunc { s } else { 0.0 };
        match self.scheme {
            RewardScheme::SimGts | RewardScheme::HierHit => s_plus,
            RewardScheme::SimTruncated => t(s_plus),
            RewardScheme::SimMinusFps => s_plus - self.gamma * s_minus,
            RewardScheme::BothTruncated => t(s_plus) - self.gamma * t(s_minus),
        }
    }
}

/// Reward for the deepest prefix `output` shares with any target SID.
pub fn hierarchical_hit<'a>(output: &SemanticId, targets: impl IntoIterator<Item = &'a SemanticId>) -> f64 {
    let depth = targets.into_iter().map(|t| output.common_prefix(t)).max().unwrap_or(0);
    match depth {
        0 => 0.0,
        1 => 0.01,
        2 => 0.1,
        _ => 1.0,
    }
}

/// Reconstructed embeddings for catalog items, plus reward evaluation.
#[derive(Debug, Clone)]
pub struct RewardModel<'a> {
    codec: &'a Codec,
    sids: &'a SidTable,
    item_embeddings: BTreeMap<ItemId, Vec<f64>>,
}

impl<'a> RewardModel<'a> {
    pub fn new(codec: &'a Codec, sids: &'a SidTable) -> Result<Self> {
        let item_embeddings =
            sids.sids.iter().map(|(&i, s)| Ok((i, codec.reconstruct_from_sid(s)?))).collect::<Result<_>>()?;
        Ok(RewardModel { codec, sids, item_embeddings })
    }

    /// Best cosine between `embedding` and any item of `items`, floored at
    /// zero; 0 for an empty set. Items without a SID are ignored.
    pub fn max_similarity(&self, embedding: &[f64], items: &BTreeSet<ItemId>) -> f64 {
        items.iter().filter_map(|i| self.item_embeddings.get(i)).map(|e| cosine(embedding, e)).fold(0.0, f64::max)
    }

    pub fn reward(&self, output: &SemanticId, targets: &TargetSets, spec: &RewardSpec) -> Result<f64> {
        if spec.scheme == RewardScheme::HierHit {
            self.codec.validate_sid(output)?;
            let sids = targets.gts_expanded.iter().filter_map(|i| self.sids.sids.get(i));
            return Ok(hierarchical_hit(output, sids));
        }
        let e = self.codec.reconstruct_from_sid(output)?;
        let s_plus = self.max_similarity(&e, &targets.gts_expanded);
        let s_minus = if matches!(spec.scheme, RewardScheme::SimMinusFps | RewardScheme::BothTruncated) {
            self.max_similarity(&e, &targets.fps)
        } else {
            0.0
        };
        Ok(spec.combine(s_plus, s_minus))
    }
}
