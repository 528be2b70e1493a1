//! Offline filtering: generate a predict set per user, reconstruct its
//! embeddings from the codebooks and drop candidate items that land too
//! close to any prediction.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ItemDescriptor, ItemId, PlantedInterests, Polarity, UserId};
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::policy::{beam_search, serialize_context, Policy, SidTrie};
use crate::sidcodec::{Codec, SemanticId, SidTable};
use crate::targets::{SampleContext, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Predict-set size.
    pub k: usize,
    /// Targets scoring above this are dropped.
    pub threshold: f64,
    /// Restrict generation to assigned SIDs.
    pub constrained: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { k: 20, threshold: 0.8, constrained: true }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("predict-set size must be >= 1".into()));
        }
        if !self.threshold.is_finite() {
            return Err(Error::InvalidConfig("threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictSet {
    pub sids: Vec<SemanticId>,
    /// Codeword sums, one per SID.
    pub embeddings: Vec<Vec<f64>>,
}

impl PredictSet {
    pub fn from_sids(codec: &Codec, sids: Vec<SemanticId>) -> Result<Self> {
        let embeddings = sids.iter().map(|s| codec.reconstruct_from_sid(s)).collect::<Result<_>>()?;
        Ok(PredictSet { sids, embeddings })
    }

    /// Best cosine with any prediction and the index achieving it (lowest
    /// on ties); `(-1, None)` for an empty set.
    pub fn score(&self, embedding: &[f64]) -> (f64, Option<usize>) {
        let mut best = (-1.0, None);
        for (i, e) in self.embeddings.iter().enumerate() {
            let c = cosine(embedding, e);
            if best.1.is_none() || c > best.0 {
                best = (c, Some(i));
            }
        }
        best
    }
}

/// Beam search over `context`, trie-restricted when `trie` is given.
pub fn build_predict_set(
    policy: &Policy,
    codec: &Codec,
    context: &[u32],
    cfg: &FilterConfig,
    trie: Option<&SidTrie>,
) -> Result<PredictSet> {
    let beams = beam_search(policy, context, cfg.k, if cfg.constrained { trie } else { None })?;
    PredictSet::from_sids(codec, beams.into_iter().map(|b| b.sid).collect())
}

/// Reconstructed embedding of a catalog item: its assigned SID when it has
/// one, otherwise the SID its features quantize to.
pub fn target_embedding(codec: &Codec, sids: &SidTable, item: &ItemDescriptor) -> Result<Vec<f64>> {
    match sids.sids.get(&item.item) {
        Some(s) => codec.reconstruct_from_sid(s),
        None => codec.reconstruct_from_sid(&codec.sid_of(&item.features)?),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub item: ItemId,
    pub score: f64,
    pub kept: bool,
    pub matched: Option<SemanticId>,
}

pub fn filter_batch(
    targets: &[ItemDescriptor],
    predict: &PredictSet,
    codec: &Codec,
    sids: &SidTable,
    cfg: &FilterConfig,
) -> Result<Vec<FilterDecision>> {
    targets
        .par_iter()
        .map(|t| {
            let (score, idx) = predict.score(&target_embedding(codec, sids, t)?);
            Ok(FilterDecision {
                item: t.item,
                score,
                kept: score <= cfg.threshold,
                matched: idx.map(|i| predict.sids[i].clone()),
            })
        })
        .collect()
}

/// `item  score  kept  matched_sid` with a header line.
pub fn decisions_to_tsv(decisions: &[FilterDecision]) -> String {
    let mut out = String::from("item\tscore\tkept\tmatched\n");
    for d in decisions {
        let matched = d.matched.as_ref().map_or_else(|| "-".to_string(), |s| s.to_string());
        writeln!(out, "{}\t{:.6}\t{}\t{}", d.item, d.score, d.kept, matched).expect("string write");
    }
    out
}

/// Planted-dislike share of an exposure stream before and after filtering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureReport {
    pub total: usize,
    pub kept: usize,
    pub disliked_before: usize,
    pub disliked_after: usize,
}

impl ExposureReport {
    pub fn rate_before(&self) -> Option<f64> {
        (self.total > 0).then(|| self.disliked_before as f64 / self.total as f64)
    }

    pub fn rate_after(&self) -> Option<f64> {
        (self.kept > 0).then(|| self.disliked_after as f64 / self.kept as f64)
    }
}

/// Decisions for one user's exposures on one day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserDayDecisions {
    pub user: UserId,
    pub day: u32,
    pub decisions: Vec<FilterDecision>,
}

/// `user  day  item  score  kept  matched` with a header line.
pub fn user_day_decisions_to_tsv(rows: &[UserDayDecisions]) -> String {
    let mut out = String::from("user\tday\titem\tscore\tkept\tmatched\n");
    for r in rows {
        for line in decisions_to_tsv(&r.decisions).lines().skip(1) {
            writeln!(out, "{}\t{}\t{line}", r.user, r.day).expect("string write");
        }
    }
    out
}

/// Filters every user's exposures on each of `days` with a predict set
/// generated from the full negative-plus-positive history before that day.
#[allow(clippy::too_many_arguments)]
pub fn filter_exposures(
    policy: &Policy,
    codec: &Codec,
    corpus: &Corpus,
    sids: &SidTable,
    planted: &PlantedInterests,
    days: &[u32],
    cfg: &FilterConfig,
    trie: Option<&SidTrie>,
) -> Result<(ExposureReport, Vec<UserDayDecisions>)> {
    cfg.validate()?;
    let mut jobs: BTreeMap<(UserId, u32), Vec<ItemId>> = BTreeMap::new();
    for e in corpus.events() {
        if e.polarity == Polarity::Exposure && days.contains(&e.day) {
            jobs.entry((e.user, e.day)).or_default().push(e.item);
        }
    }
    let jobs: Vec<((UserId, u32), Vec<ItemId>)> = jobs.into_iter().collect();
    let parts = jobs
        .par_iter()
        .map(|&((user, day), ref items)| {
            let ctx = SampleContext::build(corpus, user, day, Stage::NegPlusPos);
            let tokens = serialize_context(&ctx, sids, &policy.vocab, policy.cfg.max_context_events)?;
            let predict = build_predict_set(policy, codec, &tokens, cfg, trie)?;
            let descs: Vec<ItemDescriptor> = items
                .iter()
                .map(|i| corpus.item(*i).cloned().ok_or_else(|| Error::InvalidArgument(format!("unknown item {i}"))))
                .collect::<Result<_>>()?;
            let decisions = filter_batch(&descs, &predict, codec, sids, cfg)?;
            let mut r = ExposureReport { total: 0, kept: 0, disliked_before: 0, disliked_after: 0 };
            for (d, desc) in decisions.iter().zip(&descs) {
                let disliked = planted.dislikes(user, desc.category) as usize;
                r.total += 1;
                r.disliked_before += disliked;
                if d.kept {
                    r.kept += 1;
                    r.disliked_after += disliked;
                }
            }
            Ok((r, UserDayDecisions { user, day, decisions }))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ExposureReport { total: 0, kept: 0, disliked_before: 0, disliked_after: 0 };
    let mut rows = Vec::with_capacity(parts.len());
    for (r, row) in parts {
        total.total += r.total;
        total.kept += r.kept;
        total.disliked_before += r.disliked_before;
        total.disliked_after += r.disliked_after;
        rows.push(row);
    }
    Ok((total, rows))
}
