//! Hit-ratio metrics over generated predict sets, 20-way candidate accuracy
//! and the forgetting rate.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ItemId, Polarity, UserId};
use crate::error::{Error, Result};
use crate::policy::{beam_search, score_candidates, serialize_context, Policy, SidTrie};
use crate::seed;
use crate::sidcodec::{SemanticId, SidTable};
use crate::targets::{Sample, SampleContext, Stage};

pub const DEFAULT_K: usize = 20;
/// Users with fewer historical negatives than this are long-tail.
pub const LONG_TAIL_USER_NEGATIVES: usize = 3;
/// Items with fewer historical negatives than this are long-tail.
pub const LONG_TAIL_ITEM_NEGATIVES: usize = 5;
pub const CANDIDATES_PER_TASK: usize = 20;

/// Negative-feedback days per user and per item, for counts strictly
/// before a given day.
#[derive(Debug, Clone, Default)]
pub struct NegativeCounts {
    by_user: BTreeMap<UserId, Vec<u32>>,
    by_item: BTreeMap<ItemId, Vec<u32>>,
}

impl NegativeCounts {
    pub fn new(corpus: &Corpus) -> Self {
        let mut c = NegativeCounts::default();
        for e in corpus.events().iter().filter(|e| e.is_negative()) {
            c.by_user.entry(e.user).or_default().push(e.day);
            c.by_item.entry(e.item).or_default().push(e.day);
        }
        for days in c.by_user.values_mut().chain(c.by_item.values_mut()) {
            days.sort_unstable();
        }
        c
    }

    fn before(days: Option<&Vec<u32>>, day: u32) -> usize {
        days.map_or(0, |d| d.partition_point(|&x| x < day))
    }

    pub fn user_before(&self, user: UserId, day: u32) -> usize {
        Self::before(self.by_user.get(&user), day)
    }

    pub fn item_before(&self, item: ItemId, day: u32) -> usize {
        Self::before(self.by_item.get(&item), day)
    }
}

/// One evaluated prediction with everything the metrics need, ground truth
/// already mapped to semantic IDs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub user: UserId,
    pub as_of_day: u32,
    pub predict_set: Vec<SemanticId>,
    pub next_negative: Option<SemanticId>,
    pub gts: BTreeSet<SemanticId>,
    /// SIDs of ground-truth items with fewer than
    /// [`LONG_TAIL_ITEM_NEGATIVES`] historical negatives.
    pub long_tail_gts: BTreeSet<SemanticId>,
    pub user_neg_count: usize,
}

impl EvalSample {
    /// Ground-truth items without a semantic ID are dropped.
    pub fn new(sample: &Sample, predict_set: Vec<SemanticId>, sids: &SidTable, counts: &NegativeCounts) -> Self {
        let day = sample.as_of_day;
        let sid = |i: &ItemId| sids.get(*i).ok().cloned();
        EvalSample {
            user: sample.user,
            as_of_day: day,
            predict_set,
            next_negative: sample.targets.next_negative.as_ref().and_then(sid),
            gts: sample.targets.gts.iter().filter_map(sid).collect(),
            long_tail_gts: sample
                .targets
                .gts
                .iter()
                .filter(|i| counts.item_before(**i, day) < LONG_TAIL_ITEM_NEGATIVES)
                .filter_map(sid)
                .collect(),
            user_neg_count: counts.user_before(sample.user, day),
        }
    }

    fn top(&self, k: usize) -> &[SemanticId] {
        &self.predict_set[..k.min(self.predict_set.len())]
    }

    fn hits_any(&self, k: usize, set: &BTreeSet<SemanticId>) -> bool {
        self.top(k).iter().any(|s| set.contains(s))
    }
}

fn rate(hits: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut n, mut h) = (0usize, 0usize);
    for hit in hits {
        n += 1;
        h += hit as usize;
    }
    (n > 0).then(|| h as f64 / n as f64)
}

/// Fraction of samples whose top-`k` contains the next negative's SID.
/// `None` when no sample has a next negative.
pub fn hr_at_k(samples: &[EvalSample], k: usize) -> Option<f64> {
    rate(samples.iter().filter_map(|s| s.next_negative.as_ref().map(|n| s.top(k).contains(n))))
}

/// Fraction of samples whose top-`k` hits any future negative.
pub fn fhr_at_k(samples: &[EvalSample], k: usize) -> Option<f64> {
    rate(samples.iter().filter(|s| !s.gts.is_empty()).map(|s| s.hits_any(k, &s.gts)))
}

/// FHR over long-tail users only.
pub fn luf_at_k(samples: &[EvalSample], k: usize) -> Option<f64> {
    rate(
        samples
            .iter()
            .filter(|s| !s.gts.is_empty() && s.user_neg_count < LONG_TAIL_USER_NEGATIVES)
            .map(|s| s.hits_any(k, &s.gts)),
    )
}

/// FHR where only long-tail ground-truth items can score a hit. `None` when
/// no sample has a long-tail ground-truth item.
pub fn lif_at_k(samples: &[EvalSample], k: usize) -> Option<f64> {
    if samples.iter().all(|s| s.long_tail_gts.is_empty()) {
        return None;
    }
    rate(samples.iter().filter(|s| !s.gts.is_empty()).map(|s| s.hits_any(k, &s.long_tail_gts)))
}

/// One row of the metric table; `None` marks an empty sample set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricRow {
    pub hr: Option<f64>,
    pub fhr: Option<f64>,
    pub luf: Option<f64>,
    pub lif: Option<f64>,
    pub cand: Option<f64>,
}

impl MetricRow {
    /// Column names in [`MetricRow::values`] order for cutoff `k`.
    pub fn columns(k: usize) -> [String; 5] {
        [format!("HR@{k}"), format!("FHR@{k}"), format!("LUF@{k}"), format!("LIF@{k}"), "CandAcc".into()]
    }

    pub fn hit_metrics(samples: &[EvalSample], k: usize) -> Self {
        MetricRow {
            hr: hr_at_k(samples, k),
            fhr: fhr_at_k(samples, k),
            luf: luf_at_k(samples, k),
            lif: lif_at_k(samples, k),
            cand: None,
        }
    }

    pub fn values(&self) -> [Option<f64>; 5] {
        [self.hr, self.fhr, self.luf, self.lif, self.cand]
    }
}

/// Top-`k` beam outputs for every sample under `stage`'s context.
pub fn predict_sets(
    policy: &Policy,
    samples: &[Sample],
    stage: Stage,
    sids: &SidTable,
    k: usize,
    trie: Option<&SidTrie>,
) -> Result<Vec<Vec<SemanticId>>> {
    samples
        .par_iter()
        .map(|s| {
            let ctx = serialize_context(s.context(stage), sids, &policy.vocab, policy.cfg.max_context_events)?;
            Ok(beam_search(policy, &ctx, k, trie)?.into_iter().map(|b| b.sid).collect())
        })
        .collect()
}

/// Predicts and wraps every sample for the hit metrics.
pub fn evaluate_samples(
    policy: &Policy,
    samples: &[Sample],
    stage: Stage,
    sids: &SidTable,
    counts: &NegativeCounts,
    k: usize,
    trie: Option<&SidTrie>,
) -> Result<Vec<EvalSample>> {
    let preds = predict_sets(policy, samples, stage, sids, k, trie)?;
    Ok(samples.iter().zip(preds).map(|(s, p)| EvalSample::new(s, p, sids, counts)).collect())
}

/// One true negative among same-day exposures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateTask {
    pub context: SampleContext,
    pub candidates: Vec<ItemId>,
    pub answer: usize,
}

/// `n` tasks drawn with replacement from negative events on `days` whose
/// user saw at least 19 other distinct items that day without disliking
/// them; the 19 distractors are drawn from those exposures and the order is
/// shuffled.
pub fn build_candidate_tasks(corpus: &Corpus, days: Range<u32>, n: usize, seed_value: u64) -> Vec<CandidateTask> {
    let mut day_exposures: BTreeMap<(UserId, u32), BTreeSet<ItemId>> = BTreeMap::new();
    let mut day_negatives: BTreeMap<(UserId, u32), BTreeSet<ItemId>> = BTreeMap::new();
    for e in corpus.events().iter().filter(|e| days.contains(&e.day)) {
        match e.polarity {
            Polarity::Exposure => day_exposures.entry((e.user, e.day)).or_default().insert(e.item),
            Polarity::NegativeFeedback => day_negatives.entry((e.user, e.day)).or_default().insert(e.item),
            _ => continue,
        };
    }
    let mut eligible: Vec<(UserId, u32, ItemId, Vec<ItemId>)> = Vec::new();
    for (&(user, day), negs) in &day_negatives {
        let pool: Vec<ItemId> =
            day_exposures.get(&(user, day)).map(|ex| ex.difference(negs).copied().collect()).unwrap_or_default();
        if pool.len() >= CANDIDATES_PER_TASK - 1 {
            eligible.extend(negs.iter().map(|&item| (user, day, item, pool.clone())));
        }
    }
    if eligible.is_empty() {
        return Vec::new();
    }
    let mut rng = seed::rng(seed_value);
    (0..n)
        .map(|_| {
            let (user, day, item, pool) = eligible.choose(&mut rng).expect("nonempty");
            let mut candidates: Vec<ItemId> =
                pool.choose_multiple(&mut rng, CANDIDATES_PER_TASK - 1).copied().collect();
            candidates.push(*item);
            candidates.shuffle(&mut rng);
            let answer = candidates.iter().position(|c| c == item).expect("true item present");
            CandidateTask { context: SampleContext::build(corpus, *user, *day, Stage::NegPlusPos), candidates, answer }
        })
        .collect()
}

/// Index of the highest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of tasks whose top-scored candidate is the true one.
pub fn candidate_accuracy<F>(tasks: &[CandidateTask], scorer: F) -> Result<Option<f64>>
where
    F: Fn(&CandidateTask) -> Result<Vec<f64>> + Sync,
{
    let hits = tasks
        .par_iter()
        .map(|t| {
            let scores = scorer(t)?;
            if scores.len() != t.candidates.len() {
                return Err(Error::DimensionMismatch { expected: t.candidates.len(), got: scores.len() });
            }
            Ok(argmax_first(&scores) == t.answer)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(rate(hits.into_iter()))
}

/// Sequence log-likelihood of each candidate's SID under the policy.
pub fn policy_candidate_scores(policy: &Policy, sids: &SidTable, task: &CandidateTask) -> Result<Vec<f64>> {
    let ctx = serialize_context(&task.context, sids, &policy.vocab, policy.cfg.max_context_events)?;
    let cands = task.candidates.iter().map(|c| sids.get(*c).cloned()).collect::<Result<Vec<_>>>()?;
    score_candidates(policy, &ctx, &cands)
}

/// Relative accuracy drop, floored at zero.
pub fn forgetting_rate(acc_before: f64, acc_after: f64) -> Result<f64> {
    if !(acc_before > 0.0) {
        return Err(Error::InvalidArgument("accuracy before must be positive".into()));
    }
    Ok(((acc_before - acc_after) / acc_before).max(0.0))
}
