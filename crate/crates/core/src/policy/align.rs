//! Item-level alignment: pick the disliked item among four options whose
//! other three are the user's purchases.
//!
//! Prompt layout: `BOS SEP_POS p1 p2 p3 OPT_1 o1 OPT_2 o2 OPT_3 o3 OPT_4 o4
//! SEP_NEG`, answered by the SID of the disliked option.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::decode::score_candidates;
use super::sft::{train_teacher_forced, SftConfig, SftExample};
use super::{Policy, Trainable, Vocab};
use crate::corpus::{Corpus, ItemId, Polarity, UserId};
use crate::error::{Error, Result};
use crate::seed;
use crate::sidcodec::{SemanticId, SidTable};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentSample {
    pub user: UserId,
    pub negative_item: ItemId,
    /// Purchased items shown as context, in purchase order.
    pub positives: Vec<SemanticId>,
    pub options: Vec<SemanticId>,
    pub answer: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// An item qualifies once the user disliked it more than this many times.
    pub min_neg_count: usize,
    /// Independent distractor draws per qualifying `(user, item)`.
    pub draws_per_item: usize,
    /// Adapter rank; 0 fine-tunes every parameter instead.
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub sft: SftConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            min_neg_count: 3,
            draws_per_item: 32,
            lora_rank: 16,
            lora_scale: 1.0,
            sft: SftConfig { epochs: 8, batch_size: 16, lr: 1e-2 },
        }
    }
}

/// Samples for every user with a qualifying item and at least three
/// distinct purchases that do not qualify themselves; option order is
/// shuffled per sample.
pub fn build_alignment_set(
    corpus: &Corpus,
    sids: &SidTable,
    cfg: &AlignConfig,
    seed_value: u64,
) -> Result<Vec<AlignmentSample>> {
    let mut rng = seed::rng(seed_value);
    let mut out = Vec::new();
    for &user in corpus.users() {
        let mut neg_counts: BTreeMap<ItemId, usize> = BTreeMap::new();
        let mut purchases: Vec<ItemId> = Vec::new();
        for e in corpus.user_events(user) {
            match e.polarity {
                Polarity::NegativeFeedback => *neg_counts.entry(e.item).or_default() += 1,
                Polarity::Purchase if !purchases.contains(&e.item) => purchases.push(e.item),
                _ => {}
            }
        }
        let qualifying: Vec<ItemId> =
            neg_counts.iter().filter(|(_, &c)| c > cfg.min_neg_count).map(|(&i, _)| i).collect();
        let pool: Vec<ItemId> = purchases.iter().copied().filter(|p| !qualifying.contains(p)).collect();
        for &item in &qualifying {
            if pool.len() < 3 {
                continue;
            }
            for _ in 0..cfg.draws_per_item {
                let mut picked: Vec<ItemId> = pool.choose_multiple(&mut rng, 3).copied().collect();
                picked.sort_by_key(|p| pool.iter().position(|q| q == p));
                let positives = picked.iter().map(|p| sids.get(*p).cloned()).collect::<Result<Vec<_>>>()?;
                let mut order: Vec<usize> = (0..4).collect();
                order.shuffle(&mut rng);
                let mut options = Vec::with_capacity(4);
                let mut answer = 0;
                for (slot, &o) in order.iter().enumerate() {
                    if o == 3 {
                        answer = slot;
                        options.push(sids.get(item)?.clone());
                    } else {
                        options.push(positives[o].clone());
                    }
                }
                out.push(AlignmentSample { user, negative_item: item, positives: positives.clone(), options, answer });
            }
        }
    }
    Ok(out)
}

pub fn alignment_prompt(vocab: &Vocab, sample: &AlignmentSample) -> Result<Vec<u32>> {
    if sample.options.len() != Vocab::NUM_OPTIONS || sample.answer >= Vocab::NUM_OPTIONS {
        return Err(Error::InvalidArgument("alignment samples need four options".into()));
    }
    let mut t = vec![Vocab::BOS, Vocab::SEP_POS];
    for p in &sample.positives {
        t.extend(vocab.sid_tokens(p)?);
    }
    for (i, o) in sample.options.iter().enumerate() {
        t.push(Vocab::option(i));
        t.extend(vocab.sid_tokens(o)?);
    }
    t.push(Vocab::SEP_NEG);
    Ok(t)
}

/// Option with the highest likelihood given the prompt; ties go to the
/// lowest index.
pub fn alignment_forward(policy: &Policy, sample: &AlignmentSample) -> Result<usize> {
    let prompt = alignment_prompt(&policy.vocab, sample)?;
    let scores = score_candidates(policy, &prompt, &sample.options)?;
    Ok(pick(&scores))
}

pub(crate) fn pick(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn alignment_accuracy(policy: &Policy, samples: &[AlignmentSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no alignment samples".into()));
    }
    use rayon::prelude::*;
    let hits = samples
        .par_iter()
        .map(|s| alignment_forward(policy, s).map(|c| (c == s.answer) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AlignLog {
    pub step_losses: Vec<f64>,
    pub trainable_parameters: usize,
}

/// Teacher-forced training on the correct option's SID. With a nonzero
/// rank, adapters are attached, trained with the base frozen, then merged.
pub fn alignment_sft(
    policy: &mut Policy,
    samples: &[AlignmentSample],
    cfg: &AlignConfig,
    seed_value: u64,
) -> Result<AlignLog> {
    let examples = samples
        .iter()
        .map(|s| Ok(SftExample { context: alignment_prompt(&policy.vocab, s)?, target: s.options[s.answer].clone() }))
        .collect::<Result<Vec<_>>>()?;
    let mode = if cfg.lora_rank > 0 {
        let mut rng = seed::rng(seed::sub_seed(seed_value, "adapter-init"));
        policy.apply_lora(cfg.lora_rank, cfg.lora_scale, &mut rng)?;
        Trainable::AdaptersOnly
    } else {
        Trainable::All
    };
    let trainable_parameters = policy.slices(mode).iter().map(|s| s.len()).sum();
    let log = train_teacher_forced(policy, &examples, &cfg.sft, mode, seed_value)?;
    policy.merge_lora();
    Ok(AlignLog { step_losses: log.step_losses, trainable_parameters })
}
