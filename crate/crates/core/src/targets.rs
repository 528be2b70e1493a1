//! Per-sample contexts and target sets: next negative, future negative set,
//! Swing-expanded set and future positive set.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{user_history, Corpus, ItemId, PolarityFilter, UserId};
use crate::error::{Error, Result};
use crate::linalg::cosine;
use crate::sidcodec::{Codec, SemanticId, SidTable};
use crate::swing::SwingIndex;

/// Curriculum stage; each one widens the context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Negatives from the last three days.
    Neg3Day,
    /// All past negatives.
    NegFull,
    /// All past negatives plus positives.
    NegPlusPos,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Neg3Day, Stage::NegFull, Stage::NegPlusPos];
    pub const SHORT_WINDOW_DAYS: u32 = 3;

    /// 1-based position in the curriculum.
    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn from_number(n: usize) -> Option<Stage> {
        Stage::ALL.get(n.wrapping_sub(1)).copied()
    }

    pub fn includes_positives(self) -> bool {
        self == Stage::NegPlusPos
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Neg3Day => "neg_3day",
            Stage::NegFull => "neg_full",
            Stage::NegPlusPos => "neg_plus_pos",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

/// History visible to the policy for one stage, oldest first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleContext {
    pub user: UserId,
    pub as_of_day: u32,
    pub stage: Stage,
    pub negatives: Vec<ItemId>,
    /// Empty unless the stage includes positives.
    pub positives: Vec<ItemId>,
}

impl SampleContext {
    pub fn build(corpus: &Corpus, user: UserId, as_of_day: u32, stage: Stage) -> Self {
        let window = (stage == Stage::Neg3Day).then_some(Stage::SHORT_WINDOW_DAYS);
        let items = |w, f| user_history(corpus, user, as_of_day, w, f).iter().map(|e| e.item).collect();
        SampleContext {
            user,
            as_of_day,
            stage,
            negatives: items(window, PolarityFilter::Negative),
            positives: if stage.includes_positives() { items(None, PolarityFilter::Positive) } else { Vec::new() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TargetSets {
    pub next_negative: Option<ItemId>,
    /// Distinct negatives inside the future horizon.
    pub gts: BTreeSet<ItemId>,
    pub fps: BTreeSet<ItemId>,
    pub gts_expanded: BTreeSet<ItemId>,
}

/// Earliest negative on or after `as_of_day`; same-day ties keep corpus order.
pub fn next_negative(corpus: &Corpus, user: UserId, as_of_day: u32) -> Option<ItemId> {
    corpus.user_events(user).find(|e| e.is_negative() && e.day >= as_of_day).map(|e| e.item)
}

fn future_set(corpus: &Corpus, user: UserId, as_of_day: u32, horizon: u32, filter: PolarityFilter) -> BTreeSet<ItemId> {
    let end = as_of_day.saturating_add(horizon);
    corpus
        .user_events(user)
        .filter(|e| e.day >= as_of_day && e.day < end && filter.accepts(e.polarity))
        .map(|e| e.item)
        .collect()
}

/// Distinct items disliked in `[as_of_day, as_of_day + horizon)`.
pub fn future_negative_set(corpus: &Corpus, user: UserId, as_of_day: u32, horizon: u32) -> BTreeSet<ItemId> {
    future_set(corpus, user, as_of_day, horizon, PolarityFilter::Negative)
}

/// Distinct items clicked, favorited or purchased in the horizon.
pub fn future_positive_set(corpus: &Corpus, user: UserId, as_of_day: u32, horizon: u32) -> BTreeSet<ItemId> {
    future_set(corpus, user, as_of_day, horizon, PolarityFilter::Positive)
}

/// `gts` plus the top `per_item_m` Swing neighbors of each member, never
/// adding an item from `fps`.
pub fn expand_with_swing(
    gts: &BTreeSet<ItemId>,
    fps: &BTreeSet<ItemId>,
    swing: &SwingIndex,
    per_item_m: usize,
) -> BTreeSet<ItemId> {
    let mut out = gts.clone();
    for &i in gts {
        out.extend(swing.top_collaborative(i, per_item_m).iter().map(|&(j, _)| j).filter(|j| !fps.contains(j)));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    pub horizon_days: u32,
    pub per_item_m: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig { horizon_days: 7, per_item_m: 3 }
    }
}

pub fn build_targets(
    corpus: &Corpus,
    user: UserId,
    as_of_day: u32,
    swing: &SwingIndex,
    cfg: &TargetConfig,
) -> TargetSets {
    let gts = future_negative_set(corpus, user, as_of_day, cfg.horizon_days);
    let fps = future_positive_set(corpus, user, as_of_day, cfg.horizon_days);
    let gts_expanded = expand_with_swing(&gts, &fps, swing, cfg.per_item_m);
    TargetSets { next_negative: next_negative(corpus, user, as_of_day), gts, fps, gts_expanded }
}

/// One training or evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub user: UserId,
    pub as_of_day: u32,
    /// Indexed by `Stage as usize`.
    pub contexts: Vec<SampleContext>,
    pub targets: TargetSets,
}

impl Sample {
    pub fn build(corpus: &Corpus, user: UserId, as_of_day: u32, swing: &SwingIndex, cfg: &TargetConfig) -> Self {
        Sample {
            user,
            as_of_day,
            contexts: Stage::ALL.iter().map(|&s| SampleContext::build(corpus, user, as_of_day, s)).collect(),
            targets: build_targets(corpus, user, as_of_day, swing, cfg),
        }
    }

    pub fn context(&self, stage: Stage) -> &SampleContext {
        &self.contexts[stage as usize]
    }
}

/// Samples for every user and listed day whose future negative set is
/// nonempty, ordered by day then user.
pub fn build_samples(corpus: &Corpus, days: &[u32], swing: &SwingIndex, cfg: &TargetConfig) -> Vec<Sample> {
    let mut out = Vec::new();
    for &day in days {
        for &user in corpus.users() {
            let s = Sample::build(corpus, user, day, swing, cfg);
            if !s.targets.gts.is_empty() {
                out.push(s);
            }
        }
    }
    out
}

/// JSON lines, one sample per line.
pub fn samples_to_jsonl(samples: &[Sample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        out.push_str(&serde_json::to_string(s).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn samples_from_jsonl(text: &str) -> Result<Vec<Sample>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(e.to_string())))
        .collect()
}

/// Indices of samples where some prediction's reconstructed embedding has
/// cosine similarity above `sim_threshold` with some FPS item's embedding.
/// `predictions[n]` belongs to `samples[n]`; FPS items without a semantic ID
/// are skipped.
pub fn flag_augmentation_candidates(
    samples: &[Sample],
    predictions: &[Vec<SemanticId>],
    codec: &Codec,
    sids: &SidTable,
    sim_threshold: f64,
) -> Result<Vec<usize>> {
    if samples.len() != predictions.len() {
        return Err(Error::DimensionMismatch { expected: samples.len(), got: predictions.len() });
    }
    let mut cache: BTreeMap<SemanticId, Vec<f64>> = BTreeMap::new();
    let mut embed = |sid: &SemanticId| -> Result<Vec<f64>> {
        if let Some(v) = cache.get(sid) {
            return Ok(v.clone());
        }
        let v = codec.reconstruct_from_sid(sid)?;
        cache.insert(sid.clone(), v.clone());
        Ok(v)
    };
    let mut flagged = Vec::new();
    for (n, (sample, preds)) in samples.iter().zip(predictions).enumerate() {
        let mut fps = Vec::new();
        for item in &sample.targets.fps {
            if let Ok(sid) = sids.get(*item) {
                fps.push(embed(sid)?);
            }
        }
        let mut hit = false;
        'outer: for p in preds {
            let pe = embed(p)?;
            for f in &fps {
                if cosine(&pe, f) >= sim_threshold {
                    hit = true;
                    break 'outer;
                }
            }
        }
        if hit {
            flagged.push(n);
        }
    }
    Ok(flagged)
}

/// Copies each flagged sample once, right after the original.
pub fn augment(samples: &[Sample], flagged: &[usize]) -> Vec<Sample> {
    let flagged: BTreeSet<usize> = flagged.iter().copied().collect();
    let mut out = Vec::with_capacity(samples.len() + flagged.len());
    for (n, s) in samples.iter().enumerate() {
        out.push(s.clone());
        if flagged.contains(&n) {
            out.push(s.clone());
        }
    }
    out
}

/// Categories a user dislikes most over the whole corpus, by count then id.
pub fn top_negative_categories(corpus: &Corpus, user: UserId, k: usize) -> Vec<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for e in corpus.user_events(user).filter(|e| e.is_negative()) {
        if let Some(d) = corpus.item(e.item) {
            *counts.entry(d.category).or_default() += 1;
        }
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(c, _)| c).collect()
}

/// Mean over samples of the fraction of the user's top-`k` disliked
/// categories represented in `target(sample)`. Samples of users with no
/// negatives are skipped; returns `None` if nothing is left.
pub fn interest_coverage<F>(corpus: &Corpus, samples: &[Sample], k: usize, target: F) -> Option<f64>
where
    F: Fn(&Sample) -> BTreeSet<ItemId>,
{
    let mut top_cache: BTreeMap<UserId, Vec<u32>> = BTreeMap::new();
    let (mut sum, mut n) = (0.0, 0usize);
    for s in samples {
        let top = top_cache.entry(s.user).or_insert_with(|| top_negative_categories(corpus, s.user, k));
        if top.is_empty() {
            continue;
        }
        let cats: BTreeSet<u32> = target(s).iter().filter_map(|i| corpus.item(*i)).map(|d| d.category).collect();
        sum += top.iter().filter(|c| cats.contains(c)).count() as f64 / top.len() as f64;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}
