//! Interaction events and the corpus they form.

mod io;
mod synth;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{read_corpus, read_events, read_items, write_events, write_items};
pub use synth::{generate_synthetic_corpus, PlantedInterests, SynthConfig, SyntheticCorpus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    NegativeFeedback,
    Click,
    Favorite,
    Purchase,
    Exposure,
}

impl Polarity {
    pub fn is_positive(self) -> bool {
        matches!(self, Polarity::Click | Polarity::Favorite | Polarity::Purchase)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::NegativeFeedback => "negative",
            Polarity::Click => "click",
            Polarity::Favorite => "favorite",
            Polarity::Purchase => "purchase",
            Polarity::Exposure => "exposure",
        }
    }
}

impl FromStr for Polarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "negative" => Polarity::NegativeFeedback,
            "click" => Polarity::Click,
            "favorite" => Polarity::Favorite,
            "purchase" => Polarity::Purchase,
            "exposure" => Polarity::Exposure,
            _ => return Err(Error::Format(format!("unknown polarity {s:?}"))),
        })
    }
}

/// Why a user pressed "not interested".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reason {
    NotThisProduct,
    NotThisCategory,
    NotThisStore,
    UncomfortableImage,
    SeenOrPurchased,
    SuspectedAI,
    ClickbaitPrice,
    SuspectedCounterfeit,
    None,
}

impl Reason {
    pub const INTEREST: [Reason; 4] =
        [Reason::NotThisProduct, Reason::NotThisCategory, Reason::NotThisStore, Reason::UncomfortableImage];
    pub const NON_INTEREST: [Reason; 4] =
        [Reason::SeenOrPurchased, Reason::SuspectedAI, Reason::ClickbaitPrice, Reason::SuspectedCounterfeit];

    /// Reasons that reflect the user's interests rather than fatigue or
    /// item quality.
    pub fn is_interest_related(self) -> bool {
        Self::INTEREST.contains(&self)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Reason::NotThisProduct => "not_this_product",
            Reason::NotThisCategory => "not_this_category",
            Reason::NotThisStore => "not_this_store",
            Reason::UncomfortableImage => "uncomfortable_image",
            Reason::SeenOrPurchased => "seen_or_purchased",
            Reason::SuspectedAI => "suspected_ai",
            Reason::ClickbaitPrice => "clickbait_price",
            Reason::SuspectedCounterfeit => "suspected_counterfeit",
            Reason::None => "none",
        }
    }
}

impl FromStr for Reason {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "not_this_product" => Reason::NotThisProduct,
            "not_this_category" => Reason::NotThisCategory,
            "not_this_store" => Reason::NotThisStore,
            "uncomfortable_image" => Reason::UncomfortableImage,
            "seen_or_purchased" => Reason::SeenOrPurchased,
            "suspected_ai" => Reason::SuspectedAI,
            "clickbait_price" => Reason::ClickbaitPrice,
            "suspected_counterfeit" => Reason::SuspectedCounterfeit,
            "none" => Reason::None,
            _ => return Err(Error::Format(format!("unknown reason {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InteractionEvent {
    pub user: UserId,
    pub item: ItemId,
    pub polarity: Polarity,
    pub reason: Reason,
    pub day: u32,
}

impl InteractionEvent {
    pub fn new(user: UserId, item: ItemId, polarity: Polarity, reason: Reason, day: u32) -> Result<Self> {
        if reason != Reason::None && polarity != Polarity::NegativeFeedback {
            return Err(Error::InvalidArgument(format!("reason {} on a {} event", reason.as_str(), polarity.as_str())));
        }
        Ok(InteractionEvent { user, item, polarity, reason, day })
    }

    pub fn is_negative(&self) -> bool {
        self.polarity == Polarity::NegativeFeedback
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemDescriptor {
    pub item: ItemId,
    pub category: u32,
    pub features: Vec<f64>,
}

/// Which events a history query returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolarityFilter {
    Any,
    Negative,
    /// Click, favorite or purchase.
    Positive,
    Exactly(Polarity),
}

impl PolarityFilter {
    pub fn accepts(self, p: Polarity) -> bool {
        match self {
            PolarityFilter::Any => true,
            PolarityFilter::Negative => p == Polarity::NegativeFeedback,
            PolarityFilter::Positive => p.is_positive(),
            PolarityFilter::Exactly(q) => p == q,
        }
    }
}

/// Immutable, time-ordered event log plus the item catalog.
#[derive(Debug, Clone)]
pub struct Corpus {
    events: Vec<InteractionEvent>,
    items: Vec<ItemDescriptor>,
    users: Vec<UserId>,
    num_days: u32,
    d_feat: usize,
    by_user: BTreeMap<UserId, Vec<usize>>,
    item_index: BTreeMap<ItemId, usize>,
}

impl Corpus {
    /// Builds a corpus. Events are stably sorted by day; `num_days` must
    /// exceed every event's day.
    pub fn new(
        mut events: Vec<InteractionEvent>,
        items: Vec<ItemDescriptor>,
        users: Vec<UserId>,
        num_days: u32,
    ) -> Result<Self> {
        let d_feat = items.first().map(|i| i.features.len()).unwrap_or(0);
        let mut item_index = BTreeMap::new();
        for (idx, it) in items.iter().enumerate() {
            if it.features.len() != d_feat {
                return Err(Error::DimensionMismatch { expected: d_feat, got: it.features.len() });
            }
            if it.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("item {} has non-finite features", it.item)));
            }
            if item_index.insert(it.item, idx).is_some() {
                return Err(Error::Format(format!("duplicate item {}", it.item)));
            }
        }
        let mut by_user: BTreeMap<UserId, Vec<usize>> = users.iter().map(|&u| (u, Vec::new())).collect();
        if by_user.len() != users.len() {
            return Err(Error::Format("duplicate user ids".into()));
        }
        events.sort_by_key(|e| e.day);
        for (idx, e) in events.iter().enumerate() {
            if e.day >= num_days {
                return Err(Error::Format(format!("event day {} outside {} days", e.day, num_days)));
            }
            if !item_index.contains_key(&e.item) {
                return Err(Error::Format(format!("event references unknown item {}", e.item)));
            }
            if e.reason != Reason::None && !e.is_negative() {
                return Err(Error::Format("reason on non-negative event".into()));
            }
            by_user
                .get_mut(&e.user)
                .ok_or_else(|| Error::Format(format!("event references unknown user {}", e.user)))?
                .push(idx);
        }
        Ok(Corpus { events, items, users, num_days, d_feat, by_user, item_index })
    }

    pub fn events(&self) -> &[InteractionEvent] {
        &self.events
    }

    pub fn items(&self) -> &[ItemDescriptor] {
        &self.items
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    pub fn num_days(&self) -> u32 {
        self.num_days
    }

    pub fn d_feat(&self) -> usize {
        self.d_feat
    }

    pub fn item(&self, id: ItemId) -> Option<&ItemDescriptor> {
        self.item_index.get(&id).map(|&i| &self.items[i])
    }

    /// All events of one user in time order.
    pub fn user_events(&self, user: UserId) -> impl Iterator<Item = &InteractionEvent> + '_ {
        self.by_user.get(&user).into_iter().flatten().map(move |&i| &self.events[i])
    }

    /// Same catalog and users with a different event list.
    pub fn with_events(&self, events: Vec<InteractionEvent>) -> Result<Corpus> {
        Corpus::new(events, self.items.clone(), self.users.clone(), self.num_days)
    }
}

/// Keeps non-negative events and negatives whose reason reflects interest.
pub fn filter_by_reason(events: &[InteractionEvent]) -> Vec<InteractionEvent> {
    events.iter().filter(|e| !e.is_negative() || e.reason.is_interest_related()).copied().collect()
}

/// Events of `user` strictly before `as_of_day`, no older than
/// `window_days` days (`None` means unbounded), matching `filter`.
pub fn user_history(
    corpus: &Corpus,
    user: UserId,
    as_of_day: u32,
    window_days: Option<u32>,
    filter: PolarityFilter,
) -> Vec<InteractionEvent> {
    let start = window_days.map_or(0, |w| as_of_day.saturating_sub(w));
    corpus
        .user_events(user)
        .filter(|e| e.day < as_of_day && e.day >= start && filter.accepts(e.polarity))
        .copied()
        .collect()
}

/// Held-out future window produced by [`temporal_split`].
#[derive(Debug, Clone)]
pub struct EvalView {
    /// First day of the window (the split day).
    pub start_day: u32,
    /// Exclusive end, clamped to the corpus length.
    pub end_day: u32,
    pub events: Vec<InteractionEvent>,
}

impl EvalView {
    pub fn window_len(&self) -> u32 {
        self.end_day - self.start_day
    }

    pub fn user_events(&self, user: UserId) -> impl Iterator<Item = &InteractionEvent> + '_ {
        self.events.iter().filter(move |e| e.user == user)
    }
}

/// Splits into a training corpus (days `< train_end_day`) and the window
/// `[train_end_day, train_end_day + horizon_days)`, clamped at the corpus end.
pub fn temporal_split(corpus: &Corpus, train_end_day: u32, horizon_days: u32) -> Result<(Corpus, EvalView)> {
    if train_end_day == 0 || train_end_day >= corpus.num_days() {
        return Err(Error::InvalidArgument(format!(
            "train_end_day {train_end_day} must lie in (0, {})",
            corpus.num_days()
        )));
    }
    if horizon_days == 0 {
        return Err(Error::InvalidArgument("horizon_days must be >= 1".into()));
    }
    let end_day = train_end_day.saturating_add(horizon_days).min(corpus.num_days());
    let train: Vec<_> = corpus.events().iter().filter(|e| e.day < train_end_day).copied().collect();
    let eval: Vec<_> = corpus.events().iter().filter(|e| e.day >= train_end_day && e.day < end_day).copied().collect();
    let train = Corpus::new(train, corpus.items.clone(), corpus.users.clone(), train_end_day)?;
    Ok((train, EvalView { start_day: train_end_day, end_day, events: eval }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(user: u32, item: u32, polarity: Polarity, reason: Reason, day: u32) -> InteractionEvent {
        InteractionEvent::new(UserId(user), ItemId(item), polarity, reason, day).unwrap()
    }

    fn tiny() -> Corpus {
        let items =
            (0..4).map(|i| ItemDescriptor { item: ItemId(i), category: i % 2, features: vec![i as f64] }).collect();
        let events = vec![
            ev(0, 1, Polarity::NegativeFeedback, Reason::NotThisCategory, 5),
            ev(0, 2, Polarity::Click, Reason::None, 1),
            ev(0, 3, Polarity::NegativeFeedback, Reason::SeenOrPurchased, 3),
            ev(1, 0, Polarity::Purchase, Reason::None, 2),
            ev(0, 0, Polarity::NegativeFeedback, Reason::NotThisProduct, 8),
            ev(0, 2, Polarity::NegativeFeedback, Reason::NotThisStore, 7),
        ];
        Corpus::new(events, items, vec![UserId(0), UserId(1)], 10).unwrap()
    }

    #[test]
    fn reason_requires_negative_polarity() {
        assert!(InteractionEvent::new(UserId(0), ItemId(0), Polarity::Click, Reason::NotThisStore, 0).is_err());
    }

    #[test]
    fn events_are_sorted_stably_by_day() {
        let c = tiny();
        let days: Vec<u32> = c.events().iter().map(|e| e.day).collect();
        assert_eq!(days, vec![1, 2, 3, 5, 7, 8]);
    }

    #[test]
    fn unknown_references_rejected() {
        let c = tiny();
        let bad = vec![ev(9, 0, Polarity::Click, Reason::None, 0)];
        assert!(c.with_events(bad).is_err());
        let bad = vec![ev(0, 99, Polarity::Click, Reason::None, 0)];
        assert!(c.with_events(bad).is_err());
    }

    #[test]
    fn reason_filter_keeps_interest_negatives() {
        let c = tiny();
        let kept = filter_by_reason(c.events());
        assert_eq!(kept.len(), 5);
        assert!(kept.iter().all(|e| e.reason != Reason::SeenOrPurchased));
        assert!(filter_by_reason(&[]).is_empty());
        let cat = ev(0, 1, Polarity::NegativeFeedback, Reason::NotThisCategory, 0);
        assert_eq!(filter_by_reason(&[cat]), vec![cat]);
        assert_eq!(filter_by_reason(&kept), kept);
    }

    #[test]
    fn history_windows() {
        let c = tiny();
        let all = user_history(&c, UserId(0), 8, None, PolarityFilter::Any);
        assert_eq!(all.len(), 4);
        let neg3 = user_history(&c, UserId(0), 8, Some(3), PolarityFilter::Negative);
        assert_eq!(neg3.iter().map(|e| e.item.0).collect::<Vec<_>>(), vec![1, 2]);
        assert!(user_history(&c, UserId(0), 0, None, PolarityFilter::Any).is_empty());
        assert!(user_history(&c, UserId(42), 9, None, PolarityFilter::Any).is_empty());
    }

    #[test]
    fn split_partitions_and_clamps() {
        let c = tiny();
        let (train, eval) = temporal_split(&c, 5, 7).unwrap();
        assert_eq!(eval.end_day, 10);
        assert_eq!(eval.window_len(), 5);
        assert!(train.events().iter().all(|e| e.day < 5));
        assert!(eval.events.iter().all(|e| e.day >= 5));
        assert_eq!(train.events().len() + eval.events.len(), c.events().len());
        let (_, eval) = temporal_split(&c, 1, 7).unwrap();
        assert_eq!(eval.window_len(), 7);
        assert!(temporal_split(&c, 0, 7).is_err());
        assert!(temporal_split(&c, 10, 7).is_err());
        assert!(temporal_split(&c, 3, 0).is_err());
    }
}
