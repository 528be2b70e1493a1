//! Synthetic interaction logs with planted negative interests.
//!
//! Each user dislikes 1-4 categories and likes 1-4 other categories. Item
//! features are a category centroid plus Gaussian noise, so feature geometry
//! encodes category. Every user-day emits a batch of exposures, then
//! Poisson-many negative and positive events drawn from category-affinity
//! weighted item distributions.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{Corpus, InteractionEvent, ItemDescriptor, ItemId, Polarity, Reason, UserId};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_categories: usize,
    pub num_days: u32,
    pub d_feat: usize,
    /// Mean negative events per user-day.
    pub neg_rate: f64,
    /// Mean positive (click/favorite/purchase) events per user-day.
    pub pos_rate: f64,
    /// Log-weight boost of planted categories; larger is more concentrated.
    pub interest_sharpness: f64,
    /// Distinct exposures per user-day.
    pub exposures_per_day: usize,
    /// Standard deviation of item noise around its category centroid.
    pub feature_noise: f64,
    /// Fraction of negatives carrying a non-interest reason (uniform item).
    pub noise_reason_rate: f64,
    /// Standard deviation of the per-user log activity multiplier.
    pub activity_spread: f64,
    /// Items per user that attract repeated negative feedback.
    pub pet_items: usize,
    pub pet_boost: f64,
    /// Within-category popularity decays as `rank^-popularity_exponent`.
    pub popularity_exponent: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_users: 50,
            num_items: 200,
            num_categories: 8,
            num_days: 60,
            d_feat: 32,
            neg_rate: 0.5,
            pos_rate: 1.5,
            interest_sharpness: 3.0,
            exposures_per_day: 24,
            feature_noise: 0.3,
            noise_reason_rate: 0.15,
            activity_spread: 0.6,
            pet_items: 2,
            pet_boost: 6.0,
            popularity_exponent: 0.8,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.num_users == 0 || self.num_items == 0 || self.num_days == 0 || self.d_feat == 0 {
            return bad("num_users, num_items, num_days and d_feat must be positive");
        }
        if self.num_categories < 2 {
            return bad("num_categories must be at least 2");
        }
        if self.num_items < self.num_categories {
            return bad("num_items must be at least num_categories");
        }
        for (name, v) in [
            ("neg_rate", self.neg_rate),
            ("pos_rate", self.pos_rate),
            ("feature_noise", self.feature_noise),
            ("activity_spread", self.activity_spread),
            ("popularity_exponent", self.popularity_exponent),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.interest_sharpness > 0.0 && self.interest_sharpness.is_finite()) {
            return bad("interest_sharpness must be > 0");
        }
        if !(0.0..=1.0).contains(&self.noise_reason_rate) {
            return bad("noise_reason_rate must lie in [0, 1]");
        }
        if !(self.pet_boost >= 1.0) {
            return bad("pet_boost must be >= 1");
        }
        Ok(())
    }
}

/// Ground-truth interests planted by the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedInterests {
    /// Indexed by user position in `Corpus::users`.
    pub disliked: Vec<Vec<u32>>,
    pub liked: Vec<Vec<u32>>,
}

impl PlantedInterests {
    pub fn dislikes(&self, user: UserId, category: u32) -> bool {
        self.disliked.get(user.0 as usize).is_some_and(|c| c.contains(&category))
    }

    /// `user  disliked(comma-separated)  liked(comma-separated)` per line.
    pub fn to_tsv(&self) -> String {
        let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        self.disliked
            .iter()
            .zip(&self.liked)
            .enumerate()
            .map(|(u, (d, l))| format!("{u}\t{}\t{}\n", join(d), join(l)))
            .collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let parse = |s: &str| -> Result<Vec<u32>> {
            s.split(',')
                .filter(|p| !p.is_empty())
                .map(|p| p.parse().map_err(|_| Error::Format(format!("bad category {p:?}"))))
                .collect()
        };
        let mut disliked = Vec::new();
        let mut liked = Vec::new();
        for (n, line) in text.lines().filter(|l| !l.is_empty()).enumerate() {
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 || parts[0].parse::<usize>().ok() != Some(n) {
                return Err(Error::Format(format!("bad planted-interest line {line:?}")));
            }
            disliked.push(parse(parts[1])?);
            liked.push(parse(parts[2])?);
        }
        Ok(PlantedInterests { disliked, liked })
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub planted: PlantedInterests,
}

fn weights(
    items: &[ItemDescriptor],
    pop: &[f64],
    favored: &[u32],
    sharpness: f64,
    pets: &[usize],
    boost: f64,
) -> Vec<f64> {
    items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            let affinity = if favored.contains(&it.category) { sharpness } else { 0.0 };
            let pet = if pets.contains(&i) { boost } else { 1.0 };
            affinity.exp() * pop[i] * pet
        })
        .collect()
}

pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let centroids: Vec<Vec<f64>> =
        (0..cfg.num_categories).map(|_| (0..cfg.d_feat).map(|_| std_normal.sample(&mut rng)).collect()).collect();
    let mut items = Vec::with_capacity(cfg.num_items);
    let mut popularity = Vec::with_capacity(cfg.num_items);
    for i in 0..cfg.num_items {
        let category = (i % cfg.num_categories) as u32;
        let rank = i / cfg.num_categories;
        let features =
            centroids[category as usize].iter().map(|c| c + cfg.feature_noise * std_normal.sample(&mut rng)).collect();
        items.push(ItemDescriptor { item: ItemId(i as u32), category, features });
        popularity.push(((rank + 1) as f64).powf(-cfg.popularity_exponent));
    }

    let mut disliked = Vec::with_capacity(cfg.num_users);
    let mut liked = Vec::with_capacity(cfg.num_users);
    let mut activity = Vec::with_capacity(cfg.num_users);
    let mut neg_dists = Vec::with_capacity(cfg.num_users);
    let mut pos_dists = Vec::with_capacity(cfg.num_users);
    for _ in 0..cfg.num_users {
        let mut cats: Vec<u32> = (0..cfg.num_categories as u32).collect();
        cats.shuffle(&mut rng);
        let n_dis = rng.random_range(1..=4).min(cfg.num_categories - 1);
        let n_like = rng.random_range(1..=4).min(cfg.num_categories - n_dis);
        let mut d: Vec<u32> = cats[..n_dis].to_vec();
        let mut l: Vec<u32> = cats[n_dis..n_dis + n_like].to_vec();
        d.sort_unstable();
        l.sort_unstable();
        let candidates: Vec<usize> = (0..cfg.num_items).filter(|&i| d.contains(&items[i].category)).collect();
        let n_pets = cfg.pet_items.min(candidates.len());
        let pets: Vec<usize> =
            index::sample(&mut rng, candidates.len(), n_pets).iter().map(|k| candidates[k]).collect();
        let nw = weights(&items, &popularity, &d, cfg.interest_sharpness, &pets, cfg.pet_boost);
        let pw = weights(&items, &popularity, &l, cfg.interest_sharpness, &[], 1.0);
        neg_dists.push(WeightedIndex::new(&nw).expect("positive weights"));
        pos_dists.push(WeightedIndex::new(&pw).expect("positive weights"));
        activity.push((cfg.activity_spread * std_normal.sample(&mut rng)).exp());
        disliked.push(d);
        liked.push(l);
    }

    let n_exposures = cfg.exposures_per_day.min(cfg.num_items);
    let mut events = Vec::new();
    for day in 0..cfg.num_days {
        for u in 0..cfg.num_users {
            let user = UserId(u as u32);
            for k in index::sample(&mut rng, cfg.num_items, n_exposures).iter() {
                events.push(InteractionEvent::new(user, ItemId(k as u32), Polarity::Exposure, Reason::None, day)?);
            }
            let n_neg = poisson(&mut rng, cfg.neg_rate * activity[u]);
            for _ in 0..n_neg {
                let (item, reason) = if rng.random::<f64>() < cfg.noise_reason_rate {
                    let r = Reason::NON_INTEREST[rng.random_range(0..4)];
                    (rng.random_range(0..cfg.num_items), r)
                } else {
                    (neg_dists[u].sample(&mut rng), Reason::INTEREST[rng.random_range(0..4)])
                };
                events.push(InteractionEvent::new(user, ItemId(item as u32), Polarity::NegativeFeedback, reason, day)?);
            }
            let n_pos = poisson(&mut rng, cfg.pos_rate * activity[u]);
            for _ in 0..n_pos {
                let item = pos_dists[u].sample(&mut rng);
                let polarity = match rng.random::<f64>() {
                    x if x < 0.6 => Polarity::Click,
                    x if x < 0.75 => Polarity::Favorite,
                    _ => Polarity::Purchase,
                };
                events.push(InteractionEvent::new(user, ItemId(item as u32), polarity, Reason::None, day)?);
            }
        }
    }

    let users = (0..cfg.num_users as u32).map(UserId).collect();
    let corpus = Corpus::new(events, items, users, cfg.num_days)?;
    Ok(SyntheticCorpus { corpus, planted: PlantedInterests { disliked, liked } })
}

fn poisson<R: Rng>(rng: &mut R, rate: f64) -> u64 {
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng) as u64
}
