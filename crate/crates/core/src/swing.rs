//! Swing item-to-item collaboration scores over negative feedback.
//!
//! For items `i`, `j` with co-dislikers `C = U(i) ∩ U(j)`:
//!
//! ```text
//! Swi(i, j) = sum_{u in C} sum_{v in C, v != u}
//!     1 / ((|I(u)| + a1)^t (|I(v)| + a1)^t) * Id(|C|) / (|I(u) ∩ I(v)| + a2) / sqrt(N_j)
//! ```
//!
//! where `U(i)` are users who disliked `i`, `I(u)` the items user `u`
//! disliked, `N_j = |U(j)|`, and `Id(x) = 1` iff `x > pair_threshold`.
//! Because of the `N_j` factor the score is not symmetric.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{InteractionEvent, ItemId, UserId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwingParams {
    pub alpha1: f64,
    pub alpha2: f64,
    pub theta: f64,
    /// Item pairs need strictly more co-dislikers than this to score.
    pub pair_threshold: u32,
}

impl SwingParams {
    /// Cutoff suited to production-size logs; the default is lowered for
    /// small synthetic corpora.
    pub const LARGE_LOG_THRESHOLD: u32 = 5;

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0 && self.theta.is_finite()) {
            return Err(Error::InvalidConfig("swing alphas must be >= 0 and theta finite".into()));
        }
        Ok(())
    }
}

impl Default for SwingParams {
    fn default() -> Self {
        SwingParams { alpha1: 1.0, alpha2: 1.0, theta: 0.5, pair_threshold: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwingIndex {
    params: SwingParams,
    /// `U(i)`, sorted.
    users_of: BTreeMap<ItemId, Vec<UserId>>,
    /// `I(u)`, sorted.
    items_of: BTreeMap<UserId, Vec<ItemId>>,
    /// Nonzero-score neighbors, descending score then ascending id.
    neighbors: BTreeMap<ItemId, Vec<(ItemId, f64)>>,
}

fn intersection_len<T: Ord>(a: &[T], b: &[T]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn intersection<T: Ord + Copy>(a: &[T], b: &[T]) -> Vec<T> {
    let bs: BTreeSet<&T> = b.iter().collect();
    a.iter().filter(|x| bs.contains(x)).copied().collect()
}

impl SwingIndex {
    /// Builds tables and neighbor lists. Only negative-feedback events are
    /// accepted; repeated `(user, item)` pairs count once.
    pub fn build(events: &[InteractionEvent], params: SwingParams) -> Result<Self> {
        params.validate()?;
        if let Some(e) = events.iter().find(|e| !e.is_negative()) {
            return Err(Error::InvalidArgument(format!("swing needs negative feedback, got {}", e.polarity.as_str())));
        }
        let pairs: BTreeSet<(UserId, ItemId)> = events.iter().map(|e| (e.user, e.item)).collect();
        Ok(Self::from_pairs(&pairs, params))
    }

    fn tables(pairs: &BTreeSet<(UserId, ItemId)>, params: SwingParams) -> Self {
        let mut users_of: BTreeMap<ItemId, Vec<UserId>> = BTreeMap::new();
        let mut items_of: BTreeMap<UserId, Vec<ItemId>> = BTreeMap::new();
        for &(u, i) in pairs {
            users_of.entry(i).or_default().push(u);
            items_of.entry(u).or_default().push(i);
        }
        for v in users_of.values_mut() {
            v.sort_unstable();
        }
        SwingIndex { params, users_of, items_of, neighbors: BTreeMap::new() }
    }

    fn from_pairs(pairs: &BTreeSet<(UserId, ItemId)>, params: SwingParams) -> Self {
        let mut index = Self::tables(pairs, params);
        let items: Vec<ItemId> = index.users_of.keys().copied().collect();
        let lists: Vec<(ItemId, Vec<(ItemId, f64)>)> = items
            .par_iter()
            .map(|&i| {
                let mut candidates: BTreeSet<ItemId> = BTreeSet::new();
                for u in &index.users_of[&i] {
                    candidates.extend(index.items_of[u].iter().copied());
                }
                candidates.remove(&i);
                let mut list: Vec<(ItemId, f64)> =
                    candidates.into_iter().map(|j| (j, index.similarity(i, j))).filter(|&(_, s)| s > 0.0).collect();
                sort_neighbors(&mut list);
                (i, list)
            })
            .collect();
        index.neighbors = lists.into_iter().collect();
        index
    }

    pub fn params(&self) -> SwingParams {
        self.params
    }

    pub fn users_of(&self, item: ItemId) -> &[UserId] {
        self.users_of.get(&item).map_or(&[], Vec::as_slice)
    }

    pub fn items_of(&self, user: UserId) -> &[ItemId] {
        self.items_of.get(&user).map_or(&[], Vec::as_slice)
    }

    /// Score of `j` as a collaborator of `i`; 0 for unknown items. Defined
    /// for `i == j` by the same formula.
    pub fn similarity(&self, i: ItemId, j: ItemId) -> f64 {
        let (Some(ui), Some(uj)) = (self.users_of.get(&i), self.users_of.get(&j)) else {
            return 0.0;
        };
        let common = intersection(ui, uj);
        if common.len() as u64 <= self.params.pair_threshold as u64 {
            return 0.0;
        }
        let p = self.params;
        let sqrt_nj = (uj.len() as f64).sqrt();
        let activity = |u: &UserId| (self.items_of[u].len() as f64 + p.alpha1).powf(p.theta);
        let mut total = 0.0;
        for u in &common {
            for v in &common {
                if u == v {
                    continue;
                }
                let overlap = intersection_len(&self.items_of[u], &self.items_of[v]) as f64;
                total += 1.0 / (activity(u) * activity(v)) / (overlap + p.alpha2) / sqrt_nj;
            }
        }
        total
    }

    /// Top-`m` neighbors of `i`, excluding `i` itself and zero scores.
    pub fn top_collaborative(&self, i: ItemId, m: usize) -> &[(ItemId, f64)] {
        self.neighbors.get(&i).map_or(&[], |l| &l[..m.min(l.len())])
    }

    pub fn num_items(&self) -> usize {
        self.users_of.len()
    }

    const MAGIC: [u8; 4] = *b"NRSW";
    const VERSION: u32 = 1;

    /// Little-endian: magic, version, `alpha1 alpha2 theta` (f64),
    /// threshold (u32), pair count then `(user, item)` u32 pairs, item count
    /// then per item `id, len, (neighbor u32, score f64) * len`.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&Self::MAGIC)?;
        w.write_u32::<LittleEndian>(Self::VERSION)?;
        for v in [self.params.alpha1, self.params.alpha2, self.params.theta] {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_u32::<LittleEndian>(self.params.pair_threshold)?;
        let n_pairs: usize = self.items_of.values().map(Vec::len).sum();
        w.write_u64::<LittleEndian>(n_pairs as u64)?;
        for (u, items) in &self.items_of {
            for i in items {
                w.write_u32::<LittleEndian>(u.0)?;
                w.write_u32::<LittleEndian>(i.0)?;
            }
        }
        w.write_u64::<LittleEndian>(self.neighbors.len() as u64)?;
        for (i, list) in &self.neighbors {
            w.write_u32::<LittleEndian>(i.0)?;
            w.write_u32::<LittleEndian>(list.len() as u32)?;
            for (j, s) in list {
                w.write_u32::<LittleEndian>(j.0)?;
                w.write_f64::<LittleEndian>(*s)?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != Self::MAGIC {
            return Err(Error::Format("not a swing index file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != Self::VERSION {
            return Err(Error::Format(format!("unsupported swing index version {version}")));
        }
        let params = SwingParams {
            alpha1: r.read_f64::<LittleEndian>()?,
            alpha2: r.read_f64::<LittleEndian>()?,
            theta: r.read_f64::<LittleEndian>()?,
            pair_threshold: r.read_u32::<LittleEndian>()?,
        };
        let n_pairs = r.read_u64::<LittleEndian>()?;
        let mut pairs = BTreeSet::new();
        for _ in 0..n_pairs {
            let u = UserId(r.read_u32::<LittleEndian>()?);
            let i = ItemId(r.read_u32::<LittleEndian>()?);
            pairs.insert((u, i));
        }
        let mut index = Self::tables(&pairs, params);
        let n_items = r.read_u64::<LittleEndian>()?;
        for _ in 0..n_items {
            let i = ItemId(r.read_u32::<LittleEndian>()?);
            let len = r.read_u32::<LittleEndian>()?;
            let mut list = Vec::with_capacity(len as usize);
            for _ in 0..len {
                list.push((ItemId(r.read_u32::<LittleEndian>()?), r.read_f64::<LittleEndian>()?));
            }
            index.neighbors.insert(i, list);
        }
        for v in index.users_of.keys() {
            index.neighbors.entry(*v).or_default();
        }
        Ok(index)
    }
}

fn sort_neighbors(list: &mut [(ItemId, f64)]) {
    list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}
