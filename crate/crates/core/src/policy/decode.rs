//! Context serialization, likelihood scoring, sampling and beam search.
//!
//! A context of `T` tokens is processed as a cached prefix of its first
//! `T - 1` tokens; every continuation is a branch starting with the last
//! context token, whose hidden state predicts the first code.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::model::{Packed, PrefixCache, Query};
use super::{Policy, Vocab};
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, softmax_in_place};
use crate::sidcodec::{SemanticId, SidTable};
use crate::targets::SampleContext;

/// `BOS SEP_NEG <negatives>` and, for stages with positives,
/// `SEP_POS <positives>`; each section keeps its newest `max_events` items,
/// oldest first.
pub fn serialize_context(ctx: &SampleContext, sids: &SidTable, vocab: &Vocab, max_events: usize) -> Result<Vec<u32>> {
    let mut out = vec![Vocab::BOS, Vocab::SEP_NEG];
    let section = |items: &[crate::corpus::ItemId], out: &mut Vec<u32>| -> Result<()> {
        for item in &items[items.len().saturating_sub(max_events)..] {
            out.extend(vocab.sid_tokens(sids.get(*item)?)?);
        }
        Ok(())
    };
    section(&ctx.negatives, &mut out)?;
    if ctx.stage.includes_positives() {
        out.push(Vocab::SEP_POS);
        section(&ctx.positives, &mut out)?;
    }
    Ok(out)
}

/// Branches `[last context token] ++ seq` for every `seq`, with a query at
/// each branch token (query `m` predicts level `m`). When `with_context`,
/// the first `T - 1` context tokens lead the packing as branch 0.
pub fn pack_branches(context: &[u32], seqs: &[Vec<u32>], with_context: bool) -> (Packed, Vec<Vec<Query>>) {
    let t = context.len();
    let mut packed = if with_context { Packed::sequence(&context[..t - 1]) } else { Packed::default() };
    let mut queries = Vec::with_capacity(seqs.len());
    for (b, seq) in seqs.iter().enumerate() {
        let branch = b as u32 + 1;
        let mut qs = Vec::with_capacity(seq.len() + 1);
        for (m, &tok) in std::iter::once(&context[t - 1]).chain(seq).enumerate() {
            qs.push(Query { index: packed.len(), level: m });
            packed.push(tok, t - 1 + m, branch);
        }
        queries.push(qs);
    }
    (packed, queries)
}

fn check_context(context: &[u32]) -> Result<()> {
    if context.is_empty() {
        return Err(Error::InvalidArgument("context must hold at least one token".into()));
    }
    Ok(())
}

/// Log-probabilities over one level's codes.
pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|l| l - lse).collect()
}

struct Scorer<'a> {
    policy: &'a Policy,
    context: &'a [u32],
    prefix: PrefixCache,
}

impl<'a> Scorer<'a> {
    fn new(policy: &'a Policy, context: &'a [u32]) -> Result<Self> {
        check_context(context)?;
        Ok(Scorer { policy, context, prefix: policy.encode_prefix(&context[..context.len() - 1])? })
    }

    /// Logits for the next level after each partial code sequence.
    fn next_logits(&self, partials: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let (packed, queries) = pack_branches(self.context, partials, false);
        let last: Vec<Query> = queries.iter().map(|q| *q.last().expect("branch has a query")).collect();
        self.policy.forward_with_prefix(&self.prefix, &packed, &last)
    }

    /// Per-token log-probabilities of complete code sequences.
    fn token_logprobs(&self, seqs: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let d = self.policy.vocab.levels;
        let heads: Vec<Vec<u32>> = seqs.iter().map(|s| s[..d - 1].to_vec()).collect();
        let (packed, queries) = pack_branches(self.context, &heads, false);
        let flat: Vec<Query> = queries.iter().flatten().copied().collect();
        let logits = self.policy.forward_with_prefix(&self.prefix, &packed, &flat)?;
        let vocab = self.policy.vocab;
        Ok(seqs
            .iter()
            .enumerate()
            .map(|(b, s)| {
                (0..d)
                    .map(|l| {
                        let (_, code) = vocab.token_code(s[l]).expect("code token");
                        log_softmax(&logits[b * d + l])[code as usize]
                    })
                    .collect()
            })
            .collect())
    }
}

/// Per-token log-probabilities of each SID given `context`.
pub fn token_logprobs(policy: &Policy, context: &[u32], sids: &[SemanticId]) -> Result<Vec<Vec<f64>>> {
    if sids.is_empty() {
        return Ok(Vec::new());
    }
    let seqs = sids.iter().map(|s| policy.vocab.sid_tokens(s)).collect::<Result<Vec<_>>>()?;
    Scorer::new(policy, context)?.token_logprobs(&seqs)
}

/// Total log-likelihood of each SID given `context`.
pub fn score_candidates(policy: &Policy, context: &[u32], sids: &[SemanticId]) -> Result<Vec<f64>> {
    Ok(token_logprobs(policy, context, sids)?.iter().map(|t| t.iter().sum()).collect())
}

pub fn sequence_logprob(policy: &Policy, context: &[u32], sid: &SemanticId) -> Result<f64> {
    Ok(score_candidates(policy, context, std::slice::from_ref(sid))?[0])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledGroup {
    pub sids: Vec<SemanticId>,
    /// Log-probability of each sampled code under the (untempered) policy.
    pub token_logprobs: Vec<Vec<f64>>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `g` independent ancestral samples. `temperature == 0` decodes greedily.
pub fn sample_group<R: Rng>(
    policy: &Policy,
    context: &[u32],
    g: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<SampledGroup> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument("temperature must be finite and >= 0".into()));
    }
    let scorer = Scorer::new(policy, context)?;
    let vocab = policy.vocab;
    let mut partials: Vec<Vec<u32>> = vec![Vec::new(); g];
    let mut codes: Vec<Vec<u32>> = vec![Vec::new(); g];
    let mut lps: Vec<Vec<f64>> = vec![Vec::new(); g];
    for level in 0..vocab.levels {
        let logits = scorer.next_logits(&partials)?;
        for (n, lg) in logits.iter().enumerate() {
            let lp = log_softmax(lg);
            let code = if temperature == 0.0 {
                argmax(lg)
            } else {
                let mut p: Vec<f64> = lg.iter().map(|l| l / temperature).collect();
                softmax_in_place(&mut p);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = p.len() - 1;
                for (k, pk) in p.iter().enumerate() {
                    acc += pk;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                pick
            };
            lps[n].push(lp[code]);
            codes[n].push(code as u32);
            partials[n].push(vocab.code_token(level, code as u32));
        }
    }
    Ok(SampledGroup { sids: codes.into_iter().map(SemanticId).collect(), token_logprobs: lps })
}

/// Prefix tree of assigned SIDs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SidTrie {
    children: BTreeMap<Vec<u32>, BTreeSet<u32>>,
}

impl SidTrie {
    pub fn new<'a>(sids: impl IntoIterator<Item = &'a SemanticId>) -> Self {
        let mut children: BTreeMap<Vec<u32>, BTreeSet<u32>> = BTreeMap::new();
        for sid in sids {
            for l in 0..sid.depth() {
                children.entry(sid.0[..l].to_vec()).or_default().insert(sid.0[l]);
            }
        }
        SidTrie { children }
    }

    pub fn from_table(table: &SidTable) -> Self {
        Self::new(table.sids.values())
    }

    /// Valid next codes after `prefix`, ascending.
    pub fn next_codes(&self, prefix: &[u32]) -> Vec<u32> {
        self.children.get(prefix).map_or_else(Vec::new, |s| s.iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Beam {
    pub sid: SemanticId,
    pub logprob: f64,
}

/// Width-`width` beam search over full SIDs, optionally restricted to
/// trie-valid prefixes. Results are ordered by log-probability, ties by
/// code sequence; fewer than `width` come back when fewer are reachable.
pub fn beam_search(policy: &Policy, context: &[u32], width: usize, trie: Option<&SidTrie>) -> Result<Vec<Beam>> {
    if width == 0 {
        return Err(Error::InvalidArgument("beam width must be >= 1".into()));
    }
    let scorer = Scorer::new(policy, context)?;
    let vocab = policy.vocab;
    let mut beams: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..vocab.levels {
        let partials: Vec<Vec<u32>> =
            beams.iter().map(|(c, _)| c.iter().enumerate().map(|(l, &k)| vocab.code_token(l, k)).collect()).collect();
        let logits = scorer.next_logits(&partials)?;
        let mut cands: Vec<(Vec<u32>, f64)> = Vec::new();
        for ((codes, score), lg) in beams.iter().zip(&logits) {
            let lp = log_softmax(lg);
            let allowed: Vec<u32> = match trie {
                Some(t) => t.next_codes(codes),
                None => (0..vocab.codebook_size as u32).collect(),
            };
            for k in allowed {
                let mut c = codes.clone();
                c.push(k);
                cands.push((c, score + lp[k as usize]));
            }
        }
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        cands.truncate(width);
        beams = cands;
    }
    Ok(beams.into_iter().map(|(c, s)| Beam { sid: SemanticId(c), logprob: s }).collect())
}

pub fn greedy(policy: &Policy, context: &[u32], trie: Option<&SidTrie>) -> Result<SemanticId> {
    beam_search(policy, context, 1, trie)?
        .into_iter()
        .next()
        .map(|b| b.sid)
        .ok_or_else(|| Error::InvalidArgument("no reachable SID".into()))
}
