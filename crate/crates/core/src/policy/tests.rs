use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::corpus::{
    generate_synthetic_corpus, Corpus, InteractionEvent, ItemDescriptor, ItemId, Polarity, Reason, SynthConfig, UserId,
};
use crate::seed;
use crate::sidcodec::SidTable;
use crate::targets::{SampleContext, Stage};

fn tiny_cfg() -> PolicyConfig {
    PolicyConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_positions: 48, max_context_events: 8 }
}

/// Random policy whose head, norms and biases are all perturbed away from
/// their initial values so no gradient path is trivially zero.
fn random_policy(vocab: Vocab, seed_value: u64) -> Policy {
    let mut rng = seed::rng(seed_value);
    let mut p = Policy::new(tiny_cfg(), vocab, &mut rng).unwrap();
    let n = Normal::new(0.0, 0.3).unwrap();
    for s in p.slices_mut(Trainable::All) {
        for v in s.iter_mut() {
            if *v == 0.0 || *v == 1.0 {
                *v += n.sample(&mut rng);
            }
        }
    }
    p
}

fn randomize_adapters(p: &mut Policy, seed_value: u64) {
    let mut rng = seed::rng(seed_value);
    let n = Normal::new(0.0, 0.2).unwrap();
    for s in p.slices_mut(Trainable::AdaptersOnly) {
        for v in s.iter_mut() {
            *v += n.sample(&mut rng);
        }
    }
}

fn sid(codes: &[u32]) -> SemanticId {
    SemanticId(codes.to_vec())
}

/// Item `i` gets the base-`K` digits of `i`, so every item is distinct.
fn digit_table(items: impl IntoIterator<Item = ItemId>, vocab: Vocab) -> SidTable {
    let k = vocab.codebook_size as u32;
    let sids = items
        .into_iter()
        .map(|it| {
            let mut x = it.0;
            let codes = (0..vocab.levels)
                .map(|_| {
                    let c = x % k;
                    x /= k;
                    c
                })
                .collect();
            (it, SemanticId(codes))
        })
        .collect();
    SidTable { sids }
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn vocab_layout_is_dense() {
    let v = Vocab::new(3, 8);
    assert_eq!(v.size(), 8 + 24);
    assert_eq!(v.code_token(0, 0), 8);
    assert_eq!(v.code_token(2, 7), 31);
    assert_eq!((0..4).map(Vocab::option).collect::<Vec<_>>(), vec![4, 5, 6, 7]);
    for t in 0..v.size() as u32 {
        match v.token_code(t) {
            None => assert!(t < Vocab::NUM_CONTROL),
            Some((l, c)) => assert_eq!(v.code_token(l, c), t),
        }
    }
    assert_eq!(v.sid_tokens(&sid(&[1, 2, 3])).unwrap(), vec![9, 18, 27]);
    assert!(v.sid_tokens(&sid(&[1, 2])).is_err());
    assert!(v.sid_tokens(&sid(&[1, 2, 8])).is_err());
}

#[test]
fn serialize_context_layout() {
    let vocab = Vocab::new(3, 8);
    let table = digit_table((0..20).map(ItemId), vocab);
    let ctx = |stage, negatives: Vec<u32>, positives: Vec<u32>| SampleContext {
        user: UserId(0),
        as_of_day: 5,
        stage,
        negatives: negatives.into_iter().map(ItemId).collect(),
        positives: positives.into_iter().map(ItemId).collect(),
    };
    let two = serialize_context(&ctx(Stage::Neg3Day, vec![1, 2], vec![]), &table, &vocab, 64).unwrap();
    assert_eq!(two.len(), 1 + 1 + 2 * 3);
    assert_eq!(&two[..2], &[Vocab::BOS, Vocab::SEP_NEG]);
    assert_eq!(&two[2..5], vocab.sid_tokens(table.get(ItemId(1)).unwrap()).unwrap().as_slice());

    let empty = serialize_context(&ctx(Stage::NegFull, vec![], vec![]), &table, &vocab, 64).unwrap();
    assert_eq!(empty, vec![Vocab::BOS, Vocab::SEP_NEG]);

    let full = serialize_context(&ctx(Stage::NegPlusPos, vec![1, 2, 3, 4], vec![5, 6, 7]), &table, &vocab, 2).unwrap();
    assert_eq!(full.len(), 2 + 2 * 3 + 1 + 2 * 3);
    let tokens = |i: u32| vocab.sid_tokens(table.get(ItemId(i)).unwrap()).unwrap();
    assert_eq!(&full[2..5], tokens(3).as_slice());
    assert_eq!(&full[5..8], tokens(4).as_slice());
    assert_eq!(full[8], Vocab::SEP_POS);
    assert_eq!(&full[9..12], tokens(6).as_slice());
    assert_eq!(&full[12..], tokens(7).as_slice());

    let missing = ctx(Stage::NegFull, vec![99], vec![]);
    assert!(serialize_context(&missing, &table, &vocab, 64).is_err());
}

#[test]
fn logits_normalize_and_are_causal() {
    let vocab = Vocab::new(2, 4);
    let p = random_policy(vocab, 1);
    let tokens: Vec<u32> = vec![0, 2, 8, 13, 9, 12, 3, 10];
    let queries: Vec<Query> = (0..tokens.len()).map(|i| Query { index: i, level: i % 2 }).collect();
    let base = p.forward(&Packed::sequence(&tokens), &queries).unwrap();
    for row in &base {
        let lp = log_softmax(row);
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
    for t in 0..tokens.len() - 1 {
        let mut changed = tokens.clone();
        changed[t + 1] = if changed[t + 1] == 11 { 14 } else { 11 };
        let out = p.forward(&Packed::sequence(&changed), &queries).unwrap();
        for i in 0..=t {
            assert_eq!(out[i], base[i], "position {i} saw token {}", t + 1);
        }
        assert_ne!(out[t + 1], base[t + 1]);
    }
}

#[test]
fn branches_do_not_see_each_other() {
    let vocab = Vocab::new(2, 4);
    let p = random_policy(vocab, 2);
    let ctx = vec![0, 2, 9, 13];
    let (packed, qs) = pack_branches(&ctx, &[vec![8], vec![11]], true);
    let (packed2, qs2) = pack_branches(&ctx, &[vec![8], vec![10]], true);
    let flat: Vec<Query> = qs.iter().flatten().copied().collect();
    let a = p.forward(&packed, &flat).unwrap();
    let b = p.forward(&packed2, &qs2.iter().flatten().copied().collect::<Vec<_>>()).unwrap();
    assert_eq!(a[..2], b[..2]);
    assert_ne!(a[3], b[3]);
}

/// Gradient of `sum_q c_q . logits_q` against central differences over
/// every parameter, adapters included.
#[test]
fn parameter_gradient_matches_finite_differences() {
    let vocab = Vocab::new(2, 4);
    let mut p = random_policy(vocab, 3);
    p.apply_lora(2, 0.7, &mut seed::rng(4)).unwrap();
    randomize_adapters(&mut p, 5);
    let ctx = vec![0, 2, 9, 13, 3, 10];
    let (packed, qs) = pack_branches(&ctx, &[vec![8], vec![11]], true);
    let queries: Vec<Query> = qs.iter().flatten().copied().collect();
    let mut rng = seed::rng(6);
    let coef: Vec<Vec<f64>> = queries.iter().map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let objective = |p: &Policy| -> f64 {
        let lg = p.forward(&packed, &queries).unwrap();
        lg.iter().flatten().zip(coef.iter().flatten()).map(|(a, b)| a * b).sum()
    };
    let (_, tape) = p.forward_train(&packed, &queries).unwrap();
    let mut grads = p.zeros_like();
    p.backward(&packed, &tape, &coef, &mut grads);
    let analytic: Vec<f64> = grads.slices(Trainable::All).concat();

    let h = 1e-5;
    let n = analytic.len();
    let mut worst: f64 = 0.0;
    for idx in 0..n {
        let shifted = |delta: f64| {
            let mut q = p.clone();
            let mut seen = 0;
            for s in q.slices_mut(Trainable::All) {
                if idx < seen + s.len() {
                    s[idx - seen] += delta;
                    break;
                }
                seen += s.len();
            }
            objective(&q)
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let a = analytic[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn prefix_forward_matches_packed_forward() {
    let vocab = Vocab::new(3, 4);
    let p = random_policy(vocab, 7);
    let ctx = vec![0, 2, 8, 13, 18, 9, 14, 19, 3];
    let seqs = vec![vec![8, 12], vec![10, 15], vec![11, 12]];
    let (packed, qs) = pack_branches(&ctx, &seqs, true);
    let flat: Vec<Query> = qs.iter().flatten().copied().collect();
    let full = p.forward(&packed, &flat).unwrap();
    let prefix = p.encode_prefix(&ctx[..ctx.len() - 1]).unwrap();
    let (cont, qs2) = pack_branches(&ctx, &seqs, false);
    let flat2: Vec<Query> = qs2.iter().flatten().copied().collect();
    let cached = p.forward_with_prefix(&prefix, &cont, &flat2).unwrap();
    assert!(max_abs_diff(&full, &cached) < 1e-12);
}

#[test]
fn uniform_policy_sequence_logprob() {
    let vocab = Vocab::new(3, 8);
    let p = Policy::new(tiny_cfg(), vocab, &mut seed::rng(8)).unwrap();
    let lp = sequence_logprob(&p, &[0, 2, 9], &sid(&[1, 5, 7])).unwrap();
    assert!((lp - 3.0 * (1.0f64 / 8.0).ln()).abs() < 1e-12);
}

#[test]
fn sequence_logprob_matches_stepwise_oracle() {
    let vocab = Vocab::new(3, 4);
    let p = random_policy(vocab, 9);
    let ctx = vec![0, 2, 8, 13, 18];
    for codes in [[0u32, 0, 0], [3, 1, 2], [2, 3, 1]] {
        let s = sid(&codes);
        let lp = sequence_logprob(&p, &ctx, &s).unwrap();
        assert!(lp <= 0.0 && lp.exp() > 0.0 && lp.exp() <= 1.0);
        let mut prob = 1.0;
        let mut seq = ctx.clone();
        for (l, &c) in codes.iter().enumerate() {
            let logits = p.forward(&Packed::sequence(&seq), &[Query { index: seq.len() - 1, level: l }]).unwrap();
            let z: f64 = logits[0].iter().map(|x| x.exp()).sum();
            prob *= logits[0][c as usize].exp() / z;
            seq.push(vocab.code_token(l, c));
        }
        assert!((lp.exp() - prob).abs() < 1e-12 * prob.max(1.0), "{} vs {prob}", lp.exp());
    }
}

#[test]
fn sampling_is_seeded_and_zero_temperature_is_greedy() {
    let vocab = Vocab::new(3, 4);
    let p = random_policy(vocab, 10);
    let ctx = vec![0, 2, 9];
    let a = sample_group(&p, &ctx, 8, 1.0, &mut seed::rng(11)).unwrap();
    let b = sample_group(&p, &ctx, 8, 1.0, &mut seed::rng(11)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.sids.len(), 8);
    for (s, lps) in a.sids.iter().zip(&a.token_logprobs) {
        assert_eq!(s.depth(), 3);
        let direct = token_logprobs(&p, &ctx, std::slice::from_ref(s)).unwrap();
        assert!(max_abs_diff(&direct, std::slice::from_ref(lps)) < 1e-12);
    }
    let cold = sample_group(&p, &ctx, 3, 0.0, &mut seed::rng(12)).unwrap();
    let g = greedy(&p, &ctx, None).unwrap();
    assert!(cold.sids.iter().all(|s| *s == g));
}

#[test]
fn first_token_frequencies_match_policy() {
    let vocab = Vocab::new(2, 4);
    let p = random_policy(vocab, 13);
    let ctx = vec![0, 2, 9, 13];
    let draws = 100_000;
    let group = sample_group(&p, &ctx, draws, 1.0, &mut seed::rng(14)).unwrap();
    let logits = p.forward(&Packed::sequence(&ctx), &[Query { index: 3, level: 0 }]).unwrap();
    let probs: Vec<f64> = log_softmax(&logits[0]).iter().map(|l| l.exp()).collect();
    let mut counts = [0usize; 4];
    for s in &group.sids {
        counts[s.0[0] as usize] += 1;
    }
    for (k, &pk) in probs.iter().enumerate() {
        let expected = draws as f64 * pk;
        let sigma = (draws as f64 * pk * (1.0 - pk)).sqrt();
        assert!((counts[k] as f64 - expected).abs() <= 3.0 * sigma, "code {k}: {} vs {expected}", counts[k]);
    }
}

/// Argmax code at each level over the unmasked sequence forward.
fn stepwise_greedy(p: &Policy, ctx: &[u32], trie: Option<&SidTrie>) -> SemanticId {
    let mut seq = ctx.to_vec();
    let mut codes = Vec::new();
    for l in 0..p.vocab.levels {
        let logits = p.forward(&Packed::sequence(&seq), &[Query { index: seq.len() - 1, level: l }]).unwrap();
        let allowed: Vec<u32> = match trie {
            Some(t) => t.next_codes(&codes),
            None => (0..p.vocab.codebook_size as u32).collect(),
        };
        let best =
            allowed
                .iter()
                .copied()
                .fold(allowed[0], |b, k| if logits[0][k as usize] > logits[0][b as usize] { k } else { b });
        codes.push(best);
        seq.push(p.vocab.code_token(l, best));
    }
    SemanticId(codes)
}

#[test]
fn beam_width_one_is_greedy_and_full_beam_is_exhaustive() {
    let vocab = Vocab::new(2, 3);
    let p = random_policy(vocab, 15);
    let ctx = vec![0, 2, 8];
    let one = beam_search(&p, &ctx, 1, None).unwrap();
    assert_eq!(one[0].sid, stepwise_greedy(&p, &ctx, None));
    assert_eq!(greedy(&p, &ctx, None).unwrap(), one[0].sid);

    let all: Vec<SemanticId> = (0..3).flat_map(|a| (0..3).map(move |b| sid(&[a, b]))).collect();
    let scores = score_candidates(&p, &ctx, &all).unwrap();
    let mut ranked: Vec<(SemanticId, f64)> = all.into_iter().zip(scores).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let beams = beam_search(&p, &ctx, 9, None).unwrap();
    assert_eq!(beams.len(), 9);
    for (b, (s, lp)) in beams.iter().zip(&ranked) {
        assert_eq!(&b.sid, s);
        assert!((b.logprob - lp).abs() < 1e-12);
    }
    let first = beam_search(&p, &ctx, 20, None).unwrap();
    assert_eq!(first.len(), 9);
}

#[test]
fn trie_constrains_beams_to_assigned_sids() {
    let vocab = Vocab::new(3, 4);
    let p = random_policy(vocab, 16);
    let assigned = [sid(&[0, 1, 2]), sid(&[0, 1, 3]), sid(&[2, 0, 0]), sid(&[3, 3, 1])];
    let trie = SidTrie::new(assigned.iter());
    assert_eq!(trie.next_codes(&[]), vec![0, 2, 3]);
    assert_eq!(trie.next_codes(&[0, 1]), vec![2, 3]);
    assert!(trie.next_codes(&[1]).is_empty());
    let beams = beam_search(&p, &[0, 2, 9], 10, Some(&trie)).unwrap();
    assert_eq!(beams.len(), 4);
    assert!(beams.iter().all(|b| assigned.contains(&b.sid)));
    let one = beam_search(&p, &[0, 2, 9], 1, Some(&trie)).unwrap();
    assert_eq!(one[0].sid, stepwise_greedy(&p, &[0, 2, 9], Some(&trie)));
    assert!(beam_search(&p, &[0], 0, None).is_err());
}

#[test]
fn fresh_adapters_are_an_exact_identity() {
    let vocab = Vocab::new(2, 4);
    let base = random_policy(vocab, 17);
    let mut adapted = base.clone();
    adapted.apply_lora(3, 1.0, &mut seed::rng(18)).unwrap();
    let ctx = vec![0, 2, 9, 13, 3];
    let (packed, qs) = pack_branches(&ctx, &[vec![8], vec![10]], true);
    let flat: Vec<Query> = qs.iter().flatten().copied().collect();
    assert_eq!(base.forward(&packed, &flat).unwrap(), adapted.forward(&packed, &flat).unwrap());
    assert!(adapted.apply_lora(2, 1.0, &mut seed::rng(0)).is_err());
    assert!(base.clone().apply_lora(0, 1.0, &mut seed::rng(0)).is_err());
}

#[test]
fn merged_adapters_match_adapted_forward() {
    let vocab = Vocab::new(2, 4);
    let mut p = random_policy(vocab, 19);
    p.apply_lora(3, 0.5, &mut seed::rng(20)).unwrap();
    randomize_adapters(&mut p, 21);
    let ctx = vec![0, 2, 9, 13, 3];
    let (packed, qs) = pack_branches(&ctx, &[vec![8], vec![10]], true);
    let flat: Vec<Query> = qs.iter().flatten().copied().collect();
    let adapted = p.forward(&packed, &flat).unwrap();
    let mut merged = p.clone();
    merged.merge_lora();
    assert!(!merged.has_adapters());
    assert!(max_abs_diff(&adapted, &merged.forward(&packed, &flat).unwrap()) < 1e-6);
}

#[test]
fn adapter_parameter_count() {
    let vocab = Vocab::new(3, 8);
    let cfg = tiny_cfg();
    let mut p = Policy::new(cfg, vocab, &mut seed::rng(22)).unwrap();
    let r = 4;
    p.apply_lora(r, 1.0, &mut seed::rng(23)).unwrap();
    let (d, f, out) = (cfg.d_model, cfg.d_ff, vocab.levels * vocab.codebook_size);
    let per_block = 4 * r * (d + d) + r * (d + f) + r * (f + d);
    let expected = cfg.n_layers * per_block + r * (d + out);
    assert_eq!(p.adapter_parameter_count(), expected);
    let trainable: usize = p.slices(Trainable::AdaptersOnly).iter().map(|s| s.len()).sum();
    assert_eq!(trainable, expected);
}

#[test]
fn persistence_round_trip_is_f32_exact() {
    let vocab = Vocab::new(3, 4);
    let mut p = random_policy(vocab, 24);
    let rounded = |p: &Policy| {
        let mut r = p.clone();
        for s in r.slices_mut(Trainable::All) {
            s.iter_mut().for_each(|v| *v = crate::tensor_io::round_f32(*v));
        }
        r
    };
    let mut buf = Vec::new();
    p.save(&mut buf).unwrap();
    assert_eq!(Policy::load(&mut buf.as_slice()).unwrap(), rounded(&p));
    p.apply_lora(2, 0.5, &mut seed::rng(25)).unwrap();
    randomize_adapters(&mut p, 26);
    buf.clear();
    p.save(&mut buf).unwrap();
    let loaded = Policy::load(&mut buf.as_slice()).unwrap();
    assert_eq!(loaded, rounded(&p));
    let mut again = Vec::new();
    loaded.save(&mut again).unwrap();
    assert_eq!(again, buf);
    buf[0] ^= 0xff;
    assert!(Policy::load(&mut buf.as_slice()).is_err());
}

fn align_fixture() -> &'static (Corpus, SidTable, Vec<AlignmentSample>) {
    static FIXTURE: OnceLock<(Corpus, SidTable, Vec<AlignmentSample>)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let corpus = generate_synthetic_corpus(&SynthConfig::default()).unwrap().corpus;
        let table = digit_table(corpus.items().iter().map(|i| i.item), Vocab::new(3, 8));
        let set = build_alignment_set(&corpus, &table, &AlignConfig { draws_per_item: 16, ..Default::default() }, 30)
            .unwrap();
        (corpus, table, set)
    })
}

const FROZEN_ALIGNMENT_COUNT: usize = 1072;

#[test]
fn alignment_set_construction() {
    let (corpus, table, set) = align_fixture();
    assert_eq!(set.len(), FROZEN_ALIGNMENT_COUNT);
    let inverse = table.inverse();
    for s in set {
        let mut neg_counts: BTreeMap<ItemId, usize> = BTreeMap::new();
        let mut bought = Vec::new();
        for e in corpus.user_events(s.user) {
            match e.polarity {
                Polarity::NegativeFeedback => *neg_counts.entry(e.item).or_default() += 1,
                Polarity::Purchase => bought.push(e.item),
                _ => {}
            }
        }
        assert_eq!(s.options.len(), 4);
        assert_eq!(s.options[s.answer], *table.get(s.negative_item).unwrap());
        let qualifying =
            s.options.iter().filter(|o| inverse[o].iter().any(|i| neg_counts.get(i).copied().unwrap_or(0) > 3)).count();
        assert_eq!(qualifying, 1);
        for (i, o) in s.options.iter().enumerate() {
            if i != s.answer {
                assert!(s.positives.contains(o));
                assert!(inverse[o].iter().any(|it| bought.contains(it)));
            }
        }
    }
    let again =
        build_alignment_set(corpus, table, &AlignConfig { draws_per_item: 16, ..Default::default() }, 30).unwrap();
    assert_eq!(&again, set);
    let answers: Vec<usize> = set.iter().map(|s| s.answer).collect();
    assert!((0..4).all(|a| answers.contains(&a)));
}

#[test]
fn users_without_qualifying_items_contribute_nothing() {
    let ev = |u, i, p, day| InteractionEvent::new(UserId(u), ItemId(i), p, Reason::None, day).unwrap();
    let mut events = Vec::new();
    for day in 0..5 {
        for item in 0..4 {
            events.push(ev(0, item, Polarity::Purchase, day));
        }
        if day < 3 {
            events.push(ev(0, 9, Polarity::NegativeFeedback, day));
        }
        events.push(ev(1, 9, Polarity::NegativeFeedback, day));
    }
    let items = (0..10).map(|i| ItemDescriptor { item: ItemId(i), category: 0, features: vec![0.0] }).collect();
    let corpus = Corpus::new(events, items, vec![UserId(0), UserId(1)], 5).unwrap();
    let table = digit_table((0..10).map(ItemId), Vocab::new(3, 8));
    // user 0 disliked item 9 three times only; user 1 has no purchases
    assert!(build_alignment_set(&corpus, &table, &AlignConfig::default(), 1).unwrap().is_empty());
}

#[test]
fn argmax_is_shift_invariant() {
    let scores = [-3.2, -1.5, -1.5, -7.0];
    assert_eq!(align::pick(&scores), 1);
    let shifted: Vec<f64> = scores.iter().map(|s| s + 41.0).collect();
    assert_eq!(align::pick(&shifted), 1);
}

#[test]
fn untrained_policy_is_at_chance() {
    let (_, _, set) = align_fixture();
    let p = Policy::new(tiny_cfg(), Vocab::new(3, 8), &mut seed::rng(31)).unwrap();
    let acc = alignment_accuracy(&p, set).unwrap();
    let n = set.len() as f64;
    let band = 3.0 * (0.25 * 0.75 / n).sqrt();
    assert!((acc - 0.25).abs() <= band, "accuracy {acc} outside 0.25 ± {band}");
}

fn warmup_examples(vocab: Vocab, n: usize) -> Vec<SftExample> {
    // target is the SID that most recently appeared in the context
    let mut rng = seed::rng(40);
    (0..n)
        .map(|_| {
            let codes: Vec<Vec<u32>> =
                (0..3).map(|_| (0..vocab.levels).map(|_| rng.random_range(0..2u32)).collect()).collect();
            let mut context = vec![Vocab::BOS, Vocab::SEP_NEG];
            for c in &codes {
                context.extend(vocab.sid_tokens(&SemanticId(c.clone())).unwrap());
            }
            SftExample { context, target: SemanticId(codes[2].clone()) }
        })
        .collect()
}

fn smoothed(xs: &[f64], w: usize) -> Vec<f64> {
    xs.chunks(w).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[test]
fn warmup_learns_and_is_deterministic() {
    let vocab = Vocab::new(2, 4);
    let examples = warmup_examples(vocab, 96);
    let cfg = SftConfig { epochs: 6, batch_size: 16, lr: 3e-3 };
    let mut p = Policy::new(tiny_cfg(), vocab, &mut seed::rng(41)).unwrap();
    let log = warmup_sft(&mut p, &examples, &cfg, 42).unwrap();
    assert!((log.step_losses[0] - 2.0 * 4f64.ln()).abs() < 1e-9);
    let s = smoothed(&log.step_losses, 6);
    for w in s.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "smoothed loss rose: {s:?}");
    }
    let mut q = Policy::new(tiny_cfg(), vocab, &mut seed::rng(41)).unwrap();
    warmup_sft(&mut q, &examples, &cfg, 42).unwrap();
    assert_eq!(p, q);
    assert!(p.is_finite());
}

#[test]
fn alignment_training_keeps_shapes_and_counts_adapters() {
    let (_, _, set) = align_fixture();
    let mut p = Policy::new(tiny_cfg(), Vocab::new(3, 8), &mut seed::rng(50)).unwrap();
    let cfg =
        AlignConfig { sft: SftConfig { epochs: 1, batch_size: 16, lr: 3e-3 }, lora_rank: 2, ..Default::default() };
    let mut probe = p.clone();
    probe.apply_lora(2, 1.0, &mut seed::rng(0)).unwrap();
    let log = alignment_sft(&mut p, &set[..32.min(set.len())], &cfg, 51).unwrap();
    assert_eq!(log.trainable_parameters, probe.adapter_parameter_count());
    assert!(!p.has_adapters());
    assert!(log.step_losses.iter().all(|l| l.is_finite()));
}
