use std::collections::BTreeSet;
use std::sync::OnceLock;

use proptest::prelude::*;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::corpus::{generate_synthetic_corpus, Corpus, ItemId, SynthConfig};
use crate::optim::Adam;
use crate::policy::{log_softmax, Packed, Policy, PolicyConfig, Query, Trainable, Vocab};
use crate::seed;
use crate::sidcodec::{assign_all, train_codec, Codec, CodecTrainConfig, SemanticId, SidTable};
use crate::swing::{SwingIndex, SwingParams};
use crate::targets::{build_samples, Sample, Stage, TargetConfig, TargetSets};

fn sid(c: &[u32]) -> SemanticId {
    SemanticId(c.to_vec())
}

fn tiny_cfg() -> PolicyConfig {
    PolicyConfig { d_model: 16, n_layers: 2, n_heads: 2, d_ff: 32, max_positions: 64, max_context_events: 8 }
}

fn perturbed(p: &Policy, std: f64, seed_value: u64) -> Policy {
    let mut q = p.clone();
    let mut rng = seed::rng(seed_value);
    let n = Normal::new(0.0, std).unwrap();
    for s in q.slices_mut(Trainable::All) {
        s.iter_mut().for_each(|v| *v += n.sample(&mut rng));
    }
    q
}

fn random_policy(vocab: Vocab, seed_value: u64) -> Policy {
    let p = Policy::new(tiny_cfg(), vocab, &mut seed::rng(seed_value)).unwrap();
    perturbed(&p, 0.2, seed_value + 1000)
}

#[test]
fn reward_arithmetic() {
    let c = RewardSpec { scheme: RewardScheme::SimMinusFps, gamma: 0.5, trunc: 0.6 };
    assert!((c.combine(0.9, 0.5) - 0.65).abs() <= 1e-9);
    let b = RewardSpec { scheme: RewardScheme::SimTruncated, ..c };
    assert_eq!(b.combine(0.55, 0.0), 0.0);
    assert_eq!(b.combine(0.6, 0.0), 0.6);
    let d = RewardSpec { scheme: RewardScheme::BothTruncated, ..c };
    assert_eq!(d.combine(0.9, 0.55), 0.9);
    assert!((d.combine(0.9, 0.7) - 0.55).abs() < 1e-12);
    assert_eq!(d.combine(0.5, 0.7), -0.35);
    let a = RewardSpec { scheme: RewardScheme::SimGts, ..c };
    assert_eq!(a.combine(0.3, 0.9), 0.3);
}

#[test]
fn hierarchical_hit_levels() {
    let gts = [sid(&[1, 2, 3]), sid(&[4, 5, 6])];
    assert_eq!(hierarchical_hit(&sid(&[1, 2, 3]), &gts), 1.0);
    assert_eq!(hierarchical_hit(&sid(&[4, 5, 0]), &gts), 0.1);
    assert_eq!(hierarchical_hit(&sid(&[1, 0, 3]), &gts), 0.01);
    assert_eq!(hierarchical_hit(&sid(&[0, 2, 3]), &gts), 0.0);
    assert_eq!(hierarchical_hit(&sid(&[1, 2, 3]), &[]), 0.0);
}

#[test]
fn scheme_parsing() {
    for s in RewardScheme::ALL {
        assert_eq!(s.to_string().parse::<RewardScheme>().unwrap(), s);
    }
    assert_eq!("C".parse::<RewardScheme>().unwrap(), RewardScheme::SimMinusFps);
    assert!("f".parse::<RewardScheme>().is_err());
    assert!(RewardSpec { trunc: 1.5, ..Default::default() }.validate().is_err());
    assert!(RewardSpec { gamma: -0.1, ..Default::default() }.validate().is_err());
}

proptest! {
    #[test]
    fn reward_bounds(s_plus in 0.0f64..=1.0, s_minus in 0.0f64..=1.0, gamma in 0.0f64..2.0) {
        for scheme in [RewardScheme::SimGts, RewardScheme::SimTruncated] {
            let r = RewardSpec { scheme, gamma, trunc: 0.6 }.combine(s_plus, s_minus);
            prop_assert!((0.0..=1.0).contains(&r));
        }
        let c = RewardSpec { scheme: RewardScheme::SimMinusFps, gamma, trunc: 0.6 };
        let r = c.combine(s_plus, s_minus);
        prop_assert!(r >= -gamma - 1e-12 && r <= 1.0);
        let a = RewardSpec { scheme: RewardScheme::SimGts, gamma, trunc: 0.6 };
        let c0 = RewardSpec { gamma: 0.0, ..c };
        prop_assert_eq!(c0.combine(s_plus, s_minus), a.combine(s_plus, s_minus));
    }

    #[test]
    fn advantages_are_standardized(rewards in prop::collection::vec(-5.0f64..5.0, 2..16)) {
        let a = compute_advantages(&rewards).unwrap();
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        if a.iter().any(|x| *x != 0.0) {
            prop_assert!(mean.abs() <= 1e-9);
            prop_assert!((std - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn kl_estimate_is_nonnegative(lp_a in -20.0f64..0.0, lp_b in -20.0f64..0.0) {
        prop_assert!(kl_estimate(lp_a, lp_b) >= 0.0);
    }
}

#[test]
fn advantage_cases() {
    assert_eq!(compute_advantages(&[0.0, 1.0]).unwrap(), vec![-1.0, 1.0]);
    assert_eq!(compute_advantages(&[0.3; 5]).unwrap(), vec![0.0; 5]);
    let a = compute_advantages(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    for (x, y) in a.iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
        assert!((x - y).abs() <= 1e-4);
    }
    assert!(compute_advantages(&[1.0]).is_err());
    assert_eq!(kl_estimate(-1.3, -1.3), 0.0);
}

/// Sequence-level KL between two policies: per-token estimates of sampled
/// outputs against the exact sum over all `K^D` outputs.
#[test]
fn kl_estimator_matches_exact_kl() {
    let vocab = Vocab::new(2, 4);
    let theta = random_policy(vocab, 1);
    let reference = perturbed(&theta, 0.15, 2);
    let ctx = vec![0, 2, 9];
    let all: Vec<SemanticId> = (0..4).flat_map(|a| (0..4).map(move |b| sid(&[a, b]))).collect();
    let lt: Vec<f64> = crate::policy::score_candidates(&theta, &ctx, &all).unwrap();
    let lr: Vec<f64> = crate::policy::score_candidates(&reference, &ctx, &all).unwrap();
    let exact: f64 = lt.iter().zip(&lr).map(|(a, b)| a.exp() * (a - b)).sum();
    assert!(exact > 0.01, "policies too close: {exact}");
    let draws = 100_000;
    let group = crate::policy::sample_group(&theta, &ctx, draws, 1.0, &mut seed::rng(3)).unwrap();
    let refs = crate::policy::token_logprobs(&reference, &ctx, &group.sids).unwrap();
    let total: f64 = group
        .token_logprobs
        .iter()
        .zip(&refs)
        .map(|(t, r)| t.iter().zip(r).map(|(a, b)| kl_estimate(*a, *b)).sum::<f64>())
        .sum();
    let estimate = total / draws as f64;
    assert!((estimate - exact).abs() / exact <= 0.02, "estimate {estimate} exact {exact}");
}

fn batch_for(old: &Policy, reference: &Policy, ctx: Vec<u32>, sids: Vec<SemanticId>, rewards: Vec<f64>) -> GroupBatch {
    let old_logprobs = crate::policy::token_logprobs(old, &ctx, &sids).unwrap();
    let ref_logprobs = crate::policy::token_logprobs(reference, &ctx, &sids).unwrap();
    GroupBatch {
        advantages: compute_advantages(&rewards).unwrap(),
        context: ctx,
        sids,
        old_logprobs,
        ref_logprobs,
        rewards,
    }
}

fn two_groups(old: &Policy, reference: &Policy) -> Vec<GroupBatch> {
    vec![
        batch_for(
            old,
            reference,
            vec![0, 2, 9, 13, 3],
            vec![sid(&[0, 1]), sid(&[2, 3]), sid(&[1, 1]), sid(&[3, 0])],
            vec![0.2, 0.9, 0.4, 0.1],
        ),
        batch_for(
            old,
            reference,
            vec![0, 2, 11],
            vec![sid(&[1, 2]), sid(&[1, 2]), sid(&[0, 3]), sid(&[2, 0])],
            vec![1.0, 0.0, 0.5, 0.25],
        ),
    ]
}

#[test]
fn identical_snapshots_give_zero_loss() {
    let vocab = Vocab::new(2, 4);
    let theta = random_policy(vocab, 4);
    let batches = two_groups(&theta, &theta);
    let out = grpo_loss(&theta, &batches, LossParams { clip_eps: 0.2, beta: 0.1 }, false).unwrap();
    assert!(out.loss.abs() < 1e-15);
    assert_eq!(out.kl, 0.0);
    assert_eq!(out.clip_fraction, 0.0);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let vocab = Vocab::new(2, 4);
    let theta = random_policy(vocab, 5);
    let old = perturbed(&theta, 0.02, 6);
    let reference = perturbed(&theta, 0.05, 7);
    let batches = two_groups(&old, &reference);
    let params = LossParams { clip_eps: 0.2, beta: 0.3 };
    let out = grpo_loss(&theta, &batches, params, true).unwrap();
    let analytic: Vec<f64> = out.grads.unwrap().slices(Trainable::All).concat();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for idx in 0..analytic.len() {
        let at = |delta: f64| {
            let mut q = theta.clone();
            let mut seen = 0;
            for s in q.slices_mut(Trainable::All) {
                if idx < seen + s.len() {
                    s[idx - seen] += delta;
                    break;
                }
                seen += s.len();
            }
            grpo_loss(&q, &batches, params, false).unwrap().loss
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let a = analytic[idx];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3));
        checked += 1;
    }
    assert!(checked > 1000);
    assert!(worst <= 1e-3, "worst relative error {worst}");
}

#[test]
fn clipped_tokens_only_feel_the_kl_pull() {
    let vocab = Vocab::new(2, 4);
    let theta = random_policy(vocab, 8);
    let reference = perturbed(&theta, 0.05, 9);
    let ctx = vec![0, 2, 9];
    let sids = vec![sid(&[0, 1]), sid(&[2, 3])];
    let lp = crate::policy::token_logprobs(&theta, &ctx, &sids).unwrap();
    // sampling snapshot far less likely on every token: ratio > 1 + eps
    let old: Vec<Vec<f64>> = lp.iter().map(|r| r.iter().map(|x| x - 1.0).collect()).collect();
    let refs = crate::policy::token_logprobs(&reference, &ctx, &sids).unwrap();
    let make = |beta| {
        let batch = GroupBatch {
            context: ctx.clone(),
            sids: sids.clone(),
            old_logprobs: old.clone(),
            ref_logprobs: refs.clone(),
            rewards: vec![1.0, 1.0],
            advantages: vec![1.0, 1.0],
        };
        grpo_loss(&theta, &[batch], LossParams { clip_eps: 0.2, beta }, true).unwrap()
    };
    let plain = make(0.0);
    assert_eq!(plain.clip_fraction, 1.0);
    assert!(plain.grads.unwrap().slices(Trainable::All).iter().all(|s| s.iter().all(|g| *g == 0.0)));
    // with a KL weight, the gradient equals that of the KL term alone
    let with_kl = make(0.5);
    let kl_only = {
        let batch = GroupBatch {
            context: ctx.clone(),
            sids: sids.clone(),
            old_logprobs: lp.clone(),
            ref_logprobs: refs.clone(),
            rewards: vec![0.0, 0.0],
            advantages: vec![0.0, 0.0],
        };
        grpo_loss(&theta, &[batch], LossParams { clip_eps: 0.2, beta: 0.5 }, true).unwrap()
    };
    let a = with_kl.grads.unwrap().slices(Trainable::All).concat();
    let b = kl_only.grads.unwrap().slices(Trainable::All).concat();
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-15));
    assert!(a.iter().any(|x| *x != 0.0));
}

#[test]
fn clip_is_inactive_inside_the_trust_region() {
    let vocab = Vocab::new(2, 4);
    let theta = random_policy(vocab, 10);
    let old = perturbed(&theta, 0.005, 11);
    let reference = perturbed(&theta, 0.05, 12);
    let batches = two_groups(&old, &reference);
    let tight = grpo_loss(&theta, &batches, LossParams { clip_eps: 0.2, beta: 0.1 }, false).unwrap();
    assert_eq!(tight.clip_fraction, 0.0);
    let loose = grpo_loss(&theta, &batches, LossParams { clip_eps: 0.999, beta: 0.1 }, false).unwrap();
    assert_eq!(tight.loss, loose.loss);
}

#[test]
fn config_validation() {
    assert!(GrpoConfig::default().validate().is_ok());
    assert!(GrpoConfig { group_size: 1, ..Default::default() }.validate().is_err());
    assert!(GrpoConfig { clip_eps: 1.0, ..Default::default() }.validate().is_err());
    assert!(GrpoConfig { beta: [0.1, -0.1, 0.1], ..Default::default() }.validate().is_err());
    assert_eq!(GrpoConfig::default().loss_params(Stage::NegPlusPos).beta, 0.1);
}

struct Fixture {
    codec: Codec,
    sids: SidTable,
    train: Vec<Sample>,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let corpus: Corpus = generate_synthetic_corpus(&SynthConfig::default()).unwrap().corpus;
        let ccfg = CodecTrainConfig { codebook_size: 8, epochs: 15, ..Default::default() };
        let codec = train_codec(corpus.items(), &ccfg, 1).unwrap().codec;
        let sids = assign_all(&codec, corpus.items()).unwrap().table;
        let negs: Vec<_> = corpus.events().iter().filter(|e| e.is_negative()).copied().collect();
        let swing = SwingIndex::build(&negs, SwingParams::default()).unwrap();
        let train = build_samples(&corpus, &[20, 30], &swing, &TargetConfig::default());
        Fixture { codec, sids, train }
    })
}

fn stage_cfg() -> GrpoConfig {
    GrpoConfig { steps_per_stage: 30, groups_per_step: 4, lr: 3e-3, ..Default::default() }
}

#[test]
fn reward_model_on_catalog_items() {
    let f = fixture();
    let rm = RewardModel::new(&f.codec, &f.sids).unwrap();
    let (&item, s) = f.sids.sids.iter().next().unwrap();
    let targets = TargetSets {
        next_negative: Some(item),
        gts: BTreeSet::from([item]),
        fps: BTreeSet::new(),
        gts_expanded: BTreeSet::from([item]),
    };
    let spec = RewardSpec::default();
    assert!((rm.reward(s, &targets, &spec).unwrap() - 1.0).abs() < 1e-12);
    let penalized = TargetSets { fps: BTreeSet::from([item]), ..targets.clone() };
    assert!((rm.reward(s, &penalized, &spec).unwrap() - 0.5).abs() < 1e-12);
    let e = RewardSpec { scheme: RewardScheme::HierHit, ..spec };
    assert_eq!(rm.reward(s, &targets, &e).unwrap(), 1.0);
    let empty =
        TargetSets { next_negative: None, gts: BTreeSet::new(), fps: BTreeSet::new(), gts_expanded: BTreeSet::new() };
    assert_eq!(rm.reward(s, &empty, &spec).unwrap(), 0.0);
    assert!(rm.reward(&sid(&[0, 0]), &targets, &spec).is_err());
    let unknown = TargetSets { gts_expanded: BTreeSet::from([ItemId(99_999)]), ..targets };
    assert_eq!(rm.reward(s, &unknown, &spec).unwrap(), 0.0);
}

fn tiny_policy_for(f: &Fixture, seed_value: u64) -> Policy {
    let vocab = Vocab::new(f.codec.levels(), f.codec.codebook_size());
    Policy::new(tiny_cfg(), vocab, &mut seed::rng(seed_value)).unwrap()
}

#[test]
fn stage_run_is_deterministic_and_logs_reference() {
    let f = fixture();
    let rm = RewardModel::new(&f.codec, &f.sids).unwrap();
    let env = StageEnv { sids: &f.sids, rewards: &rm };
    let cfg = GrpoConfig { steps_per_stage: 4, ..stage_cfg() };
    let mut a = tiny_policy_for(f, 20);
    let start = policy_hash(&a);
    let log_a = run_stage(&mut a, Stage::NegFull, &f.train, &env, &cfg, 21).unwrap();
    let mut b = tiny_policy_for(f, 20);
    let log_b = run_stage(&mut b, Stage::NegFull, &f.train, &env, &cfg, 21).unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.ref_hash, start);
    assert_eq!(log_a.steps.len(), 4);
    assert_ne!(policy_hash(&a), start);
    assert!(run_stage(&mut a, Stage::NegFull, &[], &env, &cfg, 21).is_err());
}

const FROZEN_REWARD_THIRDS: [f64; 3] = [0.32348292697405107, 0.3252491140030317, 0.34730455245864306];

#[test]
fn stage_reward_rises() {
    let f = fixture();
    let rm = RewardModel::new(&f.codec, &f.sids).unwrap();
    let env = StageEnv { sids: &f.sids, rewards: &rm };
    let mut p = tiny_policy_for(f, 22);
    let log = run_stage(&mut p, Stage::NegFull, &f.train, &env, &stage_cfg(), 23).unwrap();
    let rewards: Vec<f64> = log.steps.iter().map(|s| s.mean_reward).collect();
    let thirds: Vec<f64> = rewards.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    for w in thirds.windows(2) {
        assert!(w[1] >= w[0], "smoothed reward fell: {thirds:?}");
    }
    for (t, frozen) in thirds.iter().zip(FROZEN_REWARD_THIRDS) {
        assert!((t - frozen).abs() < 1e-9, "{thirds:?}");
    }
}

/// Repeated steps on one fixed batch drift less from the reference as the
/// KL weight grows.
#[test]
fn kl_weight_limits_drift() {
    let vocab = Vocab::new(2, 4);
    let theta = random_policy(vocab, 30);
    let batches = two_groups(&theta, &theta);
    let drift = |beta: f64| {
        let mut p = theta.clone();
        let mut opt = Adam::new(1e-2);
        for _ in 0..30 {
            let out = grpo_loss(&p, &batches, LossParams { clip_eps: 0.2, beta }, true).unwrap();
            let g = out.grads.unwrap();
            opt.step(p.slices_mut(Trainable::All), g.slices(Trainable::All));
        }
        p.slices(Trainable::All)
            .iter()
            .zip(theta.slices(Trainable::All))
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    };
    let d: Vec<f64> = [0.1, 10.0, 1000.0].into_iter().map(drift).collect();
    assert!(d[0] > d[1] && d[1] > d[2], "{d:?}");
}

#[test]
fn sampling_logprobs_feed_the_ratio() {
    // sampled outputs carry logprobs equal to a fresh forward pass
    let vocab = Vocab::new(2, 4);
    let theta = random_policy(vocab, 40);
    let ctx = vec![0, 2, 9];
    let mut rng = seed::rng(41);
    let batch = GroupBatch::collect(&theta, &theta, ctx.clone(), 4, 1.0, &mut rng, |s| Ok(s.0[0] as f64)).unwrap();
    assert_eq!(batch.old_logprobs, batch.ref_logprobs);
    for (s, lp) in batch.sids.iter().zip(&batch.old_logprobs) {
        let mut seq = ctx.clone();
        for (l, &c) in s.0.iter().enumerate() {
            let logits = theta.forward(&Packed::sequence(&seq), &[Query { index: seq.len() - 1, level: l }]).unwrap();
            assert!((log_softmax(&logits[0])[c as usize] - lp[l]).abs() < 1e-12);
            seq.push(vocab.code_token(l, c));
        }
    }
}
