//! A miniature run through the public API, from corpus to filtering.

use negrec_core::corpus::{filter_by_reason, generate_synthetic_corpus, SynthConfig};
use negrec_core::eval::{evaluate_samples, MetricRow, NegativeCounts};
use negrec_core::filterpipe::{filter_exposures, FilterConfig};
use negrec_core::grpo::{policy_hash, run_curriculum, CurriculumEnv, GrpoConfig, RewardModel, StageResult};
use negrec_core::policy::{serialize_context, warmup_sft, Policy, PolicyConfig, SftConfig, SftExample, SidTrie, Vocab};
use negrec_core::seed;
use negrec_core::sidcodec::{assign_all, train_codec, CodecTrainConfig};
use negrec_core::swing::{SwingIndex, SwingParams};
use negrec_core::targets::{build_samples, Stage, TargetConfig};

struct Outcome {
    stages: Vec<StageResult>,
    final_hash: String,
    eval: MetricRow,
    exposures: usize,
    kept: usize,
    decision_rows: usize,
}

fn mini_run(seed_value: u64) -> Outcome {
    let synth = generate_synthetic_corpus(&SynthConfig {
        num_users: 12,
        num_items: 48,
        num_categories: 4,
        num_days: 24,
        exposures_per_day: 6,
        ..SynthConfig::default()
    })
    .unwrap();
    let corpus = synth.corpus.with_events(filter_by_reason(synth.corpus.events())).unwrap();
    let codec_cfg = CodecTrainConfig { codebook_size: 8, epochs: 4, ..CodecTrainConfig::default() };
    let codec = train_codec(corpus.items(), &codec_cfg, seed::sub_seed(seed_value, "codec")).unwrap().codec;
    let sids = assign_all(&codec, corpus.items()).unwrap().table;
    let negatives: Vec<_> = corpus.events().iter().filter(|e| e.is_negative() && e.day < 16).cloned().collect();
    let swing = SwingIndex::build(&negatives, SwingParams::default()).unwrap();
    let tcfg = TargetConfig::default();
    let train = build_samples(&corpus, &(2..10).collect::<Vec<_>>(), &swing, &tcfg);
    let heldout = build_samples(&corpus, &[16, 17], &swing, &tcfg);
    assert!(!train.is_empty() && !heldout.is_empty());

    let vocab = Vocab::new(codec.levels(), codec.codebook_size());
    let pcfg =
        PolicyConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, max_positions: 64, max_context_events: 8 };
    let mut policy = Policy::new(pcfg, vocab, &mut seed::rng(seed::sub_seed(seed_value, "init"))).unwrap();
    let examples: Vec<SftExample> = train
        .iter()
        .filter_map(|s| {
            let target = sids.get(s.targets.next_negative?).ok()?.clone();
            let context = serialize_context(s.context(Stage::Neg3Day), &sids, &policy.vocab, 8).ok()?;
            Some(SftExample { context, target })
        })
        .collect();
    warmup_sft(&mut policy, &examples, &SftConfig { epochs: 1, batch_size: 8, lr: 3e-3 }, seed_value).unwrap();

    let trie = SidTrie::from_table(&sids);
    let rewards = RewardModel::new(&codec, &sids).unwrap();
    let counts = NegativeCounts::new(&corpus);
    let env = CurriculumEnv {
        train: &train,
        heldout: &heldout,
        codec: &codec,
        sids: &sids,
        rewards: &rewards,
        counts: &counts,
        trie: Some(&trie),
        k: 5,
    };
    let gcfg = GrpoConfig { steps_per_stage: 2, groups_per_step: 2, group_size: 4, ..GrpoConfig::default() };
    let stages = run_curriculum(&mut policy, &Stage::ALL, &env, &gcfg, seed_value).unwrap();

    let evals = evaluate_samples(&policy, &heldout, Stage::NegPlusPos, &sids, &counts, 5, Some(&trie)).unwrap();
    let eval = MetricRow::hit_metrics(&evals, 5);
    let fcfg = FilterConfig { k: 5, ..FilterConfig::default() };
    let (report, rows) =
        filter_exposures(&policy, &codec, &corpus, &sids, &synth.planted, &[16, 17], &fcfg, Some(&trie)).unwrap();
    Outcome {
        stages,
        final_hash: policy_hash(&policy),
        eval,
        exposures: report.total,
        kept: report.kept,
        decision_rows: rows.iter().map(|r| r.decisions.len()).sum(),
    }
}

#[test]
fn miniature_pipeline_is_consistent_and_deterministic() {
    let a = mini_run(11);
    assert_eq!(a.stages.len(), 3);
    for r in &a.stages {
        assert_eq!(r.log.steps.len(), 2);
        assert!(r.log.steps.iter().all(|s| s.loss.is_finite() && s.kl >= 0.0));
        let (hr, fhr) = (r.heldout.hr, r.heldout.fhr);
        if let (Some(hr), Some(fhr)) = (hr, fhr) {
            assert!(fhr >= hr);
        }
    }
    assert_eq!(a.stages[0].augmented, 0);
    if let (Some(hr), Some(fhr)) = (a.eval.hr, a.eval.fhr) {
        assert!(fhr >= hr);
    }
    assert!(a.exposures > 0);
    assert!(a.kept <= a.exposures);
    assert_eq!(a.decision_rows, a.exposures);

    let b = mini_run(11);
    assert_eq!(a.final_hash, b.final_hash);
    assert_eq!(a.stages, b.stages);
    assert_eq!((a.exposures, a.kept), (b.exposures, b.kept));
    assert_ne!(mini_run(12).final_hash, a.final_hash);
}
