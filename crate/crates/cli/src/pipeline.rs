//! Pipeline steps over a run directory.
//!
//! Every step reads its inputs from files written by earlier steps and
//! writes its outputs plus a stamp recording the config hash and a digest
//! of each output. A step whose stamp and outputs are intact is skipped; a
//! stamp from a different config is refused.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use negrec_core::corpus::{
    filter_by_reason, generate_synthetic_corpus, read_corpus, write_events, write_items, Corpus, PlantedInterests,
};
use negrec_core::eval::{
    build_candidate_tasks, candidate_accuracy, evaluate_samples, forgetting_rate, policy_candidate_scores, MetricRow,
    NegativeCounts,
};
use negrec_core::filterpipe::{filter_exposures, user_day_decisions_to_tsv, ExposureReport};
use negrec_core::grpo::{augmented_stream, run_curriculum_stage, CurriculumEnv, RewardModel, StageResult};
use negrec_core::policy::{
    alignment_accuracy, alignment_sft, build_alignment_set, serialize_context, warmup_sft, AlignmentSample, Policy,
    SftExample, SidTrie, Vocab,
};
use negrec_core::seed;
use negrec_core::sidcodec::{assign_all, reconstruction_report, train_codec, Codec, SidTable};
use negrec_core::swing::SwingIndex;
use negrec_core::targets::{build_samples, samples_from_jsonl, samples_to_jsonl, Sample, Stage};
use rand::seq::{IteratorRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Step {
    GenData,
    TrainCodec,
    AssignSids,
    BuildSwing,
    BuildTargets,
    TrainAlign,
    WarmupSft,
    Grpo(Stage),
    Eval,
    Filter,
}

impl Step {
    pub fn name(self) -> String {
        match self {
            Step::GenData => "gen-data".into(),
            Step::TrainCodec => "train-codec".into(),
            Step::AssignSids => "assign-sids".into(),
            Step::BuildSwing => "build-swing".into(),
            Step::BuildTargets => "build-targets".into(),
            Step::TrainAlign => "train-align".into(),
            Step::WarmupSft => "warmup-sft".into(),
            Step::Grpo(s) => format!("grpo-{}", s.number()),
            Step::Eval => "eval".into(),
            Step::Filter => "filter".into(),
        }
    }

    /// Steps shared by every variant of a run.
    pub const SHARED: [Step; 5] =
        [Step::GenData, Step::TrainCodec, Step::AssignSids, Step::BuildSwing, Step::BuildTargets];
}

/// Model variants trained from the same shared artifacts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Skips item-level alignment.
    NoAlignment,
    /// Trains only the last curriculum stage.
    NoCurriculum,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoAlignment => "no-alignment",
            Variant::NoCurriculum => "no-curriculum",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        [Variant::NoAlignment, Variant::NoCurriculum].into_iter().find(|v| v.name() == s)
    }

    fn subdir(self) -> PathBuf {
        match self {
            Variant::Full => PathBuf::new(),
            v => Path::new("ablations").join(v.name()),
        }
    }

    pub fn stages(self) -> Vec<Stage> {
        match self {
            Variant::NoCurriculum => vec![Stage::NegPlusPos],
            _ => Stage::ALL.to_vec(),
        }
    }

    /// Steps this variant runs itself; the rest it reads from the full run.
    pub fn steps(self) -> Vec<Step> {
        let mut steps = match self {
            Variant::NoCurriculum => vec![],
            _ => vec![Step::TrainAlign, Step::WarmupSft],
        };
        steps.extend(self.stages().into_iter().map(Step::Grpo));
        steps.extend([Step::Eval, Step::Filter]);
        steps
    }

    fn runs(self, step: Step) -> bool {
        Step::SHARED.contains(&step) || self.steps().contains(&step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stamp {
    step: String,
    config_hash: String,
    /// Output file name to hex SHA-256.
    outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignReport {
    pub train_samples: usize,
    pub heldout_samples: usize,
    /// `None` when the variant skips alignment.
    pub trainable_parameters: Option<usize>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub step_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupReport {
    pub examples: usize,
    pub step_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Held-out metrics of the final policy with the full context.
    pub metrics: MetricRow,
    /// The same for the freshly initialized policy.
    pub untrained: MetricRow,
    pub heldout_samples: usize,
    pub candidate_tasks: usize,
    /// Alignment accuracy of the final policy on the held-out alignment set.
    pub align_accuracy: f64,
    /// Relative drop from the post-alignment accuracy; `None` without
    /// alignment or when that accuracy is zero.
    pub forgetting: Option<f64>,
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A run directory bound to one config.
pub struct Run {
    pub cfg: RunConfig,
    pub root: PathBuf,
    hash: String,
}

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

impl Run {
    /// Opens `cfg.out_dir`, refusing it if any existing stamp was made with
    /// another config, and echoes the resolved config into it.
    pub fn open(cfg: RunConfig) -> CliResult<Run> {
        cfg.validate()?;
        let root = cfg.out_dir.clone();
        let run = Run { hash: cfg.hash(), cfg, root };
        run.check_stamps()?;
        fs::create_dir_all(&run.root).map_err(|e| CliError::step("setup", e))?;
        fs::write(run.root.join(RESOLVED_CONFIG), run.cfg.to_toml()).map_err(|e| CliError::step("setup", e))?;
        Ok(run)
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn check_stamps(&self) -> CliResult<()> {
        let mut dirs = vec![self.root.join(".stamps")];
        for v in [Variant::NoAlignment, Variant::NoCurriculum] {
            dirs.push(self.root.join(v.subdir()).join(".stamps"));
        }
        for dir in dirs {
            let Ok(entries) = fs::read_dir(&dir) else { continue };
            let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            for p in paths {
                let stamp: Stamp = fs::read_to_string(&p)
                    .ok()
                    .and_then(|t| serde_json::from_str(&t).ok())
                    .ok_or_else(|| CliError::Usage(format!("unreadable stamp {}", p.display())))?;
                if stamp.config_hash != self.hash {
                    return Err(CliError::Usage(format!(
                        "{} holds artifacts of step {} from config {}, not {}; refusing to resume",
                        self.root.display(),
                        stamp.step,
                        stamp.config_hash,
                        self.hash
                    )));
                }
            }
        }
        Ok(())
    }

    fn dir(&self, variant: Variant) -> PathBuf {
        self.root.join(variant.subdir())
    }

    /// Where `variant` finds the outputs of `step`.
    fn source(&self, variant: Variant, step: Step) -> PathBuf {
        if variant.runs(step) && !Step::SHARED.contains(&step) {
            self.dir(variant)
        } else {
            self.root.clone()
        }
    }

    fn stamp_path(&self, variant: Variant, step: Step) -> PathBuf {
        self.dir(variant).join(".stamps").join(format!("{}.json", step.name()))
    }

    /// True when `step` has a stamp from this config and every output it
    /// lists is present and unchanged.
    pub fn is_fresh(&self, variant: Variant, step: Step) -> bool {
        let Some(stamp) = fs::read_to_string(self.stamp_path(variant, step))
            .ok()
            .and_then(|t| serde_json::from_str::<Stamp>(&t).ok())
        else {
            return false;
        };
        stamp.config_hash == self.hash
            && stamp.outputs.iter().all(|(name, digest)| {
                fs::read(self.dir(variant).join(name)).is_ok_and(|bytes| &hex_digest(&bytes) == digest)
            })
    }

    /// Runs `step` unless it is fresh. Returns whether it ran.
    pub fn ensure(&self, variant: Variant, step: Step) -> CliResult<bool> {
        if !variant.runs(step) {
            return Err(CliError::Usage(format!("variant {} does not run {}", variant.name(), step.name())));
        }
        let variant = if Step::SHARED.contains(&step) { Variant::Full } else { variant };
        if self.is_fresh(variant, step) {
            return Ok(false);
        }
        let outputs = self.execute(variant, step).map_err(|e| match e {
            CliError::Step { .. } => e,
            other => CliError::step(step.name(), other),
        })?;
        let dir = self.dir(variant);
        let mut stamp = Stamp { step: step.name(), config_hash: self.hash.clone(), outputs: BTreeMap::new() };
        for (name, bytes) in outputs {
            let path = dir.join(&name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| CliError::step(step.name(), e))?;
            }
            fs::write(&path, &bytes).map_err(|e| CliError::step(step.name(), e))?;
            stamp.outputs.insert(name, hex_digest(&bytes));
        }
        let sp = self.stamp_path(variant, step);
        fs::create_dir_all(sp.parent().expect("stamp dir")).map_err(|e| CliError::step(step.name(), e))?;
        fs::write(sp, serde_json::to_string_pretty(&stamp).expect("stamp serializes"))
            .map_err(|e| CliError::step(step.name(), e))?;
        Ok(true)
    }

    /// Every step `variant` needs, in order.
    pub fn run_variant(&self, variant: Variant) -> CliResult<()> {
        for step in Step::SHARED {
            self.ensure(variant, step)?;
        }
        if variant == Variant::NoCurriculum {
            self.ensure(Variant::Full, Step::TrainAlign)?;
            self.ensure(Variant::Full, Step::WarmupSft)?;
        }
        for step in variant.steps() {
            self.ensure(variant, step)?;
        }
        Ok(())
    }

    fn execute(&self, variant: Variant, step: Step) -> CliResult<Vec<(String, Vec<u8>)>> {
        let name = step.name();
        let fail = |e: negrec_core::Error| CliError::step(name.clone(), e);
        match step {
            Step::GenData => self.gen_data().map_err(fail),
            Step::TrainCodec => self.train_codec().map_err(fail),
            Step::AssignSids => self.assign_sids(),
            Step::BuildSwing => self.build_swing(),
            Step::BuildTargets => self.build_targets(),
            Step::TrainAlign => self.train_align(variant),
            Step::WarmupSft => self.warmup(variant),
            Step::Grpo(stage) => self.grpo(variant, stage),
            Step::Eval => self.eval(variant),
            Step::Filter => self.filter(variant),
        }
    }

    // ---- artifact loading ----

    fn read(&self, dir: &Path, name: &str) -> CliResult<Vec<u8>> {
        fs::read(dir.join(name))
            .map_err(|e| CliError::Usage(format!("missing artifact {}: {e}", dir.join(name).display())))
    }

    fn read_text(&self, dir: &Path, name: &str) -> CliResult<String> {
        String::from_utf8(self.read(dir, name)?).map_err(|e| CliError::Usage(format!("{name} is not UTF-8: {e}")))
    }

    /// The generated corpus with non-interest negatives removed.
    pub fn corpus(&self) -> CliResult<Corpus> {
        let dir = self.root.join("corpus");
        if !dir.join("events.tsv").exists() {
            return Err(CliError::Usage(format!("missing artifact {}", dir.join("events.tsv").display())));
        }
        let raw = read_corpus(&dir).map_err(|e| CliError::Usage(format!("corpus: {e}")))?;
        raw.with_events(filter_by_reason(raw.events())).map_err(|e| CliError::Usage(format!("corpus: {e}")))
    }

    /// Corpus events before the training cutoff.
    fn train_corpus(&self, corpus: &Corpus) -> CliResult<Corpus> {
        let end = self.cfg.split.train_end_day;
        corpus
            .with_events(corpus.events().iter().filter(|e| e.day < end).copied().collect())
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn planted(&self) -> CliResult<PlantedInterests> {
        PlantedInterests::from_tsv(&self.read_text(&self.root, "corpus/planted.tsv")?)
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn codec(&self) -> CliResult<Codec> {
        Codec::load(&mut self.read(&self.root, "codec.bin")?.as_slice()).map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn sids(&self) -> CliResult<SidTable> {
        SidTable::from_tsv(&self.read_text(&self.root, "sids.tsv")?).map_err(|e| CliError::Usage(e.to_string()))
    }

    fn swing(&self) -> CliResult<SwingIndex> {
        SwingIndex::load(&mut self.read(&self.root, "swing.bin")?.as_slice())
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn samples(&self, name: &str) -> CliResult<Vec<Sample>> {
        samples_from_jsonl(&self.read_text(&self.root, name)?).map_err(|e| CliError::Usage(e.to_string()))
    }

    fn policy_at(&self, dir: &Path, name: &str) -> CliResult<Policy> {
        Policy::load(&mut self.read(dir, name)?.as_slice()).map_err(|e| CliError::Usage(e.to_string()))
    }

    fn json<T: for<'de> Deserialize<'de>>(&self, dir: &Path, name: &str) -> CliResult<T> {
        serde_json::from_str(&self.read_text(dir, name)?).map_err(|e| CliError::Usage(format!("{name}: {e}")))
    }

    fn sub(&self, label: &str) -> u64 {
        seed::sub_seed(self.cfg.seed, label)
    }

    pub fn initial_policy(&self, codec: &Codec) -> CliResult<Policy> {
        let vocab = Vocab::new(codec.levels(), codec.codebook_size());
        Policy::new(self.cfg.policy, vocab, &mut seed::rng(self.sub("policy-init")))
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    fn trie(&self, sids: &SidTable) -> Option<SidTrie> {
        self.cfg.eval.constrained.then(|| SidTrie::from_table(sids))
    }

    /// Held-out alignment samples and the training rest, split by
    /// `(user, item)` pair so no pair appears on both sides.
    pub fn alignment_split(&self, sids: &SidTable) -> CliResult<(Vec<AlignmentSample>, Vec<AlignmentSample>)> {
        let corpus = self.train_corpus(&self.corpus()?)?;
        let all = build_alignment_set(&corpus, sids, &self.cfg.align, self.sub("align-set"))
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let mut pairs: Vec<_> = all
            .iter()
            .map(|s| (s.user, s.negative_item))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        pairs.shuffle(&mut seed::rng(self.sub("align-split")));
        let n_held = ((pairs.len() as f64) * self.cfg.split.align_holdout).ceil() as usize;
        let held: std::collections::BTreeSet<_> = pairs.into_iter().take(n_held).collect();
        Ok(all.into_iter().partition(|s| !held.contains(&(s.user, s.negative_item))))
    }

    pub fn final_policy(&self, variant: Variant) -> CliResult<Policy> {
        self.policy_at(&self.dir(variant), &format!("policy_stage{}.bin", Stage::NegPlusPos.number()))
    }

    // ---- steps ----

    fn gen_data(&self) -> negrec_core::Result<Vec<(String, Vec<u8>)>> {
        let synth = generate_synthetic_corpus(&self.cfg.corpus)?;
        Ok(vec![
            ("corpus/events.tsv".into(), write_events(synth.corpus.events()).into_bytes()),
            ("corpus/items.tsv".into(), write_items(synth.corpus.items()).into_bytes()),
            ("corpus/planted.tsv".into(), synth.planted.to_tsv().into_bytes()),
        ])
    }

    fn train_codec(&self) -> negrec_core::Result<Vec<(String, Vec<u8>)>> {
        let corpus = read_corpus(&self.root.join("corpus"))?;
        let trained = train_codec(corpus.items(), &self.cfg.codec, self.sub("codec"))?;
        let mut bin = Vec::new();
        trained.codec.save(&mut bin)?;
        let report = reconstruction_report(&trained.codec, corpus.items())?;
        let log = serde_json::json!({ "epochs": trained.log, "relative_error": report.relative_error() });
        Ok(vec![("codec.bin".into(), bin), ("codec_log.json".into(), pretty(&log))])
    }

    fn assign_sids(&self) -> CliResult<Vec<(String, Vec<u8>)>> {
        let corpus = self.corpus()?;
        let assignment = assign_all(&self.codec()?, corpus.items()).map_err(|e| CliError::Usage(e.to_string()))?;
        let summary = serde_json::json!({
            "items": assignment.table.sids.len(),
            "collision_rate": assignment.collision_rate(),
            "collision_groups": assignment.collisions.len(),
        });
        Ok(vec![
            ("sids.tsv".into(), assignment.table.to_tsv().into_bytes()),
            ("sids_summary.json".into(), pretty(&summary)),
        ])
    }

    fn build_swing(&self) -> CliResult<Vec<(String, Vec<u8>)>> {
        let corpus = self.train_corpus(&self.corpus()?)?;
        let negatives: Vec<_> = corpus.events().iter().filter(|e| e.is_negative()).copied().collect();
        let index = SwingIndex::build(&negatives, self.cfg.swing).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut bin = Vec::new();
        index.save(&mut bin).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(vec![("swing.bin".into(), bin)])
    }

    fn build_targets(&self) -> CliResult<Vec<(String, Vec<u8>)>> {
        let corpus = self.corpus()?;
        let swing = self.swing()?;
        let train = build_samples(&corpus, &self.cfg.train_days(), &swing, &self.cfg.targets);
        let heldout = build_samples(&corpus, &self.cfg.heldout_days(), &swing, &self.cfg.targets);
        let enc =
            |s: &[Sample]| samples_to_jsonl(s).map(String::into_bytes).map_err(|e| CliError::Usage(e.to_string()));
        Ok(vec![("train_samples.jsonl".into(), enc(&train)?), ("heldout_samples.jsonl".into(), enc(&heldout)?)])
    }

    fn train_align(&self, variant: Variant) -> CliResult<Vec<(String, Vec<u8>)>> {
        let codec = self.codec()?;
        let sids = self.sids()?;
        let (train, held) = self.alignment_split(&sids)?;
        let mut policy = self.initial_policy(&codec)?;
        let acc = |p: &Policy| alignment_accuracy(p, &held).map_err(|e| CliError::Usage(e.to_string()));
        let accuracy_before = acc(&policy)?;
        let mut report = AlignReport {
            train_samples: train.len(),
            heldout_samples: held.len(),
            trainable_parameters: None,
            accuracy_before,
            accuracy_after: accuracy_before,
            step_losses: Vec::new(),
        };
        if variant != Variant::NoAlignment {
            let log = alignment_sft(&mut policy, &train, &self.cfg.align, self.sub("align-sft"))
                .map_err(|e| CliError::Usage(e.to_string()))?;
            report.trainable_parameters = Some(log.trainable_parameters);
            report.step_losses = log.step_losses;
            report.accuracy_after = acc(&policy)?;
        }
        Ok(vec![("policy_align.bin".into(), save_policy(&policy)?), ("align.json".into(), pretty(&report))])
    }

    fn warmup(&self, variant: Variant) -> CliResult<Vec<(String, Vec<u8>)>> {
        let sids = self.sids()?;
        let mut policy = self.policy_at(&self.dir(variant), "policy_align.bin")?;
        let samples = self.samples("train_samples.jsonl")?;
        let mut rng = seed::rng(self.sub("warmup-targets"));
        let mut examples = Vec::with_capacity(samples.len() * Stage::ALL.len());
        for s in &samples {
            let Some(item) = s.targets.gts.iter().filter(|i| sids.sids.contains_key(i)).choose(&mut rng) else {
                continue;
            };
            for stage in Stage::ALL {
                let context = serialize_context(s.context(stage), &sids, &policy.vocab, policy.cfg.max_context_events)
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                examples.push(SftExample { context, target: sids.sids[item].clone() });
            }
        }
        let log = warmup_sft(&mut policy, &examples, &self.cfg.warmup, self.sub("warmup-sft"))
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let report = WarmupReport { examples: examples.len(), step_losses: log.step_losses };
        Ok(vec![("policy_warmup.bin".into(), save_policy(&policy)?), ("warmup.json".into(), pretty(&report))])
    }

    fn grpo(&self, variant: Variant, stage: Stage) -> CliResult<Vec<(String, Vec<u8>)>> {
        let stages = variant.stages();
        let pos = stages.iter().position(|&s| s == stage).expect("variant runs stage");
        let prev = pos.checked_sub(1).map(|p| stages[p]);
        let dir = self.dir(variant);
        let mut policy = match prev {
            None => self.policy_at(&self.source(variant, Step::WarmupSft), "policy_warmup.bin")?,
            Some(p) => self.policy_at(&dir, &format!("policy_stage{}.bin", p.number()))?,
        };
        let corpus = self.corpus()?;
        let codec = self.codec()?;
        let sids = self.sids()?;
        let train = self.samples("train_samples.jsonl")?;
        let heldout = self.samples("heldout_samples.jsonl")?;
        let rewards = RewardModel::new(&codec, &sids).map_err(|e| CliError::Usage(e.to_string()))?;
        let counts = NegativeCounts::new(&corpus);
        let trie = self.trie(&sids);
        let env = CurriculumEnv {
            train: &train,
            heldout: &heldout,
            codec: &codec,
            sids: &sids,
            rewards: &rewards,
            counts: &counts,
            trie: trie.as_ref(),
            k: self.cfg.eval.k,
        };
        let core = |e: negrec_core::Error| CliError::Usage(e.to_string());
        let (stream, augmented) = augmented_stream(prev.map(|p| (&policy, p)), &env, &self.cfg.grpo).map_err(core)?;
        let result =
            run_curriculum_stage(&mut policy, stage, &stream, augmented, &env, &self.cfg.grpo, self.sub("grpo"))
                .map_err(core)?;
        let n = stage.number();
        Ok(vec![(format!("policy_stage{n}.bin"), save_policy(&policy)?), (format!("stage{n}.json"), pretty(&result))])
    }

    fn eval(&self, variant: Variant) -> CliResult<Vec<(String, Vec<u8>)>> {
        let core = |e: negrec_core::Error| CliError::Usage(e.to_string());
        let corpus = self.corpus()?;
        let codec = self.codec()?;
        let sids = self.sids()?;
        let heldout = self.samples("heldout_samples.jsonl")?;
        let counts = NegativeCounts::new(&corpus);
        let trie = self.trie(&sids);
        let k = self.cfg.eval.k;
        let days = self.cfg.heldout_days();
        let tasks = build_candidate_tasks(
            &corpus,
            days[0]..days[days.len() - 1] + 1,
            self.cfg.eval.candidate_tasks,
            self.sub("candidate-tasks"),
        );
        let row = |p: &Policy| -> CliResult<MetricRow> {
            let evals =
                evaluate_samples(p, &heldout, Stage::NegPlusPos, &sids, &counts, k, trie.as_ref()).map_err(core)?;
            let mut row = MetricRow::hit_metrics(&evals, k);
            row.cand = candidate_accuracy(&tasks, |t| policy_candidate_scores(p, &sids, t)).map_err(core)?;
            Ok(row)
        };
        let policy = self.final_policy(variant)?;
        let (_, held_align) = self.alignment_split(&sids)?;
        let align_accuracy = alignment_accuracy(&policy, &held_align).map_err(core)?;
        let align: AlignReport = self.json(&self.source(variant, Step::TrainAlign), "align.json")?;
        let forgetting = (align.trainable_parameters.is_some() && align.accuracy_after > 0.0)
            .then(|| forgetting_rate(align.accuracy_after, align_accuracy))
            .transpose()
            .map_err(core)?;
        let report = EvalReport {
            metrics: row(&policy)?,
            untrained: row(&self.initial_policy(&codec)?)?,
            heldout_samples: heldout.len(),
            candidate_tasks: tasks.len(),
            align_accuracy,
            forgetting,
        };
        Ok(vec![("eval.json".into(), pretty(&report))])
    }

    fn filter(&self, variant: Variant) -> CliResult<Vec<(String, Vec<u8>)>> {
        let corpus = self.corpus()?;
        let codec = self.codec()?;
        let sids = self.sids()?;
        let planted = self.planted()?;
        let policy = self.final_policy(variant)?;
        let trie = self.trie(&sids);
        let (report, rows) = filter_exposures(
            &policy,
            &codec,
            &corpus,
            &sids,
            &planted,
            &self.cfg.heldout_days(),
            &self.cfg.filter,
            trie.as_ref(),
        )
        .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(vec![
            ("filter.json".into(), pretty(&report)),
            ("filter_decisions.tsv".into(), user_day_decisions_to_tsv(&rows).into_bytes()),
        ])
    }

    // ---- report inputs ----

    pub fn stage_results(&self, variant: Variant) -> CliResult<Vec<StageResult>> {
        variant.stages().iter().map(|s| self.json(&self.dir(variant), &format!("stage{}.json", s.number()))).collect()
    }

    pub fn eval_report(&self, variant: Variant) -> CliResult<EvalReport> {
        self.json(&self.dir(variant), "eval.json")
    }

    pub fn align_report(&self, variant: Variant) -> CliResult<AlignReport> {
        self.json(&self.source(variant, Step::TrainAlign), "align.json")
    }

    pub fn filter_report(&self, variant: Variant) -> CliResult<ExposureReport> {
        self.json(&self.dir(variant), "filter.json")
    }

    pub fn has_variant(&self, variant: Variant) -> bool {
        self.dir(variant).join("eval.json").exists()
    }
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn save_policy(policy: &Policy) -> CliResult<Vec<u8>> {
    let mut bin = Vec::new();
    policy.save(&mut bin).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(bin)
}
