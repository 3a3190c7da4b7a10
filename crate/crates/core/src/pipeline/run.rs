use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::plan::{ExperimentPlan, Int8Mode};
use super::report::{AuditReport, CellFailure, CellRow, KlRow, ModelRow, Provenance};
use crate::attacks::{
    kl_by_membership, run_mr, run_nr_metric, run_nr_training, run_sr, AttackOutcome, MrConfig, MrSide,
    ModelPair, Population, RankedModel, Threshold,
};
use crate::checkpoint::{read_compressed, read_json, read_model, write_compressed, write_json, write_model};
use crate::compression::{
    cluster_weights, finetune_compressed, prune_l1_with_scope, quantize_int8, CompressedModel, CompressionKind,
    QuantMode,
};
use crate::data::{make_split, FinetunePlan, SplitPlan, TabularDataset};
use crate::error::{Error, Result};
use crate::meta::MetaClassifier;
use crate::metrics::roc_curve;
use crate::nn::{train, train_dpsgd, FcnModel, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Train,
    Compress,
    Attack,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Self::Train,
        Self::Compress,
        Self::Attack,
        Self::Evaluate,
        Self::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Compress => "compress",
            Self::Attack => "attack",
            Self::Evaluate => "evaluate",
            Self::Report => "report",
        }
    }

    fn previous(&self) -> Option<Stage> {
        let i = Self::ALL.iter().position(|s| s == self).expect("listed");
        i.checked_sub(1).map(|j| Self::ALL[j])
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker threads; `None` lets rayon decide.
    pub workers: Option<usize>,
    /// Directory relative dataset paths are resolved against.
    pub base_dir: PathBuf,
    /// Also write fitted meta-classifiers next to the attack outputs.
    pub save_classifiers: bool,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            workers: None,
            base_dir: PathBuf::from("."),
            save_classifiers: false,
        }
    }
}

/// Marker written when a stage completes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDone {
    pub stage: Stage,
    pub plan_hash: String,
    pub failures: Vec<CellFailure>,
}

/// Output of one attack cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub attack: String,
    pub target: String,
    pub seed: u64,
    pub outcome: AttackOutcome,
    /// Calibrated threshold of metric attacks.
    pub threshold: Option<Threshold>,
}

/// Everything the evaluate stage hands to the report stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub models: Vec<ModelRow>,
    pub kl: Vec<KlRow>,
    pub cells: Vec<CellRow>,
}

/// Deterministic sub-seed of `seed` for a named purpose.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("32-byte digest"))
}

const SIDES: [&str; 2] = ["victim", "shadow"];

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn done_path(out: &Path, stage: Stage) -> PathBuf {
    out.join(format!("{}.done.json", stage.name()))
}

fn original_path(out: &Path, seed: u64, side: &str) -> PathBuf {
    seed_dir(out, seed).join(side).join("original.ckpt")
}

fn compressed_path(out: &Path, seed: u64, side: &str, tag: &str) -> PathBuf {
    seed_dir(out, seed).join(side).join(format!("{tag}.ckpt"))
}

fn attack_rel_path(seed: u64, attack: &str, target: &str) -> String {
    format!("seed-{seed}/attacks/{attack}@{target}.json")
}

/// Runs `f` on every item in a pool of `workers` threads; results keep
/// input order.
fn parallel<T: Sync, R: Send>(workers: Option<usize>, items: &[T], f: impl Fn(&T) -> R + Sync) -> Result<Vec<R>> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(w) = workers {
        b = b.num_threads(w.max(1));
    }
    let pool = b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| items.par_iter().map(&f).collect()))
}

fn failure(stage: Stage, cell: String, err: &Error) -> CellFailure {
    CellFailure {
        stage: stage.name().into(),
        cell,
        message: err.to_string(),
    }
}

fn check_upstream(plan_hash: &str, out: &Path, stage: Stage) -> Result<()> {
    let Some(prev) = stage.previous() else {
        return Ok(());
    };
    let path = done_path(out, prev);
    if !path.exists() {
        return Err(Error::Dependency {
            stage: prev.name().into(),
            path,
        });
    }
    let done: StageDone = read_json(&path)?;
    if done.plan_hash != plan_hash {
        return Err(Error::Config(format!(
            "{} was produced by plan {} but the current plan hashes to {plan_hash}",
            path.display(),
            done.plan_hash
        )));
    }
    Ok(())
}

/// Runs every stage in order and returns the report.
pub fn run_plan(plan: &ExperimentPlan, opts: &RunOptions) -> Result<AuditReport> {
    for stage in Stage::ALL {
        run_stage(plan, opts, stage)?;
    }
    read_json(opts.out_dir.join("report.json"))
}

/// Runs one stage. Every stage except `train` needs the done marker of the
/// previous stage, written for the same plan.
pub fn run_stage(plan: &ExperimentPlan, opts: &RunOptions, stage: Stage) -> Result<StageDone> {
    plan.validate()?;
    let hash = plan.hash();
    let out = &opts.out_dir;
    check_upstream(&hash, out, stage)?;
    fs::create_dir_all(out)?;
    let later = Stage::ALL.iter().filter(|s| **s >= stage);
    for s in later {
        let p = done_path(out, *s);
        if p.exists() {
            fs::remove_file(p)?;
        }
    }
    let failures = match stage {
        Stage::Train => {
            write_json(out.join("plan.json"), plan)?;
            train_stage(plan, opts)?
        }
        Stage::Compress => compress_stage(plan, opts)?,
        Stage::Attack => attack_stage(plan, opts)?,
        Stage::Evaluate => evaluate_stage(plan, opts)?,
        Stage::Report => report_stage(plan, opts)?,
    };
    let done = StageDone {
        stage,
        plan_hash: hash,
        failures,
    };
    write_json(done_path(out, stage), &done)?;
    Ok(done)
}

struct SideData {
    train: TabularDataset,
    test: TabularDataset,
}

impl SideData {
    fn population(&self) -> Population<'_> {
        Population {
            members: &self.train,
            nonmembers: &self.test,
        }
    }
}

struct SeedData {
    split: SplitPlan,
    victim: SideData,
    shadow: SideData,
}

impl SeedData {
    fn side(&self, side: &str) -> &SideData {
        if side == "victim" {
            &self.victim
        } else {
            &self.shadow
        }
    }

    fn train_indices(&self, side: &str) -> &[usize] {
        if side == "victim" {
            &self.split.victim_train
        } else {
            &self.split.shadow_train
        }
    }
}

fn load_seed_data(dataset: &TabularDataset, split: SplitPlan) -> SeedData {
    SeedData {
        victim: SideData {
            train: dataset.subset(&split.victim_train),
            test: dataset.subset(&split.victim_test),
        },
        shadow: SideData {
            train: dataset.subset(&split.shadow_train),
            test: dataset.subset(&split.shadow_test),
        },
        split,
    }
}

fn load_splits(plan: &ExperimentPlan, opts: &RunOptions, dataset: &TabularDataset) -> Result<BTreeMap<u64, SeedData>> {
    let mut out = BTreeMap::new();
    for seed in plan.seeds() {
        let path = seed_dir(&opts.out_dir, seed).join("split.json");
        if !path.exists() {
            return Err(Error::Dependency {
                stage: Stage::Train.name().into(),
                path,
            });
        }
        let split: SplitPlan = read_json(&path)?;
        split.validate(dataset.len())?;
        out.insert(seed, load_seed_data(dataset, split));
    }
    Ok(out)
}

fn fit_model(
    plan: &ExperimentPlan,
    model: &FcnModel,
    data: &TabularDataset,
    config: &TrainConfig,
) -> Result<FcnModel> {
    match &plan.dp {
        None => train(model, data, None, config, None),
        Some(dp) => train_dpsgd(model, data, None, config, dp, None),
    }
}

fn train_stage(plan: &ExperimentPlan, opts: &RunOptions) -> Result<Vec<CellFailure>> {
    let dataset = plan.dataset.load(&opts.base_dir)?;
    let mut seeds = BTreeMap::new();
    for seed in plan.seeds() {
        let split = make_split(&dataset, plan.splits, derive_seed(seed, "split"))?;
        let dir = seed_dir(&opts.out_dir, seed);
        fs::create_dir_all(dir.join("victim"))?;
        fs::create_dir_all(dir.join("shadow"))?;
        write_json(dir.join("split.json"), &split)?;
        seeds.insert(seed, load_seed_data(&dataset, split));
    }
    let mut sizes = vec![dataset.feature_dim()];
    sizes.extend(&plan.model.hidden);
    sizes.push(dataset.class_count());

    let cells: Vec<(u64, &str)> = plan.seeds().into_iter().flat_map(|s| SIDES.map(|side| (s, side))).collect();
    let results = parallel(opts.workers, &cells, |&(seed, side)| -> Result<()> {
        let init = FcnModel::with_layers(&sizes, plan.model.dropout, derive_seed(seed, &format!("init/{side}")))?;
        let config = TrainConfig {
            seed: derive_seed(seed, &format!("train/{side}")),
            ..plan.train.clone()
        };
        let model = fit_model(plan, &init, &seeds[&seed].side(side).train, &config)?;
        write_model(original_path(&opts.out_dir, seed, side), &model)
    })?;
    Ok(collect_failures(Stage::Train, &cells, results, |(seed, side)| {
        format!("seed-{seed}/{side}/original")
    }))
}

fn collect_failures<T>(
    stage: Stage,
    cells: &[T],
    results: Vec<Result<()>>,
    name: impl Fn(&T) -> String,
) -> Vec<CellFailure> {
    cells
        .iter()
        .zip(results)
        .filter_map(|(c, r)| r.err().map(|e| failure(stage, name(c), &e)))
        .collect()
}

fn compress_one(
    plan: &ExperimentPlan,
    original: &FcnModel,
    finetune_set: &TabularDataset,
    kind: CompressionKind,
    seed: u64,
) -> Result<CompressedModel> {
    let spec = &plan.compression;
    let config = TrainConfig {
        max_epochs: spec.finetune_epochs,
        seed: derive_seed(seed, "finetune"),
        ..plan.train.clone()
    };
    let tune = |cm: CompressedModel| -> Result<CompressedModel> {
        if spec.finetune_epochs == 0 {
            return Ok(cm);
        }
        let config = match (cm.kind, spec.cluster_learning_rate) {
            (CompressionKind::Cluster { .. }, Some(lr)) => TrainConfig {
                learning_rate: lr,
                ..config.clone()
            },
            _ => config.clone(),
        };
        finetune_compressed(&cm, finetune_set, None, &config, plan.dp.as_ref())
    };
    match kind {
        CompressionKind::Prune { sparsity } => tune(prune_l1_with_scope(original, sparsity, spec.prune_scope)?),
        CompressionKind::Cluster { clusters } => tune(cluster_weights(original, clusters, derive_seed(seed, "kmeans"))?),
        CompressionKind::Int8 => match spec.int8_mode {
            Int8Mode::Ptq => quantize_int8(original, QuantMode::PostTraining),
            Int8Mode::Qat if spec.finetune_epochs == 0 => quantize_int8(original, QuantMode::PostTraining),
            // fake-quantised fine-tuning from the rounded weights; goes
            // through finetune_compressed so DP plans stay private
            Int8Mode::Qat if plan.dp.is_some() => tune(quantize_int8(original, QuantMode::PostTraining)?),
            Int8Mode::Qat => quantize_int8(
                original,
                QuantMode::AwareTraining {
                    train_set: finetune_set,
                    valid_set: None,
                    config: &config,
                },
            ),
        },
    }
}

fn compress_stage(plan: &ExperimentPlan, opts: &RunOptions) -> Result<Vec<CellFailure>> {
    let dataset = plan.dataset.load(&opts.base_dir)?;
    let seeds = load_splits(plan, opts, &dataset)?;
    let kinds = plan.compression.kinds();
    let mut cells = Vec::new();
    for seed in plan.seeds() {
        for side in SIDES {
            for &kind in &kinds {
                cells.push((seed, side, kind));
            }
        }
    }
    let out = &opts.out_dir;
    let results = parallel(opts.workers, &cells, |&(seed, side, kind)| -> Result<()> {
        let original = read_model(original_path(out, seed, side))?;
        let data = &seeds[&seed];
        let fraction = plan.finetune_fraction.unwrap_or(1.0);
        let ft = FinetunePlan::new(data.train_indices(side), fraction, derive_seed(seed, &format!("ftsubset/{side}")))?;
        let subset = dataset.subset(&ft.finetune);
        let cell_seed = derive_seed(seed, &format!("compress/{side}/{}", kind.tag()));
        let cm = compress_one(plan, &original, &subset, kind, cell_seed)?;
        write_compressed(compressed_path(out, seed, side, &kind.tag()), &cm)
    })?;
    Ok(collect_failures(Stage::Compress, &cells, results, |(seed, side, kind)| {
        format!("seed-{seed}/{side}/{}", kind.tag())
    }))
}

/// What one attack cell runs.
#[derive(Debug, Clone)]
enum AttackJob {
    NrMetric(crate::attacks::NrMetric),
    NrTraining(super::plan::NrTrainingSpec),
    Sr(super::plan::SrSpec),
    Mr(crate::attacks::Adversary),
}

impl AttackJob {
    fn id(&self) -> String {
        match self {
            Self::NrMetric(m) => format!("nr-{}", m.name()),
            Self::NrTraining(s) => format!(
                "nr-train{}-{}",
                if s.with_label { "-label" } else { "" },
                s.classifier.name()
            ),
            Self::Sr(s) => format!("sr-{}-{}", s.construction.name(), s.classifier.name()),
            Self::Mr(a) => format!("mr-{}", serde_json::to_value(a).expect("enum").as_str().expect("string")),
        }
    }
}

/// (job, target) pairs requested by the plan, in a fixed order.
fn attack_jobs(plan: &ExperimentPlan) -> Vec<(AttackJob, String)> {
    let a = &plan.attacks;
    let mut nr_targets = Vec::new();
    if a.include_original {
        nr_targets.push("original".to_string());
    }
    nr_targets.extend(plan.attack_targets());
    let mut jobs = Vec::new();
    for t in &nr_targets {
        jobs.extend(a.nr_metrics.iter().map(|&m| (AttackJob::NrMetric(m), t.clone())));
        jobs.extend(a.nr_training.iter().map(|&s| (AttackJob::NrTraining(s), t.clone())));
    }
    for t in plan.attack_targets() {
        jobs.extend(a.sr.iter().map(|&s| (AttackJob::Sr(s), t.clone())));
    }
    if let Some(mr) = &a.mr {
        let target = plan.mr_targets().join("+");
        jobs.extend(mr.adversaries.iter().map(|&adv| (AttackJob::Mr(adv), target.clone())));
    }
    jobs
}

/// Models of one (seed, side), keyed by tag; missing entries failed
/// upstream.
struct SideModels {
    original: Option<FcnModel>,
    compressed: BTreeMap<String, CompressedModel>,
}

impl SideModels {
    fn load(out: &Path, seed: u64, side: &str, tags: &[String]) -> Self {
        Self {
            original: read_model(original_path(out, seed, side)).ok(),
            compressed: tags
                .iter()
                .filter_map(|t| read_compressed(compressed_path(out, seed, side, t)).ok().map(|m| (t.clone(), m)))
                .collect(),
        }
    }

    fn original(&self, seed: u64, side: &str) -> Result<&FcnModel> {
        self.original
            .as_ref()
            .ok_or_else(|| Error::Input(format!("seed-{seed}/{side}/original is unavailable")))
    }

    fn model(&self, seed: u64, side: &str, tag: &str) -> Result<&FcnModel> {
        if tag == "original" {
            return self.original(seed, side);
        }
        self.compressed
            .get(tag)
            .map(|c| &c.model)
            .ok_or_else(|| Error::Input(format!("seed-{seed}/{side}/{tag} is unavailable")))
    }

    fn ranked(&self, seed: u64, side: &str, tags: &[String]) -> Result<Vec<RankedModel<'_>>> {
        tags.iter()
            .map(|t| {
                let cm = self
                    .compressed
                    .get(t)
                    .ok_or_else(|| Error::Input(format!("seed-{seed}/{side}/{t} is unavailable")))?;
                Ok(RankedModel {
                    model: &cm.model,
                    degree: cm.degree_tag(),
                })
            })
            .collect()
    }
}

struct SeedModels {
    victim: SideModels,
    shadow: SideModels,
}

fn load_models(plan: &ExperimentPlan, out: &Path) -> BTreeMap<u64, SeedModels> {
    let tags = plan.compression.tags();
    plan.seeds()
        .into_iter()
        .map(|s| {
            (
                s,
                SeedModels {
                    victim: SideModels::load(out, s, "victim", &tags),
                    shadow: SideModels::load(out, s, "shadow", &tags),
                },
            )
        })
        .collect()
}

fn run_attack(
    plan: &ExperimentPlan,
    job: &AttackJob,
    target: &str,
    seed: u64,
    data: &SeedData,
    models: &SeedModels,
) -> Result<(AttackRecord, Vec<MetaClassifier>)> {
    let hyper = &plan.attacks.meta;
    let (vp, sp) = (data.victim.population(), data.shadow.population());
    let (v, s) = (&models.victim, &models.shadow);
    let cell_seed = derive_seed(seed, &format!("attack/{}@{target}", job.id()));
    let mut threshold = None;
    let mut classifiers = Vec::new();
    let outcome = match job {
        AttackJob::NrMetric(m) => {
            let (t, o) = run_nr_metric(*m, s.model(seed, "shadow", target)?, sp, v.model(seed, "victim", target)?, vp)?;
            threshold = Some(t);
            o
        }
        AttackJob::NrTraining(spec) => {
            let (clf, o) = run_nr_training(
                spec.with_label,
                spec.classifier,
                hyper,
                cell_seed,
                s.model(seed, "shadow", target)?,
                sp,
                v.model(seed, "victim", target)?,
                vp,
            )?;
            classifiers.push(clf);
            o
        }
        AttackJob::Sr(spec) => {
            let shadow_pair = ModelPair {
                original: s.original(seed, "shadow")?,
                compressed: s.model(seed, "shadow", target)?,
            };
            let victim_pair = ModelPair {
                original: v.original(seed, "victim")?,
                compressed: v.model(seed, "victim", target)?,
            };
            let (clf, o) = run_sr(
                shadow_pair,
                sp,
                victim_pair,
                vp,
                spec.construction,
                spec.classifier,
                hyper,
                cell_seed,
            )?;
            classifiers.push(clf);
            o
        }
        AttackJob::Mr(adversary) => {
            let mr = plan.attacks.mr.as_ref().expect("MR job implies an MR section");
            let tags = plan.mr_targets();
            let config = MrConfig {
                adversary: *adversary,
                construction: mr.sr_construction,
                sr_kind: mr.sr_classifier,
                hyper: hyper.clone(),
                folds: mr.folds,
            };
            let shadow_side = MrSide {
                original: s.original.as_ref(),
                compressed: s.ranked(seed, "shadow", &tags)?,
                population: sp,
            };
            let victim_side = MrSide {
                original: v.original.as_ref(),
                compressed: v.ranked(seed, "victim", &tags)?,
                population: vp,
            };
            let run = run_mr(&config, &shadow_side, &victim_side, cell_seed)?;
            classifiers.push(run.meta);
            classifiers.extend(run.sr_classifiers);
            run.outcome
        }
    };
    let record = AttackRecord {
        attack: job.id(),
        target: target.to_string(),
        seed,
        outcome,
        threshold,
    };
    Ok((record, classifiers))
}

fn attack_stage(plan: &ExperimentPlan, opts: &RunOptions) -> Result<Vec<CellFailure>> {
    let dataset = plan.dataset.load(&opts.base_dir)?;
    let seeds = load_splits(plan, opts, &dataset)?;
    let out = &opts.out_dir;
    let models = load_models(plan, out);
    let jobs = attack_jobs(plan);
    let mut cells = Vec::new();
    for seed in plan.seeds() {
        fs::create_dir_all(seed_dir(out, seed).join("attacks"))?;
        for (job, target) in &jobs {
            cells.push((seed, job.clone(), target.clone()));
        }
    }
    let results = parallel(opts.workers, &cells, |(seed, job, target)| -> Result<()> {
        let (record, classifiers) = run_attack(plan, job, target, *seed, &seeds[seed], &models[seed])?;
        let rel = attack_rel_path(*seed, &record.attack, target);
        let path = out.join(&rel);
        // stale output from an earlier run must not survive a failure
        if path.exists() {
            fs::remove_file(&path)?;
        }
        if opts.save_classifiers {
            write_json(path.with_extension("classifiers.json"), &classifiers)?;
        }
        write_json(path, &record)
    })?;
    let failures = cells
        .iter()
        .zip(results)
        .filter_map(|((seed, job, target), r)| {
            r.err().map(|e| {
                let _ = fs::remove_file(out.join(attack_rel_path(*seed, &job.id(), target)));
                failure(Stage::Attack, attack_rel_path(*seed, &job.id(), target), &e)
            })
        })
        .collect();
    Ok(failures)
}

fn evaluate_stage(plan: &ExperimentPlan, opts: &RunOptions) -> Result<Vec<CellFailure>> {
    let dataset = plan.dataset.load(&opts.base_dir)?;
    let seeds = load_splits(plan, opts, &dataset)?;
    let out = &opts.out_dir;
    let models = load_models(plan, out);
    let tags = plan.compression.tags();

    let mut model_rows = Vec::new();
    let mut kl_rows = Vec::new();
    for (&seed, data) in &seeds {
        let v = &models[&seed].victim;
        let Some(original) = &v.original else { continue };
        let mut row = |target: &str, m: &FcnModel| -> Result<()> {
            let train_accuracy = m.accuracy(&data.victim.train)?;
            let test_accuracy = m.accuracy(&data.victim.test)?;
            model_rows.push(ModelRow {
                seed,
                target: target.to_string(),
                train_accuracy,
                test_accuracy,
                gap: train_accuracy - test_accuracy,
            });
            Ok(())
        };
        row("original", original)?;
        for t in &tags {
            if let Some(cm) = v.compressed.get(t) {
                row(t, &cm.model)?;
                let (member_mean, nonmember_mean) = kl_by_membership(original, &cm.model, data.victim.population())?;
                kl_rows.push(KlRow {
                    seed,
                    target: t.clone(),
                    member_mean,
                    nonmember_mean,
                });
            }
        }
    }

    let caps = &plan.metrics.fpr_caps;
    if plan.metrics.roc_csv {
        fs::create_dir_all(out.join("roc"))?;
    }
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for seed in plan.seeds() {
        for (job, target) in attack_jobs(plan) {
            let rel = attack_rel_path(seed, &job.id(), &target);
            let path = out.join(&rel);
            if !path.exists() {
                continue;
            }
            let record: AttackRecord = match read_json(&path) {
                Ok(r) => r,
                Err(e) => {
                    failures.push(failure(Stage::Evaluate, rel, &e));
                    continue;
                }
            };
            let summary = record.outcome.summary(caps);
            let null_balanced_accuracy = plan.metrics.null_control.then(|| {
                record
                    .outcome
                    .shuffled_balanced_accuracy(derive_seed(seed, &format!("null/{}@{target}", record.attack)))
            });
            if plan.metrics.roc_csv {
                let name = format!("{}@{}-seed{seed}.csv", record.attack, target);
                let file = fs::File::create(out.join("roc").join(name))?;
                roc_curve(&record.outcome.scores).write_csv(std::io::BufWriter::new(file))?;
            }
            cells.push(CellRow {
                attack: record.attack,
                target,
                seed,
                balanced_accuracy: summary.balanced_accuracy,
                auc: summary.auc,
                tpr_at_fpr: summary.tpr_at_fpr,
                null_balanced_accuracy,
                scores_path: rel,
            });
        }
    }
    write_json(
        out.join("evaluation.json"),
        &Evaluation {
            models: model_rows,
            kl: kl_rows,
            cells,
        },
    )?;
    Ok(failures)
}

fn report_stage(plan: &ExperimentPlan, opts: &RunOptions) -> Result<Vec<CellFailure>> {
    let out = &opts.out_dir;
    let eval_path = out.join("evaluation.json");
    if !eval_path.exists() {
        return Err(Error::Dependency {
            stage: Stage::Evaluate.name().into(),
            path: eval_path,
        });
    }
    let eval: Evaluation = read_json(&eval_path)?;
    let mut failures = Vec::new();
    for stage in [Stage::Train, Stage::Compress, Stage::Attack, Stage::Evaluate] {
        let done: StageDone = read_json(done_path(out, stage))?;
        failures.extend(done.failures);
    }
    let report = AuditReport::assemble(
        Provenance {
            plan_name: plan.name.clone(),
            plan_hash: plan.hash(),
            seeds: plan.seeds(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        eval.models,
        eval.kl,
        eval.cells,
        failures,
    );
    report.write_all(out)?;
    Ok(vec![])
}
