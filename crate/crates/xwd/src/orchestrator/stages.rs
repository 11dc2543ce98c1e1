//! The seven experiment stages and their resumable execution.
//!
//! Order: preprocess → train-baselines → select-teacher → distill →
//! ensemble → transfer → analyze. Every stage writes its artifacts under
//! the experiment directory, records their SHA-256 hashes in the manifest,
//! and is skipped on re-runs while those hashes still match. The training
//! stages resume at per-window granularity: deleting one checkpoint
//! retrains only that window's model.
//!
//! All randomness derives from the root training seed by stage and name,
//! so re-running a single stage reproduces exactly what a full run would
//! have produced, independent of execution order. Nothing written here
//! contains wall-clock time or absolute paths; identical configurations
//! therefore produce byte-identical artifacts and manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::analysis::{
    compute_auc, evaluate, grad_cam, paired_test, venn_agreement, write_per_sample_csv,
};
use crate::ensemble::{build_pipelines, MetaLearner, Pipeline};
use crate::ingestion::{
    generate_phantoms, load_cohort, read_vol, resize_slices, split_patients, trim_and_sample,
    write_series, write_vol, DatasetSplit, HUVolume, Partition, PartitionView,
};
use crate::model::{load_checkpoint_for, save_checkpoint, EncoderConfig, EncoderState};
use crate::orchestrator::config::{ExperimentConfig, SourceKind};
use crate::orchestrator::manifest::{hash_artifact, ExperimentManifest};
use crate::seed::{derive_seed, sha256_file};
use crate::train::{
    select_teacher, train_distilled, train_supervised, transfer_direct, transfer_finetune_heads,
    TrainingLog,
};
use crate::windowing::{
    fit_all_norm_stats, normalize_stack, window_volume, NormStats, WindowSet, WindowedStack,
};
use crate::{Result, XwdError};

/// The stages in execution order.
pub const STAGES: [&str; 7] = [
    "preprocess",
    "train-baselines",
    "select-teacher",
    "distill",
    "ensemble",
    "transfer",
    "analyze",
];

/// Immediate prerequisites per stage: a stage refuses to run until each of
/// these has a manifest record.
fn prerequisites(stage: &str) -> &'static [&'static str] {
    match stage {
        "train-baselines" => &["preprocess"],
        "select-teacher" => &["train-baselines"],
        "distill" => &["preprocess", "train-baselines", "select-teacher"],
        "ensemble" => &["preprocess", "train-baselines", "distill"],
        "transfer" => &["preprocess", "ensemble"],
        "analyze" => &["preprocess", "ensemble"],
        _ => &[],
    }
}

/// The preprocessed-data sidecar: everything needed to rebuild the stacks
/// from the per-patient `.vol` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PreprocessIndex {
    schema_version: u32,
    windows: Vec<String>,
    split: DatasetSplit,
    labels: BTreeMap<String, u8>,
    norm_stats: BTreeMap<String, NormStats>,
}

/// Normalized stacks plus their split and the statistics that produced
/// them, shared by every post-preprocess stage.
pub struct PreparedData {
    pub stacks: Vec<WindowedStack>,
    pub split: DatasetSplit,
    pub stats: BTreeMap<String, NormStats>,
}

impl PreparedData {
    /// One partition as a tagged view, ordered by the split's id list.
    pub fn view(&self, kind: Partition) -> Result<PartitionView<'_, WindowedStack>> {
        view_of(&self.stacks, &self.split, kind)
    }
}

fn view_of<'a>(
    stacks: &'a [WindowedStack],
    split: &DatasetSplit,
    kind: Partition,
) -> Result<PartitionView<'a, WindowedStack>> {
    let by_id: BTreeMap<&str, &WindowedStack> =
        stacks.iter().map(|s| (s.patient_id.as_str(), s)).collect();
    let mut items = Vec::with_capacity(split.ids(kind).len());
    for id in split.ids(kind) {
        items.push(
            *by_id
                .get(id.as_str())
                .ok_or_else(|| XwdError::MissingPatient(id.clone()))?,
        );
    }
    Ok(PartitionView { kind, items })
}

fn labels_of(view: &PartitionView<'_, WindowedStack>) -> Vec<u8> {
    view.items.iter().map(|s| s.label).collect()
}

/// Everything a stage needs: the validated configuration, the experiment
/// directory, resolved component configs, and in-process caches so
/// consecutive stages in one invocation don't reload from disk.
pub struct RunContext {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub set: WindowSet,
    pub enc: EncoderConfig,
    data: Option<PreparedData>,
    models: BTreeMap<String, EncoderState>,
    pipelines: Option<(Pipeline, Pipeline)>,
}

impl RunContext {
    /// Validates the configuration and binds it to an output directory.
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        let set = cfg.window_set();
        let enc = cfg.encoder_config()?;
        Ok(RunContext {
            cfg,
            out,
            set,
            enc,
            data: None,
            models: BTreeMap::new(),
            pipelines: None,
        })
    }

    fn root_seed(&self) -> u64 {
        self.cfg.training.seed
    }

    /// The source cohort in HU space.
    fn load_source_volumes(&self) -> Result<Vec<HUVolume>> {
        match self.cfg.data.source {
            SourceKind::Phantom => {
                let section = self.cfg.data.phantom.as_ref().ok_or_else(|| {
                    XwdError::ConfigInvalid("phantom source without [data.phantom]".into())
                })?;
                generate_phantoms(&section.resolve(self.root_seed()))
            }
            SourceKind::Real => {
                let path = self.cfg.data.path.as_ref().ok_or_else(|| {
                    XwdError::ConfigInvalid("real source without a cohort path".into())
                })?;
                load_cohort(path)
            }
        }
    }

    /// Loads the preprocessed stacks into the in-process cache, reading the
    /// persisted artifacts when this invocation did not just produce them.
    fn ensure_prepared(&mut self, man: &ExperimentManifest) -> Result<()> {
        if self.data.is_some() {
            return Ok(());
        }
        if !man.stage_satisfied(&self.out, "preprocess") {
            return Err(XwdError::ConfigInvalid(
                "preprocessed artifacts are missing or stale; re-run 'preprocess'".into(),
            ));
        }
        let index: PreprocessIndex = read_json(&self.out.join("preprocessed/index.json"))?;
        let mut stacks = Vec::with_capacity(index.labels.len());
        for (pid, &label) in &index.labels {
            let mut arrays = BTreeMap::new();
            for w in &index.windows {
                let rel = format!("preprocessed/{pid}.{w}.vol");
                arrays.insert(w.clone(), read_vol(&self.out.join(&rel))?);
            }
            stacks.push(WindowedStack {
                patient_id: pid.clone(),
                label,
                arrays,
            });
        }
        self.data = Some(PreparedData {
            stacks,
            split: index.split,
            stats: index.norm_stats,
        });
        Ok(())
    }

    /// One persisted model, via the cache.
    fn load_model(&mut self, role: &str, window: &str) -> Result<EncoderState> {
        let key = format!("{role}:{window}");
        if let Some(state) = self.models.get(&key) {
            return Ok(state.clone());
        }
        let path = self.out.join(format!("checkpoints/{role}.{window}.ckpt"));
        let state = load_checkpoint_for(&path, &self.enc)?;
        self.models.insert(key, state.clone());
        Ok(state)
    }

    /// Rebuilds both pipelines from persisted checkpoints and meta-learners
    /// when not already in memory.
    fn ensure_pipelines(&mut self, man: &ExperimentManifest) -> Result<()> {
        if self.pipelines.is_some() {
            return Ok(());
        }
        if !man.stage_satisfied(&self.out, "ensemble") {
            return Err(XwdError::ConfigInvalid(
                "ensemble artifacts are missing or stale; re-run 'ensemble'".into(),
            ));
        }
        let selection = man.teacher.clone().ok_or_else(|| {
            XwdError::ConfigInvalid("manifest records no teacher; re-run 'select-teacher'".into())
        })?;
        let sup_meta: MetaLearner = read_json(&self.out.join("ensembles/supervised.meta.json"))?;
        let dist_meta: MetaLearner = read_json(&self.out.join("ensembles/distilled.meta.json"))?;

        let mut sup_models = BTreeMap::new();
        let mut dist_models = BTreeMap::new();
        for name in self.set.names() {
            sup_models.insert(name.clone(), self.load_model("supervised", &name)?);
            let state = if name == selection.teacher_window {
                self.load_model("supervised", &name)?
            } else {
                self.load_model("distilled", &name)?
            };
            dist_models.insert(name, state);
        }
        self.pipelines = Some((
            Pipeline {
                models: sup_models,
                meta: sup_meta,
            },
            Pipeline {
                models: dist_models,
                meta: dist_meta,
            },
        ));
        Ok(())
    }
}

/// Opens the directory's manifest, creating one for a fresh directory and
/// refusing a directory owned by a different configuration.
pub fn open_or_init_manifest(ctx: &RunContext) -> Result<ExperimentManifest> {
    fs::create_dir_all(&ctx.out)?;
    let hash = ctx.cfg.config_hash()?;
    match ExperimentManifest::load(&ctx.out)? {
        Some(man) => {
            if man.config_hash != hash {
                return Err(XwdError::ConfigInvalid(format!(
                    "output directory {} was produced by a different configuration \
                     (manifest {}…, current {}…); use a fresh directory",
                    ctx.out.display(),
                    &man.config_hash[..12.min(man.config_hash.len())],
                    &hash[..12]
                )));
            }
            Ok(man)
        }
        None => {
            let man = ExperimentManifest::new(hash);
            man.save(&ctx.out)?;
            Ok(man)
        }
    }
}

/// Runs one stage with dependency checking and hash-based skipping; the
/// manifest is saved after every decision. Failures carry the stage name.
pub fn run_stage(
    ctx: &mut RunContext,
    man: &mut ExperimentManifest,
    stage: &'static str,
) -> Result<()> {
    for dep in prerequisites(stage) {
        if !man.stages.contains_key(*dep) {
            return Err(XwdError::ConfigInvalid(format!(
                "stage '{dep}' has not completed in this output directory; run it first"
            ))
            .with_stage(stage));
        }
    }
    if man.stage_satisfied(&ctx.out, stage) {
        man.push_skip(stage, "up to date");
        man.save(&ctx.out).map_err(|e| e.with_stage(stage))?;
        return Ok(());
    }
    let outcome = match stage {
        "preprocess" => stage_preprocess(ctx),
        "train-baselines" => stage_train_baselines(ctx, man),
        "select-teacher" => stage_select_teacher(ctx, man),
        "distill" => stage_distill(ctx, man),
        "ensemble" => stage_ensemble(ctx, man),
        "transfer" => stage_transfer(ctx, man),
        "analyze" => stage_analyze(ctx, man),
        other => Err(XwdError::ConfigInvalid(format!("unknown stage '{other}'"))),
    };
    let (artifacts, action) = outcome.map_err(|e| e.with_stage(stage))?;
    man.record_stage(stage, artifacts, action);
    man.save(&ctx.out).map_err(|e| e.with_stage(stage))?;
    Ok(())
}

/// Runs every stage in order against one output directory.
pub fn run(cfg: ExperimentConfig, out: PathBuf) -> Result<ExperimentManifest> {
    let mut ctx = RunContext::new(cfg, out)?;
    let mut man = open_or_init_manifest(&ctx)?;
    for stage in STAGES {
        run_stage(&mut ctx, &mut man, stage)?;
    }
    Ok(man)
}

type StageOutcome = Result<(BTreeMap<String, String>, String)>;

/// trim → slice-sample → resize (all in HU space) → window, for one cohort.
fn sample_and_window(
    volumes: &[HUVolume],
    cfg: &ExperimentConfig,
    enc: &EncoderConfig,
    set: &WindowSet,
) -> Result<Vec<WindowedStack>> {
    let hw = (enc.input_shape.1, enc.input_shape.2);
    let mut stacks = Vec::with_capacity(volumes.len());
    for v in volumes {
        let sampled = trim_and_sample(v, &cfg.sampling)?;
        let resized = resize_slices(&sampled, hw)?;
        stacks.push(window_volume(&resized, set)?);
    }
    Ok(stacks)
}

fn stage_preprocess(ctx: &mut RunContext) -> StageOutcome {
    let volumes = ctx.load_source_volumes()?;
    let prenorm = sample_and_window(&volumes, &ctx.cfg, &ctx.enc, &ctx.set)?;
    drop(volumes);

    let ids: Vec<String> = prenorm.iter().map(|s| s.patient_id.clone()).collect();
    let split = split_patients(
        &ids,
        ctx.cfg.split.fractions,
        derive_seed(ctx.root_seed(), "split", "patients"),
    )?;
    let train_view = view_of(&prenorm, &split, Partition::Train)?;
    let stats = fit_all_norm_stats(&train_view, &ctx.set)?;
    drop(train_view);
    let stacks: Vec<WindowedStack> = prenorm
        .iter()
        .map(|s| normalize_stack(s, &stats))
        .collect::<Result<_>>()?;

    fs::create_dir_all(ctx.out.join("preprocessed"))?;
    let mut artifacts = BTreeMap::new();
    for stack in &stacks {
        for (wname, arr) in &stack.arrays {
            let rel = format!("preprocessed/{}.{}.vol", stack.patient_id, wname);
            let path = ctx.out.join(&rel);
            write_vol(&path, arr)?;
            artifacts.insert(rel, sha256_file(&path)?);
        }
    }
    let index = PreprocessIndex {
        schema_version: 1,
        windows: ctx.set.names(),
        split: split.clone(),
        labels: stacks
            .iter()
            .map(|s| (s.patient_id.clone(), s.label))
            .collect(),
        norm_stats: stats.clone(),
    };
    let index_rel = "preprocessed/index.json";
    write_json(&ctx.out.join(index_rel), &index)?;
    artifacts.insert(index_rel.to_string(), sha256_file(&ctx.out.join(index_rel))?);

    ctx.data = Some(PreparedData {
        stacks,
        split,
        stats,
    });
    Ok((artifacts, "ran".to_string()))
}

/// True when a prior record lists both files and their bytes are unchanged.
fn pair_fresh(
    out: &Path,
    prior: &BTreeMap<String, String>,
    ckpt_rel: &str,
    log_rel: &str,
) -> bool {
    [ckpt_rel, log_rel].iter().all(|rel| {
        prior
            .get(*rel)
            .is_some_and(|expected| hash_artifact(out, rel).as_deref() == Some(expected))
    })
}

/// Saves a model with its log (wall time zeroed so artifacts stay
/// deterministic; timing is console-level information, not provenance).
fn persist_model(
    out: &Path,
    state: &EncoderState,
    mut log: TrainingLog,
    ckpt_rel: &str,
    log_rel: &str,
    artifacts: &mut BTreeMap<String, String>,
) -> Result<()> {
    save_checkpoint(state, &out.join(ckpt_rel))?;
    for r in &mut log.records {
        r.wall_ms = 0;
    }
    write_json(&out.join(log_rel), &log)?;
    artifacts.insert(ckpt_rel.to_string(), sha256_file(&out.join(ckpt_rel))?);
    artifacts.insert(log_rel.to_string(), sha256_file(&out.join(log_rel))?);
    Ok(())
}

fn training_action(retrained: &[String], total: usize) -> String {
    if retrained.len() == total {
        "ran".to_string()
    } else {
        format!("ran (retrained: {})", retrained.join(", "))
    }
}

fn stage_train_baselines(ctx: &mut RunContext, man: &mut ExperimentManifest) -> StageOutcome {
    ctx.ensure_prepared(man)?;
    let prior = man
        .stages
        .get("train-baselines")
        .map(|r| r.artifacts.clone())
        .unwrap_or_default();
    fs::create_dir_all(ctx.out.join("checkpoints"))?;

    let names = ctx.set.names();
    let mut artifacts = BTreeMap::new();
    let mut retrained = Vec::new();
    for wname in &names {
        let ckpt_rel = format!("checkpoints/supervised.{wname}.ckpt");
        let log_rel = format!("checkpoints/supervised.{wname}.log.json");
        if pair_fresh(&ctx.out, &prior, &ckpt_rel, &log_rel) {
            artifacts.insert(ckpt_rel.clone(), prior[&ckpt_rel].clone());
            artifacts.insert(log_rel.clone(), prior[&log_rel].clone());
            continue;
        }
        let data = ctx.data.as_ref().expect("prepared above");
        let (state, log) =
            train_supervised(wname, &data.stacks, &data.split, &ctx.enc, &ctx.cfg.training)?;
        persist_model(&ctx.out, &state, log, &ckpt_rel, &log_rel, &mut artifacts)?;
        ctx.models.insert(format!("supervised:{wname}"), state);
        retrained.push(wname.clone());
    }

    // Validation AUC per window, recomputed from the definitive
    // checkpoints so reused and fresh models are scored identically.
    let mut models = BTreeMap::new();
    for wname in &names {
        models.insert(wname.clone(), ctx.load_model("supervised", wname)?);
    }
    let data = ctx.data.as_ref().expect("prepared above");
    let val_view = data.view(Partition::Val)?;
    let probs = crate::ensemble::collect_probabilities(&models, &ctx.set, &val_view.items)?;
    let labels = labels_of(&val_view);
    man.val_auc.clear();
    for (j, wname) in names.iter().enumerate() {
        let scores: Vec<f64> = probs.column(j).to_vec();
        man.val_auc
            .insert(wname.clone(), compute_auc(&scores, &labels)?);
    }

    Ok((artifacts, training_action(&retrained, names.len())))
}

fn stage_select_teacher(ctx: &mut RunContext, man: &mut ExperimentManifest) -> StageOutcome {
    if man.val_auc.is_empty() {
        return Err(XwdError::ConfigInvalid(
            "stage 'train-baselines' recorded no validation metrics; re-run it".into(),
        ));
    }
    let selection = select_teacher(&man.val_auc, &ctx.set)?;
    let rel = "teacher.json";
    write_json(&ctx.out.join(rel), &selection)?;
    man.teacher = Some(selection);
    Ok((
        BTreeMap::from([(rel.to_string(), sha256_file(&ctx.out.join(rel))?)]),
        "ran".to_string(),
    ))
}

fn stage_distill(ctx: &mut RunContext, man: &mut ExperimentManifest) -> StageOutcome {
    ctx.ensure_prepared(man)?;
    let selection = man.teacher.clone().ok_or_else(|| {
        XwdError::ConfigInvalid("manifest records no teacher; re-run 'select-teacher'".into())
    })?;
    let teacher = ctx.load_model("supervised", &selection.teacher_window)?;
    let prior = man
        .stages
        .get("distill")
        .map(|r| r.artifacts.clone())
        .unwrap_or_default();
    fs::create_dir_all(ctx.out.join("checkpoints"))?;

    let mut artifacts = BTreeMap::new();
    let mut retrained = Vec::new();
    for wname in &selection.student_windows {
        let ckpt_rel = format!("checkpoints/distilled.{wname}.ckpt");
        let log_rel = format!("checkpoints/distilled.{wname}.log.json");
        if pair_fresh(&ctx.out, &prior, &ckpt_rel, &log_rel) {
            artifacts.insert(ckpt_rel.clone(), prior[&ckpt_rel].clone());
            artifacts.insert(log_rel.clone(), prior[&log_rel].clone());
            continue;
        }
        let data = ctx.data.as_ref().expect("prepared above");
        let (state, log) = train_distilled(
            wname,
            &teacher,
            &data.stacks,
            &data.split,
            &ctx.enc,
            &ctx.cfg.training,
        )?;
        persist_model(&ctx.out, &state, log, &ckpt_rel, &log_rel, &mut artifacts)?;
        ctx.models.insert(format!("distilled:{wname}"), state);
        retrained.push(wname.clone());
    }
    Ok((
        artifacts,
        training_action(&retrained, selection.student_windows.len()),
    ))
}

fn stage_ensemble(ctx: &mut RunContext, man: &mut ExperimentManifest) -> StageOutcome {
    ctx.ensure_prepared(man)?;
    let selection = man.teacher.clone().ok_or_else(|| {
        XwdError::ConfigInvalid("manifest records no teacher; re-run 'select-teacher'".into())
    })?;
    let teacher = ctx.load_model("supervised", &selection.teacher_window)?;
    let mut supervised = Vec::new();
    for wname in ctx.set.names() {
        supervised.push(ctx.load_model("supervised", &wname)?);
    }
    let mut distilled = Vec::new();
    for wname in &selection.student_windows {
        distilled.push(ctx.load_model("distilled", wname)?);
    }

    let data = ctx.data.as_ref().expect("prepared above");
    let val_view = data.view(Partition::Val)?;
    let (sup_pipe, dist_pipe) = build_pipelines(
        &teacher,
        &supervised,
        &distilled,
        &ctx.set,
        &val_view,
        ctx.cfg.evaluation.l2_strength,
    )?;

    fs::create_dir_all(ctx.out.join("ensembles"))?;
    let mut artifacts = BTreeMap::new();
    let labels = labels_of(&val_view);
    for (kind, pipe) in [("supervised", &sup_pipe), ("distilled", &dist_pipe)] {
        let meta_rel = format!("ensembles/{kind}.meta.json");
        write_json(&ctx.out.join(&meta_rel), &pipe.meta)?;
        artifacts.insert(meta_rel.clone(), sha256_file(&ctx.out.join(&meta_rel))?);

        let mut probs = Vec::with_capacity(val_view.items.len());
        for stack in &val_view.items {
            probs.push(pipe.predict(stack)?);
        }
        let report = evaluate(
            &probs,
            &labels,
            ctx.cfg.evaluation.n_bootstrap,
            derive_seed(ctx.root_seed(), "eval", &format!("ensemble-val-{kind}")),
        )?;
        let report_rel = format!("ensembles/{kind}.val_report.json");
        write_json(&ctx.out.join(&report_rel), &report)?;
        artifacts.insert(report_rel.clone(), sha256_file(&ctx.out.join(&report_rel))?);
        man.reports.insert(format!("ensemble-val/{kind}"), report);
    }
    drop(val_view);

    ctx.pipelines = Some((sup_pipe, dist_pipe));
    Ok((artifacts, "ran".to_string()))
}

/// Serializable copy of one refit classification head.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadDump {
    weights: Vec<f64>,
    bias: f64,
}

fn stage_transfer(ctx: &mut RunContext, man: &mut ExperimentManifest) -> StageOutcome {
    if !ctx.cfg.transfer.enabled {
        return Ok((BTreeMap::new(), "skipped (transfer disabled)".to_string()));
    }
    let target_volumes = match ctx.cfg.data.source {
        SourceKind::Phantom => {
            let section = ctx.cfg.data.phantom.as_ref().ok_or_else(|| {
                XwdError::ConfigInvalid("phantom source without [data.phantom]".into())
            })?;
            // Same generative family, fresh derived seed: a cohort the
            // models never saw, with the optional size override.
            let mut spec = section.resolve(ctx.root_seed());
            spec.rng_seed = derive_seed(ctx.root_seed(), "data", "transfer-target");
            if let Some(n) = ctx.cfg.transfer.n_patients {
                spec.n_patients = n;
            }
            let mut volumes = generate_phantoms(&spec)?;
            if ctx.cfg.transfer.label_flip {
                for v in &mut volumes {
                    v.label = 1 - v.label;
                }
            }
            volumes
        }
        SourceKind::Real => match &ctx.cfg.transfer.target_path {
            Some(path) => load_cohort(path)?,
            None => {
                return Ok((
                    BTreeMap::new(),
                    "skipped (real-data source with no transfer target configured)".to_string(),
                ))
            }
        },
    };

    ctx.ensure_prepared(man)?;
    ctx.ensure_pipelines(man)?;
    let prenorm = sample_and_window(&target_volumes, &ctx.cfg, &ctx.enc, &ctx.set)?;
    let data = ctx.data.as_ref().expect("prepared above");
    // Cross-cohort contract: the target is normalized with the *stored*
    // training statistics, never refit on target voxels.
    let stacks: Vec<WindowedStack> = prenorm
        .iter()
        .map(|s| normalize_stack(s, &data.stats))
        .collect::<Result<_>>()?;
    let dist_pipe = &ctx.pipelines.as_ref().expect("ensured above").1;

    let direct = transfer_direct(
        dist_pipe,
        &stacks,
        ctx.cfg.evaluation.n_bootstrap,
        derive_seed(ctx.root_seed(), "eval", "transfer-direct"),
    )?;

    let ids: Vec<String> = stacks.iter().map(|s| s.patient_id.clone()).collect();
    let split = split_patients(
        &ids,
        ctx.cfg.split.fractions,
        derive_seed(ctx.root_seed(), "split", "transfer-target"),
    )?;
    let owned = |kind: Partition| -> Result<Vec<WindowedStack>> {
        Ok(view_of(&stacks, &split, kind)?
            .items
            .into_iter()
            .cloned()
            .collect())
    };
    let (refit, finetune) = transfer_finetune_heads(
        dist_pipe,
        &owned(Partition::Train)?,
        &owned(Partition::Val)?,
        &ctx.cfg.training,
        ctx.cfg.evaluation.n_bootstrap,
    )?;

    fs::create_dir_all(ctx.out.join("transfer"))?;
    let mut artifacts = BTreeMap::new();
    let heads: BTreeMap<String, HeadDump> = refit
        .models
        .iter()
        .map(|(w, m)| {
            (
                w.clone(),
                HeadDump {
                    weights: m.head.w.val.clone(),
                    bias: m.head.b.val[0],
                },
            )
        })
        .collect();
    for (rel, value) in [
        ("transfer/direct_report.json", serde_json::to_value(&direct)?),
        (
            "transfer/finetune_report.json",
            serde_json::to_value(&finetune)?,
        ),
        (
            "transfer/finetuned_heads.json",
            serde_json::to_value(&heads)?,
        ),
    ] {
        write_json(&ctx.out.join(rel), &value)?;
        artifacts.insert(rel.to_string(), sha256_file(&ctx.out.join(rel))?);
    }
    man.reports.insert("transfer/direct".to_string(), direct);
    man.reports.insert("transfer/finetune".to_string(), finetune);
    Ok((artifacts, "ran".to_string()))
}

/// Companion metadata of the paired significance test.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SignificanceReport {
    statistic: f64,
    p_value: f64,
    /// What is paired per patient: the probability each pipeline assigns
    /// to the true class.
    operand: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AttentionMeta {
    patient_id: String,
    window: String,
    target_layer: String,
}

fn stage_analyze(ctx: &mut RunContext, man: &mut ExperimentManifest) -> StageOutcome {
    ctx.ensure_prepared(man)?;
    ctx.ensure_pipelines(man)?;
    let selection = man.teacher.clone().ok_or_else(|| {
        XwdError::ConfigInvalid("manifest records no teacher; re-run 'select-teacher'".into())
    })?;

    fs::create_dir_all(ctx.out.join("reports"))?;
    let data = ctx.data.as_ref().expect("prepared above");
    let (sup_pipe, dist_pipe) = ctx.pipelines.as_ref().expect("ensured above");
    let test_view = data.view(Partition::Test)?;
    let labels = labels_of(&test_view);
    let ids: Vec<String> = test_view
        .items
        .iter()
        .map(|s| s.patient_id.clone())
        .collect();

    fn hash_into(
        artifacts: &mut BTreeMap<String, String>,
        out: &Path,
        rel: &str,
    ) -> Result<()> {
        artifacts.insert(rel.to_string(), sha256_file(&out.join(rel))?);
        Ok(())
    }
    let mut artifacts = BTreeMap::new();

    let mut masks = Vec::new();
    let mut true_class_probs = Vec::new();
    for (kind, pipe) in [("supervised", sup_pipe), ("distilled", dist_pipe)] {
        let mut probs = Vec::with_capacity(test_view.items.len());
        for stack in &test_view.items {
            probs.push(pipe.predict(stack)?);
        }
        let report = evaluate(
            &probs,
            &labels,
            ctx.cfg.evaluation.n_bootstrap,
            derive_seed(ctx.root_seed(), "eval", &format!("test-{kind}")),
        )?;
        let report_rel = format!("reports/test_{kind}.json");
        write_json(&ctx.out.join(&report_rel), &report)?;
        hash_into(&mut artifacts, &ctx.out, &report_rel)?;

        let csv_rel = format!("reports/per_sample_{kind}.csv");
        write_per_sample_csv(&ctx.out.join(&csv_rel), &ids, &labels, &probs)?;
        hash_into(&mut artifacts, &ctx.out, &csv_rel)?;

        masks.push(report.per_sample_correct.clone());
        true_class_probs.push(
            probs
                .iter()
                .zip(&labels)
                .map(|(&p, &y)| if y == 1 { p } else { 1.0 - p })
                .collect::<Vec<f64>>(),
        );
        man.reports.insert(format!("test/{kind}"), report);
    }

    let venn = venn_agreement(&masks[0], &masks[1])?;
    write_json(&ctx.out.join("reports/venn.json"), &venn)?;
    hash_into(&mut artifacts, &ctx.out, "reports/venn.json")?;

    let (statistic, p_value) = paired_test(&true_class_probs[0], &true_class_probs[1])?;
    let significance = SignificanceReport {
        statistic,
        p_value,
        operand: "per-patient probability assigned to the true class".to_string(),
    };
    write_json(&ctx.out.join("reports/significance.json"), &significance)?;
    hash_into(&mut artifacts, &ctx.out, "reports/significance.json")?;

    // Attention maps: supervised vs distilled on the same held-out patient
    // and the same student window, at the final convolutional stage.
    let window = selection
        .student_windows
        .first()
        .unwrap_or(&selection.teacher_window)
        .clone();
    let stack = test_view.items[0];
    let mut target_layer = String::new();
    for (kind, pipe) in [("supervised", sup_pipe), ("distilled", dist_pipe)] {
        let state = pipe.models.get(&window).ok_or_else(|| {
            XwdError::MissingWindowModel(format!("{window} ({kind} pipeline)"))
        })?;
        let map = grad_cam(state, stack.get(&window)?, None)?;
        let rel = format!("reports/attention_{window}_{kind}.vol");
        write_vol(&ctx.out.join(&rel), &map.heatmap)?;
        hash_into(&mut artifacts, &ctx.out, &rel)?;
        target_layer = map.target_layer;
    }
    let attention = AttentionMeta {
        patient_id: stack.patient_id.clone(),
        window,
        target_layer,
    };
    write_json(&ctx.out.join("reports/attention.json"), &attention)?;
    hash_into(&mut artifacts, &ctx.out, "reports/attention.json")?;

    Ok((artifacts, "ran".to_string()))
}

/// Writes a phantom cohort to disk in the real-data layout (per-patient
/// slice directories plus `labels.tsv`), so a `source = "real"` experiment
/// can consume it.
pub fn make_phantoms(cfg: &ExperimentConfig, dest: &Path) -> Result<()> {
    cfg.validate()?;
    let section = cfg.data.phantom.as_ref().ok_or_else(|| {
        XwdError::ConfigInvalid("make-phantoms requires a phantom data source".into())
    })?;
    let volumes = generate_phantoms(&section.resolve(cfg.training.seed))?;
    fs::create_dir_all(dest)?;
    let mut labels = String::new();
    for v in &volumes {
        write_series(&dest.join(&v.patient_id), v, 1.0)?;
        labels.push_str(&format!("{}\t{}\n", v.patient_id, v.label));
    }
    fs::write(dest.join("labels.tsv"), labels)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}
