//! Pipeline configuration, on-disk artifact layout and the stage runners
//! shared by the command-line tool and the end-to-end tests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{augment, generate_synthetic, load_folder_dataset, Dataset, LabeledImage};
use crate::error::{ensure, Error, Result};
use crate::eval::{check_writable, read_report, write_report, write_stage_table, EvalReport, Stage};
use crate::feedback::{
    build_comparisons, build_task_pool, oracle_rate_tasks, read_jsonl, write_jsonl, ComparisonRecord, FeedbackService,
    RatingRecord, RatingStore, TaskPool,
};
use crate::protopnet::{ModelConfig, ProtoPNet, DEFAULT_EPS};
use crate::r3::{r2_update, r3_update, ChangeEntry, R3Config};
use crate::reward::{train_reward, CachedScorer, RewardEpoch, RewardInputs, RewardNet, RewardTrainConfig};
use crate::train::{train, write_log, EpochRecord, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Folder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Root of a `<class>/<image>` tree; folder source only.
    pub path: Option<PathBuf>,
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub augment: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            num_classes: 10,
            per_class: 30,
            image_size: 64,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub prototypes_per_class: usize,
    pub depth: usize,
    pub eps: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            prototypes_per_class: 5,
            depth: 64,
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeedbackSettings {
    pub oracle_ratings: usize,
    pub test_fraction: f64,
    pub rater_id: String,
}

impl Default for FeedbackSettings {
    fn default() -> Self {
        Self {
            oracle_ratings: 400,
            test_fraction: 0.2,
            rater_id: "oracle".into(),
        }
    }
}

/// Everything a pipeline run needs. The top-level `seed` derives every
/// stage seed, so per-stage `seed` fields are overwritten by [`Self::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub port: u16,
    pub dataset: DatasetConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    /// Retraining after the R2 update.
    pub retrain: TrainConfig,
    pub feedback: FeedbackSettings,
    pub reward: RewardTrainConfig,
    pub r3: R3Config,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("r3-out"),
            port: 8080,
            dataset: DatasetConfig::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            retrain: TrainConfig {
                epochs: 10,
                warmup_epochs: 0,
                push_period: 5,
                ..TrainConfig::default()
            },
            feedback: FeedbackSettings::default(),
            reward: RewardTrainConfig::default(),
            r3: R3Config::default(),
        }
    }
}

impl PipelineConfig {
    pub fn resolved(mut self) -> Self {
        let s = self.seed;
        self.train.seed = s;
        self.retrain.seed = s.wrapping_add(1);
        self.reward.seed = s.wrapping_add(2);
        self.r3.seed = s.wrapping_add(3);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        match d.source {
            DataSource::Synthetic => {
                ensure!(d.num_classes >= 2, Config, "dataset.num_classes must be at least 2");
                ensure!(d.per_class >= 2, Config, "dataset.per_class must be at least 2");
            }
            DataSource::Folder => ensure!(d.path.is_some(), Config, "dataset.path is required for a folder dataset"),
        }
        ensure!(d.image_size >= 32, Config, "dataset.image_size must be at least 32");
        ensure!(
            (0.0..1.0).contains(&self.feedback.test_fraction),
            Config,
            "feedback.test_fraction must lie in [0, 1)"
        );
        ensure!(!self.feedback.rater_id.trim().is_empty(), Config, "feedback.rater_id must not be empty");
        self.model_config(2).validate()?;
        self.train.validate()?;
        self.retrain.validate()?;
        self.r3.validate()
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes,
            prototypes_per_class: self.model.prototypes_per_class,
            depth: self.model.depth,
            eps: self.model.eps,
            image_size: self.dataset.image_size,
        }
    }
}

/// Where each artifact lives under the output root. With `force` off,
/// writing over an existing artifact is a conflict error.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
    pub force: bool,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, force: bool) -> Self {
        Self { root: root.into(), force }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn dataset_manifest(&self) -> PathBuf {
        self.dataset_dir().join("manifest.json")
    }
    pub fn model(&self, stage: Stage) -> PathBuf {
        self.root.join("models").join(format!("{stage}.ckpt"))
    }
    pub fn train_log(&self, stage: Stage) -> PathBuf {
        self.root.join("logs").join(format!("train_{stage}.jsonl"))
    }
    pub fn task_pool(&self) -> PathBuf {
        self.root.join("feedback").join("task_pool.json")
    }
    pub fn ratings(&self) -> PathBuf {
        self.root.join("feedback").join("ratings.jsonl")
    }
    pub fn comparisons(&self, split: &str) -> PathBuf {
        self.root.join("feedback").join(format!("comparisons_{split}.jsonl"))
    }
    pub fn reward_model(&self) -> PathBuf {
        self.root.join("reward").join("reward.ckpt")
    }
    pub fn reward_curve(&self) -> PathBuf {
        self.root.join("reward").join("curve.jsonl")
    }
    pub fn changes(&self, stage: Stage) -> PathBuf {
        self.root.join("reports").join(format!("changes_{stage}.jsonl"))
    }
    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Checks the target and creates its parent directory.
    pub fn prepare(&self, path: &Path) -> Result<()> {
        check_writable(path, self.force)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        require(&self.dataset_manifest(), "synth-gen")?;
        Dataset::load(&self.dataset_manifest())
    }

    pub fn load_model(&self, stage: Stage) -> Result<ProtoPNet> {
        let path = self.model(stage);
        require(&path, if stage == Stage::Base { "train" } else { "r2/r3" })?;
        ProtoPNet::load(&path)
    }

    pub fn load_reward(&self) -> Result<RewardNet> {
        require(&self.reward_model(), "train-reward")?;
        RewardNet::load(&self.reward_model())
    }

    pub fn load_comparisons(&self) -> Result<(Vec<ComparisonRecord>, Vec<ComparisonRecord>)> {
        let (train, test) = (self.comparisons("train"), self.comparisons("test"));
        require(&train, "build-comparisons")?;
        require(&test, "build-comparisons")?;
        Ok((read_jsonl(&train)?, read_jsonl(&test)?))
    }
}

fn require(path: &Path, producer: &str) -> Result<()> {
    ensure!(path.exists(), NotFound, "{} does not exist; run `{producer}` first", path.display());
    Ok(())
}

/// Builds (or ingests) and augments the dataset, then writes it.
pub fn prepare_data(ws: &Workspace, cfg: &PipelineConfig) -> Result<Dataset> {
    let d = &cfg.dataset;
    let base = match d.source {
        DataSource::Synthetic => generate_synthetic(d.num_classes, d.per_class, d.image_size, cfg.seed)?,
        DataSource::Folder => load_folder_dataset(d.path.as_deref().expect("validated"), d.image_size)?,
    };
    let data = if d.augment { augment(&base, cfg.seed)? } else { base };
    ws.prepare(&ws.dataset_manifest())?;
    data.save(&ws.dataset_dir())?;
    log::info!(
        "dataset: {} classes, {} images ({} train originals)",
        data.num_classes,
        data.images.len(),
        data.train_originals().count()
    );
    Ok(data)
}

pub fn model_id(cfg: &PipelineConfig) -> String {
    format!("protopnet-s{}", cfg.seed)
}

/// Trains the base model and writes its checkpoint and epoch log.
pub fn train_base(ws: &Workspace, cfg: &PipelineConfig, data: &Dataset) -> Result<TrainOutcome> {
    ws.prepare(&ws.model(Stage::Base))?;
    ws.prepare(&ws.train_log(Stage::Base))?;
    let mut model = ProtoPNet::new(cfg.model_config(data.num_classes), cfg.seed)?;
    model.model_id = model_id(cfg);
    let outcome = train(model, data, &cfg.train)?;
    outcome.model.save(&ws.model(Stage::Base))?;
    write_log(&ws.train_log(Stage::Base), &outcome.log)?;
    Ok(outcome)
}

/// The task pool for `model`, created on first use and reused afterwards.
pub fn task_pool(ws: &Workspace, cfg: &PipelineConfig, model: &ProtoPNet, data: &Dataset) -> Result<TaskPool> {
    let path = ws.task_pool();
    if path.exists() {
        let bytes = std::fs::read(&path).map_err(|e| Error::io_at(&path, e))?;
        let pool: TaskPool = serde_json::from_slice(&bytes)?;
        if pool.model_id == model.model_id {
            return Ok(pool);
        }
        check_writable(&path, ws.force)?;
    }
    let pool = build_task_pool(model, data, cfg.seed);
    std::fs::create_dir_all(path.parent().expect("nested path")).map_err(|e| Error::io_at(&path, e))?;
    std::fs::write(&path, serde_json::to_vec_pretty(&pool)?).map_err(|e| Error::io_at(&path, e))?;
    Ok(pool)
}

/// Opens the persistent rating service for the base model.
pub fn feedback_service(ws: &Workspace, cfg: &PipelineConfig, model: &ProtoPNet, data: &Dataset) -> Result<FeedbackService> {
    let pool = task_pool(ws, cfg, model, data)?;
    Ok(FeedbackService::new(pool, RatingStore::open(&ws.ratings())?))
}

/// Rates up to `n` further tasks with the mask oracle; returns every stored rating.
pub fn oracle_rate(ws: &Workspace, cfg: &PipelineConfig, model: &ProtoPNet, data: &Dataset, n: usize) -> Result<Vec<RatingRecord>> {
    let service = feedback_service(ws, cfg, model, data)?;
    let done = oracle_rate_tasks(&service, model, data, n, &cfg.feedback.rater_id)?;
    if done < n {
        log::warn!("task pool exhausted after {done} of {n} oracle ratings");
    }
    Ok(service.ratings())
}

pub fn comparisons(
    ws: &Workspace,
    cfg: &PipelineConfig,
    ratings: &[RatingRecord],
) -> Result<(Vec<ComparisonRecord>, Vec<ComparisonRecord>)> {
    let (train, test) = build_comparisons(ratings, cfg.seed, cfg.feedback.test_fraction)?;
    for (split, records) in [("train", &train), ("test", &test)] {
        let path = ws.comparisons(split);
        ws.prepare(&path)?;
        write_jsonl(&path, records)?;
    }
    log::info!("{} train and {} test comparisons", train.len(), test.len());
    Ok((train, test))
}

pub fn reward(
    ws: &Workspace,
    cfg: &PipelineConfig,
    model: &ProtoPNet,
    data: &Dataset,
    train: &[ComparisonRecord],
    test: &[ComparisonRecord],
) -> Result<(RewardNet, Vec<RewardEpoch>)> {
    ws.prepare(&ws.reward_model())?;
    ws.prepare(&ws.reward_curve())?;
    let all: Vec<ComparisonRecord> = train.iter().chain(test).cloned().collect();
    let inputs = RewardInputs::from_model(model, data, &all)?;
    let (net, curve) = train_reward(train, test, &inputs, data.image_size, &cfg.reward)?;
    net.save(&ws.reward_model())?;
    write_log(&ws.reward_curve(), &curve)?;
    Ok((net, curve))
}

fn write_changes(ws: &Workspace, stage: Stage, changes: &[ChangeEntry]) -> Result<()> {
    let path = ws.changes(stage);
    ws.prepare(&path)?;
    write_jsonl(&path, changes)
}

pub fn r2(ws: &Workspace, cfg: &PipelineConfig, base: &ProtoPNet, net: &RewardNet, data: &Dataset) -> Result<(ProtoPNet, Vec<ChangeEntry>)> {
    ws.prepare(&ws.model(Stage::R2))?;
    let originals: Vec<&LabeledImage> = data.train_originals().collect();
    let (model, changes) = r2_update(base, &CachedScorer::new(net), &originals, &cfg.r3)?;
    model.save(&ws.model(Stage::R2))?;
    write_changes(ws, Stage::R2, &changes)?;
    Ok((model, changes))
}

pub fn r3(
    ws: &Workspace,
    cfg: &PipelineConfig,
    base: &ProtoPNet,
    net: &RewardNet,
    data: &Dataset,
) -> Result<(ProtoPNet, Vec<ChangeEntry>, Vec<EpochRecord>)> {
    ws.prepare(&ws.model(Stage::R3))?;
    ws.prepare(&ws.train_log(Stage::R3))?;
    let (model, changes, outcome) = r3_update(base, &CachedScorer::new(net), data, &cfg.retrain, &cfg.r3)?;
    model.save(&ws.model(Stage::R3))?;
    write_log(&ws.train_log(Stage::R3), &outcome.log)?;
    write_changes(ws, Stage::R3, &changes)?;
    Ok((model, changes, outcome.log))
}

/// Writes the stage report and refreshes the stage table from every report
/// present.
pub fn evaluate(ws: &Workspace, stage: Stage, model: &ProtoPNet, net: &RewardNet, data: &Dataset) -> Result<EvalReport> {
    let report = crate::eval::report(model, stage, &CachedScorer::new(net), data)?;
    write_report(&ws.reports_dir(), &report, ws.force)?;
    let reports = [Stage::Base, Stage::R2, Stage::R3]
        .into_iter()
        .map(|s| ws.reports_dir().join(format!("eval_{s}.json")))
        .filter(|p| p.exists())
        .map(|p| read_report(&p))
        .collect::<Result<Vec<_>>>()?;
    write_stage_table(&ws.reports_dir().join("stages.csv"), &reports)?;
    Ok(report)
}

/// Everything one end-to-end run produced.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub data: Dataset,
    pub base: ProtoPNet,
    pub base_log: Vec<EpochRecord>,
    pub ratings: Vec<RatingRecord>,
    pub train_comparisons: Vec<ComparisonRecord>,
    pub test_comparisons: Vec<ComparisonRecord>,
    pub reward: RewardNet,
    pub reward_curve: Vec<RewardEpoch>,
    pub r2: ProtoPNet,
    pub r2_changes: Vec<ChangeEntry>,
    pub r3: ProtoPNet,
    pub r3_log: Vec<EpochRecord>,
    pub reports: Vec<EvalReport>,
}

/// synth-gen → train → oracle-rate → build-comparisons → train-reward →
/// r2 → r3 → eval for all three stages.
pub fn run_all(ws: &Workspace, cfg: &PipelineConfig) -> Result<PipelineRun> {
    let cfg = cfg.clone().resolved();
    cfg.validate()?;
    let data = prepare_data(ws, &cfg)?;
    let outcome = train_base(ws, &cfg, &data)?;
    let base = outcome.model;
    let ratings = oracle_rate(ws, &cfg, &base, &data, cfg.feedback.oracle_ratings)?;
    let (train_cmp, test_cmp) = comparisons(ws, &cfg, &ratings)?;
    let (net, curve) = reward(ws, &cfg, &base, &data, &train_cmp, &test_cmp)?;
    let (r2_model, r2_changes) = r2(ws, &cfg, &base, &net, &data)?;
    let (r3_model, _, r3_log) = r3(ws, &cfg, &base, &net, &data)?;
    let reports = [(Stage::Base, &base), (Stage::R2, &r2_model), (Stage::R3, &r3_model)]
        .into_iter()
        .map(|(s, m)| evaluate(ws, s, m, &net, &data))
        .collect::<Result<Vec<_>>>()?;
    Ok(PipelineRun {
        data,
        base,
        base_log: outcome.log,
        ratings,
        train_comparisons: train_cmp,
        test_comparisons: test_cmp,
        reward: net,
        reward_curve: curve,
        r2: r2_model,
        r2_changes,
        r3: r3_model,
        r3_log,
        reports,
    })
}
