//! Config-driven experiment runs shared by the command-line tool and tests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    compare_storage, evaluation_row, snr_mismatch_sweep, state_mismatch, train, EvalOptions, EvalReport, Fading,
    StorageReport, TrainSpec,
};
use crate::channel::{Environment, EnvironmentConfig, EnvironmentTable, ShadowState};
use crate::data::{band_maxima, load_directory, normalize, split_dataset, synth_dataset, MultibandImage};
use crate::error::{config, Result};
use crate::link::{self, LinkParameters};
use crate::model::{ConditionRanges, ConditionSpec, ModelConfig, Network};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionKey {
    pub environment: Environment,
    pub state: ShadowState,
    pub elevation_deg: f64,
    /// Overrides the link budget for this condition only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of `.mbif` files; synthetic images are generated when absent.
    #[serde(default)]
    pub directory: Option<PathBuf>,
    #[serde(default = "default_count")]
    pub synthetic_count: usize,
    /// Fractions for (train, validation, test).
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_count() -> usize {
    64
}

fn default_split() -> [f64; 3] {
    [0.75, 0.0, 0.25]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_decayed_lr")]
    pub decayed_learning_rate: f64,
    #[serde(default = "default_decay_epoch")]
    pub decay_epoch: usize,
    pub epochs: usize,
    #[serde(default)]
    pub fading: Fading,
    /// Train one attention model over all conditions.
    #[serde(default = "yes")]
    pub adaptable: bool,
    /// Train one basic model per condition.
    #[serde(default = "yes")]
    pub per_condition: bool,
    pub conditions: Vec<ConditionKey>,
}

fn default_batch() -> usize {
    32
}

fn default_lr() -> f64 {
    1e-3
}

fn default_decayed_lr() -> f64 {
    1e-4
}

fn default_decay_epoch() -> usize {
    50
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MismatchPair {
    pub assumed: ConditionKey,
    pub actual: ConditionKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_trials")]
    pub trials_per_image: usize,
    #[serde(default = "default_snr_list")]
    pub snr_db: Vec<f64>,
    /// Conditions for plain evaluation; defaults to the training conditions.
    #[serde(default)]
    pub conditions: Vec<ConditionKey>,
    #[serde(default)]
    pub mismatch: Vec<MismatchPair>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { trials_per_image: default_trials(), snr_db: default_snr_list(), conditions: Vec::new(), mismatch: Vec::new() }
    }
}

fn default_trials() -> usize {
    10
}

fn default_snr_list() -> Vec<f64> {
    vec![4.0, 8.0, 12.0, 16.0, 20.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub link: LinkParameters,
    pub environments: Vec<EnvironmentConfig>,
    pub model: ModelConfig,
    #[serde(default)]
    pub condition_ranges: ConditionRanges,
    pub data: DataConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.link.validate()?;
        self.model.validate()?;
        self.condition_ranges.validate()?;
        self.tables()?;
        if self.train.conditions.is_empty() {
            return Err(config("train.conditions must list at least one condition"));
        }
        for key in self.train.conditions.iter().chain(&self.eval.conditions) {
            self.resolve(key)?;
        }
        for pair in &self.eval.mismatch {
            self.resolve(&pair.assumed)?;
            self.resolve(&pair.actual)?;
        }
        Ok(())
    }

    pub fn tables(&self) -> Result<Vec<EnvironmentTable>> {
        let tables = self.environments.iter().map(EnvironmentTable::from_config).collect::<Result<Vec<_>>>()?;
        for (i, t) in tables.iter().enumerate() {
            if tables[..i].iter().any(|o| o.environment() == t.environment()) {
                return Err(config(format!("environment `{}` is defined twice", t.environment())));
            }
        }
        Ok(tables)
    }

    pub fn table(&self, env: Environment) -> Result<EnvironmentTable> {
        self.tables()?
            .into_iter()
            .find(|t| t.environment() == env)
            .ok_or_else(|| config(format!("no table for environment `{env}`")))
    }

    pub fn resolve(&self, key: &ConditionKey) -> Result<ConditionSpec> {
        let spec = ConditionSpec::resolve(&self.table(key.environment)?, &self.link, key.state, key.elevation_deg)?;
        Ok(match key.snr_db {
            Some(s) => spec.with_snr(s),
            None => spec,
        })
    }

    /// Normalized (train, test) images.
    pub fn dataset(&self, seed: u64) -> Result<(Vec<MultibandImage>, Vec<MultibandImage>)> {
        let [h, w, bands] = self.model.input_shape;
        let images = match &self.data.directory {
            Some(dir) => {
                let raw = load_directory(dir)?;
                let resized = raw
                    .iter()
                    .map(|img| {
                        if img.bands() != bands {
                            return Err(config(format!("image has {} bands, model expects {bands}", img.bands())));
                        }
                        if (img.height(), img.width()) == (h, w) {
                            Ok(img.clone())
                        } else {
                            img.resized(h, w)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                let max = band_maxima(&resized)?;
                resized.iter().map(|img| normalize(img, &max)).collect::<Result<Vec<_>>>()?
            }
            None => synth_dataset(seed, self.data.synthetic_count, self.model.input_shape)?,
        };
        let split = split_dataset(images.len(), self.data.split, seed)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| images[i].clone()).collect::<Vec<_>>();
        let test_idx = if split.test.is_empty() { &split.validation } else { &split.test };
        if split.train.is_empty() || test_idx.is_empty() {
            return Err(config(format!(
                "split {:?} of {} images leaves no training or no evaluation images",
                self.data.split,
                images.len()
            )));
        }
        Ok((pick(&split.train), pick(test_idx)))
    }

    fn train_spec(&self, attention: bool, conditions: Vec<ConditionSpec>, seed: u64) -> TrainSpec {
        let t = &self.train;
        TrainSpec {
            model: ModelConfig { attention_enabled: attention, ..self.model.clone() },
            ranges: self.condition_ranges,
            conditions,
            fading: t.fading,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            decayed_learning_rate: t.decayed_learning_rate,
            decay_epoch: t.decay_epoch,
            epochs: t.epochs,
            seed,
        }
    }

    fn eval_options(&self, seed: u64) -> EvalOptions {
        EvalOptions { trials_per_image: self.eval.trials_per_image, seed: seed ^ EVAL_STREAM, fading: self.train.fading }
    }
}

const EVAL_STREAM: u64 = 0x6576_616c;
pub const ADAPTABLE_ID: &str = "adjscc-sat";

/// Identifier of the per-condition model for `key`.
pub fn per_condition_id(key: &ConditionKey) -> String {
    let mut id = format!("djscc-sat_{}_{}_{}", key.environment, key.state, key.elevation_deg);
    if let Some(s) = key.snr_db {
        id.push_str(&format!("_{s}dB"));
    }
    id
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    /// Absent for the adaptable model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    condition: Option<ConditionKey>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Manifest {
    models: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub id: String,
    /// Training condition of a per-condition model; `None` for the adaptable one.
    pub condition: Option<ConditionKey>,
    pub network: Network,
}

fn models_dir(out: &Path) -> PathBuf {
    out.join("models")
}

fn model_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Train the configured models and write checkpoints, a manifest, and
/// per-epoch losses under `out`.
pub fn run_train(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<Vec<TrainedModel>> {
    let (train_set, _) = cfg.dataset(seed)?;
    let dir = models_dir(out);
    std::fs::create_dir_all(&dir)?;
    let mut jobs: Vec<(String, Option<ConditionKey>, TrainSpec)> = Vec::new();
    if cfg.train.adaptable {
        let conds = cfg.train.conditions.iter().map(|k| cfg.resolve(k)).collect::<Result<Vec<_>>>()?;
        jobs.push((ADAPTABLE_ID.to_string(), None, cfg.train_spec(true, conds, model_seed(seed, 0))));
    }
    if cfg.train.per_condition {
        for (i, key) in cfg.train.conditions.iter().enumerate() {
            let spec = cfg.train_spec(false, vec![cfg.resolve(key)?], model_seed(seed, i + 1));
            jobs.push((per_condition_id(key), Some(key.clone()), spec));
        }
    }
    if jobs.is_empty() {
        return Err(config("train.adaptable and train.per_condition are both false"));
    }
    let mut manifest = Manifest::default();
    let mut losses = String::from("model,epoch,loss\n");
    let mut trained = Vec::new();
    for (id, condition, spec) in jobs {
        let (network, log) = train(&spec, &train_set)?;
        for (e, l) in log.epoch_losses.iter().enumerate() {
            losses.push_str(&format!("{id},{e},{l}\n"));
        }
        network.save(dir.join(format!("{id}.djsc")))?;
        manifest.models.push(ManifestEntry { id: id.clone(), condition: condition.clone() });
        trained.push(TrainedModel { id, condition, network });
    }
    let text = toml::to_string(&manifest).map_err(|e| config(format!("serializing manifest: {e}")))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    std::fs::write(out.join("train_log.csv"), losses)?;
    Ok(trained)
}

pub fn load_models(out: &Path) -> Result<Vec<TrainedModel>> {
    let dir = models_dir(out);
    let path = dir.join("manifest.toml");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| config(format!("reading {} (run `train` first): {e}", path.display())))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))?;
    manifest
        .models
        .into_iter()
        .map(|m| {
            let network = Network::load(dir.join(format!("{}.djsc", m.id)))?;
            Ok(TrainedModel { id: m.id, condition: m.condition, network })
        })
        .collect()
}

fn write_report(report: &EvalReport, out: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(out)?;
    report.write(out.join(format!("{name}.csv")), out.join(format!("{name}_trials.csv")))
}

/// Every model at every evaluation condition. Writes `eval.csv`.
pub fn run_eval(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<EvalReport> {
    let (_, test) = cfg.dataset(seed)?;
    let models = load_models(out)?;
    let keys = if cfg.eval.conditions.is_empty() { &cfg.train.conditions } else { &cfg.eval.conditions };
    let opts = cfg.eval_options(seed);
    let mut report = EvalReport::default();
    for m in &models {
        for key in keys {
            let eval = cfg.resolve(key)?;
            let trained = match &m.condition {
                Some(k) => cfg.resolve(k)?,
                None => eval,
            };
            report.append(evaluation_row(&m.network, &m.id, &trained, &eval, &test, &opts)?);
        }
    }
    write_report(&report, out, "eval")?;
    Ok(report)
}

/// SNR sweep of every model around its training condition(s). Writes
/// `sweep_snr.csv`.
pub fn run_sweep(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<EvalReport> {
    let (_, test) = cfg.dataset(seed)?;
    let models = load_models(out)?;
    let opts = cfg.eval_options(seed);
    let mut report = EvalReport::default();
    for m in &models {
        let keys: Vec<&ConditionKey> = match &m.condition {
            Some(k) => vec![k],
            None => cfg.train.conditions.iter().collect(),
        };
        for key in keys {
            let trained = cfg.resolve(key)?;
            report.append(snr_mismatch_sweep(&m.network, &m.id, &trained, &trained, &cfg.eval.snr_db, &test, &opts)?);
        }
    }
    write_report(&report, out, "sweep_snr")?;
    Ok(report)
}

/// State-mismatch pairs. The adaptable model is told `assumed`; the
/// per-condition model trained at `assumed` (if any) is used as baseline.
/// Writes `mismatch.csv`.
pub fn run_mismatch(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<EvalReport> {
    let (_, test) = cfg.dataset(seed)?;
    let models = load_models(out)?;
    let opts = cfg.eval_options(seed);
    let mut report = EvalReport::default();
    for pair in &cfg.eval.mismatch {
        let assumed = cfg.resolve(&pair.assumed)?;
        let actual = cfg.resolve(&pair.actual)?;
        for m in &models {
            let applies = match &m.condition {
                Some(k) => *k == pair.assumed,
                None => true,
            };
            if applies {
                report.append(state_mismatch(&m.network, &m.id, &assumed, &assumed, &actual, &test, &opts)?);
            }
        }
    }
    write_report(&report, out, "mismatch")?;
    Ok(report)
}

/// Parameter and checkpoint-size comparison. Writes `storage.csv`.
pub fn run_compare_storage(out: &Path) -> Result<StorageReport> {
    let models = load_models(out)?;
    let adaptable = models
        .iter()
        .find(|m| m.condition.is_none())
        .ok_or_else(|| config("no adaptable model among the trained models"))?;
    let basic: Vec<Network> = models.iter().filter(|m| m.condition.is_some()).map(|m| m.network.clone()).collect();
    let report = compare_storage(&adaptable.network, &basic);
    std::fs::write(out.join("storage.csv"), report.to_csv())?;
    Ok(report)
}

/// Budget breakdown lines at each configured training elevation.
pub fn link_budget_lines(cfg: &ExperimentConfig, elevations: &[f64]) -> Result<Vec<String>> {
    let mut lines = vec!["elevation_deg,slant_range_m,path_loss_db,noise_dbw,budget_snr_db,operating_snr_db".to_string()];
    for &e in elevations {
        let b = link::budget(&cfg.link, e)?;
        let op = link::operating_snr_db(&cfg.link, e)?;
        lines.push(format!("{},{},{},{},{},{}", e, b.slant_range_m, b.path_loss_db, b.noise_dbw, b.snr_db, op));
    }
    Ok(lines)
}
