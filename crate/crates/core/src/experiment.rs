//! Experiment configuration and the end-to-end ablation runner.
//!
//! Everything a run produces lives under `output_dir`:
//!
//! | file | contents |
//! |------|----------|
//! | `report_<arm>_<seed>.json` | [`ArmReport`] for one arm on one stream order |
//! | `steps_<arm>_<seed>.ndjson` | one [`StepRecord`] per test sample (TUR arms only) |
//! | `grid_<arm>.csv` | decision grid, `x,y,label` |
//! | `model_<hash>.ckpt` | trained backbone checkpoint |
//! | `bank_<hash>.csv`, `bank_<hash>.prototypes.csv` | source embedding bank and prototypes |
//! | `config.json` | resolved config, written by the `run` command |
//!
//! `<hash>` identifies the training run (data, model shape, optimizer and loss),
//! so arms that train the same backbone share one checkpoint. Existing
//! checkpoints are reused; reports, steps and grids are never overwritten
//! unless the run is forced.
//!
//! The grid of a TUR arm is taken from the adaptation state left by the first
//! stream order, queried without further updates.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{apply_shift, generate_blobs, make_stream, BlobSpec, ClassLabel, Sample, ShiftSpec};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::{decision_grid, evaluate, write_grid_csv, EvalReport, GridPoint};
use crate::model::ModelParams;
use crate::numeric;
use crate::trainer::{extract_bank, train, EmbeddingBank, TrainConfig};
use crate::tur::{Route, StepRecord, TurConfig, TurState};

/// Ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Plain cross-entropy head, no test-time rejection.
    CeOnly,
    /// Smoothed CE only, with TUR.
    NoUa,
    /// Unknown activation plus plain CE, with TUR.
    NoSce,
    /// Full UGD loss, head predictions only.
    UgdOnly,
    /// UGD loss with TUR.
    Full,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::CeOnly, Arm::NoUa, Arm::NoSce, Arm::UgdOnly, Arm::Full];

    pub fn name(self) -> &'static str {
        match self {
            Arm::CeOnly => "ce_only",
            Arm::NoUa => "no_ua",
            Arm::NoSce => "no_sce",
            Arm::UgdOnly => "ugd_only",
            Arm::Full => "full",
        }
    }

    pub fn uses_tur(self) -> bool {
        matches!(self, Arm::NoUa | Arm::NoSce | Arm::Full)
    }

    /// Training loss for this arm, derived from the configured UGD loss.
    ///
    /// Dropping the smoothed term leaves nothing that trains the ground-truth
    /// logit, so `no_sce` keeps a plain CE term (`tau = 1`, no penalty).
    pub fn loss(self, base: &LossConfig) -> LossConfig {
        match self {
            Arm::CeOnly => LossConfig::cross_entropy(),
            Arm::NoUa => LossConfig {
                enable_ua: false,
                enable_sce: true,
                ..*base
            },
            Arm::NoSce => LossConfig {
                temperature: 1.0,
                logit_penalty: 0.0,
                enable_ua: true,
                enable_sce: true,
            },
            Arm::UgdOnly | Arm::Full => LossConfig {
                enable_ua: true,
                enable_sce: true,
                ..*base
            },
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::parse("arm", format!("unknown arm `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub embed_dim: usize,
    pub init_seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub resolution: usize,
    /// `[(x_lo, x_hi), (y_lo, y_hi)]`; defaults to the center box padded by
    /// three cluster deviations.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[(f64, f64); 2]>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            resolution: 100,
            bbox: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub stream_seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    pub blob: BlobSpec,
    /// Applied to the test set only.
    pub shift: ShiftSpec,
    pub model: ModelSpec,
    /// `train.loss` is the UGD loss; arms derive their own from it.
    pub train: TrainConfig,
    pub tur: TurConfig,
    pub grid: GridSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("art-output"),
            stream_seeds: vec![0, 1, 2, 3],
            arms: Arm::ALL.to_vec(),
            blob: BlobSpec::default(),
            shift: ShiftSpec::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            tur: TurConfig::default(),
            grid: GridSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("experiment config", e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::parse("experiment config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.blob.validate()?;
        self.shift.validate(self.blob.dim)?;
        self.train.validate()?;
        self.tur.validate()?;
        for arm in &self.arms {
            self.train_config(*arm).validate()?;
        }
        if self.model.embed_dim == 0 {
            return Err(Error::InvalidConfig("model.embed_dim must be >= 1".into()));
        }
        if self.stream_seeds.is_empty() {
            return Err(Error::InvalidConfig("at least one stream seed is required".into()));
        }
        if self.arms.is_empty() {
            return Err(Error::InvalidConfig("at least one arm is required".into()));
        }
        let mut arms = self.arms.clone();
        arms.sort();
        arms.dedup();
        if arms.len() != self.arms.len() {
            return Err(Error::InvalidConfig("arms must not repeat".into()));
        }
        let mut seeds = self.stream_seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.stream_seeds.len() {
            return Err(Error::InvalidConfig("stream seeds must not repeat".into()));
        }
        if self.grid.resolution < 2 {
            return Err(Error::InvalidConfig("grid.resolution must be >= 2".into()));
        }
        if let Some(bbox) = self.grid.bbox {
            if bbox.iter().any(|&(lo, hi)| lo >= hi || !lo.is_finite() || !hi.is_finite()) {
                return Err(Error::InvalidConfig("grid.bbox needs finite lo < hi on both axes".into()));
            }
        }
        Ok(())
    }

    pub fn train_config(&self, arm: Arm) -> TrainConfig {
        TrainConfig {
            loss: arm.loss(&self.train.loss),
            ..self.train
        }
    }

    /// Hex identifier of the backbone trained for `arm`.
    pub fn model_hash(&self, arm: Arm) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            blob: &'a BlobSpec,
            model: &'a ModelSpec,
            train: TrainConfig,
        }
        let key = Key {
            blob: &self.blob,
            model: &self.model,
            train: self.train_config(arm),
        };
        let bytes = serde_json::to_vec(&key).expect("config keys serialize");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn grid_bbox(&self) -> [(f64, f64); 2] {
        self.grid.bbox.unwrap_or_else(|| {
            let pad = 3.0 * self.blob.cluster_std;
            let (lo, hi) = self.blob.center_box;
            [(lo - pad, hi + pad), (lo - pad, hi + pad)]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Arm,
    pub stream_seed: u64,
    pub model_hash: String,
    /// Samples routed to the memory-bank prediction; absent without TUR.
    pub followup_steps: Option<usize>,
    pub metrics: EvalReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmGrid {
    pub arm: Arm,
    pub points: Vec<GridPoint>,
}

impl ArmGrid {
    pub fn unknown_cells(&self) -> usize {
        self.points.iter().filter(|p| p.label.is_unknown()).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub reports: Vec<ArmReport>,
    pub grids: Vec<ArmGrid>,
}

impl ExperimentOutcome {
    pub fn report(&self, arm: Arm, stream_seed: u64) -> Option<&ArmReport> {
        self.reports.iter().find(|r| r.arm == arm && r.stream_seed == stream_seed)
    }

    pub fn grid(&self, arm: Arm) -> Option<&ArmGrid> {
        self.grids.iter().find(|g| g.arm == arm)
    }

    /// H-scores of `arm`, one per stream order, in run order.
    pub fn h_scores(&self, arm: Arm) -> Vec<f64> {
        self.reports
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.metrics.hs.unwrap_or(0.0))
            .collect()
    }
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// The (|C_s|+1)-way head decision.
pub fn head_label(params: &ModelParams, x: &[f64]) -> Result<ClassLabel> {
    let trace = params.forward(x)?;
    Ok(ClassLabel::from_index(numeric::argmax(&trace.logits), params.num_known))
}

pub struct Backbone {
    pub hash: String,
    pub params: ModelParams,
    pub bank: Arc<EmbeddingBank>,
}

pub fn model_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("model_{hash}.ckpt"))
}

pub fn bank_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("bank_{hash}.csv"))
}

/// Loads the backbone for `arm` from `dir` if cached, otherwise trains and
/// caches it.
pub fn obtain_backbone(config: &ExperimentConfig, arm: Arm, train_set: &[Sample], dir: &Path) -> Result<Backbone> {
    let hash = config.model_hash(arm);
    let (mpath, bpath) = (model_path(dir, &hash), bank_path(dir, &hash));
    if mpath.exists() && bpath.exists() {
        log::info!("reusing backbone {hash} for {arm}");
        let params = ModelParams::load(&mpath)?;
        let bank = EmbeddingBank::load(&bpath)?;
        return Ok(Backbone {
            hash,
            params,
            bank: Arc::new(bank),
        });
    }
    log::info!("training backbone {hash} for {arm}");
    let init = ModelParams::init(
        config.blob.dim,
        config.model.embed_dim,
        config.blob.num_known,
        config.model.init_seed,
    )?;
    let outcome = train(&init, train_set, &config.train_config(arm))?;
    if let (Some(first), Some(last)) = (outcome.loss_history.first(), outcome.loss_history.last()) {
        log::info!("backbone {hash}: epoch loss {first:.4} -> {last:.4}");
    }
    let bank = extract_bank(&outcome.params, train_set)?;
    outcome.params.save(&mpath)?;
    bank.save(&bpath)?;
    Ok(Backbone {
        hash,
        params: outcome.params,
        bank: Arc::new(bank),
    })
}

/// Result of streaming one test order through TUR.
pub struct Adaptation {
    pub predictions: Vec<ClassLabel>,
    pub records: Vec<StepRecord>,
    pub state: TurState,
}

/// Streams `samples` through `state` in the given order.
pub fn adapt_stream(params: &ModelParams, mut state: TurState, samples: &[Sample]) -> Result<Adaptation> {
    let mut predictions = Vec::with_capacity(samples.len());
    let mut records = Vec::with_capacity(samples.len());
    for sample in samples {
        let step = state.steps();
        let pred = state.step(params, &sample.features)?;
        records.push(StepRecord {
            step,
            route: pred.route,
            source_match: pred.source_match,
            target_match: pred.target_match,
            predicted: pred.label,
            truth: sample.label,
        });
        predictions.push(pred.label);
    }
    Ok(Adaptation {
        predictions,
        records,
        state,
    })
}

pub fn write_steps(path: &Path, records: &[StepRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn is_run_artifact(name: &str) -> bool {
    (name.starts_with("report_") && name.ends_with(".json"))
        || (name.starts_with("steps_") && name.ends_with(".ndjson"))
        || (name.starts_with("grid_") && name.ends_with(".csv"))
}

fn guard_output(dir: &Path, force: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if force {
        return Ok(());
    }
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if is_run_artifact(&entry.file_name().to_string_lossy()) {
            return Err(Error::WouldOverwrite(dir.to_path_buf()));
        }
    }
    Ok(())
}

/// Runs every configured arm over every stream order and writes all
/// artifacts to `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig, force: bool) -> Result<ExperimentOutcome> {
    config.validate()?;
    let dir = config.output_dir.as_path();
    guard_output(dir, force)?;

    let data = generate_blobs(&config.blob)?;
    let test = apply_shift(&data.test, &config.shift)?;
    let streams: Vec<(u64, Vec<Sample>)> = config
        .stream_seeds
        .iter()
        .map(|&s| (s, make_stream(&test, s)))
        .collect();
    let bbox = config.grid_bbox();
    let num_known = config.blob.num_known;

    let mut backbones: BTreeMap<String, Backbone> = BTreeMap::new();
    let mut reports = Vec::new();
    let mut grids = Vec::new();
    for &arm in &config.arms {
        let hash = config.model_hash(arm);
        if !backbones.contains_key(&hash) {
            let backbone = obtain_backbone(config, arm, &data.train, dir)?;
            backbones.insert(hash.clone(), backbone);
        }
        let backbone = &backbones[&hash];
        let params = &backbone.params;

        let mut grid_state: Option<TurState> = None;
        for (seed, stream) in &streams {
            let truths: Vec<ClassLabel> = stream.iter().map(|s| s.label).collect();
            let (predictions, followup_steps) = if arm.uses_tur() {
                let state = TurState::new(backbone.bank.clone(), params, config.tur)?;
                let run = adapt_stream(params, state, stream)?;
                write_steps(&dir.join(format!("steps_{arm}_{seed}.ndjson")), &run.records)?;
                let followups = run.records.iter().filter(|r| r.route == Route::Followup).count();
                if grid_state.is_none() {
                    grid_state = Some(run.state);
                }
                (run.predictions, Some(followups))
            } else {
                let preds = stream
                    .iter()
                    .map(|s| head_label(params, &s.features))
                    .collect::<Result<Vec<_>>>()?;
                (preds, None)
            };
            let report = ArmReport {
                arm,
                stream_seed: *seed,
                model_hash: hash.clone(),
                followup_steps,
                metrics: evaluate(&predictions, &truths, num_known)?,
            };
            write_json(&dir.join(format!("report_{arm}_{seed}.json")), &report)?;
            log::info!(
                "{arm} seed {seed}: acc_k {:?} acc_u {:?} hs {:?}",
                report.metrics.acc_k,
                report.metrics.acc_u,
                report.metrics.hs
            );
            reports.push(report);
        }

        let points = match &grid_state {
            Some(state) => decision_grid(config.blob.dim, bbox, config.grid.resolution, |x| state.peek(params, x))?,
            None => decision_grid(config.blob.dim, bbox, config.grid.resolution, |x| head_label(params, x))?,
        };
        write_grid_csv(&dir.join(format!("grid_{arm}.csv")), &points)?;
        grids.push(ArmGrid { arm, points });
    }
    Ok(ExperimentOutcome { reports, grids })
}

/// One row per arm: mean acc_k, acc_u and hs over stream orders, plus the
/// hs standard deviation, all in percent.
pub fn summary_table(outcome: &ExperimentOutcome) -> String {
    let mut arms: Vec<Arm> = outcome.reports.iter().map(|r| r.arm).collect();
    arms.dedup();
    let mut out = format!("{:<10} {:>7} {:>7} {:>7} {:>7}\n", "arm", "acc_k", "acc_u", "hs", "hs_std");
    for arm in arms {
        let rows: Vec<&ArmReport> = outcome.reports.iter().filter(|r| r.arm == arm).collect();
        let mean = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
            100.0 * rows.iter().map(|r| f(&r.metrics).unwrap_or(0.0)).sum::<f64>() / rows.len() as f64
        };
        let hs = outcome.h_scores(arm);
        out += &format!(
            "{:<10} {:>7.2} {:>7.2} {:>7.2} {:>7.2}\n",
            arm.name(),
            mean(&|m| m.acc_k),
            mean(&|m| m.acc_u),
            mean(&|m| m.hs),
            100.0 * sample_std(&hs)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::KnnBackend;
    use crate::tur::{ColdStartMode, QueryVectorMode};

    fn tiny(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            output_dir: dir.to_path_buf(),
            stream_seeds: vec![0, 1],
            blob: BlobSpec {
                samples_per_cluster: 12,
                ..BlobSpec::default()
            },
            model: ModelSpec {
                embed_dim: 4,
                init_seed: 3,
            },
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            tur: TurConfig {
                k: 3,
                ..TurConfig::default()
            },
            grid: GridSpec {
                resolution: 5,
                bbox: None,
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut config = ExperimentConfig::default();
        config.shift = ShiftSpec {
            rotation_angle: 0.3,
            translation: vec![1.5, -2.0],
            noise_std: 0.1,
            seed: 9,
        };
        config.grid.bbox = Some([(-3.0, 3.0), (-1.0, 0.1)]);
        config.tur.cold_start_mode = ColdStartMode::CopySource;
        config.tur.query_vector_mode = QueryVectorMode::TargetEmbedding;
        config.tur.knn_backend = KnnBackend::Partitioned;
        config.train.learning_rate = 0.1 + 0.2;
        let text = config.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), config);
        let defaults = ExperimentConfig::default();
        let text = defaults.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), defaults);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let config = ExperimentConfig::from_toml_str("arms = [\"full\"]\n[train]\nepochs = 5\n").unwrap();
        assert_eq!(config.arms, vec![Arm::Full]);
        assert_eq!(config.train.epochs, 5);
        assert_eq!(config.train.batch_size, 16);
        assert_eq!(config.tur, TurConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("epochs = 5\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[tur]\nknn = 3\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[train.loss]\ntau = 2.0\n").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = ExperimentConfig::default();
        c.arms = vec![Arm::Full, Arm::Full];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.stream_seeds.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.tur.phi = 1.0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.grid.bbox = Some([(1.0, 1.0), (0.0, 1.0)]);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.train.loss.enable_ua = false;
        c.train.loss.enable_sce = false;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }

    #[test]
    fn arms_parse_and_derive_losses() {
        for arm in Arm::ALL {
            assert_eq!(arm.name().parse::<Arm>().unwrap(), arm);
        }
        assert!("everything".parse::<Arm>().is_err());
        let base = LossConfig::default();
        assert_eq!(Arm::CeOnly.loss(&base), LossConfig::cross_entropy());
        assert!(!Arm::NoUa.loss(&base).enable_ua);
        assert_eq!(Arm::Full.loss(&base), Arm::UgdOnly.loss(&base));
        let c = ExperimentConfig::default();
        assert_eq!(c.model_hash(Arm::Full), c.model_hash(Arm::UgdOnly));
        assert_ne!(c.model_hash(Arm::Full), c.model_hash(Arm::CeOnly));
        assert_eq!(c.model_hash(Arm::Full).len(), 16);
    }

    #[test]
    fn default_bbox_pads_center_box() {
        let c = ExperimentConfig::default();
        assert_eq!(c.grid_bbox(), [(-13.0, 13.0), (-13.0, 13.0)]);
    }

    #[test]
    fn sample_std_matches_hand_values() {
        assert_eq!(sample_std(&[0.5]), 0.0);
        assert!((sample_std(&[1.0, 2.0, 3.0, 4.0]) - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn run_writes_documented_layout() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny(dir.path());
        let outcome = run_experiment(&config, false).unwrap();
        assert_eq!(outcome.reports.len(), 10);
        for arm in Arm::ALL {
            for seed in [0, 1] {
                assert!(dir.path().join(format!("report_{arm}_{seed}.json")).exists());
                assert_eq!(dir.path().join(format!("steps_{arm}_{seed}.ndjson")).exists(), arm.uses_tur());
            }
            assert!(dir.path().join(format!("grid_{arm}.csv")).exists());
            let hash = config.model_hash(arm);
            assert!(model_path(dir.path(), &hash).exists());
            assert!(bank_path(dir.path(), &hash).exists());
            assert_eq!(outcome.grid(arm).unwrap().points.len(), 25);
        }
        let steps = fs::read_to_string(dir.path().join("steps_full_0.ndjson")).unwrap();
        assert_eq!(steps.lines().count(), 48);
        let first: StepRecord = serde_json::from_str(steps.lines().next().unwrap()).unwrap();
        assert_eq!(first.step, 0);
        let report: ArmReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report_full_1.json")).unwrap()).unwrap();
        assert_eq!(&report, outcome.report(Arm::Full, 1).unwrap());
        assert_eq!(report.metrics.n, 48);
    }

    #[test]
    fn rerun_needs_force_and_cached_backbones_reproduce_reports() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny(dir.path());
        let first = run_experiment(&config, false).unwrap();
        let before = fs::read(dir.path().join("report_full_0.json")).unwrap();
        assert!(matches!(run_experiment(&config, false), Err(Error::WouldOverwrite(_))));
        let second = run_experiment(&config, true).unwrap();
        assert_eq!(first, second);
        assert_eq!(fs::read(dir.path().join("report_full_0.json")).unwrap(), before);
    }

    #[test]
    fn zero_epoch_ce_arm_still_reports() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny(dir.path());
        config.arms = vec![Arm::CeOnly];
        config.stream_seeds = vec![5];
        config.train.epochs = 0;
        let outcome = run_experiment(&config, false).unwrap();
        assert_eq!(outcome.reports.len(), 1);
        assert_eq!(outcome.reports[0].metrics.n, 48);
        assert!(outcome.reports[0].followup_steps.is_none());
    }
}
