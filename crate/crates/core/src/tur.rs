//! Test-time unknown rejection: online, training-free, and threshold-free
//! prediction adjustment.
//!
//! Each test sample is embedded, matched to a source class through the
//! centroid of its source-bank neighborhood, and matched again against the
//! target prototypes accumulated so far. When the two matches agree the
//! sample is accepted as that known class and the target prototype takes an
//! EMA step toward it. Otherwise the sample joins the memory bank slot chosen
//! by the linear head, and the label comes from the closest follow-up
//! prototype, which may be the unknown class.
//!
//! The model is only ever borrowed immutably; no decision compares a score
//! against a fixed cutoff.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::ClassLabel;
use crate::error::{Error, Result};
use crate::knn::{KnnBackend, KnnIndex};
use crate::model::ModelParams;
use crate::numeric::{self, dot};
use crate::trainer::EmbeddingBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryVectorMode {
    /// Follow-up prediction queries with the neighborhood centroid.
    #[default]
    SourceCentroid,
    /// Follow-up prediction queries with the sample's own embedding.
    TargetEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColdStartMode {
    /// While no target prototype exists at all, a sample accepts its source
    /// match and seeds that class's prototype.
    #[default]
    SeedOnFirstMatch,
    /// Target prototypes start as copies of the source prototypes.
    CopySource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TurConfig {
    /// EMA weight of the incoming embedding.
    pub phi: f64,
    pub k: usize,
    pub knn_backend: KnnBackend,
    pub query_vector_mode: QueryVectorMode,
    pub cold_start_mode: ColdStartMode,
}

impl Default for TurConfig {
    fn default() -> Self {
        Self {
            phi: 0.3,
            k: 10,
            knn_backend: KnnBackend::BruteForce,
            query_vector_mode: QueryVectorMode::SourceCentroid,
            cold_start_mode: ColdStartMode::SeedOnFirstMatch,
        }
    }
}

impl TurConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(Error::InvalidConfig(format!("phi must lie in (0, 1), got {}", self.phi)));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Route {
    Agreed,
    Followup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: ClassLabel,
    pub route: Route,
    /// Source-prototype match of the neighborhood centroid.
    pub source_match: usize,
    /// Target-prototype match, absent while that side is still empty.
    pub target_match: Option<usize>,
    pub source_similarity: f64,
    pub target_similarity: Option<f64>,
    /// Similarity to the winning follow-up prototype on the follow-up route.
    pub followup_similarity: Option<f64>,
}

/// One memory-bank slot: its members and their running sum.
#[derive(Debug, Clone, PartialEq)]
struct MemorySlot {
    members: Vec<Vec<f64>>,
    sum: Vec<f64>,
    prototype: Vec<f64>,
}

impl MemorySlot {
    fn seeded(seed: Vec<f64>) -> Self {
        Self {
            sum: seed.clone(),
            prototype: seed.clone(),
            members: vec![seed],
        }
    }

    fn push(&mut self, z: &[f64]) {
        self.members.push(z.to_vec());
        self.sum.iter_mut().zip(z).for_each(|(s, x)| *s += x);
        match numeric::l2_normalize(&self.sum) {
            Ok(p) => self.prototype = p,
            Err(_) => log::warn!("memory slot mean vanished; keeping previous follow-up prototype"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TurState {
    config: TurConfig,
    index: KnnIndex,
    target_prototypes: Vec<Option<Vec<f64>>>,
    memory: Vec<MemorySlot>,
    steps: u64,
}

impl PartialEq for TurState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.target_prototypes == other.target_prototypes
            && self.memory == other.memory
            && self.steps == other.steps
    }
}

/// Everything mutable in a [`TurState`], for resuming a stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurSnapshot {
    pub config: TurConfig,
    pub steps: u64,
    pub target_prototypes: Vec<Option<Vec<f64>>>,
    /// Memory bank members per class, seed row first.
    pub memory_bank: Vec<Vec<Vec<f64>>>,
    pub followup_prototypes: Vec<Vec<f64>>,
}

impl TurState {
    pub fn new(bank: Arc<EmbeddingBank>, params: &ModelParams, config: TurConfig) -> Result<Self> {
        config.validate()?;
        if bank.dim() != params.embed_dim() {
            return Err(Error::DimensionMismatch {
                expected: params.embed_dim(),
                got: bank.dim(),
            });
        }
        if bank.num_known() != params.num_known {
            return Err(Error::DimensionMismatch {
                expected: params.num_known,
                got: bank.num_known(),
            });
        }
        let memory = (0..params.num_outputs())
            .map(|k| {
                numeric::l2_normalize(params.head_row(k))
                    .map(MemorySlot::seeded)
                    .map_err(|_| Error::ZeroHeadRow(k))
            })
            .collect::<Result<Vec<_>>>()?;
        let target_prototypes = match config.cold_start_mode {
            ColdStartMode::SeedOnFirstMatch => vec![None; bank.num_known()],
            ColdStartMode::CopySource => bank.prototypes().iter().cloned().map(Some).collect(),
        };
        let index = KnnIndex::build(bank, config.k, config.knn_backend)?;
        Ok(Self {
            config,
            index,
            target_prototypes,
            memory,
            steps: 0,
        })
    }

    pub fn config(&self) -> &TurConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn num_known(&self) -> usize {
        self.target_prototypes.len()
    }

    pub fn source_prototypes(&self) -> &[Vec<f64>] {
        self.index.bank().prototypes()
    }

    pub fn target_prototype(&self, k: usize) -> Option<&[f64]> {
        self.target_prototypes[k].as_deref()
    }

    pub fn memory_len(&self, k: usize) -> usize {
        self.memory[k].members.len()
    }

    pub fn followup_prototype(&self, k: usize) -> &[f64] {
        &self.memory[k].prototype
    }

    /// Index of the most similar source prototype, lowest index on ties.
    pub fn match_source(&self, centroid: &[f64]) -> (usize, f64) {
        let sims: Vec<f64> = self.source_prototypes().iter().map(|p| dot(centroid, p)).collect();
        let k = numeric::argmax(&sims);
        (k, sims[k])
    }

    /// Most similar present target prototype.
    pub fn match_target(&self, centroid: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (k, p) in self.target_prototypes.iter().enumerate() {
            if let Some(p) = p {
                let s = dot(centroid, p);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((k, s));
                }
            }
        }
        best
    }

    /// Seeds an absent prototype with `z`, otherwise takes an EMA step
    /// `phi * z + (1 - phi) * old` and renormalizes.
    pub fn update_target_prototype(&mut self, k: usize, z: &[f64]) {
        let phi = self.config.phi;
        let slot = &mut self.target_prototypes[k];
        match slot {
            None => *slot = Some(z.to_vec()),
            Some(old) => {
                let mixed: Vec<f64> = z.iter().zip(old.iter()).map(|(a, b)| phi * a + (1.0 - phi) * b).collect();
                match numeric::l2_normalize(&mixed) {
                    Ok(p) => *old = p,
                    Err(_) => log::warn!("target prototype {k} update cancelled to zero; left unchanged"),
                }
            }
        }
    }

    /// Appends `z` to the slot the head prefers and refreshes that slot's
    /// follow-up prototype. Returns the slot index.
    pub fn update_memory_bank(&mut self, z: &[f64], logits: &[f64]) -> usize {
        let k = numeric::argmax(logits);
        self.memory[k].push(z);
        k
    }

    /// `(num_known + 1)`-way label of the closest follow-up prototype.
    pub fn followup_predict(&self, query: &[f64]) -> (ClassLabel, f64) {
        let sims: Vec<f64> = self.memory.iter().map(|m| dot(query, &m.prototype)).collect();
        let k = numeric::argmax(&sims);
        (ClassLabel::from_index(k, self.num_known()), sims[k])
    }

    /// Processes one test sample and advances the state.
    pub fn step(&mut self, params: &ModelParams, x: &[f64]) -> Result<Prediction> {
        let trace = params.forward(x)?;
        let z = trace.normalized()?;
        let centroid = self.index.query(z)?.centroid;
        let (source_match, source_similarity) = self.match_source(&centroid);
        let target = self.match_target(&centroid);
        let mut pred = Prediction {
            label: ClassLabel::Known(source_match),
            route: Route::Agreed,
            source_match,
            target_match: target.map(|t| t.0),
            source_similarity,
            target_similarity: target.map(|t| t.1),
            followup_similarity: None,
        };
        match target {
            Some((t, _)) if t == source_match => self.update_target_prototype(t, z),
            None if self.config.cold_start_mode == ColdStartMode::SeedOnFirstMatch => {
                self.update_target_prototype(source_match, z)
            }
            _ => {
                let logits = params.head_logits(z);
                self.update_memory_bank(z, &logits);
                let query = match self.config.query_vector_mode {
                    QueryVectorMode::SourceCentroid => &centroid,
                    QueryVectorMode::TargetEmbedding => z,
                };
                let (label, sim) = self.followup_predict(query);
                pred.label = label;
                pred.route = Route::Followup;
                pred.followup_similarity = Some(sim);
            }
        }
        self.steps += 1;
        Ok(pred)
    }

    /// What [`TurState::step`] would predict, without changing the state.
    pub fn peek(&self, params: &ModelParams, x: &[f64]) -> Result<ClassLabel> {
        let mut scratch = self.clone();
        scratch.step(params, x).map(|p| p.label)
    }

    pub fn snapshot(&self) -> TurSnapshot {
        TurSnapshot {
            config: self.config,
            steps: self.steps,
            target_prototypes: self.target_prototypes.clone(),
            memory_bank: self.memory.iter().map(|m| m.members.clone()).collect(),
            followup_prototypes: self.memory.iter().map(|m| m.prototype.clone()).collect(),
        }
    }

    /// Rebuilds a state from a snapshot and the bank it was produced with.
    pub fn restore(bank: Arc<EmbeddingBank>, snapshot: TurSnapshot) -> Result<Self> {
        snapshot.config.validate()?;
        let num_known = bank.num_known();
        let dim = bank.dim();
        let bad = |m: &str| Error::parse("tur snapshot", m.to_string());
        if snapshot.target_prototypes.len() != num_known
            || snapshot.memory_bank.len() != num_known + 1
            || snapshot.followup_prototypes.len() != num_known + 1
        {
            return Err(bad("class count disagrees with bank"));
        }
        let memory = snapshot
            .memory_bank
            .into_iter()
            .zip(snapshot.followup_prototypes)
            .map(|(members, prototype)| {
                if members.is_empty() || prototype.len() != dim || members.iter().any(|m| m.len() != dim) {
                    return Err(bad("malformed memory slot"));
                }
                let mut sum = vec![0.0; dim];
                for m in &members {
                    sum.iter_mut().zip(m).for_each(|(s, x)| *s += x);
                }
                Ok(MemorySlot {
                    members,
                    sum,
                    prototype,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let index = KnnIndex::build(bank, snapshot.config.k, snapshot.config.knn_backend)?;
        Ok(Self {
            config: snapshot.config,
            index,
            target_prototypes: snapshot.target_prototypes,
            memory,
            steps: snapshot.steps,
        })
    }

    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.snapshot())?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load_snapshot(bank: Arc<EmbeddingBank>, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::restore(bank, serde_json::from_str(&text)?)
    }
}

/// One line of the per-step diagnostics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub route: Route,
    pub source_match: usize,
    pub target_match: Option<usize>,
    pub predicted: ClassLabel,
    pub truth: ClassLabel,
}
